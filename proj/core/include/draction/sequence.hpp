// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "draction/math.hpp"
#include "draction/topology.hpp"

#include <optional>
#include <string>
#include <vector>

namespace draction {

/// A loaded skeleton clip: T frames of P persons with J joints each, in
/// meters, camera frame. Orientations, when present, are unit quaternions.
struct SkeletonSequence {
    Topology topology;
    int num_frames = 0;
    int num_persons = 0;
    std::optional<double> fps;

    // Flat [frame][person][joint] storage.
    std::vector<Vec3d> positions;
    std::vector<Quatd> orientations; // empty when unavailable

    bool has_orientations() const { return !orientations.empty(); }

    size_t index(int t, int p, int j) const {
        return (static_cast<size_t>(t) * num_persons + p) * topology.num_joints + j;
    }
    const Vec3d& position(int t, int p, int j) const { return positions[index(t, p, j)]; }
    Vec3d& position(int t, int p, int j) { return positions[index(t, p, j)]; }
    const Quatd& orientation(int t, int p, int j) const { return orientations[index(t, p, j)]; }
    Quatd& orientation(int t, int p, int j) { return orientations[index(t, p, j)]; }

    /// Unit-norm quaternions, finite coordinates, consistent sizes.
    void validate() const;
};

/// Frames selected for rendering plus their finite-difference velocities and
/// the per-person canonical (rest) pose taken from the first sampled frame.
struct FrameBatch {
    Topology topology;
    int num_frames = 0;
    int num_persons = 0;

    std::vector<Vec3d> joints;     // [frame][person][joint]
    std::vector<Vec3d> velocities; // same layout; frame 0 is zero
    std::vector<Quatd> rotations;  // empty in translation-only mode
    std::vector<Vec3d> canonical_joints; // [person][joint]

    std::vector<int> frame_indices; // indices into the source sequence
    std::vector<std::string> warnings;

    size_t index(int t, int p, int j) const {
        return (static_cast<size_t>(t) * num_persons + p) * topology.num_joints + j;
    }
    size_t canonical_index(int p, int j) const {
        return static_cast<size_t>(p) * topology.num_joints + j;
    }
    const Vec3d& joint(int t, int p, int j) const { return joints[index(t, p, j)]; }
    const Vec3d& velocity(int t, int p, int j) const { return velocities[index(t, p, j)]; }
    const Quatd& rotation(int t, int p, int j) const { return rotations[index(t, p, j)]; }
    const Vec3d& canonical_joint(int p, int j) const {
        return canonical_joints[canonical_index(p, j)];
    }
    bool has_rotations() const { return !rotations.empty(); }
};

enum class SamplingMode { kDeterministic, kStochastic };

/// Loads a sequence, dispatching on the file contents: the native container
/// ("draction/1") or the NTU text-skeleton layout. `format_tag` names the
/// expected topology; pass kCustom for containers with an embedded topology.
SkeletonSequence load_sequence(const std::string& path, FormatTag format_tag);

/// Writes the native "draction/1" container. Round-trips positions and
/// quaternions bit-exactly.
void save_sequence(const SkeletonSequence& seq, const std::string& path);

/// Splits the clip into n equal temporal segments and picks one frame per
/// segment: the segment center in deterministic mode, a uniform draw within
/// the segment otherwise. Sequences shorter than n are repeat-padded with
/// the last frame (with a warning). Velocities are finite differences over
/// the sampled frames; the first sampled frame has zero velocity.
FrameBatch sample_frames(const SkeletonSequence& seq, int n,
                         SamplingMode mode = SamplingMode::kDeterministic,
                         uint64_t seed = 0);

/// If the median z over all sampled joints has magnitude below `tau`, shifts
/// every frame joint by delta_z along +z (uniformly across frames) so the
/// figure sits in front of the camera. The canonical pose is left untouched;
/// with per-joint transforms anchored at the origin this shifts every posed
/// primitive by exactly delta_z.
FrameBatch normalize_depth(const FrameBatch& batch, double tau = 0.5,
                           double delta_z = 1.0);

} // namespace draction
