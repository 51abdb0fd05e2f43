// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#include "draction/sequence.hpp"

#include "draction/errors.hpp"
#include "draction/math.hpp"
#include "draction/random.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace draction {

using nlohmann::json;

void SkeletonSequence::validate() const {
    topology.validate();
    const size_t expected = static_cast<size_t>(num_frames) * num_persons *
                            topology.num_joints;
    if (num_frames < 1 || num_persons < 1) {
        throw ValidationError("sequence needs at least one frame and one person");
    }
    if (positions.size() != expected) {
        throw ValidationError("position array size mismatch");
    }
    if (!orientations.empty() && orientations.size() != expected) {
        throw ValidationError("orientation array size mismatch");
    }
    for (int t = 0; t < num_frames; ++t) {
        for (int p = 0; p < num_persons; ++p) {
            for (int j = 0; j < topology.num_joints; ++j) {
                if (!position(t, p, j).allFinite()) {
                    throw ValidationError("non-finite coordinate at frame " +
                                          std::to_string(t) + ", person " +
                                          std::to_string(p) + ", joint " +
                                          std::to_string(j));
                }
                if (!orientations.empty()) {
                    const Quatd& q = orientation(t, p, j);
                    if (!q.allFinite() || std::abs(q.norm() - 1.0) > 1e-6) {
                        throw ValidationError("non-unit quaternion at frame " +
                                              std::to_string(t) + ", person " +
                                              std::to_string(p) + ", joint " +
                                              std::to_string(j));
                    }
                }
            }
        }
    }
}

namespace {

constexpr const char* kContainerVersion = "draction/1";

SkeletonSequence load_native(const std::string& path, FormatTag expected_tag) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("parse failure in " + path + " at byte " +
                              std::to_string(e.byte) + ": " + e.what());
    }

    try {
        if (doc.at("format").get<std::string>() != kContainerVersion) {
            throw ValidationError("unsupported container version in " + path);
        }
        SkeletonSequence seq;
        const FormatTag tag = format_tag_from_string(doc.at("format_tag"));
        if (expected_tag != FormatTag::kCustom && tag != expected_tag) {
            throw ValidationError("file declares format " + to_string(tag) +
                                  " but " + to_string(expected_tag) +
                                  " was requested");
        }
        const int joints = doc.at("num_joints").get<int>();
        if (tag == FormatTag::kCustom) {
            seq.topology.format_tag = FormatTag::kCustom;
            seq.topology.num_joints = joints;
            for (const auto& e : doc.at("edges")) {
                seq.topology.edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
            }
        } else {
            seq.topology = registered_topology(tag);
            if (joints != seq.topology.num_joints) {
                throw ValidationError("schema error: " + to_string(tag) + " expects " +
                                      std::to_string(seq.topology.num_joints) +
                                      " joints, file has " + std::to_string(joints));
            }
        }
        if (doc.contains("fps") && !doc["fps"].is_null()) {
            seq.fps = doc["fps"].get<double>();
        }
        seq.num_frames = doc.at("num_frames").get<int>();
        seq.num_persons = doc.at("num_persons").get<int>();
        const bool has_orient = doc.at("has_orientations").get<bool>();
        seq.topology.has_orientations = has_orient;

        const auto& pos = doc.at("positions");
        if (static_cast<int>(pos.size()) != seq.num_frames) {
            throw ValidationError("schema error: frame count mismatch");
        }
        seq.positions.reserve(static_cast<size_t>(seq.num_frames) *
                              seq.num_persons * joints);
        for (const auto& frame : pos) {
            if (static_cast<int>(frame.size()) != seq.num_persons) {
                throw ValidationError("schema error: person count mismatch");
            }
            for (const auto& person : frame) {
                if (static_cast<int>(person.size()) != joints) {
                    throw ValidationError("schema error: joint count mismatch");
                }
                for (const auto& j : person) {
                    seq.positions.emplace_back(j.at(0).get<double>(),
                                               j.at(1).get<double>(),
                                               j.at(2).get<double>());
                }
            }
        }
        if (has_orient) {
            const auto& ori = doc.at("orientations");
            seq.orientations.reserve(seq.positions.size());
            for (const auto& frame : ori) {
                for (const auto& person : frame) {
                    for (const auto& q : person) {
                        seq.orientations.emplace_back(
                            q.at(0).get<double>(), q.at(1).get<double>(),
                            q.at(2).get<double>(), q.at(3).get<double>());
                    }
                }
            }
        }
        seq.validate();
        return seq;
    } catch (const json::exception& e) {
        throw ValidationError("schema error in " + path + ": " + e.what());
    }
}

// NTU RGB+D ".skeleton" text layout. Bodies are tracked by ID; a body absent
// from some frames keeps its most recent pose (first observed pose before it
// appears), with a warning-free carry since the batch sampler re-validates.
SkeletonSequence load_ntu(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path);
    }

    auto fail = [&](const std::string& what) {
        const auto offset = static_cast<long long>(in.tellg());
        throw ValidationError("parse failure in " + path + " near byte " +
                              std::to_string(offset) + ": " + what);
    };

    int num_frames = 0;
    if (!(in >> num_frames) || num_frames < 1) {
        fail("frame count");
    }

    struct BodyTrack {
        std::vector<Vec3d> pos;   // per frame, J entries once seen
        std::vector<Quatd> quat;
        int first_frame = -1;
    };
    std::map<long long, BodyTrack> tracks;
    const Topology topo = registered_topology(FormatTag::kKinectV2_25);
    const int J = topo.num_joints;

    for (int t = 0; t < num_frames; ++t) {
        int num_bodies = 0;
        if (!(in >> num_bodies) || num_bodies < 0) {
            fail("body count at frame " + std::to_string(t));
        }
        for (int b = 0; b < num_bodies; ++b) {
            long long body_id = 0;
            if (!(in >> body_id)) {
                fail("body id");
            }
            // clippedEdges, hand states/confidences, isRestricted, lean, tracking.
            double meta = 0;
            for (int m = 0; m < 9; ++m) {
                if (!(in >> meta)) {
                    fail("body metadata");
                }
            }
            int joints = 0;
            if (!(in >> joints) || joints != J) {
                fail("joint count (expected 25)");
            }
            auto& track = tracks[body_id];
            if (track.first_frame < 0) {
                track.first_frame = t;
                track.pos.assign(static_cast<size_t>(num_frames) * J, Vec3d::Zero());
                track.quat.assign(static_cast<size_t>(num_frames) * J,
                                  Quatd(1, 0, 0, 0));
            }
            for (int j = 0; j < J; ++j) {
                double x, y, z, depth_x, depth_y, color_x, color_y;
                double qw, qx, qy, qz;
                int tracking = 0;
                if (!(in >> x >> y >> z >> depth_x >> depth_y >> color_x >>
                      color_y >> qw >> qx >> qy >> qz >> tracking)) {
                    fail("joint row at frame " + std::to_string(t));
                }
                if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) {
                    throw ValidationError("non-finite coordinate at frame " +
                                          std::to_string(t) + ", joint " +
                                          std::to_string(j) + " in " + path);
                }
                track.pos[static_cast<size_t>(t) * J + j] = Vec3d(x, y, z);
                Quatd q(qw, qx, qy, qz);
                // Kinect writes zero quaternions for untracked leaf joints.
                if (q.norm() < 1e-6) {
                    q = Quatd(1, 0, 0, 0);
                } else {
                    q.normalize();
                }
                track.quat[static_cast<size_t>(t) * J + j] = q;
            }
        }
    }
    if (tracks.empty()) {
        throw ValidationError("no bodies in " + path);
    }

    // Fill gaps: frames before a body's first appearance copy its first pose,
    // later gaps carry the previous frame forward.
    for (auto& [id, track] : tracks) {
        (void)id;
        for (int t = 0; t < track.first_frame; ++t) {
            for (int j = 0; j < J; ++j) {
                track.pos[static_cast<size_t>(t) * J + j] =
                    track.pos[static_cast<size_t>(track.first_frame) * J + j];
                track.quat[static_cast<size_t>(t) * J + j] =
                    track.quat[static_cast<size_t>(track.first_frame) * J + j];
            }
        }
        for (int t = track.first_frame + 1; t < num_frames; ++t) {
            bool empty = true;
            for (int j = 0; j < J && empty; ++j) {
                empty = track.pos[static_cast<size_t>(t) * J + j].isZero(0.0);
            }
            if (empty) {
                for (int j = 0; j < J; ++j) {
                    track.pos[static_cast<size_t>(t) * J + j] =
                        track.pos[static_cast<size_t>(t - 1) * J + j];
                    track.quat[static_cast<size_t>(t) * J + j] =
                        track.quat[static_cast<size_t>(t - 1) * J + j];
                }
            }
        }
    }

    SkeletonSequence seq;
    seq.topology = topo;
    seq.num_frames = num_frames;
    seq.num_persons = static_cast<int>(tracks.size());
    seq.fps = 30.0;
    const size_t total = static_cast<size_t>(num_frames) * seq.num_persons * J;
    seq.positions.resize(total);
    seq.orientations.resize(total);
    int p = 0;
    for (const auto& [id, track] : tracks) {
        (void)id;
        for (int t = 0; t < num_frames; ++t) {
            for (int j = 0; j < J; ++j) {
                seq.position(t, p, j) = track.pos[static_cast<size_t>(t) * J + j];
                seq.orientation(t, p, j) = track.quat[static_cast<size_t>(t) * J + j];
            }
        }
        ++p;
    }
    seq.validate();
    return seq;
}

bool looks_like_native(const std::string& path) {
    std::ifstream in(path);
    char c = 0;
    while (in.get(c)) {
        if (!std::isspace(static_cast<unsigned char>(c))) {
            return c == '{';
        }
    }
    return false;
}

} // namespace

SkeletonSequence load_sequence(const std::string& path, FormatTag format_tag) {
    if (looks_like_native(path)) {
        return load_native(path, format_tag);
    }
    if (format_tag != FormatTag::kKinectV2_25 && format_tag != FormatTag::kCustom) {
        throw ValidationError("NTU text-skeleton files carry the kinect_v2_25 layout");
    }
    return load_ntu(path);
}

void save_sequence(const SkeletonSequence& seq, const std::string& path) {
    json doc;
    doc["format"] = kContainerVersion;
    doc["format_tag"] = to_string(seq.topology.format_tag);
    doc["num_joints"] = seq.topology.num_joints;
    json edges = json::array();
    for (const auto& [a, b] : seq.topology.edges) {
        edges.push_back({a, b});
    }
    doc["edges"] = edges;
    doc["has_orientations"] = seq.has_orientations();
    if (seq.fps) {
        doc["fps"] = *seq.fps;
    }
    doc["num_frames"] = seq.num_frames;
    doc["num_persons"] = seq.num_persons;

    json pos = json::array();
    for (int t = 0; t < seq.num_frames; ++t) {
        json frame = json::array();
        for (int p = 0; p < seq.num_persons; ++p) {
            json person = json::array();
            for (int j = 0; j < seq.topology.num_joints; ++j) {
                const Vec3d& v = seq.position(t, p, j);
                person.push_back({v.x(), v.y(), v.z()});
            }
            frame.push_back(std::move(person));
        }
        pos.push_back(std::move(frame));
    }
    doc["positions"] = std::move(pos);

    if (seq.has_orientations()) {
        json ori = json::array();
        for (int t = 0; t < seq.num_frames; ++t) {
            json frame = json::array();
            for (int p = 0; p < seq.num_persons; ++p) {
                json person = json::array();
                for (int j = 0; j < seq.topology.num_joints; ++j) {
                    const Quatd& q = seq.orientation(t, p, j);
                    person.push_back({q(0), q(1), q(2), q(3)});
                }
                frame.push_back(std::move(person));
            }
            ori.push_back(std::move(frame));
        }
        doc["orientations"] = std::move(ori);
    }

    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out << doc.dump();
    if (!out) {
        throw IoError("write failed for " + path);
    }
}

FrameBatch sample_frames(const SkeletonSequence& seq, int n, SamplingMode mode,
                         uint64_t seed) {
    if (n < 1) {
        throw ValidationError("frame count must be positive");
    }
    const int T = seq.num_frames;

    std::vector<int> indices;
    indices.reserve(n);
    if (n > T) {
        for (int t = 0; t < T; ++t) {
            indices.push_back(t);
        }
        indices.resize(n, T - 1);
    } else {
        Rng rng(seed);
        for (int k = 0; k < n; ++k) {
            if (mode == SamplingMode::kDeterministic) {
                indices.push_back(static_cast<int>((2 * k + 1) * static_cast<int64_t>(T) / (2 * n)));
            } else {
                const int64_t start = static_cast<int64_t>(k) * T / n;
                const int64_t end = static_cast<int64_t>(k + 1) * T / n; // exclusive
                indices.push_back(static_cast<int>(rng.uniform_int(start, end - 1)));
            }
        }
    }

    FrameBatch batch;
    batch.topology = seq.topology;
    batch.num_frames = n;
    batch.num_persons = seq.num_persons;
    batch.frame_indices = indices;
    if (n > T) {
        batch.warnings.push_back("sequence has " + std::to_string(T) +
                                 " frames, padded to " + std::to_string(n) +
                                 " by repeating the last frame");
    }

    const int P = seq.num_persons;
    const int J = seq.topology.num_joints;
    const size_t per_frame = static_cast<size_t>(P) * J;
    batch.joints.resize(static_cast<size_t>(n) * per_frame);
    batch.velocities.assign(static_cast<size_t>(n) * per_frame, Vec3d::Zero());
    if (seq.has_orientations()) {
        batch.rotations.resize(static_cast<size_t>(n) * per_frame);
    }
    batch.canonical_joints.resize(per_frame);

    for (int k = 0; k < n; ++k) {
        const int src = indices[k];
        for (int p = 0; p < P; ++p) {
            for (int j = 0; j < J; ++j) {
                batch.joints[batch.index(k, p, j)] = seq.position(src, p, j);
                if (seq.has_orientations()) {
                    batch.rotations[batch.index(k, p, j)] = seq.orientation(src, p, j);
                }
                if (k > 0) {
                    batch.velocities[batch.index(k, p, j)] =
                        seq.position(src, p, j) -
                        seq.position(indices[k - 1], p, j);
                }
            }
        }
    }
    for (int p = 0; p < P; ++p) {
        for (int j = 0; j < J; ++j) {
            batch.canonical_joints[batch.canonical_index(p, j)] =
                batch.joints[batch.index(0, p, j)];
        }
    }
    return batch;
}

FrameBatch normalize_depth(const FrameBatch& batch, double tau, double delta_z) {
    if (tau <= 0) {
        throw ValidationError("tau must be positive");
    }
    std::vector<double> depths;
    depths.reserve(batch.joints.size());
    for (const Vec3d& j : batch.joints) {
        depths.push_back(j.z());
    }
    const double median = median_of(std::move(depths));
    if (std::abs(median) >= tau) {
        return batch;
    }
    FrameBatch shifted = batch;
    const Vec3d offset(0.0, 0.0, delta_z);
    for (Vec3d& j : shifted.joints) {
        j += offset;
    }
    // Velocities are frame differences: a uniform shift cancels.
    return shifted;
}

} // namespace draction
