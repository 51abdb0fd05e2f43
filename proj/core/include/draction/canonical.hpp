// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "draction/errors.hpp"
#include "draction/math.hpp"
#include "draction/random.hpp"
#include "draction/topology.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace draction {

/// Ties a primitive to the skeleton: either anchored at one joint or sampled
/// along a bone at interpolation factor alpha in (0, 1).
struct Binding {
    enum class Kind { kJoint, kBone };
    Kind kind = Kind::kJoint;
    int joint = -1;            // kJoint
    int joint_a = -1, joint_b = -1;
    int edge = -1;             // index into Topology::edges for kBone
    double alpha = 0.0;        // kBone: position = (1-alpha)*a + alpha*b
};

/// Softmax weights restricted to a primitive's at-most-two dominant joints.
/// All remaining joints share one common background value, so blends can be
/// evaluated exactly from per-frame totals without touching the dense row.
template <typename T>
struct SparseWeights {
    int idx_a = -1;
    int idx_b = -1; // -1 for joint primitives
    T w_a = T(0);
    T w_b = T(0);
    T w_bg = T(0); // weight of every other joint
};

struct ScaleParams {
    double s_base_joint = 0.04;
    double s_min_joint = 0.01;
    double s_max_joint = 0.08;
    double s_base_bone = 0.025;
    double s_min_bone = 0.008;
    double s_max_bone = 0.06;
    double gamma = 0.5;
};

/// The pose-independent primitive set. Centers derive from the canonical
/// joints and are not learned; log-scales, orientations, opacity logits and
/// appearance features are the learnable families. LBS weight logits are
/// pre-computed from the topology and stay fixed.
template <typename T>
struct CanonicalGaussianSet {
    Topology topology;
    int n_samples = 0;
    int feature_dim = 0;

    std::vector<Binding> bindings;            // K
    std::vector<Vec3<T>> centers;             // K, from canonical joints
    std::vector<Vec3<T>> log_scales;          // K, learnable
    std::vector<Vec4<T>> orientations;        // K unit quaternions, learnable
    std::vector<T> opacity_logits;            // K, learnable
    MatX<T> features;                         // K x d, learnable
    MatX<T> weight_logits;                    // K x J, fixed
    MatX<T> weights;                          // softmax rows, cached
    std::vector<SparseWeights<T>> sparse_weights; // derived from weights

    std::vector<std::string> warnings;

    int primitive_count() const { return static_cast<int>(bindings.size()); }
};

/// K = J + |E| * n_samples primitives: one per joint, then n_samples per
/// bone at factors i/(n_samples+1).
inline std::vector<Binding> make_bindings(const Topology& topology, int n_samples) {
    if (n_samples < 1) {
        throw ValidationError("n_samples must be at least 1");
    }
    std::vector<Binding> bindings;
    bindings.reserve(topology.num_joints + topology.num_edges() * n_samples);
    for (int j = 0; j < topology.num_joints; ++j) {
        Binding b;
        b.kind = Binding::Kind::kJoint;
        b.joint = j;
        bindings.push_back(b);
    }
    for (int e = 0; e < topology.num_edges(); ++e) {
        for (int i = 1; i <= n_samples; ++i) {
            Binding b;
            b.kind = Binding::Kind::kBone;
            b.joint_a = topology.edges[e].first;
            b.joint_b = topology.edges[e].second;
            b.edge = e;
            b.alpha = static_cast<double>(i) / (n_samples + 1);
            bindings.push_back(b);
        }
    }
    return bindings;
}

/// Centers for one person's canonical pose: joints verbatim, bone primitives
/// linearly interpolated.
template <typename T>
std::vector<Vec3<T>> compute_centers(const std::vector<Binding>& bindings,
                                     const std::vector<Vec3d>& canonical_joints) {
    std::vector<Vec3<T>> centers(bindings.size());
    for (size_t k = 0; k < bindings.size(); ++k) {
        const Binding& b = bindings[k];
        Vec3d c;
        if (b.kind == Binding::Kind::kJoint) {
            c = canonical_joints[b.joint];
        } else {
            c = (1.0 - b.alpha) * canonical_joints[b.joint_a] +
                b.alpha * canonical_joints[b.joint_b];
        }
        centers[k] = c.cast<T>();
    }
    return centers;
}

/// Isotropic scales from local bone structure: a joint primitive uses the
/// median length of its incident bones, a bone primitive uses its own bone's
/// length, both normalized by the longest bone and gamma-damped.
template <typename T>
std::vector<Vec3<T>> adaptive_scales(const Topology& topology,
                                     const std::vector<Vec3d>& canonical_joints,
                                     const std::vector<Binding>& bindings,
                                     const ScaleParams& params,
                                     std::vector<std::string>* warnings = nullptr) {
    if (params.s_base_joint <= 0 || params.s_min_joint <= 0 || params.s_max_joint <= 0 ||
        params.s_base_bone <= 0 || params.s_min_bone <= 0 || params.s_max_bone <= 0) {
        throw ValidationError("scale bounds must be positive");
    }
    if (params.s_min_joint > params.s_max_joint || params.s_min_bone > params.s_max_bone) {
        throw ValidationError("scale minimum exceeds maximum");
    }

    const int E = topology.num_edges();
    std::vector<double> bone_length(E);
    double longest = 0.0;
    for (int e = 0; e < E; ++e) {
        const auto& [a, b] = topology.edges[e];
        bone_length[e] = (canonical_joints[a] - canonical_joints[b]).norm();
        longest = std::max(longest, bone_length[e]);
        if (bone_length[e] < 1e-12 && warnings != nullptr) {
            warnings->push_back("zero-length bone (" + std::to_string(a) + "," +
                                std::to_string(b) + "), scale floored");
        }
    }

    std::vector<Vec3<T>> scales(bindings.size());
    if (longest <= 0.0) {
        if (warnings != nullptr) {
            warnings->push_back("all joints coincide, every scale floored");
        }
        for (size_t k = 0; k < bindings.size(); ++k) {
            const bool is_joint = bindings[k].kind == Binding::Kind::kJoint;
            const double s = is_joint ? params.s_min_joint : params.s_min_bone;
            scales[k] = Vec3<T>::Constant(static_cast<T>(s));
        }
        return scales;
    }

    std::vector<std::vector<double>> incident(topology.num_joints);
    for (int e = 0; e < E; ++e) {
        incident[topology.edges[e].first].push_back(bone_length[e]);
        incident[topology.edges[e].second].push_back(bone_length[e]);
    }

    for (size_t k = 0; k < bindings.size(); ++k) {
        const Binding& b = bindings[k];
        double s;
        if (b.kind == Binding::Kind::kJoint) {
            double ref = incident[b.joint].empty() ? 0.0 : median_of(incident[b.joint]);
            s = params.s_base_joint * std::pow(ref / longest, params.gamma);
            s = std::clamp(s, params.s_min_joint, params.s_max_joint);
        } else {
            s = params.s_base_bone * std::pow(bone_length[b.edge] / longest, params.gamma);
            s = std::clamp(s, params.s_min_bone, params.s_max_bone);
        }
        scales[k] = Vec3<T>::Constant(static_cast<T>(s));
    }
    return scales;
}

/// Fixed blend-weight logits: +10 at a joint primitive's joint, -10
/// elsewhere; log(1-alpha)+10 / log(alpha)+10 at a bone primitive's two
/// endpoints.
template <typename T>
MatX<T> lbs_weight_logits(const std::vector<Binding>& bindings, int num_joints) {
    MatX<T> logits(bindings.size(), num_joints);
    logits.setConstant(T(-10));
    for (size_t k = 0; k < bindings.size(); ++k) {
        const Binding& b = bindings[k];
        if (b.kind == Binding::Kind::kJoint) {
            logits(static_cast<Eigen::Index>(k), b.joint) = T(10);
        } else {
            logits(static_cast<Eigen::Index>(k), b.joint_a) =
                static_cast<T>(std::log(1.0 - b.alpha) + 10.0);
            logits(static_cast<Eigen::Index>(k), b.joint_b) =
                static_cast<T>(std::log(b.alpha) + 10.0);
        }
    }
    return logits;
}

template <typename T>
std::vector<SparseWeights<T>> sparsify_weights(const MatX<T>& weights,
                                               const std::vector<Binding>& bindings) {
    std::vector<SparseWeights<T>> out(bindings.size());
    for (size_t k = 0; k < bindings.size(); ++k) {
        const Binding& b = bindings[k];
        SparseWeights<T>& s = out[k];
        const Eigen::Index row = static_cast<Eigen::Index>(k);
        if (b.kind == Binding::Kind::kJoint) {
            s.idx_a = b.joint;
            s.w_a = weights(row, b.joint);
        } else {
            s.idx_a = b.joint_a;
            s.idx_b = b.joint_b;
            s.w_a = weights(row, b.joint_a);
            s.w_b = weights(row, b.joint_b);
        }
        // All background entries of a row share one logit, hence one value.
        for (int j = 0; j < weights.cols(); ++j) {
            if (j != s.idx_a && j != s.idx_b) {
                s.w_bg = weights(row, j);
                break;
            }
        }
        if (weights.cols() <= (s.idx_b >= 0 ? 2 : 1)) {
            s.w_bg = T(0);
        }
    }
    return out;
}

/// Builds the full canonical set for one topology and canonical pose.
/// Identical (topology, joints, seed) inputs produce bit-identical sets.
template <typename T>
CanonicalGaussianSet<T> instantiate_canonical(const Topology& topology,
                                              const std::vector<Vec3d>& canonical_joints,
                                              int n_samples, int feature_dim,
                                              uint64_t seed,
                                              const ScaleParams& scale_params = {}) {
    topology.validate();
    if (static_cast<int>(canonical_joints.size()) != topology.num_joints) {
        throw ValidationError("canonical joint count mismatch");
    }
    for (const Vec3d& j : canonical_joints) {
        if (!j.allFinite()) {
            throw ValidationError("non-finite canonical joint");
        }
    }
    if (feature_dim < 1) {
        throw ValidationError("feature_dim must be positive");
    }

    CanonicalGaussianSet<T> set;
    set.topology = topology;
    set.n_samples = n_samples;
    set.feature_dim = feature_dim;
    set.bindings = make_bindings(topology, n_samples);
    const int K = set.primitive_count();

    set.centers = compute_centers<T>(set.bindings, canonical_joints);
    std::vector<Vec3<T>> scales = adaptive_scales<T>(topology, canonical_joints,
                                                     set.bindings, scale_params,
                                                     &set.warnings);
    set.log_scales.resize(K);
    for (int k = 0; k < K; ++k) {
        set.log_scales[k] = scales[k].array().log();
    }
    set.orientations.assign(K, Vec4<T>(T(1), T(0), T(0), T(0)));
    set.opacity_logits.assign(K, T(0));

    Rng rng(seed);
    set.features.resize(K, feature_dim);
    for (int k = 0; k < K; ++k) {
        for (int d = 0; d < feature_dim; ++d) {
            set.features(k, d) = static_cast<T>(rng.normal(0.0, 0.01));
        }
    }

    set.weight_logits = lbs_weight_logits<T>(set.bindings, topology.num_joints);
    set.weights = set.weight_logits;
    for (int k = 0; k < K; ++k) {
        softmax_row(set.weights, k);
    }
    set.sparse_weights = sparsify_weights(set.weights, set.bindings);
    return set;
}

} // namespace draction
