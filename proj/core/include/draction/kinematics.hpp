// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "draction/canonical.hpp"
#include "draction/errors.hpp"
#include "draction/math.hpp"
#include "draction/sequence.hpp"

#include <Eigen/Geometry>
#include <Eigen/LU>

#include <cmath>
#include <limits>
#include <vector>

namespace draction {

/// Rotation matrix from a quaternion (w, x, y, z). Inputs are renormalized;
/// a zero quaternion is rejected.
template <typename T>
Mat3<T> quat_to_mat(const Vec4<T>& q_in) {
    const T n = q_in.norm();
    if (!(n > T(1e-12))) {
        throw NumericalError("zero quaternion has no orientation");
    }
    const Vec4<T> q = q_in / n;
    const T w = q(0), x = q(1), y = q(2), z = q(3);
    Mat3<T> r;
    r << T(1) - T(2) * (y * y + z * z), T(2) * (x * y - w * z), T(2) * (x * z + w * y),
         T(2) * (x * y + w * z), T(1) - T(2) * (x * x + z * z), T(2) * (y * z - w * x),
         T(2) * (x * z - w * y), T(2) * (y * z + w * x), T(1) - T(2) * (x * x + y * y);
    return r;
}

/// Proper SVD of a 3x3 matrix: a = u * diag(sigma) * v^T with
/// det(u) = det(v) = +1, sigma[0] >= sigma[1] >= 0 and sigma[2] carrying the
/// sign of det(a). Eigenvectors come from cyclic Jacobi sweeps on a^T a; u is
/// rebuilt by projection with a deterministic completion for rank-deficient
/// inputs.
template <typename T>
struct Svd3 {
    Mat3<T> u;
    Vec3<T> sigma;
    Mat3<T> v;
};

template <typename T>
Svd3<T> svd3(const Mat3<T>& a) {
    Mat3<T> s = a.transpose() * a;
    Mat3<T> v = Mat3<T>::Identity();
    const T scale = s.norm() + std::numeric_limits<T>::min();
    const T tol = T(16) * std::numeric_limits<T>::epsilon() * scale;

    for (int sweep = 0; sweep < 30; ++sweep) {
        T off = std::abs(s(0, 1)) + std::abs(s(0, 2)) + std::abs(s(1, 2));
        if (off <= tol) {
            break;
        }
        for (int p = 0; p < 2; ++p) {
            for (int q = p + 1; q < 3; ++q) {
                if (std::abs(s(p, q)) <= std::numeric_limits<T>::min()) {
                    continue;
                }
                const T tau = (s(q, q) - s(p, p)) / (T(2) * s(p, q));
                const T t = (tau >= T(0) ? T(1) : T(-1)) /
                            (std::abs(tau) + std::sqrt(T(1) + tau * tau));
                const T c = T(1) / std::sqrt(T(1) + t * t);
                const T sn = t * c;
                Mat3<T> g = Mat3<T>::Identity();
                g(p, p) = c;
                g(q, q) = c;
                g(p, q) = sn;
                g(q, p) = -sn;
                s = g.transpose() * s * g;
                v = v * g;
            }
        }
    }

    // Sort eigenvalues descending, permuting eigenvectors alongside.
    int order[3] = {0, 1, 2};
    T lambda[3] = {s(0, 0), s(1, 1), s(2, 2)};
    for (int i = 0; i < 2; ++i) {
        for (int j = i + 1; j < 3; ++j) {
            if (lambda[order[j]] > lambda[order[i]]) {
                std::swap(order[i], order[j]);
            }
        }
    }
    Mat3<T> v_sorted;
    for (int i = 0; i < 3; ++i) {
        v_sorted.col(i) = v.col(order[i]);
    }
    if (v_sorted.determinant() < T(0)) {
        v_sorted.col(2) = -v_sorted.col(2);
    }

    Svd3<T> out;
    out.v = v_sorted;

    const T tiny = T(1e-9);
    Vec3<T> av0 = a * v_sorted.col(0);
    const T s0 = av0.norm();
    Vec3<T> u0;
    if (s0 > tiny) {
        u0 = av0 / s0;
    } else {
        // Rank zero: every rotation is equally near; pin the identity frame.
        out.u = Mat3<T>::Identity();
        out.sigma.setZero();
        return out;
    }

    Vec3<T> av1 = a * v_sorted.col(1);
    Vec3<T> u1 = av1 - u0.dot(av1) * u0;
    const T n1 = u1.norm();
    if (n1 > tiny * std::max(s0, T(1))) {
        u1 /= n1;
    } else {
        // Rank one: complete with the axis least aligned with u0.
        int axis = 0;
        if (std::abs(u0(1)) < std::abs(u0(axis))) axis = 1;
        if (std::abs(u0(2)) < std::abs(u0(axis))) axis = 2;
        u1 = Vec3<T>::Unit(axis) - u0(axis) * u0;
        u1.normalize();
    }
    const Vec3<T> u2 = u0.cross(u1);

    out.u.col(0) = u0;
    out.u.col(1) = u1;
    out.u.col(2) = u2;
    out.sigma(0) = u0.dot(a * v_sorted.col(0));
    out.sigma(1) = u1.dot(av1);
    out.sigma(2) = u2.dot(a * v_sorted.col(2)); // signed: negative iff det(a) < 0
    return out;
}

/// Nearest rotation in Frobenius norm. In the proper-SVD convention this is
/// u * v^T, which equals the reflection-corrected u * diag(1,1,det(uv^T)) * v^T
/// of the conventional decomposition.
template <typename T>
Mat3<T> project_so3(const Svd3<T>& f) {
    return f.u * f.v.transpose();
}

template <typename T>
Mat3<T> project_so3(const Mat3<T>& blended) {
    if (!blended.allFinite()) {
        throw NumericalError("non-finite blended rotation");
    }
    return project_so3(svd3(blended));
}

/// Per-joint rigid transforms for one frame: t_i is the joint's displacement
/// from its canonical position, R_i its orientation (identity when the
/// format carries no orientations).
template <typename T>
struct JointTransforms {
    std::vector<Mat3<T>> rotations;
    std::vector<Vec3<T>> translations;
    bool identity_rotations = true;
};

template <typename T>
JointTransforms<T> joint_transforms(const std::vector<Vec3d>& frame_joints,
                                    const std::vector<Vec3d>& canonical_joints,
                                    const std::vector<Quatd>* orientations) {
    const size_t J = canonical_joints.size();
    if (frame_joints.size() != J || (orientations && orientations->size() != J)) {
        throw ValidationError("joint count mismatch in transforms");
    }
    JointTransforms<T> out;
    out.translations.resize(J);
    out.rotations.resize(J);
    out.identity_rotations = orientations == nullptr;
    for (size_t i = 0; i < J; ++i) {
        out.translations[i] = (frame_joints[i] - canonical_joints[i]).cast<T>();
        out.rotations[i] = orientations
                               ? quat_to_mat<T>((*orientations)[i].cast<T>())
                               : Mat3<T>::Identity();
    }
    return out;
}

/// Dense blend over the full weight rows; the reference path.
template <typename T>
void blend_dense(const MatX<T>& weights, const JointTransforms<T>& transforms,
                 std::vector<Vec3<T>>& translations, std::vector<Mat3<T>>& rotations) {
    const Eigen::Index K = weights.rows();
    const Eigen::Index J = weights.cols();
    translations.assign(K, Vec3<T>::Zero());
    rotations.assign(K, Mat3<T>::Zero());
    for (Eigen::Index k = 0; k < K; ++k) {
        for (Eigen::Index i = 0; i < J; ++i) {
            const T w = weights(k, i);
            translations[k] += w * transforms.translations[i];
            rotations[k] += w * transforms.rotations[i];
        }
    }
}

/// Sparse blend: two dominant terms plus the shared background weight times
/// the per-frame totals. Exact for the fixed logit structure.
template <typename T>
void blend_sparse(const std::vector<SparseWeights<T>>& weights,
                  const JointTransforms<T>& transforms,
                  std::vector<Vec3<T>>& translations, std::vector<Mat3<T>>& rotations) {
    const size_t J = transforms.translations.size();
    Vec3<T> t_total = Vec3<T>::Zero();
    Mat3<T> r_total = Mat3<T>::Zero();
    for (size_t i = 0; i < J; ++i) {
        t_total += transforms.translations[i];
        r_total += transforms.rotations[i];
    }
    const size_t K = weights.size();
    translations.resize(K);
    rotations.resize(K);
    for (size_t k = 0; k < K; ++k) {
        const SparseWeights<T>& w = weights[k];
        Vec3<T> t = w.w_a * transforms.translations[w.idx_a];
        Mat3<T> r = w.w_a * transforms.rotations[w.idx_a];
        Vec3<T> t_rest = t_total - transforms.translations[w.idx_a];
        Mat3<T> r_rest = r_total - transforms.rotations[w.idx_a];
        if (w.idx_b >= 0) {
            t += w.w_b * transforms.translations[w.idx_b];
            r += w.w_b * transforms.rotations[w.idx_b];
            t_rest -= transforms.translations[w.idx_b];
            r_rest -= transforms.rotations[w.idx_b];
        }
        translations[k] = t + w.w_bg * t_rest;
        rotations[k] = r + w.w_bg * r_rest;
    }
}

/// World-space Gaussians for one posed frame.
template <typename T>
struct PosedGaussianSet {
    std::vector<Vec3<T>> means;        // K
    std::vector<Mat3<T>> covariances;  // K
    std::vector<Mat3<T>> blend_rotations; // projected LBS rotations, kept for gradients
};

/// Applies the blended rigid transforms: mean R_k mu_c + t_k, covariance
/// rotated through R_k * R_c with squared exponentiated scales.
template <typename T>
PosedGaussianSet<T> deform_gaussians(const CanonicalGaussianSet<T>& canon,
                                     const std::vector<Vec3<T>>& centers,
                                     const std::vector<Vec3<T>>& blend_translations,
                                     const std::vector<Mat3<T>>& blend_rotations) {
    const size_t K = centers.size();
    if (blend_translations.size() != K || blend_rotations.size() != K ||
        canon.log_scales.size() != K) {
        throw ValidationError("primitive count mismatch in deform");
    }
    PosedGaussianSet<T> posed;
    posed.means.resize(K);
    posed.covariances.resize(K);
    posed.blend_rotations = blend_rotations;
    for (size_t k = 0; k < K; ++k) {
        posed.means[k] = blend_rotations[k] * centers[k] + blend_translations[k];
        const Mat3<T> r_canon = quat_to_mat(canon.orientations[k]);
        const Mat3<T> r_total = blend_rotations[k] * r_canon;
        const Vec3<T> s2 = (T(2) * canon.log_scales[k].array()).exp();
        posed.covariances[k] = r_total * s2.asDiagonal() * r_total.transpose();
    }
    return posed;
}

} // namespace draction
