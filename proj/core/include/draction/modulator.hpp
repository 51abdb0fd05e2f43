// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "draction/canonical.hpp"
#include "draction/errors.hpp"
#include "draction/math.hpp"
#include "draction/random.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <vector>

namespace draction {

/// Pose-conditioned appearance network: a linear appearance head mapping
/// features to base RGBA, a single GRU cell (input 10, hidden 10) running
/// along the frame axis per primitive, and a two-layer residual head
/// 10 -> 64 -> 5 emitting RGB residuals, an opacity residual and a saliency
/// gate. theta_mix lives with the model, not here.
template <typename T>
struct ModulatorParams {
    static constexpr int kInputSize = 10;
    static constexpr int kHiddenSize = 10;
    static constexpr int kMlpHidden = 64;
    static constexpr int kOutputSize = 5;

    MatX<T> w_app; // 4 x d
    VecX<T> b_app; // 4

    MatX<T> w_ir, w_iz, w_in; // hidden x input
    MatX<T> w_hr, w_hz, w_hn; // hidden x hidden
    VecX<T> b_ir, b_iz, b_in, b_hr, b_hz, b_hn;

    MatX<T> w1; // 64 x 10
    VecX<T> b1;
    MatX<T> w2; // 5 x 64
    VecX<T> b2;

    /// Applies f elementwise to every weight and bias (used by the optimizer
    /// and the gradient checker to enumerate parameters).
    template <typename Fn>
    void for_each_tensor(Fn&& f) {
        f("app.weight", w_app);
        f("gru.w_ir", w_ir);
        f("gru.w_iz", w_iz);
        f("gru.w_in", w_in);
        f("gru.w_hr", w_hr);
        f("gru.w_hz", w_hz);
        f("gru.w_hn", w_hn);
        f("mlp.w1", w1);
        f("mlp.w2", w2);
        f("app.bias", b_app);
        f("gru.b_ir", b_ir);
        f("gru.b_iz", b_iz);
        f("gru.b_in", b_in);
        f("gru.b_hr", b_hr);
        f("gru.b_hz", b_hz);
        f("gru.b_hn", b_hn);
        f("mlp.b1", b1);
        f("mlp.b2", b2);
    }

    template <typename Fn>
    void for_each_tensor(Fn&& f) const {
        const_cast<ModulatorParams*>(this)->for_each_tensor(
            [&](const char* name, auto& t) { f(name, t); });
    }
};

namespace detail {

template <typename T>
MatX<T> fan_in_uniform(Rng& rng, int rows, int cols) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    MatX<T> m(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            m(r, c) = static_cast<T>(rng.uniform(-bound, bound));
        }
    }
    return m;
}

template <typename T>
VecX<T> fan_in_uniform_vec(Rng& rng, int rows, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    VecX<T> v(rows);
    for (int r = 0; r < rows; ++r) {
        v(r) = static_cast<T>(rng.uniform(-bound, bound));
    }
    return v;
}

/// Orthogonal init: QR of a Gaussian matrix with sign-fixed diagonal.
template <typename T>
MatX<T> orthogonal(Rng& rng, int n) {
    Eigen::MatrixXd g(n, n);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            g(r, c) = rng.normal();
        }
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::MatrixXd r = qr.matrixQR().template triangularView<Eigen::Upper>();
    for (int c = 0; c < n; ++c) {
        if (r(c, c) < 0) {
            q.col(c) = -q.col(c);
        }
    }
    return q.cast<T>();
}

} // namespace detail

template <typename T>
ModulatorParams<T> make_modulator(int feature_dim, uint64_t seed) {
    ModulatorParams<T> p;
    Rng rng(seed);
    constexpr int h = ModulatorParams<T>::kHiddenSize;
    constexpr int in = ModulatorParams<T>::kInputSize;

    p.w_app = detail::fan_in_uniform<T>(rng, 4, feature_dim);
    p.b_app = detail::fan_in_uniform_vec<T>(rng, 4, feature_dim);

    p.w_ir = detail::fan_in_uniform<T>(rng, h, in);
    p.w_iz = detail::fan_in_uniform<T>(rng, h, in);
    p.w_in = detail::fan_in_uniform<T>(rng, h, in);
    p.w_hr = detail::orthogonal<T>(rng, h);
    p.w_hz = detail::orthogonal<T>(rng, h);
    p.w_hn = detail::orthogonal<T>(rng, h);
    p.b_ir = detail::fan_in_uniform_vec<T>(rng, h, h);
    p.b_iz = detail::fan_in_uniform_vec<T>(rng, h, h);
    p.b_in = detail::fan_in_uniform_vec<T>(rng, h, h);
    p.b_hr = detail::fan_in_uniform_vec<T>(rng, h, h);
    p.b_hz = detail::fan_in_uniform_vec<T>(rng, h, h);
    p.b_hn = detail::fan_in_uniform_vec<T>(rng, h, h);

    p.w1 = detail::fan_in_uniform<T>(rng, ModulatorParams<T>::kMlpHidden, h);
    p.b1 = detail::fan_in_uniform_vec<T>(rng, ModulatorParams<T>::kMlpHidden, h);
    p.w2 = detail::fan_in_uniform<T>(rng, ModulatorParams<T>::kOutputSize,
                                     ModulatorParams<T>::kMlpHidden);
    p.b2 = detail::fan_in_uniform_vec<T>(rng, ModulatorParams<T>::kOutputSize,
                                         ModulatorParams<T>::kMlpHidden);
    return p;
}

/// Per-frame appearance emitted by the modulator.
template <typename T>
struct FrameAppearance {
    MatX<T> colors;    // K x 3 in [0,1], after depth blending
    VecX<T> opacities; // K in [0,1]
    MatX<T> hidden;    // K x 10, carried to the next frame
};

/// LBS-weighted joint position and velocity per primitive.
template <typename T>
void aggregate_kinematics(const std::vector<SparseWeights<T>>& weights,
                          const std::vector<Vec3<T>>& joints,
                          const std::vector<Vec3<T>>& velocities,
                          std::vector<Vec3<T>>& positions_out,
                          std::vector<Vec3<T>>& velocities_out) {
    Vec3<T> j_total = Vec3<T>::Zero();
    Vec3<T> v_total = Vec3<T>::Zero();
    for (size_t i = 0; i < joints.size(); ++i) {
        j_total += joints[i];
        v_total += velocities[i];
    }
    const size_t K = weights.size();
    positions_out.resize(K);
    velocities_out.resize(K);
    for (size_t k = 0; k < K; ++k) {
        const SparseWeights<T>& w = weights[k];
        Vec3<T> pj = w.w_a * joints[w.idx_a];
        Vec3<T> pv = w.w_a * velocities[w.idx_a];
        Vec3<T> jr = j_total - joints[w.idx_a];
        Vec3<T> vr = v_total - velocities[w.idx_a];
        if (w.idx_b >= 0) {
            pj += w.w_b * joints[w.idx_b];
            pv += w.w_b * velocities[w.idx_b];
            jr -= joints[w.idx_b];
            vr -= velocities[w.idx_b];
        }
        positions_out[k] = pj + w.w_bg * jr;
        velocities_out[k] = pv + w.w_bg * vr;
    }
}

/// Base RGBA from the appearance head; rows are primitives.
template <typename T>
MatX<T> appearance_base(const ModulatorParams<T>& params, const MatX<T>& features) {
    MatX<T> base = features * params.w_app.transpose();
    base.rowwise() += params.b_app.transpose();
    return base;
}

/// One GRU step over all primitives with the intermediate activations the
/// backward pass needs.
template <typename T>
struct GruTrace {
    MatX<T> x;      // K x 10 input
    MatX<T> h_prev; // K x 10
    MatX<T> r, z, n;
    MatX<T> nq;     // w_hn h + b_hn, pre gating
    MatX<T> h_out;
};

template <typename T>
GruTrace<T> gru_step(const ModulatorParams<T>& p, const MatX<T>& x, const MatX<T>& h_prev) {
    GruTrace<T> t;
    t.x = x;
    t.h_prev = h_prev;
    MatX<T> r_pre = x * p.w_ir.transpose() + h_prev * p.w_hr.transpose();
    r_pre.rowwise() += (p.b_ir + p.b_hr).transpose();
    MatX<T> z_pre = x * p.w_iz.transpose() + h_prev * p.w_hz.transpose();
    z_pre.rowwise() += (p.b_iz + p.b_hz).transpose();
    t.r = r_pre.unaryExpr([](T v) { return sigmoid(v); });
    t.z = z_pre.unaryExpr([](T v) { return sigmoid(v); });
    t.nq = h_prev * p.w_hn.transpose();
    t.nq.rowwise() += p.b_hn.transpose();
    MatX<T> n_pre = x * p.w_in.transpose();
    n_pre.rowwise() += p.b_in.transpose();
    n_pre.array() += t.r.array() * t.nq.array();
    t.n = n_pre.array().tanh();
    t.h_out = ((T(1) - t.z.array()) * t.n.array() + t.z.array() * t.h_prev.array()).matrix();
    return t;
}

/// Residual head with the ReLU trace kept for the backward pass.
template <typename T>
struct MlpTrace {
    MatX<T> hidden_act; // K x 64 post-ReLU
    MatX<T> residuals;  // K x 5: dRGB, dAlpha, gate
};

template <typename T>
MlpTrace<T> residual_head(const ModulatorParams<T>& p, const MatX<T>& h) {
    MlpTrace<T> t;
    MatX<T> a1 = h * p.w1.transpose();
    a1.rowwise() += p.b1.transpose();
    t.hidden_act = a1.cwiseMax(T(0));
    t.residuals = t.hidden_act * p.w2.transpose();
    t.residuals.rowwise() += p.b2.transpose();
    return t;
}

/// Modulated color and opacity. The pre-sigmoid opacity logit is the sum of
/// the canonical opacity logit, the appearance head's alpha channel and the
/// predicted residual; the saliency gate multiplies after the sigmoid.
template <typename T>
void modulate(const MatX<T>& base, const MatX<T>& residuals,
              const std::vector<T>& opacity_logits,
              MatX<T>& color_learned, VecX<T>& alpha_learned) {
    const Eigen::Index K = base.rows();
    color_learned.resize(K, 3);
    alpha_learned.resize(K);
    for (Eigen::Index k = 0; k < K; ++k) {
        for (int c = 0; c < 3; ++c) {
            color_learned(k, c) = sigmoid(base(k, c) + residuals(k, c));
        }
        const T a_pre = opacity_logits[static_cast<size_t>(k)] + base(k, 3) + residuals(k, 3);
        alpha_learned(k) = sigmoid(a_pre) * sigmoid(residuals(k, 4));
    }
}

/// Triangular red -> green -> blue ramp over normalized depth. Red peaks at
/// the near bound, green at the midpoint, blue at the far bound; every
/// channel is a tent of half-width 0.5 clipped to [0,1].
template <typename T>
Vec3<T> depth_colormap(T depth, T z_near, T z_far) {
    if (!(z_near < z_far)) {
        throw ValidationError("depth colormap needs z_near < z_far");
    }
    const T u = std::clamp((depth - z_near) / (z_far - z_near), T(0), T(1));
    return Vec3<T>(std::clamp(T(1) - T(2) * u, T(0), T(1)),
                   std::clamp(T(1) - T(2) * std::abs(u - T(0.5)), T(0), T(1)),
                   std::clamp(T(2) * u - T(1), T(0), T(1)));
}

/// Convex blend of the learned color with the depth colormap;
/// lambda = sigmoid(theta_mix).
template <typename T>
Vec3<T> blend_color(const Vec3<T>& learned, const Vec3<T>& depth_color, T theta_mix) {
    const T lambda = sigmoid(theta_mix);
    return (T(1) - lambda) * learned + lambda * depth_color;
}

/// Per-frame colormap bounds: 5th/95th percentile of primitive depths,
/// widened symmetrically to a minimum span. Treated as constants of the
/// frame by the gradient path.
template <typename T>
struct ColormapRange {
    T z_near;
    T z_far;
};

template <typename T>
ColormapRange<T> colormap_range_from_depths(std::vector<T> depths, T lo_quantile = T(0.05),
                                            T hi_quantile = T(0.95), T min_span = T(0.1)) {
    if (depths.empty()) {
        return {T(0), T(1)};
    }
    const auto n = static_cast<std::ptrdiff_t>(depths.size());
    const auto lo_idx = static_cast<std::ptrdiff_t>(std::floor(lo_quantile * T(n - 1)));
    const auto hi_idx = static_cast<std::ptrdiff_t>(std::ceil(hi_quantile * T(n - 1)));
    std::nth_element(depths.begin(), depths.begin() + lo_idx, depths.end());
    T z_near = depths[lo_idx];
    std::nth_element(depths.begin(), depths.begin() + hi_idx, depths.end());
    T z_far = depths[hi_idx];
    if (z_far - z_near < min_span) {
        const T mid = (z_far + z_near) / T(2);
        z_near = mid - min_span / T(2);
        z_far = mid + min_span / T(2);
    }
    return {z_near, z_far};
}

} // namespace draction
