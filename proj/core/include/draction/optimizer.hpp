// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "draction/gradients.hpp"

#include <cmath>
#include <cstdint>

namespace draction {

/// AdamW with decoupled weight decay. Defaults follow the renderer training
/// configuration (lr 2e-5, weight decay 0.05).
template <typename T>
struct AdamWConfig {
    T lr = T(2e-5);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0.05);
    T log_scale_min = T(-9.2); // exp ~ 1e-4 m
    T log_scale_max = T(0.0);  // exp = 1 m
};

/// First/second moment estimates, shape-congruent with the gradients.
template <typename T>
struct AdamWState {
    ParameterGradients<T> m;
    ParameterGradients<T> v;
    int64_t step = 0;
};

template <typename T>
AdamWState<T> make_adamw_state(const RenderModel<T>& model) {
    AdamWState<T> s;
    s.m = make_zero_gradients(model);
    s.v = make_zero_gradients(model);
    return s;
}

namespace detail {

/// One AdamW update over a contiguous span.
template <typename T>
void adamw_span(T* param, const T* grad, T* m, T* v, size_t n, int64_t step,
                const AdamWConfig<T>& cfg, bool decay) {
    const T bc1 = T(1) - std::pow(cfg.beta1, static_cast<T>(step));
    const T bc2 = T(1) - std::pow(cfg.beta2, static_cast<T>(step));
    for (size_t i = 0; i < n; ++i) {
        m[i] = cfg.beta1 * m[i] + (T(1) - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (T(1) - cfg.beta2) * grad[i] * grad[i];
        const T m_hat = m[i] / bc1;
        const T v_hat = v[i] / bc2;
        T update = m_hat / (std::sqrt(v_hat) + cfg.eps);
        if (decay) {
            update += cfg.weight_decay * param[i];
        }
        param[i] -= cfg.lr * update;
    }
}

} // namespace detail

/// Applies one AdamW step to every learnable family. Canonical quaternions
/// are renormalized after the step and log-scales clamped to the configured
/// bounds.
template <typename T>
void apply_update(RenderModel<T>& model, const ParameterGradients<T>& grads,
                  AdamWState<T>& state, const AdamWConfig<T>& cfg) {
    ++state.step;
    const int64_t step = state.step;
    const int K = model.canon.primitive_count();

    detail::adamw_span(model.canon.features.data(), grads.d_features.data(),
                       state.m.d_features.data(), state.v.d_features.data(),
                       static_cast<size_t>(model.canon.features.size()), step, cfg, true);
    for (int k = 0; k < K; ++k) {
        detail::adamw_span(model.canon.log_scales[k].data(),
                           grads.d_log_scales[k].data(),
                           state.m.d_log_scales[k].data(),
                           state.v.d_log_scales[k].data(), 3, step, cfg, false);
        for (int a = 0; a < 3; ++a) {
            model.canon.log_scales[k](a) = std::clamp(model.canon.log_scales[k](a),
                                                      cfg.log_scale_min,
                                                      cfg.log_scale_max);
        }
        detail::adamw_span(model.canon.orientations[k].data(), grads.d_quat_c[k].data(),
                           state.m.d_quat_c[k].data(), state.v.d_quat_c[k].data(), 4,
                           step, cfg, false);
        const T norm = model.canon.orientations[k].norm();
        if (norm > T(1e-12)) {
            model.canon.orientations[k] /= norm;
        } else {
            model.canon.orientations[k] = Vec4<T>(T(1), T(0), T(0), T(0));
        }
    }
    detail::adamw_span(model.canon.opacity_logits.data(), grads.d_alpha_c.data(),
                       state.m.d_alpha_c.data(), state.v.d_alpha_c.data(),
                       model.canon.opacity_logits.size(), step, cfg, false);

    // Zip the modulator tensors; enumeration order is fixed.
    std::vector<T*> p_spans;
    std::vector<const T*> g_spans;
    std::vector<T*> m_spans;
    std::vector<T*> v_spans;
    std::vector<size_t> sizes;
    model.modulator.for_each_tensor([&](const char*, auto& tensor) {
        p_spans.push_back(tensor.data());
        sizes.push_back(static_cast<size_t>(tensor.size()));
    });
    grads.d_modulator.for_each_tensor(
        [&](const char*, const auto& tensor) { g_spans.push_back(tensor.data()); });
    state.m.d_modulator.for_each_tensor(
        [&](const char*, auto& tensor) { m_spans.push_back(tensor.data()); });
    state.v.d_modulator.for_each_tensor(
        [&](const char*, auto& tensor) { v_spans.push_back(tensor.data()); });
    for (size_t i = 0; i < p_spans.size(); ++i) {
        detail::adamw_span(p_spans[i], g_spans[i], m_spans[i], v_spans[i], sizes[i],
                           step, cfg, true);
    }

    detail::adamw_span(&model.theta_mix, &grads.d_theta_mix, &state.m.d_theta_mix,
                       &state.v.d_theta_mix, 1, step, cfg, false);
}

/// Scalar AdamW step, shared by the surrogate head and the reference tests.
template <typename T>
void adamw_scalar(T& param, T grad, T& m, T& v, int64_t step, const AdamWConfig<T>& cfg,
                  bool decay = true) {
    detail::adamw_span(&param, &grad, &m, &v, 1, step, cfg, decay);
}

} // namespace draction
