// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "draction/gradients.hpp"
#include "draction/pipeline.hpp"
#include "draction/random.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace draction {

/// A frozen scene for finite-difference verification: model, sampled batch,
/// context (with an explicit colormap range so the bounds stay constant
/// under perturbation) and a Bernoulli pixel mask defining the scalar loss
/// L = sum over masked pixels of all RGB channels.
struct GradCheckScene {
    RenderModel<double> model;
    FrameBatch batch;
    RenderContext<double> context;
    std::vector<std::vector<double>> mask; // per frame, H*W*3 of 0/1
};

/// Families checkable by finite differences. Modulator tensors go by their
/// tensor names ("gru.w_hr", "mlp.w1", ...); the two input families address
/// the rendered skeleton data instead of learnable parameters.
std::vector<std::string> inline gradcheck_families(bool has_rotations) {
    std::vector<std::string> fams = {
        "features", "log_scales", "quat_c", "alpha_c", "theta_mix",
        "app.weight", "app.bias",
        "gru.w_ir", "gru.w_iz", "gru.w_in", "gru.w_hr", "gru.w_hz", "gru.w_hn",
        "gru.b_ir", "gru.b_iz", "gru.b_in", "gru.b_hr", "gru.b_hz", "gru.b_hn",
        "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
        "input.joints"};
    if (has_rotations) {
        fams.push_back("input.rotations");
    }
    return fams;
}

/// Relative-error tolerance per family: recurrent weights accumulate error
/// over backprop-through-time, everything else is a short chain.
inline double gradcheck_tolerance(const std::string& family) {
    if (family.rfind("gru.", 0) == 0) {
        return 1e-3;
    }
    if (family == "theta_mix") {
        return 1e-5;
    }
    return 1e-4;
}

struct GradCheckResult {
    std::string family;
    int entries_checked = 0;
    double max_rel_err = 0.0; // over entries with meaningful magnitude
    double max_abs_err = 0.0; // fallback entries (|grad| < 1e-8 on both sides)
    double max_abs_grad = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

enum class FaultInjection { kNone, kSignFlip };

namespace detail {

inline std::vector<double*> family_value_slots(RenderModel<double>& model,
                                               FrameBatch& batch,
                                               const std::string& family) {
    std::vector<double*> slots;
    const int K = model.canon.primitive_count();
    if (family == "features") {
        for (int i = 0; i < model.canon.features.size(); ++i) {
            slots.push_back(model.canon.features.data() + i);
        }
    } else if (family == "log_scales") {
        for (int k = 0; k < K; ++k) {
            for (int a = 0; a < 3; ++a) {
                slots.push_back(&model.canon.log_scales[k](a));
            }
        }
    } else if (family == "quat_c") {
        for (int k = 0; k < K; ++k) {
            for (int a = 0; a < 4; ++a) {
                slots.push_back(&model.canon.orientations[k](a));
            }
        }
    } else if (family == "alpha_c") {
        for (int k = 0; k < K; ++k) {
            slots.push_back(&model.canon.opacity_logits[k]);
        }
    } else if (family == "theta_mix") {
        slots.push_back(&model.theta_mix);
    } else if (family == "input.joints") {
        for (auto& v : batch.joints) {
            for (int a = 0; a < 3; ++a) {
                slots.push_back(&v(a));
            }
        }
    } else if (family == "input.rotations") {
        for (auto& v : batch.rotations) {
            for (int a = 0; a < 4; ++a) {
                slots.push_back(&v(a));
            }
        }
    } else {
        model.modulator.for_each_tensor([&](const char* name, auto& t) {
            if (family == name) {
                for (int i = 0; i < t.size(); ++i) {
                    slots.push_back(t.data() + i);
                }
            }
        });
        if (slots.empty()) {
            throw ValidationError("unknown gradient family: " + family);
        }
    }
    return slots;
}

inline std::vector<double> family_grad_values(const ParameterGradients<double>& grads,
                                              const InputGradients<double>& inputs,
                                              const std::string& family) {
    std::vector<double> values;
    if (family == "features") {
        values.assign(grads.d_features.data(),
                      grads.d_features.data() + grads.d_features.size());
    } else if (family == "log_scales") {
        for (const auto& v : grads.d_log_scales) {
            values.insert(values.end(), v.data(), v.data() + 3);
        }
    } else if (family == "quat_c") {
        for (const auto& v : grads.d_quat_c) {
            values.insert(values.end(), v.data(), v.data() + 4);
        }
    } else if (family == "alpha_c") {
        values.assign(grads.d_alpha_c.data(),
                      grads.d_alpha_c.data() + grads.d_alpha_c.size());
    } else if (family == "theta_mix") {
        values.push_back(grads.d_theta_mix);
    } else if (family == "input.joints") {
        for (const auto& v : inputs.d_joints) {
            values.insert(values.end(), v.data(), v.data() + 3);
        }
    } else if (family == "input.rotations") {
        for (const auto& v : inputs.d_rotations) {
            values.insert(values.end(), v.data(), v.data() + 4);
        }
    } else {
        grads.d_modulator.for_each_tensor([&](const char* name, const auto& t) {
            if (family == name) {
                values.assign(t.data(), t.data() + t.size());
            }
        });
    }
    return values;
}

/// Rebuilds finite-difference velocities after a joint perturbation, so the
/// closure sees the true data dependency v_t = j_t - j_{t-1}.
inline void recompute_velocities(FrameBatch& batch) {
    for (int t = 0; t < batch.num_frames; ++t) {
        for (int p = 0; p < batch.num_persons; ++p) {
            for (int j = 0; j < batch.topology.num_joints; ++j) {
                batch.velocities[batch.index(t, p, j)] =
                    t == 0 ? Vec3d(Vec3d::Zero())
                           : Vec3d(batch.joints[batch.index(t, p, j)] -
                                   batch.joints[batch.index(t - 1, p, j)]);
            }
        }
    }
}

inline double masked_loss(const std::vector<RenderedFrame<double>>& frames,
                          const std::vector<std::vector<double>>& mask) {
    double loss = 0.0;
    for (size_t t = 0; t < frames.size(); ++t) {
        const auto& rgb = frames[t].rgb;
        const auto& m = mask[t];
        for (size_t i = 0; i < rgb.size(); ++i) {
            loss += m[i] * rgb[i];
        }
    }
    return loss;
}

} // namespace detail

/// Central finite differences (64-bit) against the tape gradient for one
/// family. Checks up to `max_entries` evenly spaced entries. Relative error
/// uses max(|analytic|, |numeric|) as denominator, falling back to absolute
/// error when both are below 1e-8.
inline GradCheckResult finite_diff_check(const GradCheckScene& scene,
                                         const std::string& family,
                                         int max_entries = 24, double h = 1e-4,
                                         FaultInjection fault = FaultInjection::kNone) {
    GradCheckScene work = scene;
    const bool is_input = family.rfind("input.", 0) == 0;

    auto render_all = [&](bool tape) {
        return render_sequence(work.model, work.batch, work.context, tape);
    };

    // Analytic gradients from one taped render.
    auto taped = render_all(true);
    InputGradients<double> input_grads;
    ParameterGradients<double> grads =
        backward(work.model, *taped.tape, work.batch, work.mask, work.context,
                 is_input ? &input_grads : nullptr);
    std::vector<double> analytic = detail::family_grad_values(grads, input_grads, family);
    if (fault == FaultInjection::kSignFlip) {
        for (double& a : analytic) {
            a = -a;
        }
    }

    std::vector<double*> slots =
        detail::family_value_slots(work.model, work.batch, family);
    if (slots.size() != analytic.size()) {
        throw ValidationError("family slot/gradient size mismatch for " + family);
    }

    GradCheckResult result;
    result.family = family;
    result.tolerance = gradcheck_tolerance(family);

    const size_t n = slots.size();
    const size_t step = std::max<size_t>(1, n / static_cast<size_t>(max_entries));
    for (size_t i = 0; i < n; i += step) {
        double* p = slots[i];
        const double v0 = *p;
        *p = v0 + h;
        if (is_input) {
            detail::recompute_velocities(work.batch);
        }
        const double loss_plus = detail::masked_loss(render_all(false).frames, work.mask);
        *p = v0 - h;
        if (is_input) {
            detail::recompute_velocities(work.batch);
        }
        const double loss_minus = detail::masked_loss(render_all(false).frames, work.mask);
        *p = v0;
        if (is_input) {
            detail::recompute_velocities(work.batch);
        }
        if (!std::isfinite(loss_plus) || !std::isfinite(loss_minus)) {
            throw NumericalError("non-finite render under perturbation of " + family);
        }

        const double numeric = (loss_plus - loss_minus) / (2.0 * h);
        const double a = analytic[i];
        const double mag = std::max(std::abs(a), std::abs(numeric));
        result.max_abs_grad = std::max(result.max_abs_grad, std::abs(a));
        if (mag < 1e-8) {
            result.max_abs_err = std::max(result.max_abs_err, std::abs(a - numeric));
        } else {
            result.max_rel_err = std::max(result.max_rel_err, std::abs(a - numeric) / mag);
        }
        ++result.entries_checked;
    }

    result.pass = result.max_rel_err < result.tolerance && result.max_abs_err < 1e-7;
    return result;
}

/// The bundled verification scene: a 3-joint chain with per-frame
/// orientations, 13 primitives, 3 frames at 32x32. Learnable parameters are
/// jittered off their symmetric initialization (isotropic scales make the
/// canonical-orientation direction exactly flat) and the colormap range is
/// pinned so the percentile bounds cannot shift under perturbation.
inline GradCheckScene make_gradcheck_scene(uint64_t seed = 7) {
    Rng rng(seed);

    Topology topo;
    topo.format_tag = FormatTag::kCustom;
    topo.num_joints = 3;
    topo.edges = {{0, 1}, {1, 2}};
    topo.has_orientations = true;
    topo.validate();

    SkeletonSequence seq;
    seq.topology = topo;
    seq.num_frames = 3;
    seq.num_persons = 1;
    const Vec3d base[3] = {{-0.35, -0.3, 2.2}, {0.0, 0.1, 2.5}, {0.4, 0.45, 2.9}};
    for (int t = 0; t < 3; ++t) {
        for (int j = 0; j < 3; ++j) {
            Vec3d pos = base[j];
            pos.x() += 0.11 * t * (j + 1) + 0.02 * rng.normal();
            pos.y() += 0.07 * t * (3 - j) + 0.02 * rng.normal();
            pos.z() += 0.015 * t + 0.01 * rng.normal();
            seq.positions.push_back(pos);
        }
    }
    for (int t = 0; t < 3; ++t) {
        for (int j = 0; j < 3; ++j) {
            const double angle = 0.25 * t + 0.2 * j + 0.05 * rng.normal();
            Vec3d axis(rng.normal(), rng.normal(), rng.normal());
            axis.normalize();
            seq.orientations.emplace_back(std::cos(angle / 2),
                                          std::sin(angle / 2) * axis.x(),
                                          std::sin(angle / 2) * axis.y(),
                                          std::sin(angle / 2) * axis.z());
        }
    }
    seq.validate();

    GradCheckScene scene;
    scene.batch = sample_frames(seq, 3);

    ScaleParams sp;
    sp.s_base_joint = 0.09;
    sp.s_max_joint = 0.15;
    sp.s_base_bone = 0.06;
    sp.s_max_bone = 0.12;
    scene.model = make_render_model<double>(topo,
                                            detail::gather_canonical(scene.batch, 0),
                                            5, 8, seed + 1);

    // Regenerate scales with the wider bounds, then jitter every learnable
    // family off its symmetric start.
    auto scales = adaptive_scales<double>(topo, detail::gather_canonical(scene.batch, 0),
                                          scene.model.canon.bindings, sp);
    const int K = scene.model.canon.primitive_count();
    for (int k = 0; k < K; ++k) {
        for (int a = 0; a < 3; ++a) {
            scene.model.canon.log_scales[k](a) =
                std::log(scales[k](a)) + 0.25 * rng.normal();
        }
        Vec4<double>& q = scene.model.canon.orientations[k];
        for (int a = 0; a < 4; ++a) {
            q(a) += 0.2 * rng.normal();
        }
        q.normalize();
        scene.model.canon.opacity_logits[k] = 0.3 * rng.normal();
    }
    scene.model.theta_mix = 0.4;

    scene.context.camera = Camera<double>::from_fov(32, 32, deg_to_rad(60.0),
                                                    deg_to_rad(60.0));
    scene.context.options.sigma_cutoff = 50.0; // keep the support smooth
    scene.context.fixed_colormap = ColormapRange<double>{2.0, 3.2};

    Rng mask_rng(seed + 2);
    scene.mask.resize(3);
    for (int t = 0; t < 3; ++t) {
        scene.mask[t].assign(32 * 32 * 3, 0.0);
        for (int pix = 0; pix < 32 * 32; ++pix) {
            if (mask_rng.uniform() < 0.5) {
                for (int c = 0; c < 3; ++c) {
                    scene.mask[t][pix * 3 + c] = 1.0;
                }
            }
        }
    }
    return scene;
}

} // namespace draction
