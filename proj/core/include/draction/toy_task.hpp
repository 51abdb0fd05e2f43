// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "draction/gradients.hpp"
#include "draction/optimizer.hpp"
#include "draction/pipeline.hpp"
#include "draction/random.hpp"
#include "draction/sequence.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace draction {

struct LabeledSequence {
    SkeletonSequence sequence;
    int label = 0;
};

/// Two synthetic action classes on a 5-joint stick figure: class 0 raises
/// the arm chain, class 1 swings a leg forward. Per-sequence pose and
/// timing jitter keeps the clips distinct but analytically separable.
inline std::vector<LabeledSequence> make_toy_dataset(int per_class = 10,
                                                     uint64_t seed = 0) {
    Topology topo;
    topo.format_tag = FormatTag::kCustom;
    topo.num_joints = 5;
    topo.edges = {{0, 1}, {1, 2}, {0, 3}, {0, 4}};
    topo.has_orientations = false;
    topo.validate();

    Rng rng(seed);
    std::vector<LabeledSequence> dataset;
    const int raw_frames = 24;
    for (int label = 0; label < 2; ++label) {
        for (int i = 0; i < per_class; ++i) {
            SkeletonSequence seq;
            seq.topology = topo;
            seq.num_frames = raw_frames;
            seq.num_persons = 1;
            seq.fps = 30.0;

            Vec3d base[5] = {{0.0, -0.1, 2.6},
                             {0.0, 0.45, 2.6},
                             {0.5, 0.3, 2.6},
                             {-0.22, -0.85, 2.6},
                             {0.22, -0.85, 2.6}};
            for (auto& b : base) {
                b += Vec3d(rng.normal(0.0, 0.02), rng.normal(0.0, 0.02),
                           rng.normal(0.0, 0.01));
            }
            const double phase = rng.uniform(-0.08, 0.08);
            const double speed = 1.0 + rng.uniform(-0.15, 0.15);

            for (int t = 0; t < raw_frames; ++t) {
                const double s =
                    std::clamp(speed * t / (raw_frames - 1.0) + phase, 0.0, 1.0);
                Vec3d joints[5] = {base[0], base[1], base[2], base[3], base[4]};
                if (label == 0) {
                    // Arm sweeps from just below horizontal to overhead.
                    const double theta = (-20.0 + 115.0 * s) * 3.14159265358979 / 180.0;
                    joints[2] = base[1] + 0.55 * Vec3d(std::cos(theta), std::sin(theta), 0.0);
                } else {
                    // Leg kicks forward and up.
                    const double phi = (5.0 + 75.0 * s) * 3.14159265358979 / 180.0;
                    joints[3] = base[0] + 0.8 * Vec3d(std::sin(phi), -std::cos(phi), 0.0);
                }
                for (int j = 0; j < 5; ++j) {
                    seq.positions.push_back(joints[j]);
                }
            }
            seq.validate();
            dataset.push_back({std::move(seq), label});
        }
    }
    return dataset;
}

struct ToyTaskConfig {
    int epochs = 30;
    int frames = 8;
    int resolution = 64;
    int pool_cells = 8; // pooling grid per side
    double lr_renderer = 2e-3;
    double lr_head = 5e-2;
    bool freeze_head = false; // stage-1 analogue: only the renderer learns
    uint64_t seed = 0;
    int n_samples = 3;
    int feature_dim = 16;
};

struct ToyEpoch {
    int epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
    std::map<std::string, double> grad_inf_norms;
};

struct ToyReport {
    std::vector<ToyEpoch> epochs;
    bool diverged = false;
    int diverged_epoch = -1;
    int num_classes = 0;
    double final_accuracy = 0.0;
};

namespace detail {

inline std::string topology_key(const Topology& t) {
    std::string key = std::to_string(t.num_joints);
    for (const auto& [a, b] : t.edges) {
        key += ":" + std::to_string(a) + "-" + std::to_string(b);
    }
    return key;
}

/// Mean-pools each frame into a pool_cells x pool_cells grid of RGB means.
inline void pool_features(const std::vector<RenderedFrame<double>>& frames,
                          int pool_cells, std::vector<double>& out) {
    out.clear();
    for (const auto& frame : frames) {
        const int cell_w = frame.width / pool_cells;
        const int cell_h = frame.height / pool_cells;
        for (int cy = 0; cy < pool_cells; ++cy) {
            for (int cx = 0; cx < pool_cells; ++cx) {
                double acc[3] = {0, 0, 0};
                for (int y = cy * cell_h; y < (cy + 1) * cell_h; ++y) {
                    for (int x = cx * cell_w; x < (cx + 1) * cell_w; ++x) {
                        const size_t i = frame.pixel_index(x, y) * 3;
                        acc[0] += frame.rgb[i];
                        acc[1] += frame.rgb[i + 1];
                        acc[2] += frame.rgb[i + 2];
                    }
                }
                const double inv = 1.0 / (cell_w * cell_h);
                out.push_back(acc[0] * inv);
                out.push_back(acc[1] * inv);
                out.push_back(acc[2] * inv);
            }
        }
    }
}

/// Spreads pooled-feature gradients back over the pixels of each cell.
inline void unpool_gradients(const std::vector<double>& d_features, int num_frames,
                             int resolution, int pool_cells,
                             std::vector<std::vector<double>>& d_images) {
    const int cell = resolution / pool_cells;
    const double inv = 1.0 / (cell * cell);
    d_images.assign(num_frames,
                    std::vector<double>(static_cast<size_t>(resolution) * resolution * 3, 0.0));
    size_t f = 0;
    for (int t = 0; t < num_frames; ++t) {
        for (int cy = 0; cy < pool_cells; ++cy) {
            for (int cx = 0; cx < pool_cells; ++cx) {
                const double g[3] = {d_features[f] * inv, d_features[f + 1] * inv,
                                     d_features[f + 2] * inv};
                f += 3;
                for (int y = cy * cell; y < (cy + 1) * cell; ++y) {
                    for (int x = cx * cell; x < (cx + 1) * cell; ++x) {
                        const size_t i = (static_cast<size_t>(y) * resolution + x) * 3;
                        d_images[t][i] += g[0];
                        d_images[t][i + 1] += g[1];
                        d_images[t][i + 2] += g[2];
                    }
                }
            }
        }
    }
}

template <typename T>
double family_inf_norm(const ParameterGradients<T>& g, const std::string& family) {
    double m = 0.0;
    if (family == "features") {
        m = g.d_features.cwiseAbs().maxCoeff();
    } else if (family == "log_scales") {
        for (const auto& v : g.d_log_scales) {
            m = std::max(m, static_cast<double>(v.cwiseAbs().maxCoeff()));
        }
    } else if (family == "quat_c") {
        for (const auto& v : g.d_quat_c) {
            m = std::max(m, static_cast<double>(v.cwiseAbs().maxCoeff()));
        }
    } else if (family == "alpha_c") {
        m = g.d_alpha_c.cwiseAbs().maxCoeff();
    } else if (family == "theta_mix") {
        m = std::abs(g.d_theta_mix);
    } else if (family == "modulator") {
        g.d_modulator.for_each_tensor([&](const char*, const auto& t) {
            if (t.size() > 0) {
                m = std::max(m, static_cast<double>(t.cwiseAbs().maxCoeff()));
            }
        });
    }
    return m;
}

} // namespace detail

/// Renders every sequence at low resolution, mean-pools the pixels into a
/// linear softmax head and jointly optimizes renderer and head (full-batch
/// AdamW, one step per epoch). With `freeze_head` only renderer parameters
/// move, mirroring a frozen downstream consumer.
inline ToyReport fit_toy_task(const std::vector<LabeledSequence>& dataset,
                              const ToyTaskConfig& config) {
    if (dataset.empty()) {
        throw ValidationError("toy task needs at least one sequence");
    }
    int num_classes = 0;
    for (const auto& item : dataset) {
        num_classes = std::max(num_classes, item.label + 1);
    }

    RenderContext<double> ctx;
    ctx.camera = Camera<double>::from_fov(config.resolution, config.resolution,
                                          deg_to_rad(60.0), deg_to_rad(60.0));

    // Sampled batches are fixed across epochs.
    struct Prepared {
        FrameBatch batch;
        int label;
        int model_index;
    };
    std::vector<Prepared> prepared;
    std::vector<RenderModel<double>> models;
    std::vector<AdamWState<double>> states;
    std::map<std::string, size_t> model_of_topology;

    for (const auto& item : dataset) {
        FrameBatch batch = normalize_depth(
            sample_frames(item.sequence, config.frames, SamplingMode::kDeterministic));
        const std::string key = detail::topology_key(item.sequence.topology);
        auto it = model_of_topology.find(key);
        size_t index;
        if (it == model_of_topology.end()) {
            index = models.size();
            model_of_topology.emplace(key, index);
            models.push_back(make_render_model<double>(
                item.sequence.topology, detail::gather_canonical(batch, 0),
                config.n_samples, config.feature_dim, config.seed));
            states.push_back(make_adamw_state(models.back()));
        } else {
            index = it->second;
        }
        prepared.push_back({std::move(batch), item.label, static_cast<int>(index)});
    }

    const int cells = config.pool_cells;
    const int feat_dim = config.frames * cells * cells * 3;
    Rng head_rng(config.seed + 77);
    MatX<double> head_w(num_classes, feat_dim);
    VecX<double> head_b = VecX<double>::Zero(num_classes);
    for (int r = 0; r < num_classes; ++r) {
        for (int c = 0; c < feat_dim; ++c) {
            head_w(r, c) = head_rng.normal(0.0, 0.05);
        }
    }
    MatX<double> head_w_m = MatX<double>::Zero(num_classes, feat_dim);
    MatX<double> head_w_v = MatX<double>::Zero(num_classes, feat_dim);
    VecX<double> head_b_m = VecX<double>::Zero(num_classes);
    VecX<double> head_b_v = VecX<double>::Zero(num_classes);
    int64_t head_step = 0;

    AdamWConfig<double> render_cfg;
    render_cfg.lr = config.lr_renderer;
    render_cfg.weight_decay = 0.0;
    AdamWConfig<double> head_cfg;
    head_cfg.lr = config.lr_head;
    head_cfg.weight_decay = 0.0;

    ToyReport report;
    report.num_classes = num_classes;

    std::vector<double> feat;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<ParameterGradients<double>> grads;
        grads.reserve(models.size());
        for (const auto& model : models) {
            grads.push_back(make_zero_gradients(model));
        }
        MatX<double> d_head_w = MatX<double>::Zero(num_classes, feat_dim);
        VecX<double> d_head_b = VecX<double>::Zero(num_classes);

        double loss_sum = 0.0;
        int correct = 0;
        const double inv_n = 1.0 / static_cast<double>(prepared.size());

        for (const auto& item : prepared) {
            const RenderModel<double>& model = models[item.model_index];
            auto render = render_sequence(model, item.batch, ctx, true);
            detail::pool_features(render.frames, cells, feat);

            VecX<double> logits = head_b;
            for (int c = 0; c < num_classes; ++c) {
                for (int f = 0; f < feat_dim; ++f) {
                    logits(c) += head_w(c, f) * feat[f];
                }
            }
            VecX<double> probs = logits;
            const double m = probs.maxCoeff();
            probs = (probs.array() - m).exp();
            probs /= probs.sum();
            loss_sum += -std::log(std::max(probs(item.label), 1e-300));
            int arg = 0;
            probs.maxCoeff(&arg);
            correct += (arg == item.label) ? 1 : 0;

            VecX<double> d_logits = probs;
            d_logits(item.label) -= 1.0;
            d_logits *= inv_n;

            if (!config.freeze_head) {
                for (int c = 0; c < num_classes; ++c) {
                    for (int f = 0; f < feat_dim; ++f) {
                        d_head_w(c, f) += d_logits(c) * feat[f];
                    }
                }
                d_head_b += d_logits;
            }

            std::vector<double> d_feat(feat_dim, 0.0);
            for (int f = 0; f < feat_dim; ++f) {
                for (int c = 0; c < num_classes; ++c) {
                    d_feat[f] += head_w(c, f) * d_logits(c);
                }
            }
            std::vector<std::vector<double>> d_images;
            detail::unpool_gradients(d_feat, config.frames, config.resolution, cells,
                                     d_images);
            ParameterGradients<double> g = backward(model, *render.tape, item.batch,
                                                    d_images, ctx);
            accumulate(grads[item.model_index], g);
        }

        const double mean_loss = loss_sum * inv_n;
        ToyEpoch record;
        record.epoch = epoch;
        record.loss = mean_loss;
        record.accuracy = static_cast<double>(correct) / prepared.size();
        for (const char* fam :
             {"features", "log_scales", "quat_c", "alpha_c", "theta_mix", "modulator"}) {
            double m = 0.0;
            for (const auto& g : grads) {
                m = std::max(m, detail::family_inf_norm(g, fam));
            }
            record.grad_inf_norms[fam] = m;
        }
        record.grad_inf_norms["head"] =
            config.freeze_head ? 0.0
                               : std::max(d_head_w.cwiseAbs().maxCoeff(),
                                          d_head_b.cwiseAbs().maxCoeff());
        report.epochs.push_back(record);
        report.final_accuracy = record.accuracy;

        if (!std::isfinite(mean_loss)) {
            report.diverged = true;
            report.diverged_epoch = epoch;
            break;
        }

        for (size_t i = 0; i < models.size(); ++i) {
            apply_update(models[i], grads[i], states[i], render_cfg);
        }
        if (!config.freeze_head) {
            ++head_step;
            detail::adamw_span(head_w.data(), d_head_w.data(), head_w_m.data(),
                               head_w_v.data(), static_cast<size_t>(head_w.size()),
                               head_step, head_cfg, false);
            detail::adamw_span(head_b.data(), d_head_b.data(), head_b_m.data(),
                               head_b_v.data(), static_cast<size_t>(head_b.size()),
                               head_step, head_cfg, false);
        }
    }
    return report;
}

} // namespace draction
