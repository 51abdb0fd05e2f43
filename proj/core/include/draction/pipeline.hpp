// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "draction/camera.hpp"
#include "draction/canonical.hpp"
#include "draction/kinematics.hpp"
#include "draction/modulator.hpp"
#include "draction/rasterizer.hpp"
#include "draction/sequence.hpp"

#include <memory>
#include <optional>
#include <vector>

namespace draction {

/// Learnable renderer state for one topology. Canonical centers are
/// re-derived per sequence and person; everything here is shared.
template <typename T>
struct RenderModel {
    CanonicalGaussianSet<T> canon;
    ModulatorParams<T> modulator;
    T theta_mix = T(0);
};

template <typename T>
RenderModel<T> make_render_model(const Topology& topology,
                                 const std::vector<Vec3d>& canonical_joints,
                                 int n_samples, int feature_dim, uint64_t seed,
                                 const ScaleParams& scale_params = {}) {
    RenderModel<T> model;
    model.canon = instantiate_canonical<T>(topology, canonical_joints, n_samples,
                                           feature_dim, seed, scale_params);
    model.modulator = make_modulator<T>(feature_dim, seed + 1);
    model.theta_mix = T(0);
    return model;
}

/// Camera, raster options and the colormap policy for one render call.
/// When `fixed_colormap` is set it overrides the per-frame percentile range;
/// the gradient checker uses this to keep the range an explicit constant.
template <typename T>
struct RenderContext {
    Camera<T> camera;
    RenderOptions<T> options;
    std::optional<ColormapRange<T>> fixed_colormap;
    T colormap_lo_quantile = T(0.05);
    T colormap_hi_quantile = T(0.95);
    T colormap_min_span = T(0.1);
};

/// Forward intermediates of one frame, enough to replay the exact adjoint.
/// Per-primitive arrays span all persons (person-major, K slots each).
template <typename T>
struct FrameTape {
    std::vector<JointTransforms<T>> transforms; // per person
    std::vector<Vec3<T>> blend_translations;    // K_total
    std::vector<Mat3<T>> blend_raw;             // pre-projection blended rotations
    std::vector<Svd3<T>> svd;                   // empty in translation-only mode
    std::vector<Mat3<T>> blend_rotations;       // projected
    std::vector<Mat3<T>> rot_canon;             // quat2mat(q_c), per slot replica
    std::vector<Mat3<T>> rot_total;
    std::vector<Vec3<T>> means;                 // world space
    std::vector<Mat3<T>> covariances;           // world space
    std::vector<Vec3<T>> agg_positions;         // p_k
    std::vector<Vec3<T>> agg_velocities;        // v_k
    GruTrace<T> gru;
    MlpTrace<T> mlp;
    MatX<T> color_learned;  // K_total x 3
    VecX<T> alpha_learned;  // K_total
    ColormapRange<T> colormap;
    VecX<T> depth_cam;      // camera-space z per primitive
    MatX<T> color_depth;    // K_total x 3
    MatX<T> color_final;    // K_total x 3
    std::vector<int> included;              // splat -> primitive index
    std::vector<SplatPrimitive<T>> splats;  // in `included` order
    std::vector<int> order;                 // depth order over splats
    FragmentLists fragments;
    std::vector<T> final_trans;             // per pixel
};

template <typename T>
struct SequenceTape {
    int num_frames = 0;
    int num_persons = 0;
    int slots = 0; // primitives per person
    bool translation_only = true;
    int width = 0, height = 0;
    std::vector<Vec3<T>> centers; // K_total canonical centers
    MatX<T> base;                 // slots x 4 appearance base
    std::vector<FrameTape<T>> frames;
};

template <typename T>
struct SequenceRender {
    std::vector<RenderedFrame<T>> frames;
    std::unique_ptr<SequenceTape<T>> tape;
};

namespace detail {

inline std::vector<Vec3d> gather_joints(const FrameBatch& batch, int t, int p) {
    std::vector<Vec3d> out(batch.topology.num_joints);
    for (int j = 0; j < batch.topology.num_joints; ++j) {
        out[j] = batch.joint(t, p, j);
    }
    return out;
}

inline std::vector<Vec3d> gather_canonical(const FrameBatch& batch, int p) {
    std::vector<Vec3d> out(batch.topology.num_joints);
    for (int j = 0; j < batch.topology.num_joints; ++j) {
        out[j] = batch.canonical_joint(p, j);
    }
    return out;
}

inline std::vector<Quatd> gather_rotations(const FrameBatch& batch, int t, int p) {
    std::vector<Quatd> out(batch.topology.num_joints);
    for (int j = 0; j < batch.topology.num_joints; ++j) {
        out[j] = batch.rotation(t, p, j);
    }
    return out;
}

} // namespace detail

/// Renders every frame of a sampled batch. With `build_tape` the forward
/// keeps all intermediates (and uses the fragment-list compositor, which is
/// arithmetically identical to the streaming one).
template <typename T>
SequenceRender<T> render_sequence(const RenderModel<T>& model, const FrameBatch& batch,
                                  const RenderContext<T>& ctx, bool build_tape = false) {
    const CanonicalGaussianSet<T>& canon = model.canon;
    if (batch.topology.num_joints != canon.topology.num_joints) {
        throw ValidationError("batch topology does not match the model");
    }
    const int P = batch.num_persons;
    const int K = canon.primitive_count();
    const int total = P * K;
    const int J = batch.topology.num_joints;
    const bool use_rotations = batch.has_rotations();

    SequenceRender<T> result;
    auto tape = std::make_unique<SequenceTape<T>>();
    tape->num_frames = batch.num_frames;
    tape->num_persons = P;
    tape->slots = K;
    tape->translation_only = !use_rotations;
    tape->width = ctx.camera.width;
    tape->height = ctx.camera.height;

    // Canonical centers per person.
    tape->centers.resize(total);
    for (int p = 0; p < P; ++p) {
        auto centers = compute_centers<T>(canon.bindings, detail::gather_canonical(batch, p));
        std::copy(centers.begin(), centers.end(), tape->centers.begin() + p * K);
    }

    tape->base = appearance_base(model.modulator, canon.features);

    // Replicated slot data across persons.
    MatX<T> base_total(total, 4);
    std::vector<T> alpha_logits_total(total);
    for (int p = 0; p < P; ++p) {
        base_total.block(p * K, 0, K, 4) = tape->base;
        for (int k = 0; k < K; ++k) {
            alpha_logits_total[p * K + k] = canon.opacity_logits[k];
        }
    }

    MatX<T> hidden = MatX<T>::Zero(total, ModulatorParams<T>::kHiddenSize);
    std::vector<Mat3<T>> rot_canon(K);
    for (int k = 0; k < K; ++k) {
        rot_canon[k] = quat_to_mat(canon.orientations[k]);
    }

    for (int t = 0; t < batch.num_frames; ++t) {
        FrameTape<T> ft;
        ft.blend_translations.resize(total);
        ft.blend_raw.resize(total);
        ft.blend_rotations.resize(total);
        if (use_rotations) {
            ft.svd.resize(total);
        }
        ft.rot_canon.resize(total);
        ft.rot_total.resize(total);
        ft.means.resize(total);
        ft.covariances.resize(total);
        ft.agg_positions.resize(total);
        ft.agg_velocities.resize(total);
        ft.transforms.resize(P);

        for (int p = 0; p < P; ++p) {
            const auto joints = detail::gather_joints(batch, t, p);
            const auto canonical = detail::gather_canonical(batch, p);
            std::vector<Quatd> quats;
            if (use_rotations) {
                quats = detail::gather_rotations(batch, t, p);
            }
            ft.transforms[p] = joint_transforms<T>(joints, canonical,
                                                   use_rotations ? &quats : nullptr);

            std::vector<Vec3<T>> bt;
            std::vector<Mat3<T>> br;
            blend_sparse(canon.sparse_weights, ft.transforms[p], bt, br);

            std::vector<Vec3<T>> jointsT(J), velsT(J);
            for (int j = 0; j < J; ++j) {
                jointsT[j] = batch.joint(t, p, j).cast<T>();
                velsT[j] = batch.velocity(t, p, j).cast<T>();
            }
            std::vector<Vec3<T>> aggp, aggv;
            aggregate_kinematics(canon.sparse_weights, jointsT, velsT, aggp, aggv);

            for (int k = 0; k < K; ++k) {
                const int slot = p * K + k;
                ft.blend_translations[slot] = bt[k];
                ft.blend_raw[slot] = br[k];
                if (use_rotations) {
                    ft.svd[slot] = svd3(br[k]);
                    ft.blend_rotations[slot] = project_so3(ft.svd[slot]);
                } else {
                    ft.blend_rotations[slot] = Mat3<T>::Identity();
                }
                ft.rot_canon[slot] = rot_canon[k];
                ft.rot_total[slot] = ft.blend_rotations[slot] * rot_canon[k];
                const Vec3<T> s2 = (T(2) * canon.log_scales[k].array()).exp();
                ft.covariances[slot] =
                    ft.rot_total[slot] * s2.asDiagonal() * ft.rot_total[slot].transpose();
                ft.means[slot] =
                    ft.blend_rotations[slot] * tape->centers[slot] + bt[k];
                ft.agg_positions[slot] = aggp[k];
                ft.agg_velocities[slot] = aggv[k];
            }
        }

        // Modulator: base appearance -> GRU -> residual head -> modulation.
        MatX<T> x(total, ModulatorParams<T>::kInputSize);
        for (int s = 0; s < total; ++s) {
            x(s, 0) = ft.agg_positions[s](0);
            x(s, 1) = ft.agg_positions[s](1);
            x(s, 2) = ft.agg_positions[s](2);
            x(s, 3) = ft.agg_velocities[s](0);
            x(s, 4) = ft.agg_velocities[s](1);
            x(s, 5) = ft.agg_velocities[s](2);
            x(s, 6) = base_total(s, 0);
            x(s, 7) = base_total(s, 1);
            x(s, 8) = base_total(s, 2);
            x(s, 9) = base_total(s, 3);
        }
        ft.gru = gru_step(model.modulator, x, hidden);
        hidden = ft.gru.h_out;
        ft.mlp = residual_head(model.modulator, ft.gru.h_out);
        modulate(base_total, ft.mlp.residuals, alpha_logits_total, ft.color_learned,
                 ft.alpha_learned);

        // Depth colormap over camera-space depths.
        ft.depth_cam.resize(total);
        for (int s = 0; s < total; ++s) {
            Vec3<T> cam = ft.means[s];
            if (!ctx.camera.identity_extrinsics()) {
                cam = ctx.camera.extrinsics_rotation * cam + ctx.camera.extrinsics_translation;
            }
            ft.depth_cam(s) = cam.z();
        }
        if (ctx.fixed_colormap) {
            ft.colormap = *ctx.fixed_colormap;
        } else {
            std::vector<T> depths(ft.depth_cam.data(), ft.depth_cam.data() + total);
            ft.colormap = colormap_range_from_depths(std::move(depths),
                                                     ctx.colormap_lo_quantile,
                                                     ctx.colormap_hi_quantile,
                                                     ctx.colormap_min_span);
        }
        ft.color_depth.resize(total, 3);
        ft.color_final.resize(total, 3);
        const T lambda = sigmoid(model.theta_mix);
        for (int s = 0; s < total; ++s) {
            const Vec3<T> cd = depth_colormap(ft.depth_cam(s), ft.colormap.z_near,
                                              ft.colormap.z_far);
            ft.color_depth.row(s) = cd.transpose();
            for (int c = 0; c < 3; ++c) {
                ft.color_final(s, c) =
                    (T(1) - lambda) * ft.color_learned(s, c) + lambda * cd(c);
            }
        }

        // Project, cull, composite.
        ft.splats.reserve(total);
        for (int s = 0; s < total; ++s) {
            const auto proj = project_gaussian(ft.means[s], ft.covariances[s],
                                               ctx.camera, ctx.options.z_clip);
            if (!proj) {
                continue;
            }
            ft.included.push_back(s);
            ft.splats.push_back(make_splat(*proj,
                                           Vec3<T>(ft.color_final(s, 0),
                                                   ft.color_final(s, 1),
                                                   ft.color_final(s, 2)),
                                           ft.alpha_learned(s), ctx.camera.width,
                                           ctx.camera.height, ctx.options));
        }
        ft.order = depth_order(ft.splats);

        if (build_tape) {
            ft.fragments = build_fragments(ft.splats, ft.order, ctx.camera.width,
                                           ctx.camera.height, ctx.options);
            RenderedFrame<T> frame = composite_fragments(ft.splats, ft.fragments,
                                                         ctx.camera.width,
                                                         ctx.camera.height, ctx.options,
                                                         &ft.final_trans);
            result.frames.push_back(std::move(frame));
            tape->frames.push_back(std::move(ft));
        } else {
            result.frames.push_back(composite(ft.splats, ctx.camera.width,
                                              ctx.camera.height, ctx.options));
        }
    }

    if (build_tape) {
        result.tape = std::move(tape);
    }
    return result;
}

} // namespace draction
