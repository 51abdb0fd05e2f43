// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "draction/pipeline.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace draction {

/// Gradient accumulator mirroring every learnable parameter family.
template <typename T>
struct ParameterGradients {
    MatX<T> d_features;                // K x d
    std::vector<Vec3<T>> d_log_scales; // K
    std::vector<Vec4<T>> d_quat_c;     // K
    VecX<T> d_alpha_c;                 // K
    ModulatorParams<T> d_modulator;
    T d_theta_mix = T(0);
};

template <typename T>
ParameterGradients<T> make_zero_gradients(const RenderModel<T>& model) {
    ParameterGradients<T> g;
    const int K = model.canon.primitive_count();
    g.d_features = MatX<T>::Zero(K, model.canon.feature_dim);
    g.d_log_scales.assign(K, Vec3<T>::Zero());
    g.d_quat_c.assign(K, Vec4<T>::Zero());
    g.d_alpha_c = VecX<T>::Zero(K);
    g.d_modulator = model.modulator;
    g.d_modulator.for_each_tensor([](const char*, auto& t) { t.setZero(); });
    g.d_theta_mix = T(0);
    return g;
}

template <typename T>
void accumulate(ParameterGradients<T>& into, const ParameterGradients<T>& from) {
    into.d_features += from.d_features;
    for (size_t k = 0; k < into.d_log_scales.size(); ++k) {
        into.d_log_scales[k] += from.d_log_scales[k];
        into.d_quat_c[k] += from.d_quat_c[k];
    }
    into.d_alpha_c += from.d_alpha_c;
    std::vector<const MatX<T>*> src_m;
    std::vector<const VecX<T>*> src_v;
    from.d_modulator.for_each_tensor([&](const char*, const auto& t) {
        using Tensor = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<Tensor, MatX<T>>) {
            src_m.push_back(&t);
        } else {
            src_v.push_back(&t);
        }
    });
    size_t im = 0, iv = 0;
    into.d_modulator.for_each_tensor([&](const char*, auto& t) {
        using Tensor = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<Tensor, MatX<T>>) {
            t += *src_m[im++];
        } else {
            t += *src_v[iv++];
        }
    });
    into.d_theta_mix += from.d_theta_mix;
}

/// Gradients with respect to the rendered inputs (joint positions fold in
/// the finite-difference velocity chain; canonical joints are treated as
/// constants). Rotations are raw quaternion gradients including the
/// normalization Jacobian.
template <typename T>
struct InputGradients {
    int num_frames = 0, num_persons = 0, num_joints = 0;
    std::vector<Vec3<T>> d_joints;
    std::vector<Vec4<T>> d_rotations; // empty in translation-only mode

    size_t index(int t, int p, int j) const {
        return (static_cast<size_t>(t) * num_persons + p) * num_joints + j;
    }
};

namespace detail {

template <typename T>
Mat3<T> skew_part(const Mat3<T>& m) {
    return (m - m.transpose()) / T(2);
}

/// d(quat_to_mat(q / |q|)) adjoint: contracts d_rot against the partials at
/// the normalized quaternion, then projects through the normalization.
template <typename T>
Vec4<T> quat_rotation_backward(const Vec4<T>& q_raw, const Mat3<T>& d_rot) {
    const T norm = q_raw.norm();
    const Vec4<T> q = q_raw / norm;
    const T w = q(0), x = q(1), y = q(2), z = q(3);

    Mat3<T> dw, dx, dy, dz;
    dw << T(0), -z, y, z, T(0), -x, -y, x, T(0);
    dx << T(0), y, z, y, T(-2) * x, -w, z, w, T(-2) * x;
    dy << T(-2) * y, x, w, x, T(0), z, -w, z, T(-2) * y;
    dz << T(-2) * z, -w, x, w, T(-2) * z, y, x, y, T(0);

    Vec4<T> d_unit;
    d_unit(0) = T(2) * (d_rot.array() * dw.array()).sum();
    d_unit(1) = T(2) * (d_rot.array() * dx.array()).sum();
    d_unit(2) = T(2) * (d_rot.array() * dy.array()).sum();
    d_unit(3) = T(2) * (d_rot.array() * dz.array()).sum();

    return (d_unit - q * q.dot(d_unit)) / norm;
}

/// Orthogonal-Procrustes differential: adjoint of the SO(3) polar
/// projection expressed in the proper-SVD factors. Near-coincident
/// denominators are floored sign-preservingly.
template <typename T>
Mat3<T> project_so3_backward(const Svd3<T>& f, const Mat3<T>& r, const Mat3<T>& d_r) {
    const Vec3<T> lambda = f.sigma; // (s0, s1, signed s2)
    const Mat3<T> g = f.v.transpose() * skew_part<T>(r.transpose() * d_r) * f.v;
    Mat3<T> h = Mat3<T>::Zero();
    for (int i = 0; i < 3; ++i) {
        for (int j = i + 1; j < 3; ++j) {
            T denom = lambda(i) + lambda(j);
            const T floor = T(1e-6);
            if (std::abs(denom) < floor) {
                denom = denom >= T(0) ? floor : -floor;
            }
            h(i, j) = T(2) * g(i, j) / denom;
            h(j, i) = -h(i, j);
        }
    }
    return f.u * h * f.v.transpose();
}

} // namespace detail

/// Exact adjoint of one taped sequence render. `d_images` holds one
/// upstream gradient image (H*W*3) per frame. Pass `input_grads` to also
/// collect gradients w.r.t. joint positions and orientations; `batch` must
/// then be the batch the tape was recorded from (raw quaternions are needed
/// for the orientation adjoint).
template <typename T>
ParameterGradients<T> backward(const RenderModel<T>& model, const SequenceTape<T>& tape,
                               const FrameBatch& batch,
                               const std::vector<std::vector<T>>& d_images,
                               const RenderContext<T>& ctx,
                               InputGradients<T>* input_grads = nullptr) {
    const int K = tape.slots;
    const int P = tape.num_persons;
    const int total = P * K;
    const int J = model.canon.topology.num_joints;
    const int width = tape.width;
    const int height = tape.height;

    if (static_cast<int>(d_images.size()) != tape.num_frames) {
        throw ValidationError("upstream gradient count does not match tape frames");
    }
    for (const auto& img : d_images) {
        if (img.size() != static_cast<size_t>(width) * height * 3) {
            throw ValidationError("upstream gradient image has wrong shape");
        }
    }

    ParameterGradients<T> grads = make_zero_gradients(model);
    if (input_grads != nullptr) {
        input_grads->num_frames = tape.num_frames;
        input_grads->num_persons = P;
        input_grads->num_joints = J;
        input_grads->d_joints.assign(static_cast<size_t>(tape.num_frames) * P * J,
                                     Vec3<T>::Zero());
        if (!tape.translation_only) {
            input_grads->d_rotations.assign(input_grads->d_joints.size(),
                                            Vec4<T>::Zero());
        }
    }

    const T lambda = sigmoid(model.theta_mix);
    MatX<T> d_hidden = MatX<T>::Zero(total, ModulatorParams<T>::kHiddenSize);
    MatX<T> d_base_total = MatX<T>::Zero(total, 4);

    for (int t = tape.num_frames - 1; t >= 0; --t) {
        const FrameTape<T>& ft = tape.frames[t];
        const std::vector<T>& d_img = d_images[t];
        const int num_splats = static_cast<int>(ft.splats.size());

        // ---- compositing adjoint (per pixel, back to front) ----
        std::vector<Vec3<T>> d_color_splat(num_splats, Vec3<T>::Zero());
        std::vector<T> d_opacity_splat(num_splats, T(0));
        std::vector<Vec2<T>> d_mean2d(num_splats, Vec2<T>::Zero());
        std::vector<Mat2<T>> d_conic(num_splats, Mat2<T>::Zero());

        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                const size_t pix = static_cast<size_t>(y) * width + x;
                const Vec3<T> di(d_img[pix * 3], d_img[pix * 3 + 1], d_img[pix * 3 + 2]);
                const uint32_t f_begin = ft.fragments.offsets[pix];
                const uint32_t f_end = ft.fragments.offsets[pix + 1];
                if (f_begin == f_end || di.isZero(T(0))) {
                    continue;
                }
                T trans_run = ft.final_trans[pix];
                Vec3<T> suffix = ctx.options.background * trans_run;
                for (uint32_t f = f_end; f-- > f_begin;) {
                    const int si = static_cast<int>(ft.fragments.prims[f]);
                    const SplatPrimitive<T>& s = ft.splats[si];
                    const T dx = T(x) + T(0.5) - s.mean2d.x();
                    const T dy = T(y) + T(0.5) - s.mean2d.y();
                    const T q = s.conic(0, 0) * dx * dx +
                                (s.conic(0, 1) + s.conic(1, 0)) * dx * dy +
                                s.conic(1, 1) * dy * dy;
                    const T w = std::exp(-q / T(2));
                    const T decay = std::exp(-s.opacity * w); // 1 - alpha'
                    const T alpha_prime = T(1) - decay;
                    const T trans_before = trans_run / decay;
                    trans_run = trans_before;

                    const T contrib = alpha_prime * trans_before;
                    d_color_splat[si] += di * contrib;
                    const T d_alpha_prime =
                        di.dot(s.color * trans_before - suffix / decay);
                    suffix += s.color * contrib;

                    d_opacity_splat[si] += d_alpha_prime * w * decay;
                    const T dw = d_alpha_prime * s.opacity * decay;
                    const T dq = dw * (-w / T(2));
                    d_conic[si](0, 0) += dq * dx * dx;
                    d_conic[si](0, 1) += dq * dx * dy;
                    d_conic[si](1, 0) += dq * dx * dy;
                    d_conic[si](1, 1) += dq * dy * dy;
                    const T ddx = dq * (T(2) * s.conic(0, 0) * dx +
                                        (s.conic(0, 1) + s.conic(1, 0)) * dy);
                    const T ddy = dq * (T(2) * s.conic(1, 1) * dy +
                                        (s.conic(0, 1) + s.conic(1, 0)) * dx);
                    d_mean2d[si](0) -= ddx;
                    d_mean2d[si](1) -= ddy;
                }
            }
        }

        // ---- color blending, colormap, modulation ----
        MatX<T> d_residuals = MatX<T>::Zero(total, 5);
        VecX<T> d_depth = VecX<T>::Zero(total);
        std::vector<Vec3<T>> d_mean_world(total, Vec3<T>::Zero());
        std::vector<Mat3<T>> d_cov_world(total, Mat3<T>::Zero());

        for (int si = 0; si < num_splats; ++si) {
            const int slot = ft.included[si];
            const Vec3<T>& dc = d_color_splat[si];

            // blend_color adjoint
            const Vec3<T> c_learned = ft.color_learned.row(slot).transpose();
            const Vec3<T> c_depth = ft.color_depth.row(slot).transpose();
            grads.d_theta_mix +=
                sigmoid_derivative(lambda) * dc.dot(c_depth - c_learned);
            const Vec3<T> d_learned = (T(1) - lambda) * dc;
            const Vec3<T> d_cdepth = lambda * dc;

            // colormap adjoint: piecewise linear, zero at clip boundaries
            const T span = ft.colormap.z_far - ft.colormap.z_near;
            const T u = (ft.depth_cam(slot) - ft.colormap.z_near) / span;
            if (u > T(0) && u < T(1)) {
                T du = T(0);
                if (u < T(0.5)) {
                    du += d_cdepth(0) * T(-2); // red ramp down
                    du += d_cdepth(1) * T(2);  // green rising tent
                } else if (u > T(0.5)) {
                    du += d_cdepth(1) * T(-2); // green falling tent
                    du += d_cdepth(2) * T(2);  // blue ramp up
                }
                d_depth(slot) += du / span;
            }

            // modulate adjoint
            for (int c = 0; c < 3; ++c) {
                const T sig = ft.color_learned(slot, c);
                const T dpre = d_learned(c) * sigmoid_derivative(sig);
                d_base_total(slot, c) += dpre;
                d_residuals(slot, c) += dpre;
            }
            const int k = slot % K;
            const T a_pre = model.canon.opacity_logits[k] + ft.gru.x(slot, 9) +
                            ft.mlp.residuals(slot, 3);
            const T sa = sigmoid(a_pre);
            const T sg = sigmoid(ft.mlp.residuals(slot, 4));
            const T d_alpha_learned = d_opacity_splat[si];
            const T d_apre = d_alpha_learned * sg * sigmoid_derivative(sa);
            grads.d_alpha_c(k) += d_apre;
            d_base_total(slot, 3) += d_apre;
            d_residuals(slot, 3) += d_apre;
            d_residuals(slot, 4) += d_alpha_learned * sa * sigmoid_derivative(sg);
        }

        // ---- residual head adjoint ----
        {
            const MatX<T>& h_out = ft.gru.h_out;
            grads.d_modulator.w2 += d_residuals.transpose() * ft.mlp.hidden_act;
            grads.d_modulator.b2 += d_residuals.colwise().sum().transpose();
            MatX<T> d_h1 = d_residuals * model.modulator.w2;
            MatX<T> d_a1 =
                (d_h1.array() * (ft.mlp.hidden_act.array() > T(0)).template cast<T>())
                    .matrix();
            grads.d_modulator.w1 += d_a1.transpose() * h_out;
            grads.d_modulator.b1 += d_a1.colwise().sum().transpose();
            d_hidden += d_a1 * model.modulator.w1;
        }

        // ---- GRU adjoint (one step of backprop through time) ----
        MatX<T> d_x;
        {
            const GruTrace<T>& g = ft.gru;
            const MatX<T>& d_h = d_hidden;
            MatX<T> dz = (d_h.array() * (g.h_prev.array() - g.n.array())).matrix();
            MatX<T> dn = (d_h.array() * (T(1) - g.z.array())).matrix();
            MatX<T> d_hprev = (d_h.array() * g.z.array()).matrix();

            MatX<T> dn_pre = (dn.array() * (T(1) - g.n.array().square())).matrix();
            grads.d_modulator.w_in += dn_pre.transpose() * g.x;
            grads.d_modulator.b_in += dn_pre.colwise().sum().transpose();
            MatX<T> dr = (dn_pre.array() * g.nq.array()).matrix();
            MatX<T> dnq = (dn_pre.array() * g.r.array()).matrix();
            grads.d_modulator.w_hn += dnq.transpose() * g.h_prev;
            grads.d_modulator.b_hn += dnq.colwise().sum().transpose();
            d_hprev += dnq * model.modulator.w_hn;

            MatX<T> dz_pre =
                (dz.array() * g.z.array() * (T(1) - g.z.array())).matrix();
            grads.d_modulator.w_iz += dz_pre.transpose() * g.x;
            grads.d_modulator.w_hz += dz_pre.transpose() * g.h_prev;
            grads.d_modulator.b_iz += dz_pre.colwise().sum().transpose();
            grads.d_modulator.b_hz += dz_pre.colwise().sum().transpose();
            d_hprev += dz_pre * model.modulator.w_hz;

            MatX<T> dr_pre =
                (dr.array() * g.r.array() * (T(1) - g.r.array())).matrix();
            grads.d_modulator.w_ir += dr_pre.transpose() * g.x;
            grads.d_modulator.w_hr += dr_pre.transpose() * g.h_prev;
            grads.d_modulator.b_ir += dr_pre.colwise().sum().transpose();
            grads.d_modulator.b_hr += dr_pre.colwise().sum().transpose();
            d_hprev += dr_pre * model.modulator.w_hr;

            d_x = dz_pre * model.modulator.w_iz + dr_pre * model.modulator.w_ir +
                  dn_pre * model.modulator.w_in;
            d_hidden = std::move(d_hprev);
        }
        d_base_total += d_x.rightCols(4);

        // ---- aggregate kinematics adjoint (into input gradients) ----
        if (input_grads != nullptr) {
            for (int p = 0; p < P; ++p) {
                Vec3<T> bg_pos = Vec3<T>::Zero();
                Vec3<T> bg_vel = Vec3<T>::Zero();
                std::vector<Vec3<T>> dj(J, Vec3<T>::Zero());
                std::vector<Vec3<T>> dv(J, Vec3<T>::Zero());
                for (int k = 0; k < K; ++k) {
                    const int slot = p * K + k;
                    const SparseWeights<T>& w = model.canon.sparse_weights[k];
                    const Vec3<T> dp(d_x(slot, 0), d_x(slot, 1), d_x(slot, 2));
                    const Vec3<T> dvk(d_x(slot, 3), d_x(slot, 4), d_x(slot, 5));
                    bg_pos += w.w_bg * dp;
                    bg_vel += w.w_bg * dvk;
                    dj[w.idx_a] += (w.w_a - w.w_bg) * dp;
                    dv[w.idx_a] += (w.w_a - w.w_bg) * dvk;
                    if (w.idx_b >= 0) {
                        dj[w.idx_b] += (w.w_b - w.w_bg) * dp;
                        dv[w.idx_b] += (w.w_b - w.w_bg) * dvk;
                    }
                }
                for (int j = 0; j < J; ++j) {
                    const Vec3<T> djv = dj[j] + bg_pos;
                    const Vec3<T> dvv = dv[j] + bg_vel;
                    input_grads->d_joints[input_grads->index(t, p, j)] += djv;
                    if (t > 0) { // velocity = joints[t] - joints[t-1]
                        input_grads->d_joints[input_grads->index(t, p, j)] += dvv;
                        input_grads->d_joints[input_grads->index(t - 1, p, j)] -= dvv;
                    }
                }
            }
        }

        // ---- projection adjoint ----
        for (int si = 0; si < num_splats; ++si) {
            const int slot = ft.included[si];
            Vec3<T> mean_cam = ft.means[slot];
            Mat3<T> cov_cam = ft.covariances[slot];
            const bool general_extr = !ctx.camera.identity_extrinsics();
            if (general_extr) {
                mean_cam = ctx.camera.extrinsics_rotation * mean_cam +
                           ctx.camera.extrinsics_translation;
                cov_cam = ctx.camera.extrinsics_rotation * cov_cam *
                          ctx.camera.extrinsics_rotation.transpose();
            }
            const T fx = ctx.camera.fx(), fy = ctx.camera.fy();
            const T X = mean_cam.x(), Y = mean_cam.y(), Z = mean_cam.z();
            const T inv_z = T(1) / Z;

            // conic = inv(cov2d + eps I)
            const SplatPrimitive<T>& s = ft.splats[si];
            const Mat2<T> d_cov2d = -s.conic * d_conic[si] * s.conic;

            const Eigen::Matrix<T, 2, 3> jac = projection_jacobian(ctx.camera, mean_cam);
            const Eigen::Matrix<T, 2, 3> d_jac =
                (d_cov2d + d_cov2d.transpose()) * jac * cov_cam;
            Mat3<T> d_cov_cam = jac.transpose() * d_cov2d * jac;

            Vec3<T> d_cam = Vec3<T>::Zero();
            d_cam.x() += d_mean2d[si](0) * fx * inv_z;
            d_cam.y() += d_mean2d[si](1) * (-fy * inv_z);
            d_cam.z() += d_mean2d[si](0) * (-fx * X * inv_z * inv_z) +
                         d_mean2d[si](1) * (fy * Y * inv_z * inv_z);
            // Jacobian entries depend on the camera-space mean too.
            d_cam.x() += d_jac(0, 2) * (-fx * inv_z * inv_z);
            d_cam.y() += d_jac(1, 2) * (fy * inv_z * inv_z);
            d_cam.z() += d_jac(0, 0) * (-fx * inv_z * inv_z) +
                         d_jac(0, 2) * (T(2) * fx * X * inv_z * inv_z * inv_z) +
                         d_jac(1, 1) * (fy * inv_z * inv_z) +
                         d_jac(1, 2) * (T(-2) * fy * Y * inv_z * inv_z * inv_z);
            // Depth feeds the colormap.
            d_cam.z() += d_depth(slot);

            if (general_extr) {
                d_mean_world[slot] += ctx.camera.extrinsics_rotation.transpose() * d_cam;
                d_cov_world[slot] += ctx.camera.extrinsics_rotation.transpose() *
                                     d_cov_cam * ctx.camera.extrinsics_rotation;
            } else {
                d_mean_world[slot] += d_cam;
                d_cov_world[slot] += d_cov_cam;
            }
        }

        // ---- deformation, SO(3) projection and blending adjoints ----
        for (int p = 0; p < P; ++p) {
            Mat3<T> bg_rot = Mat3<T>::Zero();
            Vec3<T> bg_trans = Vec3<T>::Zero();
            std::vector<Mat3<T>> d_rot_joint(J, Mat3<T>::Zero());
            std::vector<Vec3<T>> d_trans_joint(J, Vec3<T>::Zero());
            const bool want_blend = input_grads != nullptr;

            for (int k = 0; k < K; ++k) {
                const int slot = p * K + k;
                const Mat3<T>& g_cov = d_cov_world[slot];
                const Vec3<T>& g_mean = d_mean_world[slot];

                // covariance: sigma = M S M^T with M = R_blend R_c, S = diag(s^2)
                const Mat3<T>& m = ft.rot_total[slot];
                const Vec3<T> s2 = (T(2) * model.canon.log_scales[k].array()).exp();
                const Mat3<T> g_sym = g_cov + g_cov.transpose();
                const Mat3<T> d_m = g_sym * m * s2.asDiagonal();
                const Mat3<T> mt_g_m = m.transpose() * g_cov * m;
                for (int a = 0; a < 3; ++a) {
                    grads.d_log_scales[k](a) += mt_g_m(a, a) * T(2) * s2(a);
                }

                Mat3<T> d_blend_rot = d_m * ft.rot_canon[slot].transpose();
                const Mat3<T> d_rot_canon = ft.blend_rotations[slot].transpose() * d_m;
                grads.d_quat_c[k] += detail::quat_rotation_backward(
                    model.canon.orientations[k], d_rot_canon);

                // mean: mu = R_blend c + t
                d_blend_rot += g_mean * tape.centers[slot].transpose();
                const Vec3<T> d_t = g_mean;

                if (!want_blend) {
                    continue;
                }
                Mat3<T> d_raw = Mat3<T>::Zero();
                if (!tape.translation_only) {
                    d_raw = detail::project_so3_backward(
                        ft.svd[slot], ft.blend_rotations[slot], d_blend_rot);
                }
                const SparseWeights<T>& w = model.canon.sparse_weights[k];
                bg_trans += w.w_bg * d_t;
                d_trans_joint[w.idx_a] += (w.w_a - w.w_bg) * d_t;
                if (w.idx_b >= 0) {
                    d_trans_joint[w.idx_b] += (w.w_b - w.w_bg) * d_t;
                }
                if (!tape.translation_only) {
                    bg_rot += w.w_bg * d_raw;
                    d_rot_joint[w.idx_a] += (w.w_a - w.w_bg) * d_raw;
                    if (w.idx_b >= 0) {
                        d_rot_joint[w.idx_b] += (w.w_b - w.w_bg) * d_raw;
                    }
                }
            }

            if (input_grads != nullptr) {
                for (int j = 0; j < J; ++j) {
                    input_grads->d_joints[input_grads->index(t, p, j)] +=
                        d_trans_joint[j] + bg_trans;
                    if (!tape.translation_only) {
                        input_grads->d_rotations[input_grads->index(t, p, j)] +=
                            detail::quat_rotation_backward(
                                batch.rotation(t, p, j).cast<T>(),
                                Mat3<T>(d_rot_joint[j] + bg_rot));
                    }
                }
            }
        }
    }

    // ---- appearance head adjoint (base is frame-invariant) ----
    MatX<T> d_base_slot = MatX<T>::Zero(K, 4);
    for (int p = 0; p < P; ++p) {
        d_base_slot += d_base_total.block(p * K, 0, K, 4);
    }
    grads.d_features += d_base_slot * model.modulator.w_app;
    grads.d_modulator.w_app += d_base_slot.transpose() * model.canon.features;
    grads.d_modulator.b_app += d_base_slot.colwise().sum().transpose();

    return grads;
}

} // namespace draction
