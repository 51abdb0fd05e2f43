// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "draction/camera.hpp"
#include "draction/errors.hpp"
#include "draction/kinematics.hpp"
#include "draction/math.hpp"
#include "draction/modulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace draction {

template <typename T>
struct RenderOptions {
    Vec3<T> background = Vec3<T>::Zero();
    T z_clip = T(0.01);
    T sigma_cutoff = T(4.5); // support radius in standard deviations
    T cov2d_epsilon = T(0.3); // pixel^2, added to the projected covariance
};

template <typename T>
struct RenderedFrame {
    int width = 0;
    int height = 0;
    std::vector<T> rgb;   // H*W*3, row-major, [0,1]
    std::vector<T> alpha; // H*W accumulated opacity

    size_t pixel_index(int x, int y) const {
        return static_cast<size_t>(y) * width + x;
    }
    Vec3<T> pixel(int x, int y) const {
        const size_t i = pixel_index(x, y) * 3;
        return Vec3<T>(rgb[i], rgb[i + 1], rgb[i + 2]);
    }
};

/// One screen-space primitive ready for compositing.
template <typename T>
struct SplatPrimitive {
    Vec2<T> mean2d;
    Mat2<T> conic; // inverse of the regularized 2D covariance
    T depth;
    Vec3<T> color;
    T opacity;
    int x_lo = 0, x_hi = -1, y_lo = 0, y_hi = -1; // inclusive pixel bounds
};

/// Regularized conic: (cov + eps I)^-1 via the closed 2x2 inverse.
template <typename T>
Mat2<T> conic_from_cov(const Mat2<T>& cov, T epsilon) {
    Mat2<T> reg = cov;
    reg(0, 0) += epsilon;
    reg(1, 1) += epsilon;
    const T det = reg(0, 0) * reg(1, 1) - reg(0, 1) * reg(1, 0);
    if (!(det > T(1e-12))) {
        throw NumericalError("projected covariance is singular despite regularization");
    }
    Mat2<T> conic;
    const T inv_det = T(1) / det;
    conic(0, 0) = reg(1, 1) * inv_det;
    conic(1, 1) = reg(0, 0) * inv_det;
    conic(0, 1) = -reg(0, 1) * inv_det;
    conic(1, 0) = -reg(1, 0) * inv_det;
    return conic;
}

/// Builds a splat from a projected Gaussian, clamping its support box to the
/// image. The box is the axis-aligned bound of the cutoff ellipse.
template <typename T>
SplatPrimitive<T> make_splat(const ProjectedGaussian<T>& proj, const Vec3<T>& color,
                             T opacity, int width, int height,
                             const RenderOptions<T>& options) {
    SplatPrimitive<T> s;
    s.mean2d = proj.mean2d;
    s.depth = proj.depth;
    s.color = color;
    s.opacity = opacity;
    Mat2<T> reg = proj.cov2d;
    s.conic = conic_from_cov(reg, options.cov2d_epsilon);
    const T rx = options.sigma_cutoff * std::sqrt(reg(0, 0) + options.cov2d_epsilon);
    const T ry = options.sigma_cutoff * std::sqrt(reg(1, 1) + options.cov2d_epsilon);
    s.x_lo = std::max(0, static_cast<int>(std::ceil(proj.mean2d.x() - rx - T(0.5))));
    s.x_hi = std::min(width - 1, static_cast<int>(std::floor(proj.mean2d.x() + rx - T(0.5))));
    s.y_lo = std::max(0, static_cast<int>(std::ceil(proj.mean2d.y() - ry - T(0.5))));
    s.y_hi = std::min(height - 1, static_cast<int>(std::floor(proj.mean2d.y() + ry - T(0.5))));
    return s;
}

/// Depth-ascending order with index tie-break, so equal inputs always
/// composite identically.
template <typename T>
std::vector<int> depth_order(const std::vector<SplatPrimitive<T>>& splats) {
    std::vector<int> order(splats.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (splats[a].depth != splats[b].depth) {
            return splats[a].depth < splats[b].depth;
        }
        return a < b;
    });
    return order;
}

/// Gaussian influence of a splat at a pixel center, or nullopt outside the
/// cutoff ellipse. The same predicate drives forward, fragments and backward.
template <typename T>
inline bool splat_weight(const SplatPrimitive<T>& s, T px, T py, T cutoff_sq, T& w_out) {
    const T dx = px - s.mean2d.x();
    const T dy = py - s.mean2d.y();
    const T q = s.conic(0, 0) * dx * dx + (s.conic(0, 1) + s.conic(1, 0)) * dx * dy +
                s.conic(1, 1) * dy * dy;
    if (q > cutoff_sq) {
        return false;
    }
    w_out = std::exp(-q / T(2));
    return true;
}

/// Front-to-back compositing over the sorted splats, primitive-major with a
/// per-pixel transmittance buffer. Pixels no splat touches end up exactly at
/// the background color.
template <typename T>
RenderedFrame<T> composite(const std::vector<SplatPrimitive<T>>& splats, int width,
                           int height, const RenderOptions<T>& options) {
    RenderedFrame<T> frame;
    frame.width = width;
    frame.height = height;
    frame.rgb.assign(static_cast<size_t>(width) * height * 3, T(0));
    frame.alpha.assign(static_cast<size_t>(width) * height, T(0));
    std::vector<T> trans(static_cast<size_t>(width) * height, T(1));

    const T cutoff_sq = options.sigma_cutoff * options.sigma_cutoff;
    for (int k : depth_order(splats)) {
        const SplatPrimitive<T>& s = splats[k];
        for (int y = s.y_lo; y <= s.y_hi; ++y) {
            const T py = T(y) + T(0.5);
            for (int x = s.x_lo; x <= s.x_hi; ++x) {
                T w;
                if (!splat_weight(s, T(x) + T(0.5), py, cutoff_sq, w)) {
                    continue;
                }
                const T alpha_prime = T(1) - std::exp(-s.opacity * w);
                const size_t pix = frame.pixel_index(x, y);
                const T contrib = alpha_prime * trans[pix];
                frame.rgb[pix * 3 + 0] += s.color(0) * contrib;
                frame.rgb[pix * 3 + 1] += s.color(1) * contrib;
                frame.rgb[pix * 3 + 2] += s.color(2) * contrib;
                trans[pix] *= (T(1) - alpha_prime);
            }
        }
    }
    for (size_t pix = 0; pix < trans.size(); ++pix) {
        frame.rgb[pix * 3 + 0] += options.background(0) * trans[pix];
        frame.rgb[pix * 3 + 1] += options.background(1) * trans[pix];
        frame.rgb[pix * 3 + 2] += options.background(2) * trans[pix];
        frame.alpha[pix] = T(1) - trans[pix];
    }
    return frame;
}

/// Per-pixel fragment lists in depth order (CSR layout), shared between the
/// taped forward and the backward pass so both see the same truncation.
struct FragmentLists {
    std::vector<uint32_t> offsets; // W*H+1
    std::vector<uint32_t> prims;   // splat indices, depth-ordered per pixel
};

template <typename T>
FragmentLists build_fragments(const std::vector<SplatPrimitive<T>>& splats,
                              const std::vector<int>& order, int width, int height,
                              const RenderOptions<T>& options) {
    const T cutoff_sq = options.sigma_cutoff * options.sigma_cutoff;
    FragmentLists lists;
    lists.offsets.assign(static_cast<size_t>(width) * height + 1, 0);
    for (const SplatPrimitive<T>& s : splats) {
        for (int y = s.y_lo; y <= s.y_hi; ++y) {
            const T py = T(y) + T(0.5);
            for (int x = s.x_lo; x <= s.x_hi; ++x) {
                T w;
                if (splat_weight(s, T(x) + T(0.5), py, cutoff_sq, w)) {
                    ++lists.offsets[static_cast<size_t>(y) * width + x + 1];
                }
            }
        }
    }
    for (size_t i = 1; i < lists.offsets.size(); ++i) {
        lists.offsets[i] += lists.offsets[i - 1];
    }
    lists.prims.resize(lists.offsets.back());
    std::vector<uint32_t> cursor(lists.offsets.begin(), lists.offsets.end() - 1);
    for (int k : order) {
        const SplatPrimitive<T>& s = splats[k];
        for (int y = s.y_lo; y <= s.y_hi; ++y) {
            const T py = T(y) + T(0.5);
            for (int x = s.x_lo; x <= s.x_hi; ++x) {
                T w;
                if (splat_weight(s, T(x) + T(0.5), py, cutoff_sq, w)) {
                    lists.prims[cursor[static_cast<size_t>(y) * width + x]++] =
                        static_cast<uint32_t>(k);
                }
            }
        }
    }
    return lists;
}

/// Pixel-major compositing over prebuilt fragment lists; arithmetic matches
/// the streaming path fragment for fragment. `trans_out`, when given,
/// receives the exact final transmittance per pixel for the backward pass.
template <typename T>
RenderedFrame<T> composite_fragments(const std::vector<SplatPrimitive<T>>& splats,
                                     const FragmentLists& lists, int width, int height,
                                     const RenderOptions<T>& options,
                                     std::vector<T>* trans_out = nullptr) {
    RenderedFrame<T> frame;
    frame.width = width;
    frame.height = height;
    frame.rgb.resize(static_cast<size_t>(width) * height * 3);
    frame.alpha.resize(static_cast<size_t>(width) * height);
    if (trans_out != nullptr) {
        trans_out->resize(frame.alpha.size());
    }
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const size_t pix = frame.pixel_index(x, y);
            Vec3<T> rgb = Vec3<T>::Zero();
            T trans = T(1);
            for (uint32_t f = lists.offsets[pix]; f < lists.offsets[pix + 1]; ++f) {
                const SplatPrimitive<T>& s = splats[lists.prims[f]];
                const T dx = T(x) + T(0.5) - s.mean2d.x();
                const T dy = T(y) + T(0.5) - s.mean2d.y();
                const T q = s.conic(0, 0) * dx * dx +
                            (s.conic(0, 1) + s.conic(1, 0)) * dx * dy +
                            s.conic(1, 1) * dy * dy;
                const T w = std::exp(-q / T(2));
                const T alpha_prime = T(1) - std::exp(-s.opacity * w);
                const T contrib = alpha_prime * trans;
                rgb(0) += s.color(0) * contrib;
                rgb(1) += s.color(1) * contrib;
                rgb(2) += s.color(2) * contrib;
                trans *= (T(1) - alpha_prime);
            }
            rgb += options.background * trans;
            frame.rgb[pix * 3 + 0] = rgb(0);
            frame.rgb[pix * 3 + 1] = rgb(1);
            frame.rgb[pix * 3 + 2] = rgb(2);
            frame.alpha[pix] = T(1) - trans;
            if (trans_out != nullptr) {
                (*trans_out)[pix] = trans;
            }
        }
    }
    return frame;
}

/// Dense reference compositor: every primitive evaluated at every pixel with
/// no support cutoff. The independent oracle for the production paths.
template <typename T>
RenderedFrame<T> composite_reference(const std::vector<SplatPrimitive<T>>& splats,
                                     int width, int height,
                                     const RenderOptions<T>& options) {
    const std::vector<int> order = depth_order(splats);
    RenderedFrame<T> frame;
    frame.width = width;
    frame.height = height;
    frame.rgb.resize(static_cast<size_t>(width) * height * 3);
    frame.alpha.resize(static_cast<size_t>(width) * height);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            Vec3<T> rgb = Vec3<T>::Zero();
            T trans = T(1);
            for (int k : order) {
                const SplatPrimitive<T>& s = splats[k];
                const T dx = T(x) + T(0.5) - s.mean2d.x();
                const T dy = T(y) + T(0.5) - s.mean2d.y();
                const T q = s.conic(0, 0) * dx * dx +
                            (s.conic(0, 1) + s.conic(1, 0)) * dx * dy +
                            s.conic(1, 1) * dy * dy;
                const T w = std::exp(-q / T(2));
                const T alpha_prime = T(1) - std::exp(-s.opacity * w);
                const T contrib = alpha_prime * trans;
                rgb(0) += s.color(0) * contrib;
                rgb(1) += s.color(1) * contrib;
                rgb(2) += s.color(2) * contrib;
                trans *= (T(1) - alpha_prime);
            }
            rgb += options.background * trans;
            const size_t pix = frame.pixel_index(x, y);
            frame.rgb[pix * 3 + 0] = rgb(0);
            frame.rgb[pix * 3 + 1] = rgb(1);
            frame.rgb[pix * 3 + 2] = rgb(2);
            frame.alpha[pix] = T(1) - trans;
        }
    }
    return frame;
}

/// Projects the posed set and composites it with the given appearance.
/// Culled primitives (behind the near clip) are dropped from the list.
template <typename T>
RenderedFrame<T> render_frame(const PosedGaussianSet<T>& posed,
                              const FrameAppearance<T>& appearance,
                              const Camera<T>& camera,
                              const RenderOptions<T>& options = {}) {
    const size_t K = posed.means.size();
    if (static_cast<size_t>(appearance.colors.rows()) != K ||
        static_cast<size_t>(appearance.opacities.size()) != K) {
        throw ValidationError("appearance size does not match primitive count");
    }
    std::vector<SplatPrimitive<T>> splats;
    splats.reserve(K);
    for (size_t k = 0; k < K; ++k) {
        const auto proj = project_gaussian(posed.means[k], posed.covariances[k],
                                           camera, options.z_clip);
        if (!proj) {
            continue;
        }
        splats.push_back(make_splat(*proj, Vec3<T>(appearance.colors(k, 0),
                                                   appearance.colors(k, 1),
                                                   appearance.colors(k, 2)),
                                    appearance.opacities(k), camera.width,
                                    camera.height, options));
    }
    return composite(splats, camera.width, camera.height, options);
}

} // namespace draction
