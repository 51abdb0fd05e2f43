// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "draction/errors.hpp"
#include "draction/math.hpp"

#include <cmath>
#include <optional>

namespace draction {

/// Intrinsics for a symmetric-frustum pinhole: f = extent / (2 tan(fov/2)),
/// principal point at the image center.
template <typename T>
Mat3<T> intrinsics_from_fov(int width, int height, T fov_x, T fov_y) {
    constexpr T kPi = T(3.14159265358979323846L);
    if (!(fov_x > T(0) && fov_x < kPi && fov_y > T(0) && fov_y < kPi)) {
        throw ValidationError("field of view must lie in (0, pi)");
    }
    Mat3<T> k = Mat3<T>::Zero();
    k(0, 0) = T(width) / (T(2) * std::tan(fov_x / T(2)));
    k(1, 1) = T(height) / (T(2) * std::tan(fov_y / T(2)));
    k(0, 2) = T(width) / T(2);
    k(1, 2) = T(height) / T(2);
    k(2, 2) = T(1);
    return k;
}

/// Fixed pinhole camera. The world-to-camera transform defaults to the
/// identity: skeleton coordinates are already camera-frame.
template <typename T>
struct Camera {
    int width = 448;
    int height = 448;
    T fov_x = deg_to_rad(T(60));
    T fov_y = deg_to_rad(T(60));
    Mat3<T> intrinsics = intrinsics_from_fov(448, 448, deg_to_rad(T(60)), deg_to_rad(T(60)));
    Mat3<T> extrinsics_rotation = Mat3<T>::Identity();
    Vec3<T> extrinsics_translation = Vec3<T>::Zero();

    static Camera from_fov(int width, int height, T fov_x, T fov_y) {
        Camera c;
        c.width = width;
        c.height = height;
        c.fov_x = fov_x;
        c.fov_y = fov_y;
        c.intrinsics = intrinsics_from_fov(width, height, fov_x, fov_y);
        return c;
    }

    T fx() const { return intrinsics(0, 0); }
    T fy() const { return intrinsics(1, 1); }
    T cx() const { return intrinsics(0, 2); }
    T cy() const { return intrinsics(1, 2); }

    bool identity_extrinsics() const {
        return extrinsics_rotation.isIdentity(T(0)) &&
               extrinsics_translation.isZero(T(0));
    }
};

/// A splatted primitive: pixel-space mean with v increasing downward, the
/// 2x2 projected covariance, and the camera-space depth used for sorting
/// and the depth colormap.
template <typename T>
struct ProjectedGaussian {
    Vec2<T> mean2d;
    Mat2<T> cov2d;
    T depth;
};

/// Projection Jacobian of (u, v) = (fx X/Z + cx, -fy Y/Z + cy) at a
/// camera-space point.
template <typename T>
Eigen::Matrix<T, 2, 3> projection_jacobian(const Camera<T>& camera, const Vec3<T>& cam) {
    const T inv_z = T(1) / cam.z();
    Eigen::Matrix<T, 2, 3> j;
    j << camera.fx() * inv_z, T(0), -camera.fx() * cam.x() * inv_z * inv_z,
         T(0), -camera.fy() * inv_z, camera.fy() * cam.y() * inv_z * inv_z;
    return j;
}

/// Projects one Gaussian. Returns nullopt when the camera-space depth is at
/// or behind the near clip (the primitive is culled).
template <typename T>
std::optional<ProjectedGaussian<T>> project_gaussian(const Vec3<T>& mean,
                                                     const Mat3<T>& cov,
                                                     const Camera<T>& camera,
                                                     T z_clip = T(0.01)) {
    Vec3<T> cam = mean;
    Mat3<T> cov_cam = cov;
    if (!camera.identity_extrinsics()) {
        cam = camera.extrinsics_rotation * mean + camera.extrinsics_translation;
        cov_cam = camera.extrinsics_rotation * cov * camera.extrinsics_rotation.transpose();
    }
    if (!(cam.z() > z_clip)) {
        return std::nullopt;
    }
    const Eigen::Matrix<T, 2, 3> j = projection_jacobian(camera, cam);
    ProjectedGaussian<T> out;
    out.mean2d = Vec2<T>(camera.fx() * cam.x() / cam.z() + camera.cx(),
                         -camera.fy() * cam.y() / cam.z() + camera.cy());
    out.cov2d = j * cov_cam * j.transpose();
    out.depth = cam.z();
    return out;
}

} // namespace draction
