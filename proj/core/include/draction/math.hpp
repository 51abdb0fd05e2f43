// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <vector>

namespace draction {

template <typename T> using Vec2 = Eigen::Matrix<T, 2, 1>;
template <typename T> using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T> using Vec4 = Eigen::Matrix<T, 4, 1>;
template <typename T> using Mat2 = Eigen::Matrix<T, 2, 2>;
template <typename T> using Mat3 = Eigen::Matrix<T, 3, 3>;
template <typename T> using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T> using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Vec3d = Eigen::Vector3d;
using Quatd = Eigen::Vector4d; // (w, x, y, z)

template <typename T>
constexpr T deg_to_rad(T degrees) {
    return degrees * T(3.14159265358979323846L) / T(180);
}

/// Numerically stable logistic sigmoid.
template <typename T>
T sigmoid(T x) {
    if (x >= T(0)) {
        return T(1) / (T(1) + std::exp(-x));
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
T sigmoid_derivative(T sig_value) {
    return sig_value * (T(1) - sig_value);
}

/// In-place softmax over one row of a logit matrix, max-shifted.
template <typename T>
void softmax_row(MatX<T>& mat, Eigen::Index row) {
    const T m = mat.row(row).maxCoeff();
    T sum = T(0);
    for (Eigen::Index j = 0; j < mat.cols(); ++j) {
        mat(row, j) = std::exp(mat(row, j) - m);
        sum += mat(row, j);
    }
    for (Eigen::Index j = 0; j < mat.cols(); ++j) {
        mat(row, j) /= sum;
    }
}

/// Median of an unsorted list; even counts average the two middle values.
/// The input is copied because nth_element reorders.
template <typename T>
T median_of(std::vector<T> values) {
    const size_t n = values.size();
    auto mid = values.begin() + static_cast<std::ptrdiff_t>(n / 2);
    std::nth_element(values.begin(), mid, values.end());
    if (n % 2 == 1) {
        return *mid;
    }
    auto lo = std::max_element(values.begin(), mid);
    return (*lo + *mid) / T(2);
}

} // namespace draction
