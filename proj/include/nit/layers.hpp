// Copyright 2026 The NiT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense building blocks with hand-written reverse passes. Weights are stored
// input-major (y = x * W + b) and biases as 1 x n matrices. Backward
// functions accumulate into the provided gradient buffers.

#pragma once

#include <cmath>
#include <numbers>

#include "nit/core.hpp"

namespace nit {

template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b) {
  detail::require(x.cols() == w.rows(), "linear: input width ", x.cols(),
                  " does not match weight rows ", w.rows());
  Matrix<T> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

template <typename T>
Matrix<T> linear_backward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& dy,
                          Matrix<T>& dw, Matrix<T>& db) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
  return dy * w.transpose();
}

template <typename T>
struct NormResult {
  Matrix<T> y;
  std::vector<T> rstd;
};

// Row layer norm without affine parameters, applied independently to each
// contiguous group of `group` columns.
template <typename T>
NormResult<T> layer_norm(const Matrix<T>& x, int group = 0, double eps = 1e-6) {
  if (group <= 0) group = static_cast<int>(x.cols());
  const Eigen::Index groups = x.cols() / group;
  NormResult<T> out{Matrix<T>(x.rows(), x.cols()),
                    std::vector<T>(static_cast<std::size_t>(x.rows() * groups))};
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index g = 0; g < groups; ++g) {
      const T* src = x.row(r).data() + g * group;
      T* dst = out.y.row(r).data() + g * group;
      double mean = 0.0;
      for (int i = 0; i < group; ++i) mean += src[i];
      mean /= group;
      double var = 0.0;
      for (int i = 0; i < group; ++i) {
        const double c = src[i] - mean;
        var += c * c;
      }
      var /= group;
      const double rstd = 1.0 / std::sqrt(var + eps);
      for (int i = 0; i < group; ++i) dst[i] = static_cast<T>((src[i] - mean) * rstd);
      out.rstd[static_cast<std::size_t>(r * groups + g)] = static_cast<T>(rstd);
    }
  }
  return out;
}

template <typename T>
Matrix<T> layer_norm_backward(const NormResult<T>& fwd, const Matrix<T>& dy, int group = 0) {
  if (group <= 0) group = static_cast<int>(dy.cols());
  const Eigen::Index groups = dy.cols() / group;
  Matrix<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    for (Eigen::Index g = 0; g < groups; ++g) {
      const T* y = fwd.y.row(r).data() + g * group;
      const T* d = dy.row(r).data() + g * group;
      T* out = dx.row(r).data() + g * group;
      double mean_d = 0.0;
      double mean_dy = 0.0;
      for (int i = 0; i < group; ++i) {
        mean_d += d[i];
        mean_dy += static_cast<double>(d[i]) * y[i];
      }
      mean_d /= group;
      mean_dy /= group;
      const double rstd = fwd.rstd[static_cast<std::size_t>(r * groups + g)];
      for (int i = 0; i < group; ++i) {
        out[i] = static_cast<T>(rstd * (d[i] - mean_d - y[i] * mean_dy));
      }
    }
  }
  return dx;
}

// tanh-approximate GELU.
template <typename T>
T gelu_tanh(T x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  const double xd = x;
  return static_cast<T>(0.5 * xd * (1.0 + std::tanh(k * (xd + 0.044715 * xd * xd * xd))));
}

template <typename T>
T gelu_tanh_grad(T x) {
  constexpr double k = 0.7978845608028654;
  const double xd = x;
  const double inner = k * (xd + 0.044715 * xd * xd * xd);
  const double th = std::tanh(inner);
  const double dinner = k * (1.0 + 3.0 * 0.044715 * xd * xd);
  return static_cast<T>(0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner);
}

template <typename T>
T silu(T x) {
  return static_cast<T>(static_cast<double>(x) / (1.0 + std::exp(-static_cast<double>(x))));
}

template <typename T>
T silu_grad(T x) {
  const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(x)));
  return static_cast<T>(s * (1.0 + static_cast<double>(x) * (1.0 - s)));
}

template <typename T, typename F>
Matrix<T> map(const Matrix<T>& x, F&& f) {
  Matrix<T> y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) y.data()[i] = f(x.data()[i]);
  return y;
}

}  // namespace nit
