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

// Axial 2D rotary position embedding.
//
// For head dimension d the spatial width is d_s = d / 2 and each axis gets
// d_s / 2 frequencies w_j = theta^(-2j / d_s). The angle vector of the token
// at grid position (y, x) is [y * w, x * w] (length d_s), and angle l rotates
// the consecutive feature pair (2l, 2l + 1).

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "nit/core.hpp"
#include "nit/packing.hpp"

namespace nit {

struct RopeConfig {
  int head_dim = 16;
  double theta = 10000.0;

  int spatial_dim() const { return head_dim / 2; }
  int frequencies_per_axis() const { return head_dim / 4; }

  void validate() const {
    detail::require(head_dim > 0 && head_dim % 4 == 0, "rope head_dim ", head_dim,
                    " must be a positive multiple of 4");
    detail::require(theta > 0.0, "rope theta must be positive");
  }
};

inline std::vector<double> base_frequencies(const RopeConfig& cfg) {
  cfg.validate();
  const int ds = cfg.spatial_dim();
  std::vector<double> omega(static_cast<std::size_t>(ds / 2));
  for (int j = 0; j < ds / 2; ++j) {
    omega[j] = std::pow(cfg.theta, -2.0 * j / ds);
  }
  return omega;
}

// One row per token in raster order; origin shifts every coordinate.
inline MatrixD angle_grid(int grid_h, int grid_w, std::span<const double> omega,
                          int origin_h = 0, int origin_w = 0) {
  detail::require(grid_h > 0 && grid_w > 0, "angle grid dims must be positive");
  const int half = static_cast<int>(omega.size());
  MatrixD phi(grid_h * grid_w, 2 * half);
  for (int y = 0; y < grid_h; ++y) {
    for (int x = 0; x < grid_w; ++x) {
      const int r = y * grid_w + x;
      for (int j = 0; j < half; ++j) {
        phi(r, j) = static_cast<double>(y + origin_h) * omega[j];
        phi(r, half + j) = static_cast<double>(x + origin_w) * omega[j];
      }
    }
  }
  return phi;
}

template <typename T>
void apply_rotation(std::span<const T> v, std::span<const double> phi_row,
                    std::span<T> out) {
  detail::require(v.size() == 2 * phi_row.size() && out.size() == v.size(),
                  "rotation expects a vector twice the angle length");
  for (std::size_t l = 0; l < phi_row.size(); ++l) {
    const double c = std::cos(phi_row[l]);
    const double s = std::sin(phi_row[l]);
    const double a = v[2 * l];
    const double b = v[2 * l + 1];
    out[2 * l] = static_cast<T>(c * a - s * b);
    out[2 * l + 1] = static_cast<T>(s * a + c * b);
  }
}

// Per-row cos/sin with each angle duplicated across its feature pair, so the
// rotation is x * cos + rotate_half(x) * sin.
struct RopeTable {
  MatrixF cos;
  MatrixF sin;

  int rows() const { return static_cast<int>(cos.rows()); }
  int head_dim() const { return static_cast<int>(cos.cols()); }
};

inline RopeTable rope_table_from_angles(const MatrixD& phi) {
  RopeTable t{MatrixF(phi.rows(), 2 * phi.cols()), MatrixF(phi.rows(), 2 * phi.cols())};
  for (Eigen::Index r = 0; r < phi.rows(); ++r) {
    for (Eigen::Index l = 0; l < phi.cols(); ++l) {
      const float c = static_cast<float>(std::cos(phi(r, l)));
      const float s = static_cast<float>(std::sin(phi(r, l)));
      t.cos(r, 2 * l) = t.cos(r, 2 * l + 1) = c;
      t.sin(r, 2 * l) = t.sin(r, 2 * l + 1) = s;
    }
  }
  return t;
}

// Each instance restarts at (0, 0); origins, when given, shift instance k.
inline RopeTable rope_for_packed(const PackLayout& layout, const RopeConfig& cfg,
                                 std::span<const GridSize> origins = {}) {
  layout.validate();
  detail::require(origins.empty() || origins.size() == layout.instances(),
                  "origin list does not match instance count");
  const std::vector<double> omega = base_frequencies(cfg);
  MatrixD phi(layout.total(), cfg.spatial_dim());
  for (std::size_t k = 0; k < layout.instances(); ++k) {
    const GridSize g = layout.grids[k];
    const GridSize o = origins.empty() ? GridSize{0, 0} : origins[k];
    phi.middleRows(layout.begin(k), g.count()) = angle_grid(g.h, g.w, omega, o.h, o.w);
  }
  return rope_table_from_angles(phi);
}

// rotate_half on consecutive pairs: (a, b) -> (-b, a).
template <typename T>
void apply_rope_rows(Matrix<T>& x, const RopeTable& table, int num_heads) {
  const int hd = table.head_dim();
  detail::require(x.rows() == table.rows() && x.cols() == hd * num_heads,
                  "rope table does not match activations");
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    T* row = x.row(r).data();
    const float* c = table.cos.row(r).data();
    const float* s = table.sin.row(r).data();
    for (int h = 0; h < num_heads; ++h) {
      T* v = row + h * hd;
      for (int i = 0; i < hd; i += 2) {
        const T a = v[i];
        const T b = v[i + 1];
        v[i] = a * static_cast<T>(c[i]) - b * static_cast<T>(s[i]);
        v[i + 1] = b * static_cast<T>(c[i + 1]) + a * static_cast<T>(s[i + 1]);
      }
    }
  }
}

// Transpose of apply_rope_rows (rotation by the negated angle).
template <typename T>
void apply_rope_rows_backward(Matrix<T>& grad, const RopeTable& table, int num_heads) {
  const int hd = table.head_dim();
  for (Eigen::Index r = 0; r < grad.rows(); ++r) {
    T* row = grad.row(r).data();
    const float* c = table.cos.row(r).data();
    const float* s = table.sin.row(r).data();
    for (int h = 0; h < num_heads; ++h) {
      T* g = row + h * hd;
      for (int i = 0; i < hd; i += 2) {
        const T a = g[i];
        const T b = g[i + 1];
        g[i] = a * static_cast<T>(c[i]) + b * static_cast<T>(s[i + 1]);
        g[i + 1] = b * static_cast<T>(c[i + 1]) - a * static_cast<T>(s[i]);
      }
    }
  }
}

}  // namespace nit
