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

// Flow matching on the linear path x_t = (1 - t) x + t eps with velocity
// target v = eps - x: time sampling, noising, loss, guidance and the Euler
// sampler that integrates dx/dt = v from t = 1 down to t = 0.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "nit/core.hpp"
#include "nit/model.hpp"
#include "nit/packing.hpp"

namespace nit {

// Logit-normal time: ln(sigma) ~ N(p_mean, p_std^2), t = sigma / (1 + sigma).
class TimeSampler {
 public:
  TimeSampler(double p_mean = 0.0, double p_std = 1.0, std::uint64_t seed = 0)
      : p_mean_(p_mean), p_std_(p_std), rng_(seed) {
    detail::require(p_std >= 0.0 && std::isfinite(p_mean), "invalid logit-normal parameters");
  }

  double sample() {
    const double log_sigma =
        p_std_ == 0.0 ? p_mean_ : std::normal_distribution<double>(p_mean_, p_std_)(rng_);
    const double t = 1.0 / (1.0 + std::exp(-log_sigma));
    // Keep t strictly inside (0, 1) even in single precision.
    constexpr double lo = 1e-6;
    constexpr double hi = 1.0 - 1e-6;
    return std::clamp(t, lo, hi);
  }

  double p_mean() const { return p_mean_; }
  double p_std() const { return p_std_; }

 private:
  double p_mean_;
  double p_std_;
  std::mt19937_64 rng_;
};

template <typename T>
Matrix<T> add_noise(const Matrix<T>& x, const Matrix<T>& eps, double t) {
  detail::require(x.rows() == eps.rows() && x.cols() == eps.cols(),
                  "data and noise shapes differ");
  detail::require(t >= 0.0 && t <= 1.0, "t = ", t, " outside [0, 1]");
  const T a = static_cast<T>(1.0 - t);
  const T b = static_cast<T>(t);
  return a * x + b * eps;
}

// Each instance is noised with its own t.
template <typename T>
Matrix<T> add_noise_packed(const Matrix<T>& x, const Matrix<T>& eps, std::span<const double> times,
                           const PackLayout& layout) {
  detail::require(x.rows() == eps.rows() && x.cols() == eps.cols(),
                  "data and noise shapes differ");
  detail::require(times.size() == layout.instances(), "need one t per instance");
  Matrix<T> out(x.rows(), x.cols());
  for (std::size_t k = 0; k < layout.instances(); ++k) {
    const auto n = layout.length(k);
    out.middleRows(layout.begin(k), n) =
        add_noise(Matrix<T>(x.middleRows(layout.begin(k), n)),
                  Matrix<T>(eps.middleRows(layout.begin(k), n)), times[k]);
  }
  return out;
}

template <typename T>
Matrix<T> velocity_target(const Matrix<T>& x, const Matrix<T>& eps) {
  detail::require(x.rows() == eps.rows() && x.cols() == eps.cols(),
                  "data and noise shapes differ");
  return eps - x;
}

// Mean over instances of each instance's mean squared error.
template <typename T>
double fm_loss(const Matrix<T>& pred, const Matrix<T>& target, const PackLayout& layout) {
  detail::require(pred.rows() == target.rows() && pred.cols() == target.cols() &&
                      pred.rows() == layout.total(),
                  "prediction, target and layout disagree");
  double total = 0.0;
  for (std::size_t k = 0; k < layout.instances(); ++k) {
    double sq = 0.0;
    for (int r = layout.begin(k); r < layout.end(k); ++r) {
      for (Eigen::Index c = 0; c < pred.cols(); ++c) {
        const double e = static_cast<double>(pred(r, c)) - target(r, c);
        sq += e * e;
      }
    }
    total += sq / (static_cast<double>(layout.length(k)) * pred.cols());
  }
  return total / static_cast<double>(layout.instances());
}

template <typename T>
Matrix<T> fm_loss_grad(const Matrix<T>& pred, const Matrix<T>& target, const PackLayout& layout) {
  Matrix<T> g(pred.rows(), pred.cols());
  const double n = static_cast<double>(layout.instances());
  for (std::size_t k = 0; k < layout.instances(); ++k) {
    const double w = 2.0 / (n * layout.length(k) * pred.cols());
    const auto len = layout.length(k);
    g.middleRows(layout.begin(k), len) =
        (static_cast<T>(w) * (pred.middleRows(layout.begin(k), len) -
                              target.middleRows(layout.begin(k), len)));
  }
  return g;
}

struct GuidanceConfig {
  double scale = 1.0;
  double t_lo = 0.0;
  double t_hi = 1.0;

  void validate() const {
    detail::require(scale >= 1.0, "guidance scale ", scale, " must be >= 1");
    detail::require(0.0 <= t_lo && t_lo <= t_hi && t_hi <= 1.0, "guidance interval [", t_lo,
                    ", ", t_hi, "] must satisfy 0 <= lo <= hi <= 1");
  }

  bool applies(double t) const { return scale != 1.0 && t >= t_lo && t <= t_hi; }

  // Values used for 256x256 in the reference evaluation.
  static GuidanceConfig reference_256() { return {2.25, 0.0, 0.7}; }
};

// Inside the interval: v_u + scale (v_c - v_u). Outside (or at scale 1) the
// conditional velocity is returned unchanged.
template <typename T>
Matrix<T> cfg_velocity(const Matrix<T>& v_cond, const Matrix<T>& v_uncond,
                       const GuidanceConfig& g, double t) {
  detail::require(v_cond.rows() == v_uncond.rows() && v_cond.cols() == v_uncond.cols(),
                  "conditional and unconditional velocities differ in shape");
  if (!g.applies(t)) return v_cond;
  return v_uncond + static_cast<T>(g.scale) * (v_cond - v_uncond);
}

struct SamplerConfig {
  int steps = 50;
  std::uint64_t seed = 0;

  void validate() const { detail::require(steps >= 1, "sampler needs at least one step"); }
};

inline MatrixF gaussian_tokens(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  MatrixF x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  return x;
}

// (x_t, t, label) -> predicted velocity.
using VelocityFn = std::function<MatrixF(const MatrixF&, double, int)>;

// Uniform Euler steps t_k = k / steps, k = steps..1, starting from
// x_1 ~ N(0, I) drawn from sampler.seed. Returns token rows of the grid.
inline MatrixF euler_sample(const VelocityFn& velocity, GridSize grid, int token_dim, int label,
                            const SamplerConfig& sampler, const GuidanceConfig& guidance) {
  sampler.validate();
  guidance.validate();
  detail::require(grid.h > 0 && grid.w > 0 && token_dim > 0, "invalid sample geometry");
  MatrixF x = gaussian_tokens(grid.count(), token_dim, sampler.seed);
  const double dt = 1.0 / sampler.steps;
  for (int k = sampler.steps; k >= 1; --k) {
    const double t = static_cast<double>(k) / sampler.steps;
    MatrixF v = velocity(x, t, label);
    if (guidance.applies(t)) v = cfg_velocity(v, velocity(x, t, kNullLabel), guidance, t);
    x -= static_cast<float>(dt) * v;
  }
  return x;
}

struct SampleRequest {
  GridSize grid;
  int label = kNullLabel;
  std::uint64_t seed = 0;
};

// Samples many requests at once. Each step packs every request (plus a
// null-label copy while guidance is active) into one sequence. Every request
// draws its initial noise from its own seed, independent of its pack mates.
inline std::vector<MatrixF> sample_packed(const ModelParams<float>& p,
                                          std::span<const SampleRequest> requests, int steps,
                                          const GuidanceConfig& guidance) {
  detail::require(steps >= 1, "sampler needs at least one step");
  guidance.validate();
  const int token_dim = p.config.token_dim();
  std::vector<MatrixF> xs;
  std::vector<GridSize> grids;
  std::vector<int> labels;
  for (const SampleRequest& r : requests) {
    xs.push_back(gaussian_tokens(r.grid.count(), token_dim, r.seed));
    grids.push_back(r.grid);
    labels.push_back(r.label);
  }
  if (requests.empty()) return xs;
  const PackLayout single = PackLayout::from_grids(grids);
  std::vector<GridSize> doubled_grids = grids;
  doubled_grids.insert(doubled_grids.end(), grids.begin(), grids.end());
  const PackLayout doubled = PackLayout::from_grids(doubled_grids);
  const RopeTable rope_single = rope_for_packed(single, p.config.rope());
  const RopeTable rope_doubled = rope_for_packed(doubled, p.config.rope());
  std::vector<int> doubled_labels = labels;
  doubled_labels.insert(doubled_labels.end(), labels.size(), kNullLabel);

  const double dt = 1.0 / steps;
  const std::size_t n = requests.size();
  for (int k = steps; k >= 1; --k) {
    const double t = static_cast<double>(k) / steps;
    const bool guided = guidance.applies(t);
    const PackLayout& layout = guided ? doubled : single;
    MatrixF packed(layout.total(), token_dim);
    for (std::size_t i = 0; i < n; ++i) {
      packed.middleRows(layout.begin(i), xs[i].rows()) = xs[i];
      if (guided) packed.middleRows(layout.begin(n + i), xs[i].rows()) = xs[i];
    }
    const std::vector<double> times(layout.instances(), t);
    const MatrixF v = model_forward(p, packed, layout, times,
                                    guided ? std::span<const int>(doubled_labels)
                                           : std::span<const int>(labels),
                                    guided ? rope_doubled : rope_single);
    for (std::size_t i = 0; i < n; ++i) {
      const MatrixF vc = v.middleRows(layout.begin(i), xs[i].rows());
      if (guided) {
        const MatrixF vu = v.middleRows(layout.begin(n + i), xs[i].rows());
        xs[i] -= static_cast<float>(dt) * cfg_velocity(vc, vu, guidance, t);
      } else {
        xs[i] -= static_cast<float>(dt) * vc;
      }
    }
  }
  return xs;
}

// Velocity callback backed by a model, for single-instance sampling.
inline VelocityFn model_velocity(const ModelParams<float>& p, GridSize grid) {
  PackLayout layout = PackLayout::from_grids({grid});
  RopeTable rope = rope_for_packed(layout, p.config.rope());
  return [&p, layout, rope](const MatrixF& x, double t, int label) {
    const double times[1] = {t};
    const int labels[1] = {label};
    return model_forward(p, x, layout, times, labels, rope);
  };
}

}  // namespace nit
