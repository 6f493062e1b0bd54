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

// Self-check suites behind `nit verify`: packing, attention against the dense
// oracle, instance isolation, RoPE translation invariance, adaLN-Zero
// identity and finite-difference gradients.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "nit/attention.hpp"
#include "nit/blocks.hpp"
#include "nit/diffusion.hpp"
#include "nit/model.hpp"
#include "nit/packing.hpp"
#include "nit/rope.hpp"

namespace nit {

struct CheckResult {
  std::string suite;
  bool passed = false;
  double metric = 0.0;     // worst observed value
  double tolerance = 0.0;  // passes when metric <= tolerance
  std::string detail;
  double seconds = 0.0;
};

struct VerifyOptions {
  std::uint64_t seed = 20240601;
  bool inject_fault = false;  // negate streaming attention logits
  int packing_workloads = 1000;
  int attention_packs = 200;
  int isolation_trials = 50;
  int rope_trials = 50;
  int adaln_batches = 20;
  int gradient_coords = 500;
  double gradient_floor = 1e-8;  // denominator floor for relative error
};

namespace verify_detail {

template <typename T>
Matrix<T> randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& gen, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix<T> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(gen));
  return m;
}

// A grid with h * w = n, shape chosen among the divisors of n.
inline GridSize grid_for_length(int n, std::mt19937_64& gen) {
  std::vector<int> divs;
  for (int d = 1; d <= n; ++d) {
    if (n % d == 0) divs.push_back(d);
  }
  std::uniform_int_distribution<std::size_t> pick(0, divs.size() - 1);
  const int h = divs[pick(gen)];
  return {h, n / h};
}

inline PackLayout random_layout(int max_instances, int max_len, std::mt19937_64& gen,
                                int min_instances = 1) {
  std::uniform_int_distribution<int> count(min_instances, max_instances);
  std::uniform_int_distribution<int> len(1, max_len);
  std::vector<GridSize> grids(static_cast<std::size_t>(count(gen)));
  for (GridSize& g : grids) g = grid_for_length(len(gen), gen);
  return PackLayout::from_grids(grids);
}

inline AttentionConfig random_attention(std::mt19937_64& gen, bool fault) {
  std::uniform_int_distribution<int> heads(1, 4);
  AttentionConfig cfg;
  cfg.num_heads = heads(gen);
  const int max_hd = 64 / cfg.num_heads;
  std::uniform_int_distribution<int> quarter(1, max_hd / 4);
  cfg.model_dim = cfg.num_heads * 4 * quarter(gen);
  const int tiles[] = {1, 7, 32, 64, 128};
  std::uniform_int_distribution<int> tile(0, 4);
  cfg.tile_size = tiles[tile(gen)];
  cfg.qk_norm = std::bernoulli_distribution(0.5)(gen);
  cfg.fault_negate_logits = fault;
  return cfg;
}

// q, k (normalized when configured, then rotated) and v for a layout.
struct Qkv {
  MatrixF q, k, v;
};

inline Qkv random_qkv(const PackLayout& layout, const AttentionConfig& cfg,
                      std::mt19937_64& gen, std::span<const GridSize> origins = {}) {
  Qkv x{randn<float>(layout.total(), cfg.model_dim, gen, 1.5),
        randn<float>(layout.total(), cfg.model_dim, gen, 1.5),
        randn<float>(layout.total(), cfg.model_dim, gen)};
  if (cfg.qk_norm) {
    x.q = qk_normalize(x.q, cfg).y;
    x.k = qk_normalize(x.k, cfg).y;
  }
  const RopeTable rope = rope_for_packed(layout, {cfg.head_dim()}, origins);
  apply_rope_rows(x.q, rope, cfg.num_heads);
  apply_rope_rows(x.k, rope, cfg.num_heads);
  return x;
}

inline double max_abs(const MatrixF& a, const MatrixF& b) {
  return a.size() == 0 ? 0.0 : static_cast<double>((a - b).cwiseAbs().maxCoeff());
}

template <typename F>
CheckResult timed(const std::string& name, F body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r = body();
  r.suite = name;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace verify_detail

// Every pack within budget, every instance exactly once, identical plans on
// reruns, longest-pack-first never worse than one-instance-per-row padding,
// and the three-instance example at waste 0.1455.
inline CheckResult verify_packing(const VerifyOptions& o) {
  return verify_detail::timed("packing", [&] {
    std::mt19937_64 gen(o.seed);
    CheckResult r;
    r.tolerance = 0.0;
    int violations = 0;
    std::string first;
    auto fail = [&](const std::string& why) {
      if (violations++ == 0) first = why;
    };
    std::uniform_int_distribution<int> n_inst(1, 200);
    std::uniform_int_distribution<std::int64_t> budget(64, 8192);
    for (int w = 0; w < o.packing_workloads; ++w) {
      const std::int64_t L = budget(gen);
      std::uniform_int_distribution<std::int64_t> len(1, L);
      std::vector<std::int64_t> counts(static_cast<std::size_t>(n_inst(gen)));
      for (auto& c : counts) c = len(gen);
      const PackPlan plan = plan_packing(counts, L);
      if (const std::string err = check_plan(plan, counts); !err.empty()) {
        fail(detail::concat("workload ", w, ": ", err));
      }
      const PackPlan again = plan_packing(counts, L);
      if (again.packs != plan.packs) fail(detail::concat("workload ", w, ": plan not deterministic"));
      if (packing_efficiency(plan, counts) > pad_to_budget_waste(counts, L)) {
        fail(detail::concat("workload ", w, ": waste above pad-to-budget"));
      }
    }
    const std::vector<std::int64_t> example = {1500, 1500, 500};
    const double waste = packing_efficiency(plan_packing(example, 2048), example);
    if (std::abs(waste - 0.1455) > 1e-4) {
      fail(detail::concat("example waste ", waste, " != 0.1455"));
    }
    r.metric = violations;
    r.passed = violations == 0;
    r.detail = r.passed ? detail::concat(o.packing_workloads, " workloads, example waste ", waste)
                        : detail::concat(violations, " violations; first: ", first);
    return r;
  });
}

// Streaming packed attention against the dense masked oracle (32-bit).
inline CheckResult verify_attention_oracle(const VerifyOptions& o) {
  return verify_detail::timed("attention_oracle", [&] {
    std::mt19937_64 gen(o.seed + 1);
    CheckResult r;
    r.tolerance = 1e-5;
    int worst = -1;
    for (int t = 0; t < o.attention_packs; ++t) {
      const AttentionConfig cfg = verify_detail::random_attention(gen, o.inject_fault);
      const PackLayout layout = verify_detail::random_layout(8, 256, gen);
      const verify_detail::Qkv x = verify_detail::random_qkv(layout, cfg, gen);
      const MatrixF ref = reference_attention(x.q, x.k, x.v, layout.cu_seqlens, cfg);
      const MatrixF got = packed_varlen_attention(x.q, x.k, x.v, layout.cu_seqlens, cfg);
      const double dev = verify_detail::max_abs(ref, got);
      if (dev > r.metric || worst < 0) {
        r.metric = std::max(r.metric, dev);
        worst = t;
      }
    }
    r.passed = r.metric <= r.tolerance;
    r.detail = detail::concat("max |packed - reference| = ", r.metric, " over ",
                              o.attention_packs, " packs (worst pack ", worst, ")");
    return r;
  });
}

// Perturbing one instance leaves every other instance's output untouched:
// exactly for the oracle, within 1e-6 for the streaming kernel.
inline CheckResult verify_isolation(const VerifyOptions& o) {
  return verify_detail::timed("isolation", [&] {
    std::mt19937_64 gen(o.seed + 2);
    CheckResult r;
    r.tolerance = 1e-6;
    double ref_dev = 0.0;
    for (int t = 0; t < o.isolation_trials; ++t) {
      const AttentionConfig cfg = verify_detail::random_attention(gen, o.inject_fault);
      const PackLayout layout = verify_detail::random_layout(8, 128, gen, 2);
      verify_detail::Qkv x = verify_detail::random_qkv(layout, cfg, gen);
      const MatrixF ref0 = reference_attention(x.q, x.k, x.v, layout.cu_seqlens, cfg);
      const MatrixF got0 = packed_varlen_attention(x.q, x.k, x.v, layout.cu_seqlens, cfg);
      std::uniform_int_distribution<std::size_t> which(0, layout.instances() - 1);
      const std::size_t k = which(gen);
      const int b = layout.begin(k), n = layout.length(k);
      x.q.middleRows(b, n) = verify_detail::randn<float>(n, cfg.model_dim, gen, 3.0);
      x.k.middleRows(b, n) = verify_detail::randn<float>(n, cfg.model_dim, gen, 3.0);
      x.v.middleRows(b, n) = verify_detail::randn<float>(n, cfg.model_dim, gen, 3.0);
      const MatrixF ref1 = reference_attention(x.q, x.k, x.v, layout.cu_seqlens, cfg);
      const MatrixF got1 = packed_varlen_attention(x.q, x.k, x.v, layout.cu_seqlens, cfg);
      for (std::size_t j = 0; j < layout.instances(); ++j) {
        if (j == k) continue;
        const int bj = layout.begin(j), nj = layout.length(j);
        ref_dev = std::max(ref_dev, verify_detail::max_abs(ref0.middleRows(bj, nj),
                                                           ref1.middleRows(bj, nj)));
        r.metric = std::max(r.metric, verify_detail::max_abs(got0.middleRows(bj, nj),
                                                             got1.middleRows(bj, nj)));
      }
    }
    r.passed = ref_dev == 0.0 && r.metric <= r.tolerance;
    r.detail = detail::concat("reference change ", ref_dev, " (must be 0), packed change ",
                              r.metric, " over ", o.isolation_trials, " trials");
    return r;
  });
}

// Shifting one instance's 2D coordinates leaves its attention logits fixed.
inline CheckResult verify_rope_invariance(const VerifyOptions& o) {
  return verify_detail::timed("rope_invariance", [&] {
    std::mt19937_64 gen(o.seed + 3);
    CheckResult r;
    r.tolerance = 1e-5;
    std::uniform_int_distribution<int> off(0, 64);
    for (int t = 0; t < o.rope_trials; ++t) {
      AttentionConfig cfg = verify_detail::random_attention(gen, false);
      const PackLayout layout = verify_detail::random_layout(4, 128, gen);
      MatrixF q = verify_detail::randn<float>(layout.total(), cfg.model_dim, gen, 1.5);
      MatrixF k = verify_detail::randn<float>(layout.total(), cfg.model_dim, gen, 1.5);
      if (cfg.qk_norm) {
        q = qk_normalize(q, cfg).y;
        k = qk_normalize(k, cfg).y;
      }
      std::vector<GridSize> origins(layout.instances(), GridSize{0, 0});
      for (GridSize& g : origins) g = {off(gen), off(gen)};
      const RopeTable base = rope_for_packed(layout, {cfg.head_dim()});
      const RopeTable moved = rope_for_packed(layout, {cfg.head_dim()}, origins);
      MatrixF q0 = q, k0 = k, q1 = q, k1 = k;
      apply_rope_rows(q0, base, cfg.num_heads);
      apply_rope_rows(k0, base, cfg.num_heads);
      apply_rope_rows(q1, moved, cfg.num_heads);
      apply_rope_rows(k1, moved, cfg.num_heads);
      const int hd = cfg.head_dim();
      const double scale = cfg.scale();
      for (std::size_t s = 0; s < layout.instances(); ++s) {
        const int b = layout.begin(s), n = layout.length(s);
        for (int h = 0; h < cfg.num_heads; ++h) {
          const MatrixF l0 = q0.block(b, h * hd, n, hd) * k0.block(b, h * hd, n, hd).transpose();
          const MatrixF l1 = q1.block(b, h * hd, n, hd) * k1.block(b, h * hd, n, hd).transpose();
          r.metric = std::max(r.metric, scale * verify_detail::max_abs(l0, l1));
        }
      }
    }
    r.passed = r.metric <= r.tolerance;
    r.detail = detail::concat("max logit change ", r.metric, " over ", o.rope_trials,
                              " trials with offsets up to (64, 64)");
    return r;
  });
}

// An untrained NiT-tiny outputs exactly zero velocity and every block maps its
// hidden state to itself.
inline CheckResult verify_adaln_zero(const VerifyOptions& o) {
  return verify_detail::timed("adaln_zero", [&] {
    std::mt19937_64 gen(o.seed + 4);
    CheckResult r;
    r.tolerance = 1e-6;
    const ModelConfig cfg = ModelConfig::tiny();
    const ModelParams<float> p = init_model_params<float>(cfg, o.seed + 5);
    double max_out = 0.0;
    std::uniform_real_distribution<double> t(0.0, 1.0);
    std::uniform_int_distribution<int> label(-1, cfg.num_classes - 1);
    for (int b = 0; b < o.adaln_batches; ++b) {
      const PackLayout layout = verify_detail::random_layout(6, 64, gen);
      std::vector<double> times;
      std::vector<int> labels;
      for (std::size_t k = 0; k < layout.instances(); ++k) {
        times.push_back(t(gen));
        labels.push_back(label(gen));
      }
      const MatrixF x = verify_detail::randn<float>(layout.total(), cfg.token_dim(), gen);
      ModelCache<float> cache;
      const MatrixF v = model_forward(p, x, layout, times, labels,
                                      rope_for_packed(layout, cfg.rope()), &cache);
      max_out = std::max(max_out, static_cast<double>(v.cwiseAbs().maxCoeff()));
      for (std::size_t i = 1; i < cache.hidden.size(); ++i) {
        r.metric = std::max(r.metric, verify_detail::max_abs(cache.hidden[i], cache.hidden[i - 1]));
      }
    }
    r.passed = max_out == 0.0 && r.metric <= r.tolerance;
    r.detail = detail::concat("max |velocity| ", max_out, " (must be 0), max block change ",
                              r.metric, " over ", o.adaln_batches, " batches");
    return r;
  });
}

// Analytic parameter gradients of the flow-matching loss against central
// differences (64-bit, step 1e-4) on a d=16, depth-2 model.
inline CheckResult verify_gradients(const VerifyOptions& o) {
  return verify_detail::timed("gradients", [&] {
    std::mt19937_64 gen(o.seed + 6);
    CheckResult r;
    r.tolerance = 1e-3;
    ModelConfig cfg;
    cfg.hidden = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.freq_dim = 32;
    cfg.tile_size = 5;
    cfg.qk_norm = true;
    ModelParams<double> p = init_model_params<double>(cfg, o.seed + 7);
    jitter_params(p, 0.1, o.seed + 8);
    const PackLayout layout = PackLayout::from_grids({{2, 3}, {1, 4}, {3, 3}});
    const std::vector<double> times = {0.15, 0.6, 0.85};
    const std::vector<int> labels = {0, kNullLabel, 3};
    const MatrixD x = verify_detail::randn<double>(layout.total(), cfg.token_dim(), gen);
    const MatrixD eps = verify_detail::randn<double>(layout.total(), cfg.token_dim(), gen);
    const MatrixD xt = add_noise_packed(x, eps, times, layout);
    const MatrixD target = velocity_target(x, eps);
    const RopeTable rope = rope_for_packed(layout, cfg.rope());
    auto loss = [&] {
      return fm_loss(model_forward(p, xt, layout, times, labels, rope), target, layout);
    };
    ModelCache<double> cache;
    const MatrixD pred = model_forward(p, xt, layout, times, labels, rope, &cache);
    ModelParams<double> g = zeros_like(p);
    model_backward(p, cache, fm_loss_grad(pred, target, layout), layout, rope, g);

    std::vector<MatrixD*> params, grads;
    std::vector<std::string> names;
    for_each_param(p, [&](const std::string& name, MatrixD& m) {
      params.push_back(&m);
      names.push_back(name);
    });
    for_each_param(g, [&](const std::string&, MatrixD& m) { grads.push_back(&m); });
    // Every tensor at least once, then uniformly random tensors.
    std::uniform_int_distribution<std::size_t> which(0, params.size() - 1);
    const double h = 1e-4;
    std::string worst;
    for (int c = 0; c < std::max<int>(o.gradient_coords, static_cast<int>(params.size())); ++c) {
      const std::size_t m = c < static_cast<int>(params.size()) ? c : which(gen);
      std::uniform_int_distribution<Eigen::Index> idx(0, params[m]->size() - 1);
      const Eigen::Index i = idx(gen);
      double& w = params[m]->data()[i];
      const double saved = w;
      w = saved + h;
      const double up = loss();
      w = saved - h;
      const double down = loss();
      w = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grads[m]->data()[i];
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), o.gradient_floor});
      if (rel > r.metric || worst.empty()) {
        r.metric = std::max(r.metric, rel);
        worst = detail::concat(names[m], "[", i, "] analytic ", analytic, " numeric ", numeric);
      }
    }
    r.passed = r.metric <= r.tolerance;
    r.detail = detail::concat("max relative error ", r.metric, " over ",
                              std::max<int>(o.gradient_coords, static_cast<int>(params.size())),
                              " coordinates; worst ", worst);
    return r;
  });
}

inline const std::vector<std::string>& verify_suite_names() {
  static const std::vector<std::string> names = {"packing",         "attention_oracle",
                                                 "isolation",       "rope_invariance",
                                                 "adaln_zero",      "gradients"};
  return names;
}

inline CheckResult run_suite(const std::string& name, const VerifyOptions& o) {
  if (name == "packing") return verify_packing(o);
  if (name == "attention_oracle") return verify_attention_oracle(o);
  if (name == "isolation") return verify_isolation(o);
  if (name == "rope_invariance") return verify_rope_invariance(o);
  if (name == "adaln_zero") return verify_adaln_zero(o);
  if (name == "gradients") return verify_gradients(o);
  throw ValidationError("unknown verify suite '" + name + "'");
}

inline void write_verify_csv(std::ostream& os, const std::vector<CheckResult>& results) {
  os << "suite,passed,metric,tolerance,seconds\n";
  for (const CheckResult& r : results) {
    os << r.suite << ',' << (r.passed ? 1 : 0) << ',' << r.metric << ',' << r.tolerance << ','
       << r.seconds << '\n';
  }
}

inline void write_verify_report(std::ostream& os, const std::vector<CheckResult>& results) {
  for (const CheckResult& r : results) {
    os << (r.passed ? "PASS " : "FAIL ") << r.suite << ": " << r.detail << " ("
       << r.seconds << " s)\n";
  }
}

}  // namespace nit
