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

// Sequence packing: longest-pack-first histogram planning, cumulative
// sequence lengths, and packed-batch assembly.

#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <span>
#include <vector>

#include "nit/core.hpp"
#include "nit/tokenizer.hpp"

namespace nit {

struct PackPlan {
  std::vector<std::vector<std::size_t>> packs;
  std::int64_t max_len = 0;
};

inline std::vector<std::int32_t> build_cu_seqlens(std::span<const std::int64_t> counts) {
  std::vector<std::int32_t> cu;
  cu.reserve(counts.size() + 1);
  cu.push_back(0);
  std::int64_t total = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    detail::require(counts[i] > 0, "segment ", i, " has non-positive length ",
                    counts[i]);
    total += counts[i];
    detail::require(total <= std::numeric_limits<std::int32_t>::max(),
                    "cumulative sequence length overflows int32 at segment ", i);
    cu.push_back(static_cast<std::int32_t>(total));
  }
  return cu;
}

inline std::vector<std::int32_t> build_cu_seqlens(std::initializer_list<std::int64_t> counts) {
  return build_cu_seqlens(std::span<const std::int64_t>(counts.begin(), counts.size()));
}

// Greedy longest-pack-first over a histogram of lengths. Each pack is opened
// with the longest remaining instance and then topped up with the longest
// instance that still fits. Equal lengths are consumed in input order.
inline PackPlan plan_packing(std::span<const std::int64_t> token_counts,
                             std::int64_t max_len) {
  detail::require(max_len > 0, "token budget must be positive");
  std::map<std::int64_t, std::queue<std::size_t>> histogram;
  for (std::size_t i = 0; i < token_counts.size(); ++i) {
    detail::require(token_counts[i] > 0, "instance ", i,
                    " has non-positive token count ", token_counts[i]);
    detail::require(token_counts[i] <= max_len, "instance ", i, " has ",
                    token_counts[i], " tokens, exceeding the budget ", max_len);
    histogram[token_counts[i]].push(i);
  }
  PackPlan plan{{}, max_len};
  auto take = [&](std::map<std::int64_t, std::queue<std::size_t>>::iterator it) {
    const std::size_t idx = it->second.front();
    it->second.pop();
    if (it->second.empty()) histogram.erase(it);
    return idx;
  };
  while (!histogram.empty()) {
    std::vector<std::size_t> pack;
    auto longest = std::prev(histogram.end());
    std::int64_t remaining = max_len - longest->first;
    pack.push_back(take(longest));
    while (remaining > 0 && !histogram.empty()) {
      auto fit = histogram.upper_bound(remaining);
      if (fit == histogram.begin()) break;
      --fit;
      remaining -= fit->first;
      pack.push_back(take(fit));
    }
    plan.packs.push_back(std::move(pack));
  }
  return plan;
}

inline PackPlan plan_packing(std::initializer_list<std::int64_t> counts, std::int64_t max_len) {
  return plan_packing(std::span<const std::int64_t>(counts.begin(), counts.size()), max_len);
}

// 1 - used / allotted, where every pack is charged the full budget.
inline double packing_efficiency(const PackPlan& plan,
                                 std::span<const std::int64_t> token_counts) {
  if (plan.packs.empty()) return 0.0;
  std::int64_t used = 0;
  for (const auto& pack : plan.packs) {
    for (std::size_t idx : pack) used += token_counts[idx];
  }
  const double allotted = static_cast<double>(plan.packs.size()) * plan.max_len;
  return 1.0 - static_cast<double>(used) / allotted;
}

// Baseline: every instance padded to the budget in its own row.
inline double pad_to_budget_waste(std::span<const std::int64_t> token_counts,
                                  std::int64_t max_len) {
  if (token_counts.empty()) return 0.0;
  const double used = std::accumulate(token_counts.begin(), token_counts.end(), 0.0);
  return 1.0 - used / (static_cast<double>(token_counts.size()) * max_len);
}

// Baseline: every instance padded to the longest one in the batch.
inline double pad_to_max_waste(std::span<const std::int64_t> token_counts) {
  if (token_counts.empty()) return 0.0;
  const std::int64_t longest = *std::max_element(token_counts.begin(), token_counts.end());
  const double used = std::accumulate(token_counts.begin(), token_counts.end(), 0.0);
  return 1.0 - used / (static_cast<double>(token_counts.size()) * longest);
}

// Checks partition and capacity; returns an empty string when valid.
inline std::string check_plan(const PackPlan& plan,
                              std::span<const std::int64_t> token_counts) {
  std::vector<int> seen(token_counts.size(), 0);
  for (std::size_t p = 0; p < plan.packs.size(); ++p) {
    std::int64_t sum = 0;
    if (plan.packs[p].empty()) return detail::concat("pack ", p, " is empty");
    for (std::size_t idx : plan.packs[p]) {
      if (idx >= token_counts.size()) return detail::concat("pack ", p, " has bad index ", idx);
      ++seen[idx];
      sum += token_counts[idx];
    }
    if (sum > plan.max_len) {
      return detail::concat("pack ", p, " holds ", sum, " tokens > budget ", plan.max_len);
    }
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (seen[i] != 1) return detail::concat("instance ", i, " packed ", seen[i], " times");
  }
  return {};
}

struct GridSize {
  int h = 0;
  int w = 0;
  int count() const { return h * w; }
  friend bool operator==(const GridSize&, const GridSize&) = default;
};

// Segment geometry of a packed sequence.
struct PackLayout {
  std::vector<std::int32_t> cu_seqlens{0};
  std::vector<GridSize> grids;

  static PackLayout from_grids(std::vector<GridSize> grids) {
    std::vector<std::int64_t> counts;
    counts.reserve(grids.size());
    for (const GridSize& g : grids) {
      detail::require(g.h > 0 && g.w > 0, "grid dimensions must be positive");
      counts.push_back(g.count());
    }
    return {build_cu_seqlens(counts), std::move(grids)};
  }

  std::size_t instances() const { return cu_seqlens.size() - 1; }
  int total() const { return cu_seqlens.back(); }
  int begin(std::size_t k) const { return cu_seqlens[k]; }
  int end(std::size_t k) const { return cu_seqlens[k + 1]; }
  int length(std::size_t k) const { return cu_seqlens[k + 1] - cu_seqlens[k]; }

  // Instance index of every packed row.
  std::vector<int> row_owner() const {
    std::vector<int> owner(static_cast<std::size_t>(total()));
    for (std::size_t k = 0; k < instances(); ++k) {
      std::fill(owner.begin() + begin(k), owner.begin() + end(k), static_cast<int>(k));
    }
    return owner;
  }

  void validate() const {
    detail::require(!cu_seqlens.empty() && cu_seqlens.front() == 0,
                    "cu_seqlens must start at 0");
    for (std::size_t k = 1; k < cu_seqlens.size(); ++k) {
      detail::require(cu_seqlens[k] > cu_seqlens[k - 1], "segment ", k - 1,
                      " has non-positive length");
    }
    detail::require(grids.size() == instances(), "grid list has ", grids.size(),
                    " entries for ", instances(), " segments");
    for (std::size_t k = 0; k < grids.size(); ++k) {
      detail::require(grids[k].count() == length(k), "segment ", k, " has ",
                      length(k), " rows but grid ", grids[k].h, "x", grids[k].w);
    }
  }
};

struct PackedBatch {
  MatrixF tokens;
  PackLayout layout;
  std::vector<int> labels;
  std::vector<float> times;
  std::vector<std::size_t> source;  // index of each instance in the input list

  std::size_t instances() const { return layout.instances(); }
};

inline PackedBatch assemble_packed_batch(std::span<const TokenMatrix> latents,
                                         std::span<const std::size_t> pack,
                                         std::span<const int> labels = {},
                                         std::span<const float> times = {}) {
  detail::require(!pack.empty(), "cannot assemble an empty pack");
  detail::require(labels.empty() || labels.size() == latents.size(),
                  "label list does not match instance list");
  detail::require(times.empty() || times.size() == latents.size(),
                  "time list does not match instance list");
  std::vector<GridSize> grids;
  int token_dim = -1;
  for (std::size_t idx : pack) {
    detail::require(idx < latents.size(), "pack references missing instance ", idx);
    const TokenMatrix& tm = latents[idx];
    if (token_dim < 0) token_dim = tm.token_dim();
    detail::require(tm.token_dim() == token_dim, "instance ", idx, " has token dim ",
                    tm.token_dim(), ", expected ", token_dim);
    detail::require(tm.rows() == tm.grid_h * tm.grid_w, "instance ", idx,
                    " rows disagree with its grid");
    grids.push_back({tm.grid_h, tm.grid_w});
  }
  PackedBatch batch;
  batch.layout = PackLayout::from_grids(std::move(grids));
  batch.tokens.resize(batch.layout.total(), token_dim);
  for (std::size_t k = 0; k < pack.size(); ++k) {
    const TokenMatrix& tm = latents[pack[k]];
    batch.tokens.middleRows(batch.layout.begin(k), tm.rows()) = tm.tokens;
    batch.labels.push_back(labels.empty() ? kNullLabel : labels[pack[k]]);
    batch.times.push_back(times.empty() ? 0.0f : times[pack[k]]);
    batch.source.push_back(pack[k]);
  }
  return batch;
}

}  // namespace nit
