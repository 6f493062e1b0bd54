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

#include "nit/packing.hpp"

#include <random>

#include "gtest/gtest.h"

namespace nit {
namespace {

using Counts = std::vector<std::int64_t>;

TEST(CuSeqlensTest, PrefixSums) {
  EXPECT_EQ(build_cu_seqlens({4, 6, 2}), (std::vector<std::int32_t>{0, 4, 10, 12}));
  EXPECT_EQ(build_cu_seqlens({5}), (std::vector<std::int32_t>{0, 5}));
  EXPECT_EQ(build_cu_seqlens({64, 1024}), (std::vector<std::int32_t>{0, 64, 1088}));
}

TEST(CuSeqlensTest, RejectsOverflowAndNonPositive) {
  EXPECT_THROW(build_cu_seqlens({std::int64_t{1} << 30, std::int64_t{1} << 30}),
               ValidationError);
  EXPECT_NO_THROW(build_cu_seqlens({(std::int64_t{1} << 31) - 1}));
  EXPECT_THROW(build_cu_seqlens({3, 0}), ValidationError);
}

TEST(PlanPackingTest, HandExecutedExamples) {
  const PackPlan a = plan_packing({1024, 512, 256, 256}, 2048);
  ASSERT_EQ(a.packs.size(), 1u);
  EXPECT_EQ(a.packs[0], (std::vector<std::size_t>{0, 1, 2, 3}));

  const Counts one = {2048};
  const PackPlan b = plan_packing(one, 2048);
  ASSERT_EQ(b.packs.size(), 1u);
  EXPECT_EQ(packing_efficiency(b, one), 0.0);

  const Counts three = {1500, 1500, 500};
  const PackPlan c = plan_packing(three, 2048);
  ASSERT_EQ(c.packs.size(), 2u);
  EXPECT_EQ(c.packs[0], (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(c.packs[1], (std::vector<std::size_t>{1}));
  EXPECT_DOUBLE_EQ(packing_efficiency(c, three), (2048.0 * 2 - 3500) / 4096);
  EXPECT_NEAR(packing_efficiency(c, three), 0.1455, 1e-4);
}

// Every assignment of instances to two packs; the smallest feasible pack
// count is the optimum the greedy plan should reach on this tiny case.
TEST(PlanPackingTest, BruteForceConfirmsTwoPackOptimum) {
  const Counts counts = {1500, 1500, 500};
  const std::int64_t L = 2048;
  const std::int64_t total = 3500;
  int feasible_one = total <= L;
  int feasible_two = 0;
  for (int mask = 0; mask < (1 << counts.size()); ++mask) {
    std::int64_t s0 = 0, s1 = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) ((mask >> i) & 1 ? s1 : s0) += counts[i];
    if (s0 <= L && s1 <= L && s0 > 0 && s1 > 0) ++feasible_two;
  }
  EXPECT_EQ(feasible_one, 0);
  EXPECT_GT(feasible_two, 0);
  EXPECT_EQ(plan_packing(counts, L).packs.size(), 2u);
}

TEST(PlanPackingTest, RejectsOversizedInstanceByIndex) {
  try {
    plan_packing({10, 3000, 5}, 2048);
    FAIL() << "expected rejection";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("instance 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(plan_packing({0}, 8), ValidationError);
}

TEST(PlanPackingTest, TiesKeepInputOrder) {
  const PackPlan p = plan_packing({4, 4, 4, 4}, 8);
  ASSERT_EQ(p.packs.size(), 2u);
  EXPECT_EQ(p.packs[0], (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(p.packs[1], (std::vector<std::size_t>{2, 3}));
}

TEST(PlanPackingTest, UnderfullTailStillShips) {
  const Counts counts = {7, 7, 7};
  const PackPlan p = plan_packing(counts, 8);
  EXPECT_EQ(p.packs.size(), 3u);
  EXPECT_EQ(check_plan(p, counts), "");
}

TEST(PackingEfficiencyTest, PadToMaxBaseline) {
  const Counts counts = {64, 1024};
  EXPECT_NEAR(pad_to_max_waste(counts), 1.0 - 1088.0 / 2048.0, 1e-12);
  EXPECT_NEAR(pad_to_max_waste(counts), 0.4688, 1e-4);
  const PackPlan p = plan_packing(counts, 1088);
  EXPECT_LT(packing_efficiency(p, counts), pad_to_max_waste(counts));
}

TEST(PackingProperty, RandomWorkloads) {
  std::mt19937_64 gen(2024);
  for (int trial = 0; trial < 500; ++trial) {
    const std::int64_t L = std::uniform_int_distribution<std::int64_t>(16, 4096)(gen);
    const int n = std::uniform_int_distribution<int>(1, 60)(gen);
    Counts counts(n);
    for (auto& c : counts) c = std::uniform_int_distribution<std::int64_t>(1, L)(gen);
    const PackPlan plan = plan_packing(counts, L);
    ASSERT_EQ(check_plan(plan, counts), "") << "trial " << trial;
    const PackPlan again = plan_packing(counts, L);
    ASSERT_EQ(plan.packs, again.packs);
    ASSERT_LE(packing_efficiency(plan, counts), pad_to_budget_waste(counts, L) + 1e-12);
  }
}

TEST(CheckPlanTest, DetectsViolations) {
  const Counts counts = {3, 3, 3};
  EXPECT_NE(check_plan({{{0, 1, 2}}, 8}, counts), "");
  EXPECT_NE(check_plan({{{0, 1}}, 8}, counts), "");
  EXPECT_NE(check_plan({{{0, 1}, {1, 2}}, 8}, counts), "");
  EXPECT_EQ(check_plan({{{0, 1}, {2}}, 8}, counts), "");
}

TokenMatrix block(int rows, int dim, float base, int gh = -1) {
  TokenMatrix t{MatrixF(rows, dim), gh < 0 ? rows : gh, gh < 0 ? 1 : rows / gh};
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < dim; ++c) t.tokens(r, c) = base + r * 10 + c;
  return t;
}

TEST(AssembleTest, ConcatenatesWithoutPadding) {
  const std::vector<TokenMatrix> xs = {block(4, 3, 100, 2), block(2, 3, 200)};
  const std::vector<std::size_t> pack = {0, 1};
  const std::vector<int> labels = {2, 5};
  const std::vector<float> times = {0.25f, 0.75f};
  const PackedBatch b = assemble_packed_batch(xs, pack, labels, times);
  EXPECT_EQ(b.layout.cu_seqlens, (std::vector<std::int32_t>{0, 4, 6}));
  ASSERT_EQ(b.tokens.rows(), 6);
  EXPECT_EQ(b.tokens.topRows(4), xs[0].tokens);
  EXPECT_EQ(b.tokens.bottomRows(2), xs[1].tokens);
  EXPECT_EQ(b.labels, labels);
  EXPECT_EQ(b.times, times);
  EXPECT_EQ(b.layout.grids[0], (GridSize{2, 2}));
  EXPECT_NO_THROW(b.layout.validate());
}

TEST(AssembleTest, SingleInstanceIsIdentity) {
  const std::vector<TokenMatrix> xs = {block(5, 2, 1)};
  const std::vector<std::size_t> pack = {0};
  const PackedBatch b = assemble_packed_batch(xs, pack);
  EXPECT_EQ(b.tokens, xs[0].tokens);
  EXPECT_EQ(b.layout.cu_seqlens, (std::vector<std::int32_t>{0, 5}));
  EXPECT_EQ(b.labels, (std::vector<int>{kNullLabel}));
}

TEST(AssembleTest, PermutingPackPermutesBlocks) {
  const std::vector<TokenMatrix> xs = {block(3, 2, 0), block(1, 2, 50), block(2, 2, 90)};
  const std::vector<std::size_t> fwd = {0, 1, 2};
  const std::vector<std::size_t> perm = {2, 0, 1};
  const PackedBatch a = assemble_packed_batch(xs, fwd);
  const PackedBatch b = assemble_packed_batch(xs, perm);
  for (std::size_t k = 0; k < perm.size(); ++k) {
    const std::size_t src = perm[k];
    EXPECT_EQ(b.tokens.middleRows(b.layout.begin(k), b.layout.length(k)),
              a.tokens.middleRows(a.layout.begin(src), a.layout.length(src)));
  }
  EXPECT_EQ(b.source, perm);
}

TEST(AssembleTest, RejectsDimensionMismatch) {
  const std::vector<TokenMatrix> xs = {block(3, 2, 0), block(3, 4, 0)};
  const std::vector<std::size_t> pack = {0, 1};
  EXPECT_THROW(assemble_packed_batch(xs, pack), ValidationError);
}

}  // namespace
}  // namespace nit
