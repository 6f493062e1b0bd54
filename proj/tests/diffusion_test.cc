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

#include "nit/diffusion.hpp"

#include <algorithm>
#include <random>

#include "gtest/gtest.h"

namespace nit {
namespace {

template <typename T>
Matrix<T> randn(Eigen::Index r, Eigen::Index c, std::mt19937& gen, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix<T> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(gen));
  return m;
}

// Multiples of 2^-10 in [-8, 8]: products and sums below stay exact in double.
MatrixD dyadic(Eigen::Index r, Eigen::Index c, std::mt19937& gen) {
  std::uniform_int_distribution<int> u(-8192, 8192);
  MatrixD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::ldexp(u(gen), -10);
  return m;
}

double median(std::vector<double> v) {
  std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
  return v[v.size() / 2];
}

TEST(TimeSamplerTest, DegenerateSpreadGivesHalf) {
  TimeSampler s(0.0, 0.0, 1);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(s.sample(), 0.5);
}

TEST(TimeSamplerTest, MedianMatchesLogitNormal) {
  for (double mean : {0.0, 0.8, -1.2}) {
    TimeSampler s(mean, 1.0, 42);
    std::vector<double> t(100000);
    for (double& v : t) {
      v = s.sample();
      ASSERT_GT(v, 0.0);
      ASSERT_LT(v, 1.0);
    }
    EXPECT_NEAR(median(t), 1.0 / (1.0 + std::exp(-mean)), 0.02) << "p_mean " << mean;
  }
}

TEST(TimeSamplerTest, SeededDeterminism) {
  TimeSampler a(0.0, 1.0, 9), b(0.0, 1.0, 9), c(0.0, 1.0, 10);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const double x = a.sample();
    EXPECT_EQ(x, b.sample());
    differs |= x != c.sample();
  }
  EXPECT_TRUE(differs);
}

TEST(AddNoiseTest, Examples) {
  std::mt19937 gen(1);
  const MatrixD x = randn<double>(5, 3, gen), eps = randn<double>(5, 3, gen);
  EXPECT_EQ(add_noise(x, eps, 0.0), x);
  EXPECT_EQ(add_noise(x, eps, 1.0), eps);
  const MatrixD four = MatrixD::Constant(1, 1, 4.0), zero = MatrixD::Zero(1, 1);
  EXPECT_EQ(add_noise(four, zero, 0.25)(0, 0), 3.0);
  EXPECT_THROW(add_noise(x, MatrixD(MatrixD::Zero(5, 2)), 0.5), ValidationError);
  EXPECT_THROW(add_noise(x, eps, 1.5), ValidationError);
  EXPECT_THROW(add_noise(x, eps, -0.1), ValidationError);
}

TEST(AddNoiseTest, PackedUsesEachInstanceTime) {
  std::mt19937 gen(2);
  const PackLayout layout = PackLayout::from_grids({{1, 2}, {2, 2}});
  const MatrixD x = randn<double>(6, 3, gen), eps = randn<double>(6, 3, gen);
  const std::vector<double> times = {0.0, 1.0};
  const MatrixD out = add_noise_packed(x, eps, times, layout);
  EXPECT_EQ(out.topRows(2), x.topRows(2));
  EXPECT_EQ(out.bottomRows(4), eps.bottomRows(4));
}

TEST(VelocityTargetTest, Examples) {
  std::mt19937 gen(3);
  const MatrixD x = randn<double>(4, 4, gen), eps = randn<double>(4, 4, gen);
  EXPECT_TRUE(velocity_target(x, x).isZero(0.0));
  EXPECT_EQ(velocity_target(MatrixD(MatrixD::Zero(4, 4)), eps), eps);
  const MatrixD v = velocity_target(x, eps);
  for (double t : {0.1, 0.5, 0.9}) {
    const double h = 1e-6;
    const MatrixD deriv = (add_noise(x, eps, t + h) - add_noise(x, eps, t - h)) / (2 * h);
    EXPECT_LT((deriv - v).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(PathProperty, ConsistencyIsExactOnDyadicInputs) {
  std::mt19937 gen(4);
  std::uniform_int_distribution<int> tick(0, 1024);
  for (int trial = 0; trial < 500; ++trial) {
    const MatrixD x = dyadic(3, 5, gen), eps = dyadic(3, 5, gen);
    const double t = std::ldexp(tick(gen), -10), t2 = std::ldexp(tick(gen), -10);
    const MatrixD lhs = add_noise(x, eps, t) - add_noise(x, eps, t2);
    const MatrixD rhs = (t - t2) * velocity_target(x, eps);
    ASSERT_EQ(lhs, rhs) << "t " << t << " t' " << t2;
  }
}

TEST(PathProperty, ConsistencyWithinRoundingOnArbitraryInputs) {
  std::mt19937 gen(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const MatrixD x = randn<double>(3, 5, gen), eps = randn<double>(3, 5, gen);
    const double t = u(gen), t2 = u(gen);
    const MatrixD diff = add_noise(x, eps, t) - add_noise(x, eps, t2) -
                         (t - t2) * velocity_target(x, eps);
    const double scale = x.cwiseAbs().maxCoeff() + eps.cwiseAbs().maxCoeff();
    ASSERT_LE(diff.cwiseAbs().maxCoeff(), 8 * std::numeric_limits<double>::epsilon() * scale);
  }
}

TEST(FmLossTest, Examples) {
  std::mt19937 gen(6);
  const PackLayout layout = PackLayout::from_grids({{2, 2}, {1, 1}, {3, 2}});
  const MatrixD target = randn<double>(11, 3, gen);
  EXPECT_EQ(fm_loss(target, target, layout), 0.0);
  EXPECT_DOUBLE_EQ(fm_loss(MatrixD(target.array() + 1.0), target, layout), 1.0);

  const MatrixD pred = randn<double>(11, 3, gen);
  double brute = 0.0;
  for (auto [b, n] : {std::pair{0, 4}, std::pair{4, 1}, std::pair{5, 6}}) {
    brute += (pred.middleRows(b, n) - target.middleRows(b, n)).array().square().mean();
  }
  EXPECT_NEAR(fm_loss(pred, target, layout), brute / 3, 1e-14);
}

TEST(FmLossTest, GradientMatchesFiniteDifferences) {
  std::mt19937 gen(7);
  const PackLayout layout = PackLayout::from_grids({{1, 3}, {2, 1}});
  MatrixD pred = randn<double>(5, 2, gen);
  const MatrixD target = randn<double>(5, 2, gen);
  const MatrixD g = fm_loss_grad(pred, target, layout);
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const double saved = pred.data()[i];
    pred.data()[i] = saved + 1e-6;
    const double up = fm_loss(pred, target, layout);
    pred.data()[i] = saved - 1e-6;
    const double down = fm_loss(pred, target, layout);
    pred.data()[i] = saved;
    EXPECT_NEAR(g.data()[i], (up - down) / 2e-6, 1e-8);
  }
}

TEST(GuidanceTest, GatingContract) {
  std::mt19937 gen(8);
  const MatrixF vc = randn<float>(6, 4, gen), vu = randn<float>(6, 4, gen);
  const GuidanceConfig g{3.0, 0.2, 0.6};
  for (double t : {0.0, 0.1, 0.19, 0.61, 0.9, 1.0}) EXPECT_EQ(cfg_velocity(vc, vu, g, t), vc);
  const MatrixF inside = cfg_velocity(vc, vu, g, 0.4);
  EXPECT_EQ(inside, MatrixF(vu + 3.0f * (vc - vu)));
  const GuidanceConfig unit{1.0, 0.0, 1.0};
  for (double t : {0.0, 0.5, 1.0}) EXPECT_EQ(cfg_velocity(vc, vu, unit, t), vc);
}

TEST(GuidanceTest, ReferenceConfigAndValidation) {
  const GuidanceConfig r = GuidanceConfig::reference_256();
  EXPECT_EQ(r.scale, 2.25);
  EXPECT_EQ(r.t_lo, 0.0);
  EXPECT_EQ(r.t_hi, 0.7);
  EXPECT_NO_THROW(r.validate());
  EXPECT_TRUE(r.applies(0.7));
  EXPECT_FALSE(r.applies(0.71));
  EXPECT_THROW((GuidanceConfig{0.5, 0.0, 1.0}.validate()), ValidationError);
  EXPECT_THROW((GuidanceConfig{2.0, 0.8, 0.2}.validate()), ValidationError);
  EXPECT_THROW((GuidanceConfig{2.0, 0.0, 1.2}.validate()), ValidationError);
}

TEST(EulerSampleTest, OneStepInvertsExactVelocity) {
  const GridSize grid{3, 4};
  const MatrixF eps = gaussian_tokens(12, 5, 77);
  std::mt19937 gen(9);
  const MatrixF target = randn<float>(12, 5, gen);
  const VelocityFn exact = [&](const MatrixF&, double, int) { return MatrixF(eps - target); };
  const MatrixF x = euler_sample(exact, grid, 5, 0, {1, 77}, {});
  EXPECT_LE((x - target).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(EulerSampleTest, ZeroVelocityKeepsNoiseAndShape) {
  const VelocityFn zero = [](const MatrixF& x, double, int) {
    return MatrixF(MatrixF::Zero(x.rows(), x.cols()));
  };
  for (int steps : {1, 2}) {
    const MatrixF x = euler_sample(zero, {2, 3}, 4, 1, {steps, 5}, {});
    EXPECT_EQ(x, gaussian_tokens(6, 4, 5));
  }
  for (GridSize g : {GridSize{1, 1}, GridSize{5, 3}, GridSize{6, 10}}) {
    const MatrixF x = euler_sample(zero, g, 7, 0, {3, 1}, {});
    EXPECT_EQ(x.rows(), g.count());
    EXPECT_EQ(x.cols(), 7);
  }
}

TEST(EulerSampleTest, UsesUniformTimesAndGuidanceWindow) {
  std::vector<std::pair<double, int>> calls;
  const VelocityFn record = [&](const MatrixF& x, double t, int label) {
    calls.emplace_back(t, label);
    return MatrixF(MatrixF::Zero(x.rows(), x.cols()));
  };
  euler_sample(record, {1, 1}, 2, 3, {4, 0}, {2.0, 0.0, 0.5});
  const std::vector<std::pair<double, int>> expected = {
      {1.0, 3}, {0.75, 3}, {0.5, 3}, {0.5, kNullLabel}, {0.25, 3}, {0.25, kNullLabel}};
  EXPECT_EQ(calls, expected);
}

ModelParams<float> trained_like_model() {
  ModelConfig cfg;
  cfg.hidden = 16;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.latent_channels = 3;
  cfg.freq_dim = 16;
  cfg.num_classes = 2;
  ModelParams<float> p = init_model_params<float>(cfg, 3);
  jitter_params(p, 0.05, 4);
  return p;
}

TEST(SamplePackedTest, MatchesSingleInstanceEulerAndIsDeterministic) {
  const ModelParams<float> p = trained_like_model();
  const std::vector<SampleRequest> req = {{{2, 3}, 0, 11}, {{4, 1}, 1, 12}, {{1, 1}, kNullLabel, 13}};
  for (const GuidanceConfig& g : {GuidanceConfig{}, GuidanceConfig{2.0, 0.0, 0.6}}) {
    const std::vector<MatrixF> a = sample_packed(p, req, 5, g);
    const std::vector<MatrixF> b = sample_packed(p, req, 5, g);
    ASSERT_EQ(a.size(), 3u);
    for (std::size_t i = 0; i < req.size(); ++i) {
      EXPECT_EQ(a[i], b[i]);
      const MatrixF solo = euler_sample(model_velocity(p, req[i].grid), req[i].grid,
                                        p.config.token_dim(), req[i].label, {5, req[i].seed}, g);
      EXPECT_LE((a[i] - solo).cwiseAbs().maxCoeff(), 1e-5) << "request " << i;
    }
  }
}

}  // namespace
}  // namespace nit
