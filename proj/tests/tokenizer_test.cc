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

#include "nit/tokenizer.hpp"

#include <random>
#include <sstream>

#include "gtest/gtest.h"

namespace nit {
namespace {

LatentImage make_latent(int c, int h, int w, int p, std::vector<float> values) {
  LatentImage l{Tensor3(c, h, w), 0, p};
  l.data.data() = std::move(values);
  return l;
}

LatentImage random_latent(int c, int h, int w, int p, std::mt19937& gen) {
  std::normal_distribution<float> n;
  LatentImage l{Tensor3(c, h, w), 3, p};
  for (float& v : l.data.data()) v = n(gen);
  return l;
}

TEST(LatentShapeTest, ThirtyTwoTimesDownsampling) {
  EXPECT_EQ(latent_shape({256, 256, 3, 0}, 32, 32), (LatentShape{8, 8, 32}));
  EXPECT_EQ(latent_shape({32, 32, 3, {}}, 32, 32), (LatentShape{1, 1, 32}));
  EXPECT_EQ(latent_shape({448, 768, 3, {}}, 32, 32), (LatentShape{14, 24, 32}));
}

TEST(LatentShapeTest, RejectsNonDivisibleAxisByName) {
  try {
    latent_shape({432, 768, 3, {}}, 32, 32);
    FAIL() << "expected rejection";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("height"), std::string::npos) << e.what();
  }
  try {
    latent_shape({448, 770, 3, {}}, 32, 32);
    FAIL() << "expected rejection";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("width"), std::string::npos) << e.what();
  }
  EXPECT_THROW(latent_shape({16, 32, 3, {}}, 32, 32), ValidationError);
}

TEST(PatchifyTest, UnitPatchIsRasterReshape) {
  const TokenMatrix t = patchify(make_latent(1, 2, 2, 1, {1, 2, 3, 4}));
  ASSERT_EQ(t.rows(), 4);
  ASSERT_EQ(t.token_dim(), 1);
  EXPECT_EQ(t.grid_h, 2);
  EXPECT_EQ(t.grid_w, 2);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(t.tokens(i, 0), static_cast<float>(i + 1));
}

TEST(PatchifyTest, SinglePatchFlatten) {
  const TokenMatrix t = patchify(make_latent(1, 2, 2, 2, {1, 2, 3, 4}));
  ASSERT_EQ(t.rows(), 1);
  ASSERT_EQ(t.token_dim(), 4);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(t.tokens(0, i), static_cast<float>(i + 1));
}

TEST(PatchifyTest, ChannelIsFastestWithinPatch) {
  // ch0 = [[1,2],[3,4]], ch1 = [[5,6],[7,8]] -> (py, px, c) order.
  const TokenMatrix t = patchify(make_latent(2, 2, 2, 2, {1, 2, 3, 4, 5, 6, 7, 8}));
  const std::vector<float> expected = {1, 5, 2, 6, 3, 7, 4, 8};
  for (int i = 0; i < 8; ++i) EXPECT_EQ(t.tokens(0, i), expected[i]);
}

TEST(PatchifyTest, RejectsNonDivisiblePatch) {
  EXPECT_THROW(patchify(make_latent(1, 3, 2, 2, std::vector<float>(6, 0.0f))), ValidationError);
}

TEST(UnpatchifyTest, HandInverses) {
  TokenMatrix rows{MatrixF(4, 1), 2, 2};
  rows.tokens << 1, 2, 3, 4;
  const LatentImage a = unpatchify(rows, 2, 2, 1);
  EXPECT_EQ(a.data.data(), (std::vector<float>{1, 2, 3, 4}));

  TokenMatrix one{MatrixF(1, 4), 1, 1};
  one.tokens << 1, 2, 3, 4;
  const LatentImage b = unpatchify(one, 2, 2, 2);
  EXPECT_EQ(b.data.data(), (std::vector<float>{1, 2, 3, 4}));

  TokenMatrix zero{MatrixF::Zero(6, 3), 2, 3};
  const LatentImage z = unpatchify(zero, 2, 3, 1);
  for (float v : z.data.data()) EXPECT_EQ(v, 0.0f);
}

TEST(UnpatchifyTest, RejectsShapeMismatch) {
  TokenMatrix rows{MatrixF(3, 1), 1, 3};
  EXPECT_THROW(unpatchify(rows, 2, 2, 1), ValidationError);
  EXPECT_THROW(unpatchify(rows, 3, 2, 2), ValidationError);
}

TEST(PatchifyProperty, RoundTripAndTokenCountLaw) {
  std::mt19937 gen(7);
  std::uniform_int_distribution<int> pick_p(1, 4);
  std::uniform_int_distribution<int> pick_g(1, 6);
  std::uniform_int_distribution<int> pick_c(1, 5);
  for (int trial = 0; trial < 200; ++trial) {
    const int p = pick_p(gen);
    const int h = pick_g(gen) * p;
    const int w = pick_g(gen) * p;
    const int c = pick_c(gen);
    const LatentImage x = random_latent(c, h, w, p, gen);
    const TokenMatrix t = patchify(x);
    ASSERT_EQ(t.rows(), h * w / (p * p));
    ASSERT_EQ(t.token_dim(), c * p * p);
    ASSERT_EQ(t.rows(), x.token_count());
    const LatentImage back = unpatchify(t, h, w, p, x.label);
    ASSERT_EQ(back.data, x.data) << "trial " << trial;
  }
}

TEST(PatchifyProperty, SwappingPatchesSwapsRows) {
  std::mt19937 gen(11);
  const int p = 2, c = 3, h = 6, w = 8;
  const LatentImage x = random_latent(c, h, w, p, gen);
  LatentImage y = x;
  // Swap patch (0,1) with patch (2,3).
  for (int ch = 0; ch < c; ++ch) {
    for (int dy = 0; dy < p; ++dy) {
      for (int dx = 0; dx < p; ++dx) {
        std::swap(y.data.at(ch, 0 * p + dy, 1 * p + dx), y.data.at(ch, 2 * p + dy, 3 * p + dx));
      }
    }
  }
  const TokenMatrix tx = patchify(x);
  const TokenMatrix ty = patchify(y);
  const int gw = w / p;
  const int a = 0 * gw + 1, b = 2 * gw + 3;
  for (int r = 0; r < tx.rows(); ++r) {
    const int src = r == a ? b : (r == b ? a : r);
    EXPECT_EQ(ty.tokens.row(r), tx.tokens.row(src)) << "row " << r;
  }
}

Tensor3 random_image(int c, int h, int w, std::mt19937& gen) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Tensor3 img(c, h, w);
  for (float& v : img.data()) v = u(gen);
  return img;
}

TEST(ToyCodecTest, IdentityConfigIsExact) {
  std::mt19937 gen(3);
  ToyCodec codec({4, 3, 48, 1, 0.0f, true});
  const Tensor3 img = random_image(3, 16, 12, gen);
  const LatentImage z = codec.encode(img, 2);
  EXPECT_EQ(z.data.height(), 4);
  EXPECT_EQ(z.data.width(), 3);
  EXPECT_EQ(codec.decode(z), img);
}

TEST(ToyCodecTest, ShapeArithmetic) {
  ToyCodec codec({8, 3, 8});
  const LatentImage z = codec.encode(Tensor3(3, 64, 64));
  EXPECT_EQ(z.data.channels(), 8);
  EXPECT_EQ(z.data.height(), 8);
  EXPECT_EQ(z.data.width(), 8);
  for (float v : z.data.data()) EXPECT_EQ(v, 0.0f);
}

TEST(ToyCodecTest, FullRankProjectionRoundTrips) {
  std::mt19937 gen(5);
  ToyCodec codec({2, 3, 12, 99});
  const Tensor3 img = random_image(3, 8, 6, gen);
  const Tensor3 back = codec.decode(codec.encode(img));
  for (std::size_t i = 0; i < img.size(); ++i) {
    EXPECT_NEAR(back.data()[i], img.data()[i], 1e-5);
  }
}

TEST(ToyCodecTest, ReducedProjectionInvertsOnLatentSide) {
  std::mt19937 gen(6);
  ToyCodec codec({8, 3, 8});
  const MatrixD& proj = codec.projection();
  const MatrixD gram = proj * proj.transpose();
  EXPECT_LT((gram - MatrixD::Identity(8, 8)).cwiseAbs().maxCoeff(), 1e-12);

  LatentImage z{Tensor3(8, 3, 5), 1, 1};
  std::normal_distribution<float> n;
  for (float& v : z.data.data()) v = n(gen);
  const LatentImage again = codec.encode(codec.decode(z));
  for (std::size_t i = 0; i < z.data.size(); ++i) {
    EXPECT_NEAR(again.data.data()[i], z.data.data()[i], 1e-5);
  }
}

TEST(ToyCodecTest, FirstChannelsCarryBlockMeans) {
  ToyCodec codec({4, 3, 6});
  Tensor3 img(3, 4, 4);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      img.at(0, y, x) = 0.5f;
      img.at(1, y, x) = -0.25f;
      img.at(2, y, x) = static_cast<float>(x);  // mean 1.5
    }
  }
  const LatentImage z = codec.encode(img);
  EXPECT_NEAR(z.data.at(0, 0, 0), 0.5f, 1e-6);
  EXPECT_NEAR(z.data.at(1, 0, 0), -0.25f, 1e-6);
  EXPECT_NEAR(z.data.at(2, 0, 0), 1.5f, 1e-6);
}

TEST(ToyCodecTest, SeededProjectionIsReproducible) {
  ToyCodec a({8, 3, 8, 42});
  ToyCodec b({8, 3, 8, 42});
  ToyCodec c({8, 3, 8, 43});
  EXPECT_EQ(a.projection(), b.projection());
  EXPECT_NE(a.projection(), c.projection());
}

TEST(ToyCodecTest, RejectsNonDivisibleImages) {
  ToyCodec codec({8, 3, 8});
  EXPECT_THROW(codec.encode(Tensor3(3, 60, 64)), ValidationError);
}

TEST(LatentFormatTest, HeaderLayoutAndRoundTrip) {
  std::mt19937 gen(9);
  LatentImage x = random_latent(3, 4, 6, 2, gen);
  x.label = -1;
  std::stringstream ss;
  write_latent(ss, x);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), kLatentHeaderBytes + 4 * x.data.size());
  EXPECT_EQ(bytes.substr(0, 4), "NITL");
  auto u16 = [&](std::size_t off) {
    return static_cast<unsigned>(static_cast<unsigned char>(bytes[off])) |
           (static_cast<unsigned>(static_cast<unsigned char>(bytes[off + 1])) << 8);
  };
  EXPECT_EQ(u16(4), 1u);
  EXPECT_EQ(u16(6), 3u);
  EXPECT_EQ(u16(8), 4u);
  EXPECT_EQ(u16(10), 6u);
  EXPECT_EQ(u16(12), 2u);
  EXPECT_EQ(bytes.substr(14, 4), std::string(4, '\xff'));
  float first;
  std::memcpy(&first, bytes.data() + kLatentHeaderBytes, 4);
  EXPECT_EQ(first, x.data.data()[0]);

  const LatentImage y = read_latent(ss);
  EXPECT_EQ(y.data, x.data);
  EXPECT_EQ(y.label, x.label);
  EXPECT_EQ(y.patch_size, x.patch_size);
}

TEST(LatentFormatTest, RejectsBadMagicAndTruncation) {
  std::stringstream bad("NITX0000000000000000");
  EXPECT_THROW(read_latent(bad), FormatError);
  std::mt19937 gen(1);
  std::stringstream ss;
  write_latent(ss, random_latent(1, 2, 2, 1, gen));
  std::string truncated = ss.str().substr(0, 20);
  std::stringstream t(truncated);
  EXPECT_THROW(read_latent(t), FormatError);
}

}  // namespace
}  // namespace nit
