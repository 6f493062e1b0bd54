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

// Native-resolution tokenization: latent geometry, patchify/unpatchify,
// a seeded linear space-to-depth codec, and the latent file format.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nit/core.hpp"

namespace nit {

inline constexpr int kNullLabel = -1;

// Planar channels x height x width storage.
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(int channels, int height, int width, float fill = 0.0f)
      : channels_(channels), height_(height), width_(width),
        data_(static_cast<std::size_t>(channels) * height * width, fill) {
    detail::require(channels > 0 && height > 0 && width > 0,
                    "tensor dimensions must be positive, got ", channels, "x",
                    height, "x", width);
  }

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }

  float& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  float at(int c, int y, int x) const { return data_[index(c, y, x)]; }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

  friend bool operator==(const Tensor3&, const Tensor3&) = default;

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

struct ImageSpec {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::optional<int> class_label;
};

struct LatentShape {
  int h = 0;
  int w = 0;
  int c = 0;
  friend bool operator==(const LatentShape&, const LatentShape&) = default;
};

struct LatentImage {
  Tensor3 data;
  int label = kNullLabel;
  int patch_size = 1;

  int token_count() const {
    return (data.height() / patch_size) * (data.width() / patch_size);
  }
};

struct TokenMatrix {
  MatrixF tokens;
  int grid_h = 0;
  int grid_w = 0;

  int rows() const { return static_cast<int>(tokens.rows()); }
  int token_dim() const { return static_cast<int>(tokens.cols()); }
};

inline LatentShape latent_shape(const ImageSpec& spec, int downsample_factor,
                                int latent_channels) {
  detail::require(downsample_factor > 0, "downsample factor must be positive");
  detail::require(latent_channels > 0, "latent channels must be positive");
  detail::require(spec.height >= downsample_factor && spec.height % downsample_factor == 0,
                  "height ", spec.height, " is not a positive multiple of ",
                  downsample_factor);
  detail::require(spec.width >= downsample_factor && spec.width % downsample_factor == 0,
                  "width ", spec.width, " is not a positive multiple of ",
                  downsample_factor);
  return {spec.height / downsample_factor, spec.width / downsample_factor,
          latent_channels};
}

// Row j is the patch at raster position j of the token grid; within a row
// the layout is (patch_y, patch_x, channel) with channel fastest.
inline TokenMatrix patchify(const LatentImage& latent) {
  const Tensor3& x = latent.data;
  const int p = latent.patch_size;
  detail::require(p > 0, "patch size must be positive");
  detail::require(x.height() % p == 0, "latent height ", x.height(),
                  " not divisible by patch size ", p);
  detail::require(x.width() % p == 0, "latent width ", x.width(),
                  " not divisible by patch size ", p);
  const int gh = x.height() / p;
  const int gw = x.width() / p;
  const int c = x.channels();
  TokenMatrix out{MatrixF(gh * gw, c * p * p), gh, gw};
  for (int ty = 0; ty < gh; ++ty) {
    for (int tx = 0; tx < gw; ++tx) {
      float* row = out.tokens.row(ty * gw + tx).data();
      for (int py = 0; py < p; ++py) {
        for (int px = 0; px < p; ++px) {
          for (int ch = 0; ch < c; ++ch) {
            *row++ = x.at(ch, ty * p + py, tx * p + px);
          }
        }
      }
    }
  }
  return out;
}

inline LatentImage unpatchify(const TokenMatrix& tokens, int h, int w, int p,
                              int label = kNullLabel) {
  detail::require(p > 0 && h > 0 && w > 0, "invalid unpatchify geometry");
  detail::require(h % p == 0 && w % p == 0, "latent ", h, "x", w,
                  " not divisible by patch size ", p);
  const int gh = h / p;
  const int gw = w / p;
  detail::require(tokens.rows() == gh * gw, "token rows ", tokens.rows(),
                  " do not match grid ", gh, "x", gw);
  detail::require(tokens.token_dim() % (p * p) == 0, "token dim ",
                  tokens.token_dim(), " not a multiple of p^2");
  const int c = tokens.token_dim() / (p * p);
  LatentImage out{Tensor3(c, h, w), label, p};
  for (int ty = 0; ty < gh; ++ty) {
    for (int tx = 0; tx < gw; ++tx) {
      const float* row = tokens.tokens.row(ty * gw + tx).data();
      for (int py = 0; py < p; ++py) {
        for (int px = 0; px < p; ++px) {
          for (int ch = 0; ch < c; ++ch) {
            out.data.at(ch, ty * p + py, tx * p + px) = *row++;
          }
        }
      }
    }
  }
  return out;
}

struct CodecConfig {
  int downsample = 8;
  int image_channels = 3;
  int latent_channels = 8;
  std::uint64_t seed = 20240601;
  // Multiplies the projected coefficients; decode divides it back out.
  float scale = 0.0f;  // 0 selects 1/downsample
  // Requires latent_channels == image_channels * downsample^2.
  bool identity = false;
};

// Lossless-when-square linear codec. Each f x f pixel block is flattened in
// (channel, dy, dx) order and multiplied by a matrix with orthonormal rows.
// The first image_channels rows are the per-channel block averages so the
// latent keeps coarse colour; remaining rows come from Gaussian draws
// (std::mt19937_64 seeded with CodecConfig::seed) orthogonalised with
// modified Gram-Schmidt. Decoding applies the transpose (the pseudo-inverse).
class ToyCodec {
 public:
  explicit ToyCodec(CodecConfig cfg) : cfg_(cfg) {
    detail::require(cfg_.downsample > 0 && cfg_.image_channels > 0 &&
                        cfg_.latent_channels > 0,
                    "codec dimensions must be positive");
    const int in_dim = block_dim();
    detail::require(cfg_.latent_channels <= in_dim, "latent channels ",
                    cfg_.latent_channels, " exceed block dimension ", in_dim);
    if (cfg_.scale == 0.0f) cfg_.scale = 1.0f / static_cast<float>(cfg_.downsample);
    if (cfg_.identity) {
      detail::require(cfg_.latent_channels == in_dim,
                      "identity codec needs latent_channels == ", in_dim);
      projection_ = MatrixD::Identity(in_dim, in_dim);
      cfg_.scale = 1.0f;
      return;
    }
    build_projection();
  }

  const CodecConfig& config() const { return cfg_; }
  int block_dim() const {
    return cfg_.image_channels * cfg_.downsample * cfg_.downsample;
  }
  const MatrixD& projection() const { return projection_; }

  LatentImage encode(const Tensor3& image, int label = kNullLabel,
                     int patch_size = 1) const {
    const int f = cfg_.downsample;
    detail::require(image.channels() == cfg_.image_channels, "image has ",
                    image.channels(), " channels, codec expects ",
                    cfg_.image_channels);
    const LatentShape shape =
        latent_shape({image.height(), image.width(), image.channels(), label}, f,
                     cfg_.latent_channels);
    LatentImage out{Tensor3(shape.c, shape.h, shape.w), label, patch_size};
    Eigen::VectorXd block(block_dim());
    for (int by = 0; by < shape.h; ++by) {
      for (int bx = 0; bx < shape.w; ++bx) {
        int idx = 0;
        for (int c = 0; c < image.channels(); ++c) {
          for (int dy = 0; dy < f; ++dy) {
            for (int dx = 0; dx < f; ++dx) {
              block[idx++] = image.at(c, by * f + dy, bx * f + dx);
            }
          }
        }
        const Eigen::VectorXd z = projection_ * block;
        for (int c = 0; c < shape.c; ++c) {
          out.data.at(c, by, bx) = static_cast<float>(z[c] * cfg_.scale);
        }
      }
    }
    return out;
  }

  Tensor3 decode(const LatentImage& latent) const {
    const int f = cfg_.downsample;
    const Tensor3& z = latent.data;
    detail::require(z.channels() == cfg_.latent_channels, "latent has ",
                    z.channels(), " channels, codec expects ",
                    cfg_.latent_channels);
    Tensor3 out(cfg_.image_channels, z.height() * f, z.width() * f);
    Eigen::VectorXd coeff(cfg_.latent_channels);
    for (int by = 0; by < z.height(); ++by) {
      for (int bx = 0; bx < z.width(); ++bx) {
        for (int c = 0; c < cfg_.latent_channels; ++c) {
          coeff[c] = static_cast<double>(z.at(c, by, bx)) / cfg_.scale;
        }
        const Eigen::VectorXd block = projection_.transpose() * coeff;
        int idx = 0;
        for (int c = 0; c < cfg_.image_channels; ++c) {
          for (int dy = 0; dy < f; ++dy) {
            for (int dx = 0; dx < f; ++dx) {
              out.at(c, by * f + dy, bx * f + dx) = static_cast<float>(block[idx++]);
            }
          }
        }
      }
    }
    return out;
  }

 private:
  void build_projection() {
    const int in_dim = block_dim();
    const int f2 = cfg_.downsample * cfg_.downsample;
    projection_ = MatrixD::Zero(cfg_.latent_channels, in_dim);
    std::mt19937_64 rng(cfg_.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    int filled = 0;
    const int mean_rows = std::min(cfg_.image_channels, cfg_.latent_channels);
    for (int c = 0; c < mean_rows; ++c) {
      projection_.row(filled).segment(c * f2, f2).setConstant(1.0 / std::sqrt(f2));
      ++filled;
    }
    while (filled < cfg_.latent_channels) {
      Eigen::RowVectorXd cand(in_dim);
      for (int i = 0; i < in_dim; ++i) cand[i] = normal(rng);
      for (int r = 0; r < filled; ++r) {
        cand -= cand.dot(projection_.row(r)) * projection_.row(r);
      }
      const double norm = cand.norm();
      if (norm < 1e-8) continue;
      projection_.row(filled++) = cand / norm;
    }
  }

  CodecConfig cfg_;
  MatrixD projection_;
};

// ---------------------------------------------------------------------------
// Latent file format: "NITL", version u16, c/h/w/p as u16, label i32, then
// c*h*w row-major float32 values, all little-endian (18-byte header).

inline constexpr std::uint16_t kLatentFormatVersion = 1;
inline constexpr std::size_t kLatentHeaderBytes = 18;

inline void write_latent(std::ostream& os, const LatentImage& latent) {
  const Tensor3& t = latent.data;
  for (int v : {t.channels(), t.height(), t.width(), latent.patch_size}) {
    detail::require(v > 0 && v <= 0xFFFF, "latent dimension ", v,
                    " does not fit in u16");
  }
  detail::write_magic(os, "NITL");
  detail::write_le<std::uint16_t>(os, kLatentFormatVersion);
  detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(t.channels()));
  detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(t.height()));
  detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(t.width()));
  detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(latent.patch_size));
  detail::write_le<std::int32_t>(os, latent.label);
  for (float v : t.data()) detail::write_le<float>(os, v);
}

inline LatentImage read_latent(std::istream& is) {
  detail::expect_magic(is, "NITL");
  const auto version = detail::read_le<std::uint16_t>(is);
  if (version != kLatentFormatVersion) {
    throw FormatError(detail::concat("unsupported latent version ", version));
  }
  const int c = detail::read_le<std::uint16_t>(is);
  const int h = detail::read_le<std::uint16_t>(is);
  const int w = detail::read_le<std::uint16_t>(is);
  const int p = detail::read_le<std::uint16_t>(is);
  const int label = detail::read_le<std::int32_t>(is);
  if (c == 0 || h == 0 || w == 0 || p == 0) throw FormatError("zero latent dimension");
  LatentImage out{Tensor3(c, h, w), label, p};
  for (float& v : out.data.data()) v = detail::read_le<float>(is);
  return out;
}

inline void save_latent(const std::string& path, const LatentImage& latent) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path);
  write_latent(os, latent);
}

inline LatentImage load_latent(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_latent(is);
}

}  // namespace nit
