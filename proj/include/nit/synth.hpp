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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "nit/core.hpp"
#include "nit/tokenizer.hpp"

namespace nit {

inline double class_hue(int class_id, int class_count) {
  return 360.0 * class_id / class_count;
}

// Smallest angle between two hues, in degrees.
inline double hue_distance(double a, double b) {
  const double d = std::fmod(std::abs(a - b), 360.0);
  return std::min(d, 360.0 - d);
}

struct Rgb {
  double r, g, b;
};

struct Hsv {
  double h, s, v;  // h in [0, 360)
};

inline Rgb hsv_to_rgb(Hsv c) {
  const double h = std::fmod(std::fmod(c.h, 360.0) + 360.0, 360.0) / 60.0;
  const double chroma = c.v * c.s;
  const double x = chroma * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = c.v - chroma;
  Rgb out{m, m, m};
  switch (static_cast<int>(h)) {
    case 0: out.r += chroma; out.g += x; break;
    case 1: out.r += x; out.g += chroma; break;
    case 2: out.g += chroma; out.b += x; break;
    case 3: out.g += x; out.b += chroma; break;
    case 4: out.r += x; out.b += chroma; break;
    default: out.r += chroma; out.b += x; break;
  }
  return out;
}

inline Hsv rgb_to_hsv(Rgb c) {
  const double mx = std::max({c.r, c.g, c.b});
  const double mn = std::min({c.r, c.g, c.b});
  const double delta = mx - mn;
  Hsv out{0.0, mx > 0.0 ? delta / mx : 0.0, mx};
  if (delta <= 0.0) return out;
  if (mx == c.r) {
    out.h = 60.0 * std::fmod((c.g - c.b) / delta, 6.0);
  } else if (mx == c.g) {
    out.h = 60.0 * ((c.b - c.r) / delta + 2.0);
  } else {
    out.h = 60.0 * ((c.r - c.g) / delta + 4.0);
  }
  if (out.h < 0.0) out.h += 360.0;
  return out;
}

// Class c of C: base hue 360 c / C, a brightness ramp whose direction turns
// with the class, and 1 + (c mod 3) pale blobs of the same hue. All geometry
// is in relative coordinates.
// The seed jitters hue (+-8 deg), ramp direction (+-10 deg) and blob layout.
// Pixels are RGB in [0, 1].
inline Tensor3 synth_image(int class_id, int height, int width, std::uint64_t seed,
                           int class_count = 4) {
  detail::require(class_count > 0 && class_id >= 0 && class_id < class_count, "class ",
                  class_id, " outside [0, ", class_count, ")");
  detail::require(height > 0 && width > 0, "image size must be positive");
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(class_id));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double hue = class_hue(class_id, class_count) + (u(rng) - 0.5) * 16.0;
  const double angle =
      (180.0 * class_id / class_count + (u(rng) - 0.5) * 20.0) * std::numbers::pi / 180.0;
  const double dx = std::cos(angle), dy = std::sin(angle);
  struct Blob {
    double cx, cy, r;
  };
  std::vector<Blob> blobs(static_cast<std::size_t>(1 + class_id % 3));
  for (Blob& b : blobs) b = {0.15 + 0.7 * u(rng), 0.15 + 0.7 * u(rng), 0.12 + 0.08 * u(rng)};

  Tensor3 img(3, height, width);
  for (int y = 0; y < height; ++y) {
    const double v = (y + 0.5) / height;
    for (int x = 0; x < width; ++x) {
      const double s = (x + 0.5) / width;
      const double ramp = (s - 0.5) * dx + (v - 0.5) * dy;  // in [-0.71, 0.71]
      Hsv c{hue, 0.8, 0.62 + 0.45 * ramp};
      for (const Blob& b : blobs) {
        const double d2 = (s - b.cx) * (s - b.cx) + (v - b.cy) * (v - b.cy);
        const double a = std::exp(-d2 / (b.r * b.r));
        c.s -= 0.45 * a;
        c.v += 0.35 * a;
      }
      c.s = std::clamp(c.s, 0.0, 1.0);
      c.v = std::clamp(c.v, 0.0, 1.0);
      const Rgb rgb = hsv_to_rgb(c);
      img.at(0, y, x) = static_cast<float>(rgb.r);
      img.at(1, y, x) = static_cast<float>(rgb.g);
      img.at(2, y, x) = static_cast<float>(rgb.b);
    }
  }
  return img;
}

// Saturation-times-value weighted circular mean hue of an RGB image in
// [0, 1] (values are clamped). Returns degrees in [0, 360).
inline double dominant_hue(const Tensor3& img) {
  detail::require(img.channels() == 3, "dominant hue needs an RGB image");
  double sx = 0.0, sy = 0.0;
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const Hsv c = rgb_to_hsv({std::clamp<double>(img.at(0, y, x), 0.0, 1.0),
                                std::clamp<double>(img.at(1, y, x), 0.0, 1.0),
                                std::clamp<double>(img.at(2, y, x), 0.0, 1.0)});
      const double w = c.s * c.v;
      const double rad = c.h * std::numbers::pi / 180.0;
      sx += w * std::cos(rad);
      sy += w * std::sin(rad);
    }
  }
  double h = std::atan2(sy, sx) * 180.0 / std::numbers::pi;
  if (h < 0.0) h += 360.0;
  return h;
}

// Counts as a match when the measured hue is closer to the class hue than
// to any other class hue.
inline bool hue_matches(const Tensor3& img, int class_id, int class_count) {
  return hue_distance(dominant_hue(img), class_hue(class_id, class_count)) <
         180.0 / class_count;
}

inline constexpr int kFeatureCount = 10;

// Per-image summary used by the distribution distance: channel means and
// standard deviations, mean saturation and value, and mean absolute
// horizontal and vertical differences measured on relative coordinates
// (difference per 1/16 of the image side).
inline std::vector<double> image_features(const Tensor3& img) {
  detail::require(img.channels() == 3, "features need an RGB image");
  const int h = img.height(), w = img.width();
  const double n = static_cast<double>(h) * w;
  std::vector<double> f(kFeatureCount, 0.0);
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double v = std::clamp<double>(img.at(c, y, x), 0.0, 1.0);
        sum += v;
        sq += v * v;
      }
    }
    f[c] = sum / n;
    f[3 + c] = std::sqrt(std::max(0.0, sq / n - f[c] * f[c]));
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Hsv c = rgb_to_hsv({std::clamp<double>(img.at(0, y, x), 0.0, 1.0),
                                std::clamp<double>(img.at(1, y, x), 0.0, 1.0),
                                std::clamp<double>(img.at(2, y, x), 0.0, 1.0)});
      f[6] += c.s / n;
      f[7] += c.v / n;
    }
  }
  const int sx = std::max(1, w / 16), sy = std::max(1, h / 16);
  double gx = 0.0, gy = 0.0;
  int nx = 0, ny = 0;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x + sx < w; ++x, ++nx) gx += std::abs(img.at(c, y, x + sx) - img.at(c, y, x));
    }
    for (int y = 0; y + sy < h; ++y) {
      for (int x = 0; x < w; ++x, ++ny) gy += std::abs(img.at(c, y + sy, x) - img.at(c, y, x));
    }
  }
  f[8] = nx ? gx / nx : 0.0;
  f[9] = ny ? gy / ny : 0.0;
  return f;
}

// Frechet distance between diagonal Gaussians fitted to two feature sets.
inline double feature_distance(const std::vector<std::vector<double>>& a,
                               const std::vector<std::vector<double>>& b) {
  detail::require(a.size() > 1 && b.size() > 1, "feature distance needs two or more samples");
  const std::size_t dim = a.front().size();
  double d = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    auto moments = [j](const std::vector<std::vector<double>>& s) {
      double m = 0.0, q = 0.0;
      for (const auto& f : s) m += f[j];
      m /= static_cast<double>(s.size());
      for (const auto& f : s) q += (f[j] - m) * (f[j] - m);
      return std::pair{m, std::sqrt(q / static_cast<double>(s.size() - 1))};
    };
    const auto [ma, sa] = moments(a);
    const auto [mb, sb] = moments(b);
    d += (ma - mb) * (ma - mb) + (sa - sb) * (sa - sb);
  }
  return d;
}

// Pixels in [0, 1] <-> model range [-1, 1].
inline Tensor3 to_signed(Tensor3 img) {
  for (float& v : img.data()) v = 2.0f * v - 1.0f;
  return img;
}

inline Tensor3 to_unit(Tensor3 img) {
  for (float& v : img.data()) v = std::clamp(0.5f * (v + 1.0f), 0.0f, 1.0f);
  return img;
}

}  // namespace nit
