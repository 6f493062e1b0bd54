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

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nit/core.hpp"
#include "nit/tokenizer.hpp"

namespace nit {

// 8-bit interleaved RGB.
struct Image8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image8() = default;
  Image8(int w, int h, std::uint8_t fill = 255)
      : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    std::uint8_t* px = &rgb[(static_cast<std::size_t>(y) * width + x) * 3];
    px[0] = r;
    px[1] = g;
    px[2] = b;
  }
};

// Pixels in [0, 1] (clamped) to 8 bits.
inline Image8 to_image8(const Tensor3& img) {
  detail::require(img.channels() == 3, "expected an RGB tensor, got ", img.channels(),
                  " channels");
  Image8 out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        out.rgb[(static_cast<std::size_t>(y) * img.width() + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return out;
}

inline void write_ppm(const std::filesystem::path& path, const Image8& img) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string());
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()),
           static_cast<std::streamsize>(img.rgb.size()));
  if (!os) throw FormatError("failed writing " + path.string());
}

inline void write_png(const std::filesystem::path& path, const Image8& img) {
  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(img.width);
  desc.height = static_cast<png_uint_32>(img.height);
  desc.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&desc, path.string().c_str(), 0, img.rgb.data(), 0, nullptr)) {
    const std::string msg = desc.message;
    png_image_free(&desc);
    throw FormatError("writing " + path.string() + ": " + msg);
  }
}

// Format from the extension: .png or .ppm.
inline void write_image(const std::filesystem::path& path, const Image8& img) {
  const std::string ext = path.extension().string();
  if (ext == ".png") return write_png(path, img);
  if (ext == ".ppm") return write_ppm(path, img);
  throw ValidationError("unsupported image extension '" + ext + "' (use .png or .ppm)");
}

// ---------------------------------------------------------------------------
// Loss-log plotting

struct LossLog {
  std::vector<double> step, loss, waste, tokens;
};

inline LossLog read_loss_csv(std::istream& is) {
  std::string line;
  detail::require(static_cast<bool>(std::getline(is, line)), "loss log is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  detail::require(line == "step,loss,waste,tokens", "unexpected loss log header '", line, "'");
  LossLog log;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::istringstream row(line);
    double v[4];
    char comma;
    row >> v[0] >> comma >> v[1] >> comma >> v[2] >> comma >> v[3];
    detail::require(static_cast<bool>(row), "malformed loss log line ", lineno);
    log.step.push_back(v[0]);
    log.loss.push_back(v[1]);
    log.waste.push_back(v[2]);
    log.tokens.push_back(v[3]);
  }
  return log;
}

namespace detail {

inline void draw_line(Image8& img, int x0, int y0, int x1, int y1, const std::uint8_t (&c)[3]) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    img.set(x0, y0, c[0], c[1], c[2]);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace detail

// Loss (log scale, blue) and its running mean over `smooth` steps (red)
// against step, plus pack waste (green, linear 0..1) along the bottom band.
inline Image8 plot_loss(const LossLog& log, int width = 800, int height = 480, int smooth = 50) {
  Image8 img(width, height);
  const int left = 40, right = width - 10, top = 10, bottom = height - 90;
  const int band_top = height - 70, band_bottom = height - 10;
  const std::uint8_t axis[3] = {0, 0, 0}, grey[3] = {200, 200, 200};
  const std::uint8_t blue[3] = {120, 150, 230}, red[3] = {200, 30, 30}, green[3] = {30, 150, 60};
  detail::draw_line(img, left, top, left, bottom, axis);
  detail::draw_line(img, left, bottom, right, bottom, axis);
  detail::draw_line(img, left, band_top, left, band_bottom, axis);
  detail::draw_line(img, left, band_bottom, right, band_bottom, axis);
  if (log.step.empty()) return img;

  double lo = INFINITY, hi = -INFINITY;
  for (double l : log.loss) {
    if (l > 0.0 && std::isfinite(l)) {
      lo = std::min(lo, std::log10(l));
      hi = std::max(hi, std::log10(l));
    }
  }
  if (!std::isfinite(lo)) return img;
  lo = std::floor(lo);
  hi = std::max(std::ceil(hi), lo + 1.0);
  for (double d = lo; d <= hi; d += 1.0) {
    const int y = bottom - static_cast<int>(std::lround((d - lo) / (hi - lo) * (bottom - top)));
    detail::draw_line(img, left + 1, y, right, y, grey);
  }
  const double s0 = log.step.front(), s1 = std::max(log.step.back(), s0 + 1.0);
  auto xpix = [&](double s) {
    return left + static_cast<int>(std::lround((s - s0) / (s1 - s0) * (right - left)));
  };
  auto ypix = [&](double l) {
    const double v = std::log10(std::max(l, std::pow(10.0, lo)));
    return bottom - static_cast<int>(std::lround((v - lo) / (hi - lo) * (bottom - top)));
  };
  auto wpix = [&](double w) {
    return band_bottom - static_cast<int>(std::lround(std::clamp(w, 0.0, 1.0) *
                                                      (band_bottom - band_top)));
  };
  double acc = 0.0;
  int px = -1, py = 0, mx = -1, my = 0, wx = -1, wy = 0;
  for (std::size_t i = 0; i < log.step.size(); ++i) {
    const int x = xpix(log.step[i]);
    acc += log.loss[i];
    if (i >= static_cast<std::size_t>(smooth)) acc -= log.loss[i - smooth];
    const double mean = acc / static_cast<double>(std::min<std::size_t>(i + 1, smooth));
    const int y = ypix(log.loss[i]), m = ypix(mean), w = wpix(log.waste[i]);
    if (px >= 0) {
      detail::draw_line(img, px, py, x, y, blue);
      detail::draw_line(img, mx, my, x, m, red);
      detail::draw_line(img, wx, wy, x, w, green);
    }
    px = mx = wx = x;
    py = y;
    my = m;
    wy = w;
  }
  return img;
}

}  // namespace nit
