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

// Sampling-based evaluation on the synthetic classes: per-class hue accuracy
// and a pixel-statistic distance to the generator's own renders, at any set
// of output sizes.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nit/dataset.hpp"
#include "nit/diffusion.hpp"
#include "nit/synth.hpp"
#include "nit/tokenizer.hpp"

namespace nit {

inline GridSize token_grid(PixelSize size, const CodecConfig& codec, int patch_size) {
  const int unit = codec.downsample * patch_size;
  detail::require(size.h > 0 && size.w > 0 && size.h % unit == 0 && size.w % unit == 0,
                  "size ", size.h, "x", size.w, " is not a multiple of ", unit);
  return {size.h / unit, size.w / unit};
}

// Samples and decodes one image per request, all at `size`, in packs of at
// most `max_batch` requests. Pixels come back in [0, 1].
inline std::vector<Tensor3> generate_images(const ModelParams<float>& p, const ToyCodec& codec,
                                            PixelSize size, std::span<const SampleRequest> reqs,
                                            int steps, const GuidanceConfig& guidance,
                                            int max_batch = 64) {
  const int ps = p.config.patch_size;
  const GridSize grid = token_grid(size, codec.config(), ps);
  std::vector<Tensor3> out;
  out.reserve(reqs.size());
  for (std::size_t at = 0; at < reqs.size(); at += static_cast<std::size_t>(max_batch)) {
    const auto chunk = reqs.subspan(at, std::min<std::size_t>(max_batch, reqs.size() - at));
    for (const SampleRequest& r : chunk) {
      detail::require(r.grid == grid, "request grid does not match the output size");
    }
    const std::vector<MatrixF> xs = sample_packed(p, chunk, steps, guidance);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const LatentImage lat = unpatchify({xs[i], grid.h, grid.w}, grid.h * ps, grid.w * ps, ps, chunk[i].label);
      out.push_back(to_unit(codec.decode(lat)));
    }
  }
  return out;
}

inline double hue_accuracy(std::span<const Tensor3> images, std::span<const int> labels,
                           int class_count) {
  detail::require(images.size() == labels.size() && !images.empty(),
                  "hue accuracy needs one label per image");
  int hits = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    hits += hue_matches(images[i], labels[i], class_count) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(images.size());
}

struct EvalConfig {
  std::vector<PixelSize> sizes;
  int samples_per_class = 8;
  int steps = 25;
  GuidanceConfig guidance;
  std::uint64_t seed = 12345;
  int max_batch = 64;
};

struct SizeReport {
  PixelSize size;
  std::vector<double> class_accuracy;
  double accuracy = 0.0;
  double stat_distance = 0.0;
};

struct EvalReport {
  int class_count = 0;
  std::vector<SizeReport> sizes;
};

inline EvalReport eval_generalization(const ModelParams<float>& p, const ToyCodec& codec,
                                      const EvalConfig& cfg) {
  detail::require(cfg.samples_per_class > 1, "need at least two samples per class");
  const int classes = p.config.num_classes;
  EvalReport report{classes, {}};
  for (const PixelSize size : cfg.sizes) {
    const GridSize grid = token_grid(size, codec.config(), p.config.patch_size);
    std::vector<SampleRequest> reqs;
    std::vector<int> labels;
    for (int c = 0; c < classes; ++c) {
      for (int i = 0; i < cfg.samples_per_class; ++i) {
        reqs.push_back({grid, c, cfg.seed + 1000003ull * static_cast<std::uint64_t>(c) + i});
        labels.push_back(c);
      }
    }
    const std::vector<Tensor3> images =
        generate_images(p, codec, size, reqs, cfg.steps, cfg.guidance, cfg.max_batch);

    SizeReport sr;
    sr.size = size;
    std::vector<std::vector<double>> gen, real;
    for (int c = 0; c < classes; ++c) {
      const auto begin = static_cast<std::size_t>(c * cfg.samples_per_class);
      const std::span<const Tensor3> imgs(images.data() + begin, cfg.samples_per_class);
      const std::span<const int> labs(labels.data() + begin, cfg.samples_per_class);
      sr.class_accuracy.push_back(hue_accuracy(imgs, labs, classes));
    }
    for (std::size_t i = 0; i < images.size(); ++i) {
      gen.push_back(image_features(images[i]));
      real.push_back(image_features(synth_image(labels[i], size.h, size.w,
                                                cfg.seed ^ (0xC0FFEEull + i), classes)));
    }
    sr.accuracy = hue_accuracy(images, labels, classes);
    sr.stat_distance = feature_distance(gen, real);
    report.sizes.push_back(std::move(sr));
  }
  return report;
}

}  // namespace nit
