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

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "nit/blocks.hpp"
#include "nit/core.hpp"
#include "nit/diffusion.hpp"
#include "nit/packing.hpp"
#include "nit/synth.hpp"
#include "nit/tokenizer.hpp"

namespace nit {

// Resolution mixtures: (a) native sizes only, (b) each instance at its
// native size or one of the fixed sizes with equal probability, (c) fixed
// sizes only.
enum class Mixture { kNative, kNativePlusFixed, kFixed };

inline std::string mixture_name(Mixture m) {
  switch (m) {
    case Mixture::kNative: return "a";
    case Mixture::kNativePlusFixed: return "b";
    case Mixture::kFixed: return "c";
  }
  return "?";
}

inline Mixture parse_mixture(const std::string& s) {
  if (s == "a" || s == "native") return Mixture::kNative;
  if (s == "b" || s == "native+fixed") return Mixture::kNativePlusFixed;
  if (s == "c" || s == "fixed") return Mixture::kFixed;
  throw ValidationError("unknown mixture '" + s + "' (expected a, b or c)");
}

struct PixelSize {
  int h = 0;
  int w = 0;
  friend bool operator==(const PixelSize&, const PixelSize&) = default;
};

struct DatasetSpec {
  int class_count = 4;
  Mixture mixture = Mixture::kNativePlusFixed;
  // Native sizes are drawn uniformly from multiples of size_step in
  // [native_min, native_max] per axis, rejecting aspect ratios above max_aspect.
  int native_min = 32;
  int native_max = 128;
  int size_step = 16;
  double max_aspect = 2.0;
  std::vector<PixelSize> fixed_sizes = {{64, 64}, {128, 128}};
  int instances_per_epoch = 256;
  std::uint64_t seed = 1;

  void validate() const {
    detail::require(class_count > 0, "class_count must be positive");
    detail::require(size_step > 0 && native_min >= size_step && native_min <= native_max &&
                        native_min % size_step == 0 && native_max % size_step == 0,
                    "native range [", native_min, ", ", native_max,
                    "] must be ordered multiples of ", size_step);
    detail::require(max_aspect >= 1.0, "max_aspect must be >= 1");
    detail::require(mixture == Mixture::kNative || !fixed_sizes.empty(),
                    "mixture ", mixture_name(mixture), " needs fixed sizes");
    for (const PixelSize& s : fixed_sizes) {
      detail::require(s.h > 0 && s.w > 0 && s.h % size_step == 0 && s.w % size_step == 0,
                      "fixed size ", s.h, "x", s.w, " is not a multiple of ", size_step);
    }
    detail::require(instances_per_epoch > 0, "instances_per_epoch must be positive");
  }
};

template <typename Rng>
PixelSize sample_native_size(const DatasetSpec& spec, Rng& rng) {
  std::uniform_int_distribution<int> pick(spec.native_min / spec.size_step,
                                          spec.native_max / spec.size_step);
  for (;;) {
    const PixelSize s{pick(rng) * spec.size_step, pick(rng) * spec.size_step};
    if (std::max(s.h, s.w) <= spec.max_aspect * std::min(s.h, s.w)) return s;
  }
}

template <typename Rng>
PixelSize sample_size(const DatasetSpec& spec, Rng& rng) {
  auto fixed = [&] {
    std::uniform_int_distribution<std::size_t> pick(0, spec.fixed_sizes.size() - 1);
    return spec.fixed_sizes[pick(rng)];
  };
  switch (spec.mixture) {
    case Mixture::kNative:
      return sample_native_size(spec, rng);
    case Mixture::kFixed:
      return fixed();
    case Mixture::kNativePlusFixed: {
      std::uniform_int_distribution<std::size_t> pick(0, spec.fixed_sizes.size());
      const std::size_t i = pick(rng);
      return i == 0 ? sample_native_size(spec, rng) : spec.fixed_sizes[i - 1];
    }
  }
  return {};
}

struct InstanceSpec {
  int label = 0;
  PixelSize size;
  std::uint64_t image_seed = 0;
};

// The instance list of one epoch; depends only on (spec, epoch).
inline std::vector<InstanceSpec> epoch_instances(const DatasetSpec& spec, int epoch) {
  spec.validate();
  std::mt19937_64 rng(spec.seed * 1000003ull + static_cast<std::uint64_t>(epoch));
  std::uniform_int_distribution<int> label(0, spec.class_count - 1);
  std::vector<InstanceSpec> out(static_cast<std::size_t>(spec.instances_per_epoch));
  for (InstanceSpec& inst : out) {
    inst.label = label(rng);
    inst.size = sample_size(spec, rng);
    inst.image_seed = rng();
  }
  return out;
}

inline TokenMatrix encode_instance(const InstanceSpec& inst, const ToyCodec& codec,
                                   int patch_size, int class_count) {
  const Tensor3 img = to_signed(
      synth_image(inst.label, inst.size.h, inst.size.w, inst.image_seed, class_count));
  return patchify(codec.encode(img, inst.label, patch_size));
}

struct NoiseConfig {
  double p_mean = 0.0;
  double p_std = 1.0;
  double class_drop = 0.1;
};

// One optimizer step worth of packed instances with their noise draws.
struct TrainingPack {
  PackedBatch batch;          // clean latent tokens
  MatrixF noise;              // eps, same shape as batch.tokens
  std::vector<double> times;  // per instance
  std::vector<int> labels;    // after class dropout
  double waste = 0.0;         // 1 - tokens / budget

  int tokens() const { return batch.layout.total(); }
};

// Encodes every instance of the epoch, draws per-instance t, eps and class
// dropout, then packs to the token budget with longest-pack-first.
inline std::vector<TrainingPack> make_epoch(const DatasetSpec& spec, const ToyCodec& codec,
                                            int patch_size, std::int64_t token_budget,
                                            const NoiseConfig& noise, int epoch) {
  const std::vector<InstanceSpec> insts = epoch_instances(spec, epoch);
  std::vector<TokenMatrix> tokens;
  std::vector<std::int64_t> counts;
  tokens.reserve(insts.size());
  for (std::size_t i = 0; i < insts.size(); ++i) {
    tokens.push_back(encode_instance(insts[i], codec, patch_size, spec.class_count));
    detail::require(tokens.back().rows() <= token_budget, "instance ", i, " (",
                    insts[i].size.h, "x", insts[i].size.w, ") has ", tokens.back().rows(),
                    " tokens, exceeding the budget ", token_budget);
    counts.push_back(tokens.back().rows());
  }
  const PackPlan plan = plan_packing(counts, token_budget);

  std::mt19937_64 rng(spec.seed * 7919ull + 31ull * static_cast<std::uint64_t>(epoch) + 1);
  TimeSampler sampler(noise.p_mean, noise.p_std, rng());
  std::vector<TrainingPack> packs;
  packs.reserve(plan.packs.size());
  std::vector<int> labels;
  for (const InstanceSpec& inst : insts) labels.push_back(inst.label);
  for (const auto& pack : plan.packs) {
    TrainingPack tp;
    tp.batch = assemble_packed_batch(tokens, pack, labels);
    tp.noise = gaussian_tokens(tp.batch.layout.total(), static_cast<int>(tp.batch.tokens.cols()),
                               rng());
    for (std::size_t k = 0; k < pack.size(); ++k) {
      tp.times.push_back(sampler.sample());
      tp.labels.push_back(drop_label(tp.batch.labels[k], noise.class_drop, rng));
    }
    tp.batch.times.assign(tp.times.begin(), tp.times.end());
    tp.waste = 1.0 - static_cast<double>(tp.tokens()) / static_cast<double>(token_budget);
    packs.push_back(std::move(tp));
  }
  return packs;
}

}  // namespace nit
