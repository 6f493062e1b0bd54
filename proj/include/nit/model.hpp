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

// Full class-conditional NiT forward and reverse pass over a packed batch.

#pragma once

#include <span>
#include <vector>

#include "nit/blocks.hpp"
#include "nit/packing.hpp"
#include "nit/rope.hpp"

namespace nit {

template <typename T>
struct ModelCache {
  TimeEmbedCache<T> time;
  std::vector<int> class_rows;
  Matrix<T> cond;
  Matrix<T> input;
  std::vector<Matrix<T>> hidden;  // depth + 1 entries: input of each block, then final
  std::vector<NitBlockCache<T>> blocks;
  FinalLayerCache<T> final_layer;
};

// Per-instance condition c_k = t_emb(t_k) + class_table[label_k].
template <typename T>
Matrix<T> condition_vectors(const ModelParams<T>& p, std::span<const double> times,
                            std::span<const int> labels, ModelCache<T>* cache = nullptr) {
  detail::require(times.size() == labels.size(), "times and labels disagree in length");
  TimeEmbedCache<T> tc;
  Matrix<T> c = timestep_embedding(times, p, &tc);
  std::vector<int> rows;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    rows.push_back(class_row(labels[k], p.config.num_classes));
    c.row(static_cast<Eigen::Index>(k)) += p.class_table.row(rows.back());
  }
  if (cache) {
    cache->time = std::move(tc);
    cache->class_rows = std::move(rows);
    cache->cond = c;
  }
  return c;
}

// Velocity prediction for every packed token row.
template <typename T>
Matrix<T> model_forward(const ModelParams<T>& p, const Matrix<T>& tokens, const PackLayout& layout,
                        std::span<const double> times, std::span<const int> labels,
                        const RopeTable& rope, ModelCache<T>* cache = nullptr) {
  layout.validate();
  detail::require(times.size() == layout.instances(), "need one time per instance");
  detail::require(tokens.rows() == layout.total(), "token rows do not match layout");
  const AttentionConfig acfg = p.config.attention();
  ModelCache<T> local;
  ModelCache<T>& cc = cache ? *cache : local;
  const Matrix<T> c = condition_vectors(p, times, labels, &cc);
  cc.input = tokens;
  Matrix<T> z = patch_embed(tokens, p);
  cc.hidden.assign(1, z);
  cc.blocks.resize(p.blocks.size());
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    z = nit_block_forward(z, c, layout, rope, p.blocks[i], acfg, &cc.blocks[i]);
    cc.hidden.push_back(z);
  }
  if (!cache) cc.blocks.clear();
  return final_layer(z, c, layout, p.final_layer, &cc.final_layer);
}

template <typename T>
Matrix<T> model_forward(const ModelParams<T>& p, const Matrix<T>& tokens, const PackLayout& layout,
                        std::span<const double> times, std::span<const int> labels) {
  return model_forward(p, tokens, layout, times, labels, rope_for_packed(layout, p.config.rope()));
}

// Accumulates parameter gradients for d(loss)/d(velocity) = dvel.
template <typename T>
void model_backward(const ModelParams<T>& p, const ModelCache<T>& cc, const Matrix<T>& dvel,
                    const PackLayout& layout, const RopeTable& rope, ModelParams<T>& g) {
  const AttentionConfig acfg = p.config.attention();
  const Matrix<T>& c = cc.cond;
  BlockInputGrads<T> fg =
      final_layer_backward(cc.final_layer, c, dvel, layout, p.final_layer, g.final_layer);
  Matrix<T> dz = std::move(fg.dz);
  Matrix<T> dc = std::move(fg.dc);
  for (std::size_t i = p.blocks.size(); i-- > 0;) {
    BlockInputGrads<T> bg =
        nit_block_backward(cc.blocks[i], c, dz, layout, rope, p.blocks[i], g.blocks[i], acfg);
    dz = std::move(bg.dz);
    dc += bg.dc;
  }
  linear_backward(cc.input, p.patch_w, dz, g.patch_w, g.patch_b);
  for (std::size_t k = 0; k < cc.class_rows.size(); ++k) {
    g.class_table.row(cc.class_rows[k]) += dc.row(static_cast<Eigen::Index>(k));
  }
  timestep_embedding_backward(cc.time, dc, p, g);
}

}  // namespace nit
