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

// NiT transformer blocks: embeddings, adaLN-Zero modulation broadcast over
// packed instances, the class-conditional block, the LoRA-modulated
// text-conditional block, and the final projection. Every layer has an
// explicit reverse pass.

#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "nit/attention.hpp"
#include "nit/core.hpp"
#include "nit/layers.hpp"
#include "nit/packing.hpp"
#include "nit/rope.hpp"

namespace nit {

struct ModelConfig {
  int latent_channels = 8;
  int patch_size = 1;
  int hidden = 64;
  int depth = 4;
  int heads = 4;
  double mlp_ratio = 4.0;
  int num_classes = 4;
  int freq_dim = 256;
  // t in [0, 1] is multiplied by this before the sinusoidal features.
  double time_scale = 1000.0;
  bool qk_norm = false;
  double rope_theta = 10000.0;
  int tile_size = 64;

  int token_dim() const { return latent_channels * patch_size * patch_size; }
  int mlp_hidden() const { return static_cast<int>(hidden * mlp_ratio); }
  int head_dim() const { return hidden / heads; }

  AttentionConfig attention() const {
    AttentionConfig a;
    a.model_dim = hidden;
    a.num_heads = heads;
    a.qk_norm = qk_norm;
    a.tile_size = tile_size;
    return a;
  }

  RopeConfig rope() const { return {head_dim(), rope_theta}; }

  void validate() const {
    detail::require(latent_channels > 0 && patch_size > 0, "bad token geometry");
    detail::require(depth >= 0 && num_classes > 0, "bad depth or class count");
    detail::require(freq_dim > 0 && freq_dim % 2 == 0, "freq_dim must be even");
    detail::require(mlp_hidden() > 0, "mlp hidden width must be positive");
    attention().validate();
    rope().validate();
  }

  // d=64, depth 4, 4 heads.
  static ModelConfig tiny() { return {}; }
  // DiT-B and DiT-XL widths; documented for parameter accounting only.
  static ModelConfig base() {
    ModelConfig c;
    c.hidden = 768;
    c.depth = 12;
    c.heads = 12;
    c.latent_channels = 32;
    c.num_classes = 1000;
    return c;
  }
  static ModelConfig xl() {
    ModelConfig c;
    c.hidden = 1152;
    c.depth = 28;
    c.heads = 16;
    c.latent_channels = 32;
    c.num_classes = 1000;
    return c;
  }
};

template <typename T>
struct SelfAttentionWeights {
  Matrix<T> qkv_w, qkv_b;    // d x 3d
  Matrix<T> proj_w, proj_b;  // d x d
};

template <typename T>
struct MlpWeights {
  Matrix<T> fc1_w, fc1_b;  // d x h
  Matrix<T> fc2_w, fc2_b;  // h x d
};

template <typename T>
struct NitBlockWeights {
  Matrix<T> ada_w, ada_b;  // d x 6d
  SelfAttentionWeights<T> attn;
  MlpWeights<T> mlp;
};

template <typename T>
struct T2IBlockWeights {
  Matrix<T> lora_down;  // d x r  (W1 transposed)
  Matrix<T> lora_up;    // r x 9d (W2 transposed)
  Matrix<T> lora_b;     // 1 x 9d
  SelfAttentionWeights<T> attn;
  CrossAttentionWeights<T> cross;
  MlpWeights<T> mlp;
};

template <typename T>
struct FinalLayerWeights {
  Matrix<T> ada_w, ada_b;  // d x 2d
  Matrix<T> out_w, out_b;  // d x token_dim
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Matrix<T> patch_w, patch_b;
  Matrix<T> t_fc1_w, t_fc1_b;
  Matrix<T> t_fc2_w, t_fc2_b;
  Matrix<T> class_table;  // (num_classes + 1) x d, last row is the null class
  std::vector<NitBlockWeights<T>> blocks;
  FinalLayerWeights<T> final_layer;
};

// Visits (name, matrix) in a fixed order shared by checkpoints and optimisers.
template <typename Params, typename F>
void for_each_param(Params& p, F&& f) {
  f("x_embedder.proj.weight", p.patch_w);
  f("x_embedder.proj.bias", p.patch_b);
  f("t_embedder.mlp.0.weight", p.t_fc1_w);
  f("t_embedder.mlp.0.bias", p.t_fc1_b);
  f("t_embedder.mlp.2.weight", p.t_fc2_w);
  f("t_embedder.mlp.2.bias", p.t_fc2_b);
  f("y_embedder.embedding_table", p.class_table);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const std::string pre = "blocks." + std::to_string(i) + ".";
    f(pre + "adaLN_modulation.weight", b.ada_w);
    f(pre + "adaLN_modulation.bias", b.ada_b);
    f(pre + "attn.qkv.weight", b.attn.qkv_w);
    f(pre + "attn.qkv.bias", b.attn.qkv_b);
    f(pre + "attn.proj.weight", b.attn.proj_w);
    f(pre + "attn.proj.bias", b.attn.proj_b);
    f(pre + "mlp.fc1.weight", b.mlp.fc1_w);
    f(pre + "mlp.fc1.bias", b.mlp.fc1_b);
    f(pre + "mlp.fc2.weight", b.mlp.fc2_w);
    f(pre + "mlp.fc2.bias", b.mlp.fc2_b);
  }
  f("final_layer.adaLN_modulation.weight", p.final_layer.ada_w);
  f("final_layer.adaLN_modulation.bias", p.final_layer.ada_b);
  f("final_layer.linear.weight", p.final_layer.out_w);
  f("final_layer.linear.bias", p.final_layer.out_b);
}

template <typename Weights, typename F>
void for_each_t2i_param(Weights& b, F&& f) {
  f("lora.down", b.lora_down);
  f("lora.up", b.lora_up);
  f("lora.bias", b.lora_b);
  f("attn.qkv.weight", b.attn.qkv_w);
  f("attn.qkv.bias", b.attn.qkv_b);
  f("attn.proj.weight", b.attn.proj_w);
  f("attn.proj.bias", b.attn.proj_b);
  f("cross.q.weight", b.cross.w_q);
  f("cross.q.bias", b.cross.b_q);
  f("cross.kv.weight", b.cross.w_kv);
  f("cross.kv.bias", b.cross.b_kv);
  f("cross.proj.weight", b.cross.w_o);
  f("cross.proj.bias", b.cross.b_o);
  f("mlp.fc1.weight", b.mlp.fc1_w);
  f("mlp.fc1.bias", b.mlp.fc1_b);
  f("mlp.fc2.weight", b.mlp.fc2_w);
  f("mlp.fc2.bias", b.mlp.fc2_b);
}

template <typename Params>
std::size_t parameter_count(Params& p) {
  std::size_t n = 0;
  for_each_param(p, [&](const std::string&, const auto& m) { n += m.size(); });
  return n;
}

inline std::size_t c2i_block_param_count(std::size_t d, double mlp_ratio = 4.0) {
  const auto h = static_cast<std::size_t>(d * mlp_ratio);
  return (d * 6 * d + 6 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
}

inline std::size_t t2i_block_param_count(std::size_t d, std::size_t rank,
                                         std::size_t context_dim, double mlp_ratio = 4.0) {
  const auto h = static_cast<std::size_t>(d * mlp_ratio);
  const std::size_t lora = d * rank + rank * 9 * d + 9 * d;
  const std::size_t self_attn = (d * 3 * d + 3 * d) + (d * d + d);
  const std::size_t cross = (d * d + d) + (context_dim * 2 * d + 2 * d) + (d * d + d);
  const std::size_t mlp = (d * h + h) + (h * d + d);
  return lora + self_attn + cross + mlp;
}

// ---------------------------------------------------------------------------
// Initialisation

namespace detail {

template <typename T>
Matrix<T> xavier(int fan_in, int fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Matrix<T> w(fan_in, fan_out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(u(rng));
  return w;
}

template <typename T>
Matrix<T> gaussian(int rows, int cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, std);
  Matrix<T> w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(n(rng));
  return w;
}

template <typename T>
Matrix<T> zeros(int rows, int cols) {
  return Matrix<T>::Zero(rows, cols);
}

template <typename T>
SelfAttentionWeights<T> init_self_attention(int d, std::mt19937_64& rng) {
  return {xavier<T>(d, 3 * d, rng), zeros<T>(1, 3 * d), xavier<T>(d, d, rng),
          zeros<T>(1, d)};
}

template <typename T>
MlpWeights<T> init_mlp(int d, int h, std::mt19937_64& rng) {
  return {xavier<T>(d, h, rng), zeros<T>(1, h), xavier<T>(h, d, rng), zeros<T>(1, d)};
}

}  // namespace detail

// Xavier-uniform linear layers, N(0, 0.02) embeddings, and zero-initialised
// modulation and output projections (adaLN-Zero).
template <typename T>
ModelParams<T> init_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg.hidden;
  ModelParams<T> p;
  p.config = cfg;
  p.patch_w = detail::xavier<T>(cfg.token_dim(), d, rng);
  p.patch_b = detail::zeros<T>(1, d);
  p.t_fc1_w = detail::gaussian<T>(cfg.freq_dim, d, 0.02, rng);
  p.t_fc1_b = detail::zeros<T>(1, d);
  p.t_fc2_w = detail::gaussian<T>(d, d, 0.02, rng);
  p.t_fc2_b = detail::zeros<T>(1, d);
  p.class_table = detail::gaussian<T>(cfg.num_classes + 1, d, 0.02, rng);
  for (int i = 0; i < cfg.depth; ++i) {
    NitBlockWeights<T> b;
    b.ada_w = detail::zeros<T>(d, 6 * d);
    b.ada_b = detail::zeros<T>(1, 6 * d);
    b.attn = detail::init_self_attention<T>(d, rng);
    b.mlp = detail::init_mlp<T>(d, cfg.mlp_hidden(), rng);
    p.blocks.push_back(std::move(b));
  }
  p.final_layer.ada_w = detail::zeros<T>(d, 2 * d);
  p.final_layer.ada_b = detail::zeros<T>(1, 2 * d);
  p.final_layer.out_w = detail::zeros<T>(d, cfg.token_dim());
  p.final_layer.out_b = detail::zeros<T>(1, cfg.token_dim());
  return p;
}

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& p) {
  ModelParams<T> z = p;
  for_each_param(z, [](const std::string&, Matrix<T>& m) { m.setZero(); });
  return z;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p) {
  ModelParams<To> out;
  out.config = p.config;
  out.blocks.resize(p.blocks.size());
  std::vector<const Matrix<From>*> src;
  for_each_param(p, [&](const std::string&, const Matrix<From>& m) { src.push_back(&m); });
  std::size_t i = 0;
  for_each_param(out, [&](const std::string&, Matrix<To>& m) {
    m = src[i++]->template cast<To>();
  });
  return out;
}

// Perturbs every parameter with N(0, std); used to leave the zero-init point
// in gradient checks.
template <typename T>
void jitter_params(ModelParams<T>& p, double std, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, std);
  for_each_param(p, [&](const std::string&, Matrix<T>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += static_cast<T>(n(rng));
  });
}

template <typename T>
T2IBlockWeights<T> init_t2i_block(int d, int rank, int context_dim, double mlp_ratio,
                                  std::uint64_t seed) {
  detail::require(rank > 0 && rank <= d, "LoRA rank ", rank, " must be in [1, ", d, "]");
  std::mt19937_64 rng(seed);
  T2IBlockWeights<T> b;
  b.lora_down = detail::xavier<T>(d, rank, rng);
  b.lora_up = detail::zeros<T>(rank, 9 * d);
  b.lora_b = detail::zeros<T>(1, 9 * d);
  b.attn = detail::init_self_attention<T>(d, rng);
  b.cross = {detail::xavier<T>(d, d, rng), detail::zeros<T>(1, d),
             detail::xavier<T>(context_dim, 2 * d, rng), detail::zeros<T>(1, 2 * d),
             detail::xavier<T>(d, d, rng), detail::zeros<T>(1, d)};
  b.mlp = detail::init_mlp<T>(d, static_cast<int>(d * mlp_ratio), rng);
  return b;
}

// ---------------------------------------------------------------------------
// Embeddings

template <typename T>
Matrix<T> patch_embed(const Matrix<T>& tokens, const ModelParams<T>& p) {
  detail::require(tokens.cols() == p.config.token_dim(), "token dim ", tokens.cols(),
                  " does not match c*p*p = ", p.config.token_dim());
  return linear(tokens, p.patch_w, p.patch_b);
}

// [cos(t' f_i), sin(t' f_i)] with f_i = 10000^(-i / half), t' = t * time_scale.
inline std::vector<double> sinusoidal_features(double t, int dim, double time_scale = 1000.0) {
  detail::require(std::isfinite(t), "timestep must be finite");
  const int half = dim / 2;
  std::vector<double> out(static_cast<std::size_t>(dim), 0.0);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    const double arg = t * time_scale * freq;
    out[i] = std::cos(arg);
    out[half + i] = std::sin(arg);
  }
  return out;
}

template <typename T>
struct TimeEmbedCache {
  Matrix<T> features, hidden_pre, hidden;
};

template <typename T>
Matrix<T> timestep_embedding(std::span<const double> times, const ModelParams<T>& p,
                             TimeEmbedCache<T>* cache = nullptr) {
  const int dim = p.config.freq_dim;
  Matrix<T> feats(static_cast<Eigen::Index>(times.size()), dim);
  for (std::size_t k = 0; k < times.size(); ++k) {
    const auto f = sinusoidal_features(times[k], dim, p.config.time_scale);
    for (int i = 0; i < dim; ++i) feats(static_cast<Eigen::Index>(k), i) = static_cast<T>(f[i]);
  }
  Matrix<T> pre = linear(feats, p.t_fc1_w, p.t_fc1_b);
  Matrix<T> h = map(pre, [](T v) { return silu(v); });
  Matrix<T> out = linear(h, p.t_fc2_w, p.t_fc2_b);
  if (cache) *cache = {std::move(feats), std::move(pre), std::move(h)};
  return out;
}

template <typename T>
void timestep_embedding_backward(const TimeEmbedCache<T>& c, const Matrix<T>& demb,
                                 const ModelParams<T>& p, ModelParams<T>& g) {
  Matrix<T> dh = linear_backward(c.hidden, p.t_fc2_w, demb, g.t_fc2_w, g.t_fc2_b);
  for (Eigen::Index i = 0; i < dh.size(); ++i) dh.data()[i] *= silu_grad(c.hidden_pre.data()[i]);
  linear_backward(c.features, p.t_fc1_w, dh, g.t_fc1_w, g.t_fc1_b);
}

// Row of the class table for `label`; kNullLabel maps to the last row.
inline int class_row(int label, int num_classes) {
  if (label == kNullLabel) return num_classes;
  detail::require(label >= 0 && label < num_classes, "class label ", label,
                  " out of range [0, ", num_classes, ")");
  return label;
}

// Classifier-free-guidance dropout: replaces the label by the null class with
// probability drop_prob.
template <typename Rng>
int drop_label(int label, double drop_prob, Rng& rng) {
  if (label == kNullLabel || drop_prob <= 0.0) return label;
  if (drop_prob >= 1.0) return kNullLabel;
  std::bernoulli_distribution drop(drop_prob);
  return drop(rng) ? kNullLabel : label;
}

template <typename T, typename Rng>
Matrix<T> class_embedding(int label, double drop_prob, Rng& rng, const ModelParams<T>& p) {
  const int row = class_row(drop_label(label, drop_prob, rng), p.config.num_classes);
  return p.class_table.row(row);
}

// ---------------------------------------------------------------------------
// Packed adaptive layer norm

// SiLU then affine; one row of `chunks * d` values per instance.
template <typename T>
Matrix<T> adaln_params(const Matrix<T>& c, const Matrix<T>& w, const Matrix<T>& b,
                       Matrix<T>* c_silu = nullptr) {
  Matrix<T> s = map(c, [](T v) { return silu(v); });
  Matrix<T> out = linear(s, w, b);
  if (c_silu) *c_silu = std::move(s);
  return out;
}

// Chunk `idx` of width d from per-instance modulation rows.
template <typename T>
Matrix<T> mod_chunk(const Matrix<T>& mod, int idx, int d) {
  return mod.middleCols(static_cast<Eigen::Index>(idx) * d, d);
}

// Row j of instance k: zhat * (1 + scale_k) + shift_k.
template <typename T>
Matrix<T> packed_modulate(const Matrix<T>& zhat, const Matrix<T>& shift,
                          const Matrix<T>& scale, const PackLayout& layout) {
  detail::require(shift.rows() == static_cast<Eigen::Index>(layout.instances()) &&
                      scale.rows() == shift.rows(),
                  "modulation rows do not match instance count");
  detail::require(zhat.rows() == layout.total(), "modulated rows do not match layout");
  Matrix<T> out(zhat.rows(), zhat.cols());
  for (std::size_t k = 0; k < layout.instances(); ++k) {
    for (int r = layout.begin(k); r < layout.end(k); ++r) {
      out.row(r) = zhat.row(r).cwiseProduct(
                       (scale.row(static_cast<Eigen::Index>(k)).array() + T(1)).matrix()) +
                   shift.row(static_cast<Eigen::Index>(k));
    }
  }
  return out;
}

template <typename T>
struct ModulateGrads {
  Matrix<T> dzhat, dshift, dscale;
};

template <typename T>
ModulateGrads<T> packed_modulate_backward(const Matrix<T>& zhat, const Matrix<T>& scale,
                                          const Matrix<T>& dout, const PackLayout& layout) {
  const auto n = static_cast<Eigen::Index>(layout.instances());
  ModulateGrads<T> g{Matrix<T>(dout.rows(), dout.cols()), Matrix<T>::Zero(n, dout.cols()),
                     Matrix<T>::Zero(n, dout.cols())};
  for (Eigen::Index k = 0; k < n; ++k) {
    for (int r = layout.begin(k); r < layout.end(k); ++r) {
      g.dzhat.row(r) = dout.row(r).cwiseProduct((scale.row(k).array() + T(1)).matrix());
      g.dshift.row(k) += dout.row(r);
      g.dscale.row(k) += dout.row(r).cwiseProduct(zhat.row(r));
    }
  }
  return g;
}

// z + gate_k * update for every row of instance k.
template <typename T>
void add_gated(Matrix<T>& z, const Matrix<T>& gate, const Matrix<T>& update,
               const PackLayout& layout) {
  for (std::size_t k = 0; k < layout.instances(); ++k) {
    for (int r = layout.begin(k); r < layout.end(k); ++r) {
      z.row(r) += update.row(r).cwiseProduct(gate.row(static_cast<Eigen::Index>(k)));
    }
  }
}

// Returns d(update); accumulates d(gate) into dgate.
template <typename T>
Matrix<T> add_gated_backward(const Matrix<T>& gate, const Matrix<T>& update,
                             const Matrix<T>& dz, const PackLayout& layout, Matrix<T>& dgate) {
  Matrix<T> dupdate(dz.rows(), dz.cols());
  for (std::size_t k = 0; k < layout.instances(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    for (int r = layout.begin(k); r < layout.end(k); ++r) {
      dupdate.row(r) = dz.row(r).cwiseProduct(gate.row(kk));
      dgate.row(kk) += dz.row(r).cwiseProduct(update.row(r));
    }
  }
  return dupdate;
}

// ---------------------------------------------------------------------------
// Sub-layers shared by both block types

template <typename T>
struct SelfAttentionCache {
  Matrix<T> input, qkv;
  NormResult<T> qn, kn;
  Matrix<T> q, k, v, attn;
  MatrixD lse;
};

template <typename T>
Matrix<T> self_attention(const Matrix<T>& x, const PackLayout& layout, const RopeTable& rope,
                         const SelfAttentionWeights<T>& w, const AttentionConfig& cfg,
                         SelfAttentionCache<T>* cache = nullptr) {
  const int d = cfg.model_dim;
  Matrix<T> qkv = linear(x, w.qkv_w, w.qkv_b);
  NormResult<T> qn = qk_normalize(Matrix<T>(qkv.leftCols(d)), cfg);
  NormResult<T> kn = qk_normalize(Matrix<T>(qkv.middleCols(d, d)), cfg);
  Matrix<T> q = qn.y;
  Matrix<T> k = kn.y;
  Matrix<T> v = qkv.rightCols(d);
  apply_rope_rows(q, rope, cfg.num_heads);
  apply_rope_rows(k, rope, cfg.num_heads);
  MatrixD lse;
  Matrix<T> attn = packed_varlen_attention(q, k, v, std::span<const std::int32_t>(layout.cu_seqlens),
                                           cfg, &lse);
  Matrix<T> out = linear(attn, w.proj_w, w.proj_b);
  if (cache) {
    *cache = {x,           std::move(qkv), std::move(qn), std::move(kn), std::move(q),
              std::move(k), std::move(v),  std::move(attn), std::move(lse)};
  }
  return out;
}

template <typename T>
Matrix<T> self_attention_backward(const SelfAttentionCache<T>& c, const Matrix<T>& dout,
                                  const PackLayout& layout, const RopeTable& rope,
                                  const SelfAttentionWeights<T>& w, SelfAttentionWeights<T>& g,
                                  const AttentionConfig& cfg) {
  const int d = cfg.model_dim;
  const Matrix<T> dattn = linear_backward(c.attn, w.proj_w, dout, g.proj_w, g.proj_b);
  const std::span<const std::int32_t> cu(layout.cu_seqlens);
  AttentionGrads<T> ag =
      packed_varlen_attention_backward(c.q, c.k, c.v, c.attn, c.lse, dattn, cu, cu, cfg);
  apply_rope_rows_backward(ag.dq, rope, cfg.num_heads);
  apply_rope_rows_backward(ag.dk, rope, cfg.num_heads);
  Matrix<T> dqkv(c.qkv.rows(), 3 * d);
  dqkv.leftCols(d) = qk_normalize_backward(c.qn, ag.dq, cfg);
  dqkv.middleCols(d, d) = qk_normalize_backward(c.kn, ag.dk, cfg);
  dqkv.rightCols(d) = ag.dv;
  return linear_backward(c.input, w.qkv_w, dqkv, g.qkv_w, g.qkv_b);
}

template <typename T>
struct MlpCache {
  Matrix<T> input, pre, act;
};

template <typename T>
Matrix<T> mlp_forward(const Matrix<T>& x, const MlpWeights<T>& w, MlpCache<T>* cache = nullptr) {
  Matrix<T> pre = linear(x, w.fc1_w, w.fc1_b);
  Matrix<T> act = map(pre, [](T v) { return gelu_tanh(v); });
  Matrix<T> out = linear(act, w.fc2_w, w.fc2_b);
  if (cache) *cache = {x, std::move(pre), std::move(act)};
  return out;
}

template <typename T>
Matrix<T> mlp_backward(const MlpCache<T>& c, const Matrix<T>& dout, const MlpWeights<T>& w,
                       MlpWeights<T>& g) {
  Matrix<T> dact = linear_backward(c.act, w.fc2_w, dout, g.fc2_w, g.fc2_b);
  for (Eigen::Index i = 0; i < dact.size(); ++i) dact.data()[i] *= gelu_tanh_grad(c.pre.data()[i]);
  return linear_backward(c.input, w.fc1_w, dact, g.fc1_w, g.fc1_b);
}

// ---------------------------------------------------------------------------
// Class-conditional NiT block

// Chunk order of the six modulation vectors.
enum AdaLNChunk : int {
  kShiftMsa = 0,
  kScaleMsa = 1,
  kGateMsa = 2,
  kShiftMlp = 3,
  kScaleMlp = 4,
  kGateMlp = 5,
};

template <typename T>
struct NitBlockCache {
  Matrix<T> c_silu, mod;
  NormResult<T> ln1;
  SelfAttentionCache<T> attn;
  Matrix<T> attn_out;
  NormResult<T> ln2;
  MlpCache<T> mlp;
  Matrix<T> mlp_out;
};

template <typename T>
Matrix<T> nit_block_forward(const Matrix<T>& z, const Matrix<T>& c, const PackLayout& layout,
                            const RopeTable& rope, const NitBlockWeights<T>& w,
                            const AttentionConfig& cfg, NitBlockCache<T>* cache = nullptr) {
  const int d = cfg.model_dim;
  NitBlockCache<T> local;
  NitBlockCache<T>& cc = cache ? *cache : local;
  cc.mod = adaln_params(c, w.ada_w, w.ada_b, &cc.c_silu);
  const Matrix<T> gate_msa = mod_chunk(cc.mod, kGateMsa, d);
  const Matrix<T> gate_mlp = mod_chunk(cc.mod, kGateMlp, d);

  Matrix<T> out = z;
  cc.ln1 = layer_norm(z);
  const Matrix<T> m1 = packed_modulate(cc.ln1.y, mod_chunk(cc.mod, kShiftMsa, d),
                                       mod_chunk(cc.mod, kScaleMsa, d), layout);
  cc.attn_out = self_attention(m1, layout, rope, w.attn, cfg, &cc.attn);
  add_gated(out, gate_msa, cc.attn_out, layout);

  cc.ln2 = layer_norm(out);
  const Matrix<T> m2 = packed_modulate(cc.ln2.y, mod_chunk(cc.mod, kShiftMlp, d),
                                       mod_chunk(cc.mod, kScaleMlp, d), layout);
  cc.mlp_out = mlp_forward(m2, w.mlp, &cc.mlp);
  add_gated(out, gate_mlp, cc.mlp_out, layout);
  return out;
}

template <typename T>
struct BlockInputGrads {
  Matrix<T> dz;
  Matrix<T> dc;
};

template <typename T>
BlockInputGrads<T> nit_block_backward(const NitBlockCache<T>& cc, const Matrix<T>& c,
                                      const Matrix<T>& dout, const PackLayout& layout,
                                      const RopeTable& rope, const NitBlockWeights<T>& w,
                                      NitBlockWeights<T>& g, const AttentionConfig& cfg) {
  const int d = cfg.model_dim;
  Matrix<T> dmod = Matrix<T>::Zero(cc.mod.rows(), cc.mod.cols());
  auto put = [&](int idx, const Matrix<T>& v) { dmod.middleCols(idx * d, d) += v; };

  Matrix<T> dgate(dmod.rows(), d);
  dgate.setZero();
  const Matrix<T> dmlp_out =
      add_gated_backward(Matrix<T>(mod_chunk(cc.mod, kGateMlp, d)), cc.mlp_out, dout, layout, dgate);
  put(kGateMlp, dgate);
  const Matrix<T> dm2 = mlp_backward(cc.mlp, dmlp_out, w.mlp, g.mlp);
  ModulateGrads<T> mg2 =
      packed_modulate_backward(cc.ln2.y, Matrix<T>(mod_chunk(cc.mod, kScaleMlp, d)), dm2, layout);
  put(kShiftMlp, mg2.dshift);
  put(kScaleMlp, mg2.dscale);
  Matrix<T> dz1 = dout + layer_norm_backward(cc.ln2, mg2.dzhat);

  dgate.setZero();
  const Matrix<T> dattn_out =
      add_gated_backward(Matrix<T>(mod_chunk(cc.mod, kGateMsa, d)), cc.attn_out, dz1, layout, dgate);
  put(kGateMsa, dgate);
  const Matrix<T> dm1 = self_attention_backward(cc.attn, dattn_out, layout, rope, w.attn, g.attn, cfg);
  ModulateGrads<T> mg1 =
      packed_modulate_backward(cc.ln1.y, Matrix<T>(mod_chunk(cc.mod, kScaleMsa, d)), dm1, layout);
  put(kShiftMsa, mg1.dshift);
  put(kScaleMsa, mg1.dscale);
  Matrix<T> dz = dz1 + layer_norm_backward(cc.ln1, mg1.dzhat);

  Matrix<T> dc = linear_backward(cc.c_silu, w.ada_w, dmod, g.ada_w, g.ada_b);
  for (Eigen::Index i = 0; i < dc.size(); ++i) dc.data()[i] *= silu_grad(c.data()[i]);
  return {std::move(dz), std::move(dc)};
}

// ---------------------------------------------------------------------------
// Text-conditional block with LoRA modulation

// Nine d-wide chunks in the order [b1, b2, b3, g1, g2, g3, a1, a2, a3]
// (shift, scale, gate for self-attention, cross-attention, feed-forward).
template <typename T>
Matrix<T> lora_adaln_params(const Matrix<T>& t_emb, const Matrix<T>& lora_down,
                            const Matrix<T>& lora_up, const Matrix<T>& lora_b) {
  detail::require(lora_down.cols() <= lora_down.rows(), "LoRA rank ", lora_down.cols(),
                  " exceeds hidden size ", lora_down.rows());
  detail::require(lora_up.rows() == lora_down.cols(), "LoRA factors disagree on rank");
  Matrix<T> s = (t_emb * lora_down) * lora_up;
  s.rowwise() += lora_b.row(0);
  return s;
}

inline constexpr int kT2IShift[3] = {0, 1, 2};
inline constexpr int kT2IScale[3] = {3, 4, 5};
inline constexpr int kT2IGate[3] = {6, 7, 8};

template <typename T>
struct T2IBlockCache {
  Matrix<T> t_emb, low, mod;
  NormResult<T> ln[3];
  SelfAttentionCache<T> attn;
  CrossAttentionCache<T> cross;
  MlpCache<T> mlp;
  Matrix<T> sub_out[3];
};

template <typename T>
Matrix<T> t2i_block_forward(const Matrix<T>& z, const Matrix<T>& t_emb, const PackLayout& layout,
                            const RopeTable& rope, const Matrix<T>& context,
                            std::span<const std::int32_t> context_cu,
                            const T2IBlockWeights<T>& w, const AttentionConfig& cfg,
                            T2IBlockCache<T>* cache = nullptr) {
  const int d = cfg.model_dim;
  detail::check_pairing(std::span<const std::int32_t>(layout.cu_seqlens), context_cu);
  T2IBlockCache<T> local;
  T2IBlockCache<T>& cc = cache ? *cache : local;
  cc.t_emb = t_emb;
  cc.low = t_emb * w.lora_down;
  cc.mod = lora_adaln_params(t_emb, w.lora_down, w.lora_up, w.lora_b);
  Matrix<T> out = z;
  for (int s = 0; s < 3; ++s) {
    cc.ln[s] = layer_norm(out);
    const Matrix<T> m = packed_modulate(cc.ln[s].y, mod_chunk(cc.mod, kT2IShift[s], d),
                                        mod_chunk(cc.mod, kT2IScale[s], d), layout);
    if (s == 0) {
      cc.sub_out[s] = self_attention(m, layout, rope, w.attn, cfg, &cc.attn);
    } else if (s == 1) {
      cc.sub_out[s] = cross_attention(m, std::span<const std::int32_t>(layout.cu_seqlens), context,
                                      context_cu, w.cross, cfg, &cc.cross);
    } else {
      cc.sub_out[s] = mlp_forward(m, w.mlp, &cc.mlp);
    }
    add_gated(out, Matrix<T>(mod_chunk(cc.mod, kT2IGate[s], d)), cc.sub_out[s], layout);
  }
  return out;
}

template <typename T>
struct T2IInputGrads {
  Matrix<T> dz, dt_emb, dcontext;
};

template <typename T>
T2IInputGrads<T> t2i_block_backward(const T2IBlockCache<T>& cc, const Matrix<T>& dout,
                                    const PackLayout& layout, const RopeTable& rope,
                                    std::span<const std::int32_t> context_cu,
                                    const T2IBlockWeights<T>& w, T2IBlockWeights<T>& g,
                                    const AttentionConfig& cfg) {
  const int d = cfg.model_dim;
  Matrix<T> dmod = Matrix<T>::Zero(cc.mod.rows(), cc.mod.cols());
  Matrix<T> dz = dout;
  Matrix<T> dcontext;
  for (int s = 2; s >= 0; --s) {
    Matrix<T> dgate = Matrix<T>::Zero(dmod.rows(), d);
    const Matrix<T> dsub = add_gated_backward(Matrix<T>(mod_chunk(cc.mod, kT2IGate[s], d)),
                                              cc.sub_out[s], dz, layout, dgate);
    dmod.middleCols(kT2IGate[s] * d, d) += dgate;
    Matrix<T> dm;
    if (s == 2) {
      dm = mlp_backward(cc.mlp, dsub, w.mlp, g.mlp);
    } else if (s == 1) {
      auto cg = cross_attention_backward(cc.cross, dsub,
                                         std::span<const std::int32_t>(layout.cu_seqlens),
                                         context_cu, w.cross, g.cross, cfg);
      dm = std::move(cg.dx);
      dcontext = std::move(cg.dcontext);
    } else {
      dm = self_attention_backward(cc.attn, dsub, layout, rope, w.attn, g.attn, cfg);
    }
    ModulateGrads<T> mg = packed_modulate_backward(
        cc.ln[s].y, Matrix<T>(mod_chunk(cc.mod, kT2IScale[s], d)), dm, layout);
    dmod.middleCols(kT2IShift[s] * d, d) += mg.dshift;
    dmod.middleCols(kT2IScale[s] * d, d) += mg.dscale;
    dz += layer_norm_backward(cc.ln[s], mg.dzhat);
  }
  g.lora_b.row(0) += dmod.colwise().sum();
  g.lora_up.noalias() += cc.low.transpose() * dmod;
  const Matrix<T> dlow = dmod * w.lora_up.transpose();
  g.lora_down.noalias() += cc.t_emb.transpose() * dlow;
  Matrix<T> dt = dlow * w.lora_down.transpose();
  return {std::move(dz), std::move(dt), std::move(dcontext)};
}

// ---------------------------------------------------------------------------
// Final layer: modulate(LN(z)) then affine to token space.

template <typename T>
struct FinalLayerCache {
  Matrix<T> c_silu, mod;
  NormResult<T> ln;
  Matrix<T> modulated;
};

template <typename T>
Matrix<T> final_layer(const Matrix<T>& z, const Matrix<T>& c, const PackLayout& layout,
                      const FinalLayerWeights<T>& w, FinalLayerCache<T>* cache = nullptr) {
  const auto d = static_cast<int>(z.cols());
  FinalLayerCache<T> local;
  FinalLayerCache<T>& cc = cache ? *cache : local;
  cc.mod = adaln_params(c, w.ada_w, w.ada_b, &cc.c_silu);
  cc.ln = layer_norm(z);
  cc.modulated = packed_modulate(cc.ln.y, mod_chunk(cc.mod, 0, d), mod_chunk(cc.mod, 1, d), layout);
  return linear(cc.modulated, w.out_w, w.out_b);
}

template <typename T>
BlockInputGrads<T> final_layer_backward(const FinalLayerCache<T>& cc, const Matrix<T>& c,
                                        const Matrix<T>& dout, const PackLayout& layout,
                                        const FinalLayerWeights<T>& w, FinalLayerWeights<T>& g) {
  const auto d = static_cast<int>(cc.modulated.cols());
  const Matrix<T> dm = linear_backward(cc.modulated, w.out_w, dout, g.out_w, g.out_b);
  ModulateGrads<T> mg = packed_modulate_backward(cc.ln.y, Matrix<T>(mod_chunk(cc.mod, 1, d)), dm, layout);
  Matrix<T> dmod(cc.mod.rows(), cc.mod.cols());
  dmod.leftCols(d) = mg.dshift;
  dmod.rightCols(d) = mg.dscale;
  Matrix<T> dc = linear_backward(cc.c_silu, w.ada_w, dmod, g.ada_w, g.ada_b);
  for (Eigen::Index i = 0; i < dc.size(); ++i) dc.data()[i] *= silu_grad(c.data()[i]);
  return {layer_norm_backward(cc.ln, mg.dzhat), std::move(dc)};
}

}  // namespace nit
