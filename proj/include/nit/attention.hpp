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

// Block-diagonal multi-head attention over packed sequences.
//
// Segments are described by cumulative offsets; query segment k attends only
// to key segment k. `reference_attention` materialises the full masked score
// matrix and is kept as the oracle for `packed_varlen_attention`, which walks
// each segment with a tiled online softmax and never builds the mask.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "nit/core.hpp"
#include "nit/layers.hpp"
#include "nit/packing.hpp"

namespace nit {

struct AttentionConfig {
  int model_dim = 64;
  int num_heads = 4;
  bool qk_norm = false;
  int tile_size = 64;
  // Dropout is part of the layer signature; only rate 0 is supported.
  double attn_drop = 0.0;
  double proj_drop = 0.0;
  // Test hook for `verify --inject-fault`: negates the streaming-path logits.
  bool fault_negate_logits = false;

  int head_dim() const { return model_dim / num_heads; }
  double scale() const { return 1.0 / std::sqrt(static_cast<double>(head_dim())); }

  void validate() const {
    detail::require(num_heads > 0 && model_dim > 0 && model_dim % num_heads == 0,
                    "model_dim ", model_dim, " not divisible by num_heads ", num_heads);
    detail::require(head_dim() % 4 == 0, "head_dim ", head_dim(),
                    " must be divisible by 4 for axial rope");
    detail::require(tile_size > 0, "tile_size must be positive");
    detail::require(attn_drop == 0.0 && proj_drop == 0.0,
                    "attention dropout is not supported (rates must be 0)");
  }
};

namespace detail {

inline void check_segments(std::span<const std::int32_t> cu, Eigen::Index rows,
                           const char* what) {
  require(cu.size() >= 2 && cu.front() == 0, what, " cu_seqlens must start at 0");
  for (std::size_t k = 1; k < cu.size(); ++k) {
    require(cu[k] > cu[k - 1], what, " segment ", k - 1, " is empty");
  }
  require(cu.back() == rows, what, " cu_seqlens end at ", cu.back(), " but there are ",
          rows, " rows");
}

template <typename T>
void check_attention_inputs(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                            std::span<const std::int32_t> cu_q,
                            std::span<const std::int32_t> cu_k,
                            const AttentionConfig& cfg) {
  cfg.validate();
  require(q.cols() == cfg.model_dim && k.cols() == cfg.model_dim &&
              v.cols() == cfg.model_dim,
          "attention inputs must have ", cfg.model_dim, " columns");
  require(k.rows() == v.rows(), "key and value row counts differ");
  check_segments(cu_q, q.rows(), "query");
  check_segments(cu_k, k.rows(), "key");
  require(cu_q.size() == cu_k.size(), "query has ", cu_q.size() - 1,
          " segments but key/value has ", cu_k.size() - 1);
  require(all_finite(q) && all_finite(k) && all_finite(v),
          "attention inputs contain NaN or Inf");
}

template <typename T>
double dot(const T* a, const T* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

}  // namespace detail

// Dense oracle: per head softmax(scale * Q K^T + M) V with M = 0 inside the
// paired segments and -inf elsewhere. Plain loops in a fixed order, so a row's
// result does not depend on how many other instances share the pack. When
// `probs` is given it receives the per-head probability matrices.
template <typename T>
Matrix<T> reference_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                              std::span<const std::int32_t> cu_q,
                              std::span<const std::int32_t> cu_k,
                              const AttentionConfig& cfg,
                              std::vector<MatrixD>* probs = nullptr) {
  detail::check_attention_inputs(q, k, v, cu_q, cu_k, cfg);
  const int hd = cfg.head_dim();
  const double neg_inf = -std::numeric_limits<double>::infinity();
  const Eigen::Index nq = q.rows();
  const Eigen::Index nk = k.rows();
  std::vector<Eigen::Index> lo(static_cast<std::size_t>(nq)), hi(static_cast<std::size_t>(nq));
  for (std::size_t seg = 0; seg + 1 < cu_q.size(); ++seg) {
    for (int i = cu_q[seg]; i < cu_q[seg + 1]; ++i) {
      lo[i] = cu_k[seg];
      hi[i] = cu_k[seg + 1];
    }
  }
  Matrix<T> out(nq, q.cols());
  if (probs) probs->clear();
  for (int h = 0; h < cfg.num_heads; ++h) {
    MatrixD s(nq, nk);
    for (Eigen::Index i = 0; i < nq; ++i) {
      for (Eigen::Index j = 0; j < nk; ++j) {
        s(i, j) = (j < lo[i] || j >= hi[i])
                      ? neg_inf
                      : cfg.scale() * detail::dot(q.row(i).data() + h * hd,
                                                  k.row(j).data() + h * hd, hd);
      }
      double m = neg_inf;
      for (Eigen::Index j = 0; j < nk; ++j) m = std::max(m, s(i, j));
      double denom = 0.0;
      for (Eigen::Index j = 0; j < nk; ++j) {
        s(i, j) = std::exp(s(i, j) - m);
        denom += s(i, j);
      }
      for (Eigen::Index j = 0; j < nk; ++j) s(i, j) /= denom;
      for (int c = 0; c < hd; ++c) {
        double acc = 0.0;
        for (Eigen::Index j = 0; j < nk; ++j) acc += s(i, j) * static_cast<double>(v(j, h * hd + c));
        out(i, h * hd + c) = static_cast<T>(acc);
      }
    }
    if (probs) probs->push_back(std::move(s));
  }
  return out;
}

template <typename T>
Matrix<T> reference_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                              std::span<const std::int32_t> cu_seqlens,
                              const AttentionConfig& cfg) {
  return reference_attention(q, k, v, cu_seqlens, cu_seqlens, cfg);
}

// Segment-streaming attention. For every query row the keys of its segment
// are visited in tiles of cfg.tile_size with a running max and running
// denominator (64-bit). `lse`, when given, receives the per-row, per-head
// log-sum-exp needed by the backward pass.
template <typename T>
Matrix<T> packed_varlen_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                                  std::span<const std::int32_t> cu_q,
                                  std::span<const std::int32_t> cu_k,
                                  const AttentionConfig& cfg, MatrixD* lse = nullptr) {
  detail::check_attention_inputs(q, k, v, cu_q, cu_k, cfg);
  const int hd = cfg.head_dim();
  const double scale = cfg.fault_negate_logits ? -cfg.scale() : cfg.scale();
  const int tile = cfg.tile_size;
  Matrix<T> out(q.rows(), q.cols());
  if (lse) lse->resize(q.rows(), cfg.num_heads);
  std::vector<double> scores(static_cast<std::size_t>(tile));
  std::vector<double> acc(static_cast<std::size_t>(hd));
  for (std::size_t seg = 0; seg + 1 < cu_q.size(); ++seg) {
    const int k_begin = cu_k[seg];
    const int k_end = cu_k[seg + 1];
    for (int h = 0; h < cfg.num_heads; ++h) {
      for (int i = cu_q[seg]; i < cu_q[seg + 1]; ++i) {
        const T* qi = q.row(i).data() + h * hd;
        double running_max = -std::numeric_limits<double>::infinity();
        double denom = 0.0;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int j0 = k_begin; j0 < k_end; j0 += tile) {
          const int j1 = std::min(j0 + tile, k_end);
          double tile_max = -std::numeric_limits<double>::infinity();
          for (int j = j0; j < j1; ++j) {
            const double s = scale * detail::dot(qi, k.row(j).data() + h * hd, hd);
            scores[j - j0] = s;
            tile_max = std::max(tile_max, s);
          }
          const double new_max = std::max(running_max, tile_max);
          const double correction = std::exp(running_max - new_max);
          denom *= correction;
          for (double& a : acc) a *= correction;
          for (int j = j0; j < j1; ++j) {
            const double p = std::exp(scores[j - j0] - new_max);
            denom += p;
            const T* vj = v.row(j).data() + h * hd;
            for (int c = 0; c < hd; ++c) acc[c] += p * vj[c];
          }
          running_max = new_max;
        }
        T* oi = out.row(i).data() + h * hd;
        for (int c = 0; c < hd; ++c) oi[c] = static_cast<T>(acc[c] / denom);
        if (lse) (*lse)(i, h) = running_max + std::log(denom);
      }
    }
  }
  return out;
}

template <typename T>
Matrix<T> packed_varlen_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                                  std::span<const std::int32_t> cu_seqlens,
                                  const AttentionConfig& cfg, MatrixD* lse = nullptr) {
  return packed_varlen_attention(q, k, v, cu_seqlens, cu_seqlens, cfg, lse);
}

template <typename T>
struct AttentionGrads {
  Matrix<T> dq;
  Matrix<T> dk;
  Matrix<T> dv;
};

// Recomputes probabilities from the saved log-sum-exp, one (query, key) pair
// at a time, so no score matrix is stored.
template <typename T>
AttentionGrads<T> packed_varlen_attention_backward(
    const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const Matrix<T>& out,
    const MatrixD& lse, const Matrix<T>& dout, std::span<const std::int32_t> cu_q,
    std::span<const std::int32_t> cu_k, const AttentionConfig& cfg) {
  const int hd = cfg.head_dim();
  const double scale = cfg.fault_negate_logits ? -cfg.scale() : cfg.scale();
  AttentionGrads<T> g{Matrix<T>::Zero(q.rows(), q.cols()),
                      Matrix<T>::Zero(k.rows(), k.cols()),
                      Matrix<T>::Zero(v.rows(), v.cols())};
  std::vector<double> dq_acc(static_cast<std::size_t>(hd));
  for (std::size_t seg = 0; seg + 1 < cu_q.size(); ++seg) {
    const int k_begin = cu_k[seg];
    const int k_len = cu_k[seg + 1] - k_begin;
    MatrixD dk_acc(k_len, hd);
    MatrixD dv_acc(k_len, hd);
    for (int h = 0; h < cfg.num_heads; ++h) {
      dk_acc.setZero();
      dv_acc.setZero();
      for (int i = cu_q[seg]; i < cu_q[seg + 1]; ++i) {
        const T* qi = q.row(i).data() + h * hd;
        const T* doi = dout.row(i).data() + h * hd;
        const double delta = detail::dot(doi, out.row(i).data() + h * hd, hd);
        const double row_lse = lse(i, h);
        std::fill(dq_acc.begin(), dq_acc.end(), 0.0);
        for (int jj = 0; jj < k_len; ++jj) {
          const T* kj = k.row(k_begin + jj).data() + h * hd;
          const T* vj = v.row(k_begin + jj).data() + h * hd;
          const double p = std::exp(scale * detail::dot(qi, kj, hd) - row_lse);
          const double dp = detail::dot(doi, vj, hd);
          const double ds = p * (dp - delta) * scale;
          double* dvr = dv_acc.row(jj).data();
          double* dkr = dk_acc.row(jj).data();
          for (int c = 0; c < hd; ++c) {
            dvr[c] += p * doi[c];
            dq_acc[c] += ds * kj[c];
            dkr[c] += ds * qi[c];
          }
        }
        T* dqi = g.dq.row(i).data() + h * hd;
        for (int c = 0; c < hd; ++c) dqi[c] += static_cast<T>(dq_acc[c]);
      }
      g.dk.block(k_begin, h * hd, k_len, hd) += dk_acc.template cast<T>();
      g.dv.block(k_begin, h * hd, k_len, hd) += dv_acc.template cast<T>();
    }
  }
  return g;
}

// Per-head layer normalisation of query or key rows without affine terms.
template <typename T>
NormResult<T> qk_normalize(const Matrix<T>& x, const AttentionConfig& cfg) {
  if (!cfg.qk_norm) return {x, {}};
  return layer_norm(x, cfg.head_dim());
}

template <typename T>
Matrix<T> qk_normalize_backward(const NormResult<T>& fwd, const Matrix<T>& dy,
                                const AttentionConfig& cfg) {
  if (!cfg.qk_norm) return dy;
  return layer_norm_backward(fwd, dy, cfg.head_dim());
}

// ---------------------------------------------------------------------------
// Cross-attention: image queries attend to the context segment paired with
// their instance. No rotary embedding is applied on either side.

template <typename T>
struct CrossAttentionWeights {
  Matrix<T> w_q, b_q;    // d x d, 1 x d
  Matrix<T> w_kv, b_kv;  // context_dim x 2d, 1 x 2d
  Matrix<T> w_o, b_o;    // d x d, 1 x d
};

template <typename T>
struct CrossAttentionCache {
  Matrix<T> x, ctx, q, kv, k, v, attn;
  MatrixD lse;
};

namespace detail {

inline void check_pairing(std::span<const std::int32_t> cu_x,
                          std::span<const std::int32_t> cu_ctx) {
  require(cu_x.size() == cu_ctx.size(), "cross-attention: ", cu_x.size() - 1,
          " image instances but ", cu_ctx.size() - 1, " context segments");
}

}  // namespace detail

template <typename T>
Matrix<T> cross_attention(const Matrix<T>& x, std::span<const std::int32_t> cu_x,
                          const Matrix<T>& context, std::span<const std::int32_t> cu_ctx,
                          const CrossAttentionWeights<T>& w, const AttentionConfig& cfg,
                          CrossAttentionCache<T>* cache = nullptr) {
  detail::check_pairing(cu_x, cu_ctx);
  const int d = cfg.model_dim;
  Matrix<T> q = linear(x, w.w_q, w.b_q);
  Matrix<T> kv = linear(context, w.w_kv, w.b_kv);
  Matrix<T> k = kv.leftCols(d);
  Matrix<T> v = kv.rightCols(d);
  MatrixD lse;
  Matrix<T> attn = packed_varlen_attention(q, k, v, cu_x, cu_ctx, cfg, &lse);
  Matrix<T> out = linear(attn, w.w_o, w.b_o);
  if (cache) {
    *cache = {x, context, std::move(q), std::move(kv), std::move(k), std::move(v),
              std::move(attn), std::move(lse)};
  }
  return out;
}

// Same projections, dense masked kernel.
template <typename T>
Matrix<T> reference_cross_attention(const Matrix<T>& x, std::span<const std::int32_t> cu_x,
                                    const Matrix<T>& context,
                                    std::span<const std::int32_t> cu_ctx,
                                    const CrossAttentionWeights<T>& w,
                                    const AttentionConfig& cfg) {
  detail::check_pairing(cu_x, cu_ctx);
  const int d = cfg.model_dim;
  const Matrix<T> q = linear(x, w.w_q, w.b_q);
  const Matrix<T> kv = linear(context, w.w_kv, w.b_kv);
  const Matrix<T> k = kv.leftCols(d);
  const Matrix<T> v = kv.rightCols(d);
  return linear(Matrix<T>(reference_attention(q, k, v, cu_x, cu_ctx, cfg)), w.w_o, w.b_o);
}

template <typename T>
struct CrossAttentionBackward {
  Matrix<T> dx;
  Matrix<T> dcontext;
};

template <typename T>
CrossAttentionBackward<T> cross_attention_backward(const CrossAttentionCache<T>& c,
                                                   const Matrix<T>& dout,
                                                   std::span<const std::int32_t> cu_x,
                                                   std::span<const std::int32_t> cu_ctx,
                                                   const CrossAttentionWeights<T>& w,
                                                   CrossAttentionWeights<T>& grad,
                                                   const AttentionConfig& cfg) {
  const int d = cfg.model_dim;
  const Matrix<T> dattn = linear_backward(c.attn, w.w_o, dout, grad.w_o, grad.b_o);
  AttentionGrads<T> ag =
      packed_varlen_attention_backward(c.q, c.k, c.v, c.attn, c.lse, dattn, cu_x, cu_ctx, cfg);
  Matrix<T> dkv(c.kv.rows(), 2 * d);
  dkv.leftCols(d) = ag.dk;
  dkv.rightCols(d) = ag.dv;
  return {linear_backward(c.x, w.w_q, ag.dq, grad.w_q, grad.b_q),
          linear_backward(c.ctx, w.w_kv, dkv, grad.w_kv, grad.b_kv)};
}

}  // namespace nit
