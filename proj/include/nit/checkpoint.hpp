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

// Checkpoint format (all little-endian):
//   "NITC", version u16,
//   config: u32 latent_channels, patch_size, hidden, depth, heads,
//           num_classes, freq_dim, tile_size, qk_norm;
//           f64 mlp_ratio, time_scale, rope_theta
//   u32 parameter count, then per parameter:
//     u32 name length, name bytes, u32 rows, u32 cols, rows*cols float32.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "nit/blocks.hpp"
#include "nit/core.hpp"
#include "nit/tokenizer.hpp"

namespace nit {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// The codec block records how latents map back to pixels; its channel count
// is the model's latent_channels.
inline void write_checkpoint(std::ostream& os, const ModelParams<float>& p,
                             const CodecConfig& codec = {}) {
  const ModelConfig& c = p.config;
  detail::write_magic(os, "NITC");
  detail::write_le<std::uint16_t>(os, kCheckpointVersion);
  for (int v : {c.latent_channels, c.patch_size, c.hidden, c.depth, c.heads, c.num_classes,
                c.freq_dim, c.tile_size, c.qk_norm ? 1 : 0}) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  }
  for (double v : {c.mlp_ratio, c.time_scale, c.rope_theta}) detail::write_le<double>(os, v);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(codec.downsample));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(codec.image_channels));
  detail::write_le<std::uint64_t>(os, codec.seed);
  detail::write_le<float>(os, codec.scale);
  detail::write_le<std::uint32_t>(os, codec.identity ? 1u : 0u);
  std::uint32_t count = 0;
  for_each_param(p, [&](const std::string&, const MatrixF&) { ++count; });
  detail::write_le<std::uint32_t>(os, count);
  for_each_param(p, [&](const std::string& name, const MatrixF& m) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::write_le<float>(os, m.data()[i]);
  });
}

inline ModelParams<float> read_checkpoint(std::istream& is, CodecConfig* codec = nullptr) {
  detail::expect_magic(is, "NITC");
  const auto version = detail::read_le<std::uint16_t>(is);
  if (version != kCheckpointVersion) {
    throw FormatError(detail::concat("unsupported checkpoint version ", version));
  }
  ModelConfig c;
  int* ints[] = {&c.latent_channels, &c.patch_size, &c.hidden, &c.depth, &c.heads,
                 &c.num_classes,     &c.freq_dim,   &c.tile_size};
  for (int* v : ints) *v = static_cast<int>(detail::read_le<std::uint32_t>(is));
  c.qk_norm = detail::read_le<std::uint32_t>(is) != 0;
  c.mlp_ratio = detail::read_le<double>(is);
  c.time_scale = detail::read_le<double>(is);
  c.rope_theta = detail::read_le<double>(is);
  CodecConfig cc;
  cc.downsample = static_cast<int>(detail::read_le<std::uint32_t>(is));
  cc.image_channels = static_cast<int>(detail::read_le<std::uint32_t>(is));
  cc.latent_channels = c.latent_channels;
  cc.seed = detail::read_le<std::uint64_t>(is);
  cc.scale = detail::read_le<float>(is);
  cc.identity = detail::read_le<std::uint32_t>(is) != 0;
  if (codec) *codec = cc;
  try {
    c.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }

  std::map<std::string, MatrixF> table;
  const auto count = detail::read_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::read_le<std::uint32_t>(is);
    if (len > 4096) throw FormatError("parameter name too long");
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rows = detail::read_le<std::uint32_t>(is);
    const auto cols = detail::read_le<std::uint32_t>(is);
    MatrixF m(rows, cols);
    for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] = detail::read_le<float>(is);
    if (!table.emplace(std::move(name), std::move(m)).second) {
      throw FormatError("duplicate parameter in checkpoint");
    }
  }

  ModelParams<float> p = init_model_params<float>(c, 0);
  std::size_t used = 0;
  for_each_param(p, [&](const std::string& name, MatrixF& m) {
    auto it = table.find(name);
    if (it == table.end()) throw FormatError("checkpoint is missing " + name);
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols()) {
      throw FormatError("shape mismatch for " + name);
    }
    m = std::move(it->second);
    ++used;
  });
  if (used != table.size()) throw FormatError("checkpoint has unknown parameters");
  return p;
}

// Written to a sibling temp file and renamed into place.
inline void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& p,
                            const CodecConfig& codec = {}) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + tmp.string());
    write_checkpoint(os, p, codec);
    if (!os) throw FormatError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline ModelParams<float> load_checkpoint(const std::filesystem::path& path,
                                          CodecConfig* codec = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_checkpoint(is, codec);
}

}  // namespace nit
