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

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nit/blocks.hpp"
#include "nit/checkpoint.hpp"
#include "nit/core.hpp"
#include "nit/dataset.hpp"
#include "nit/diffusion.hpp"
#include "nit/model.hpp"

namespace nit {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  ModelConfig model;
  CodecConfig codec;
  DatasetSpec data;
  NoiseConfig noise;
  std::int64_t tokens_per_step = 512;
  int total_steps = 1000;
  double lr = 1e-3;
  int warmup_steps = 50;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  int eval_instances = 64;   // held-out instances for the fixed-noise loss

  TrainConfig() {
    codec.downsample = 16;
    codec.latent_channels = 8;
    model.latent_channels = 8;
    data.size_step = 16;
  }

  int max_instance_tokens() const {
    const int unit = codec.downsample * model.patch_size;
    int longest = (data.native_max / unit) * (data.native_max / unit);
    for (const PixelSize& s : data.fixed_sizes) longest = std::max(longest, (s.h / unit) * (s.w / unit));
    return longest;
  }

  void validate() const {
    model.validate();
    data.validate();
    detail::require(codec.latent_channels == model.latent_channels,
                    "codec latent_channels ", codec.latent_channels,
                    " differs from model latent_channels ", model.latent_channels);
    detail::require(model.num_classes == data.class_count, "model num_classes ",
                    model.num_classes, " differs from class_count ", data.class_count);
    detail::require(data.size_step % (codec.downsample * model.patch_size) == 0,
                    "size_step must be a multiple of downsample * patch_size");
    detail::require(tokens_per_step >= max_instance_tokens(), "tokens_per_step ",
                    tokens_per_step, " is below the largest instance (", max_instance_tokens(),
                    " tokens)");
    detail::require(total_steps >= 0, "total_steps must be non-negative");
    detail::require(lr >= 0.0 && beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
                    "invalid optimizer settings");
    detail::require(noise.class_drop >= 0.0 && noise.class_drop <= 1.0,
                    "class_drop must be in [0, 1]");
    detail::require(eval_instances > 0, "eval_instances must be positive");
  }
};

namespace detail {

inline bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ValidationError("expected a boolean, got '" + v + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (!is || !is.eof()) throw ValidationError("bad value '" + v + "' for " + key);
  return out;
}

inline std::vector<PixelSize> parse_sizes(const std::string& v) {
  std::vector<PixelSize> out;
  std::istringstream is(v);
  std::string item;
  while (std::getline(is, item, ',')) {
    const auto x = item.find('x');
    require(x != std::string::npos, "size '", item, "' is not HxW");
    out.push_back({parse_number<int>("size", item.substr(0, x)),
                   parse_number<int>("size", item.substr(x + 1))});
  }
  return out;
}

inline std::string format_sizes(const std::vector<PixelSize>& sizes) {
  std::string out;
  for (const PixelSize& s : sizes) {
    if (!out.empty()) out += ',';
    out += std::to_string(s.h) + "x" + std::to_string(s.w);
  }
  return out;
}

template <typename T>
std::string fmt(T v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

// Every config key with its current value, in file order.
inline std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& c) {
  using detail::fmt;
  return {
      {"hidden", fmt(c.model.hidden)},
      {"depth", fmt(c.model.depth)},
      {"heads", fmt(c.model.heads)},
      {"mlp_ratio", fmt(c.model.mlp_ratio)},
      {"patch_size", fmt(c.model.patch_size)},
      {"latent_channels", fmt(c.model.latent_channels)},
      {"freq_dim", fmt(c.model.freq_dim)},
      {"qk_norm", c.model.qk_norm ? "true" : "false"},
      {"tile_size", fmt(c.model.tile_size)},
      {"rope_theta", fmt(c.model.rope_theta)},
      {"downsample", fmt(c.codec.downsample)},
      {"codec_seed", fmt(c.codec.seed)},
      {"mixture", mixture_name(c.data.mixture)},
      {"class_count", fmt(c.data.class_count)},
      {"native_min", fmt(c.data.native_min)},
      {"native_max", fmt(c.data.native_max)},
      {"max_aspect", fmt(c.data.max_aspect)},
      {"fixed_sizes", detail::format_sizes(c.data.fixed_sizes)},
      {"instances_per_epoch", fmt(c.data.instances_per_epoch)},
      {"data_seed", fmt(c.data.seed)},
      {"class_drop", fmt(c.noise.class_drop)},
      {"p_mean", fmt(c.noise.p_mean)},
      {"p_std", fmt(c.noise.p_std)},
      {"tokens_per_step", fmt(c.tokens_per_step)},
      {"steps", fmt(c.total_steps)},
      {"lr", fmt(c.lr)},
      {"warmup_steps", fmt(c.warmup_steps)},
      {"beta1", fmt(c.beta1)},
      {"beta2", fmt(c.beta2)},
      {"adam_eps", fmt(c.adam_eps)},
      {"grad_clip", fmt(c.grad_clip)},
      {"seed", fmt(c.seed)},
      {"checkpoint_every", fmt(c.checkpoint_every)},
      {"eval_instances", fmt(c.eval_instances)},
  };
}

inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& v) {
  using detail::parse_number;
  if (key == "hidden") c.model.hidden = parse_number<int>(key, v);
  else if (key == "depth") c.model.depth = parse_number<int>(key, v);
  else if (key == "heads") c.model.heads = parse_number<int>(key, v);
  else if (key == "mlp_ratio") c.model.mlp_ratio = parse_number<double>(key, v);
  else if (key == "patch_size") c.model.patch_size = parse_number<int>(key, v);
  else if (key == "latent_channels") {
    c.model.latent_channels = parse_number<int>(key, v);
    c.codec.latent_channels = c.model.latent_channels;
  } else if (key == "freq_dim") c.model.freq_dim = parse_number<int>(key, v);
  else if (key == "qk_norm") c.model.qk_norm = detail::parse_bool(v);
  else if (key == "tile_size") c.model.tile_size = parse_number<int>(key, v);
  else if (key == "rope_theta") c.model.rope_theta = parse_number<double>(key, v);
  else if (key == "downsample") c.codec.downsample = parse_number<int>(key, v);
  else if (key == "codec_seed") c.codec.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "mixture") c.data.mixture = parse_mixture(v);
  else if (key == "class_count") {
    c.data.class_count = parse_number<int>(key, v);
    c.model.num_classes = c.data.class_count;
  } else if (key == "native_min") c.data.native_min = parse_number<int>(key, v);
  else if (key == "native_max") c.data.native_max = parse_number<int>(key, v);
  else if (key == "max_aspect") c.data.max_aspect = parse_number<double>(key, v);
  else if (key == "fixed_sizes") c.data.fixed_sizes = detail::parse_sizes(v);
  else if (key == "instances_per_epoch") c.data.instances_per_epoch = parse_number<int>(key, v);
  else if (key == "data_seed") c.data.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "class_drop") c.noise.class_drop = parse_number<double>(key, v);
  else if (key == "p_mean") c.noise.p_mean = parse_number<double>(key, v);
  else if (key == "p_std") c.noise.p_std = parse_number<double>(key, v);
  else if (key == "tokens_per_step") c.tokens_per_step = parse_number<std::int64_t>(key, v);
  else if (key == "steps") c.total_steps = parse_number<int>(key, v);
  else if (key == "lr") c.lr = parse_number<double>(key, v);
  else if (key == "warmup_steps") c.warmup_steps = parse_number<int>(key, v);
  else if (key == "beta1") c.beta1 = parse_number<double>(key, v);
  else if (key == "beta2") c.beta2 = parse_number<double>(key, v);
  else if (key == "adam_eps") c.adam_eps = parse_number<double>(key, v);
  else if (key == "grad_clip") c.grad_clip = parse_number<double>(key, v);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "checkpoint_every") c.checkpoint_every = parse_number<int>(key, v);
  else if (key == "eval_instances") c.eval_instances = parse_number<int>(key, v);
  else throw ValidationError("unknown config key '" + key + "'");
  // size_step tracks downsample * patch_size
  if (key == "downsample" || key == "patch_size") {
    c.data.size_step = c.codec.downsample * c.model.patch_size;
  }
}

// key = value lines; '#' starts a comment.
inline TrainConfig parse_config(std::istream& is, TrainConfig c = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    detail::require(eq != std::string::npos, "config line ", lineno, " has no '='");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    set_config_value(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

inline std::string format_config(const TrainConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_entries(c)) out += k + " = " + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  ModelParams<float> m;
  ModelParams<float> v;
  long step = 0;
};

inline AdamState init_adam(const ModelParams<float>& p) { return {zeros_like(p), zeros_like(p), 0}; }

namespace detail {

inline std::vector<MatrixF*> param_list(ModelParams<float>& p) {
  std::vector<MatrixF*> out;
  for_each_param(p, [&](const std::string&, MatrixF& m) { out.push_back(&m); });
  return out;
}

}  // namespace detail

inline double grad_norm(ModelParams<float>& g) {
  double sq = 0.0;
  for (MatrixF* m : detail::param_list(g)) sq += m->cast<double>().squaredNorm();
  return std::sqrt(sq);
}

inline void adam_update(ModelParams<float>& p, ModelParams<float>& g, AdamState& s, double lr,
                        double beta1, double beta2, double eps) {
  ++s.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.step));
  const auto ps = detail::param_list(p);
  const auto gs = detail::param_list(g);
  const auto ms = detail::param_list(s.m);
  const auto vs = detail::param_list(s.v);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    float* w = ps[i]->data();
    const float* gr = gs[i]->data();
    float* m = ms[i]->data();
    float* v = vs[i]->data();
    for (Eigen::Index j = 0; j < ps[i]->size(); ++j) {
      m[j] = static_cast<float>(beta1 * m[j] + (1.0 - beta1) * gr[j]);
      v[j] = static_cast<float>(beta2 * v[j] + (1.0 - beta2) * gr[j] * gr[j]);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<float>(w[j] - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

// ---------------------------------------------------------------------------
// One optimizer step

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  int tokens = 0;
  double waste = 0.0;
};

// Loss and parameter gradients of one pack (gradients accumulate into g).
inline double loss_and_grad(const ModelParams<float>& p, const TrainingPack& pack,
                            ModelParams<float>* g) {
  const PackLayout& layout = pack.batch.layout;
  const MatrixF xt = add_noise_packed(pack.batch.tokens, pack.noise, pack.times, layout);
  const MatrixF target = velocity_target(pack.batch.tokens, pack.noise);
  const RopeTable rope = rope_for_packed(layout, p.config.rope());
  ModelCache<float> cache;
  const MatrixF pred = model_forward(p, xt, layout, pack.times, pack.labels, rope,
                                     g ? &cache : nullptr);
  const double loss = fm_loss(pred, target, layout);
  if (g && std::isfinite(loss)) {
    model_backward(p, cache, fm_loss_grad(pred, target, layout), layout, rope, *g);
  }
  return loss;
}

inline double scheduled_lr(const TrainConfig& cfg, long step) {
  if (cfg.warmup_steps <= 0 || step >= cfg.warmup_steps) return cfg.lr;
  return cfg.lr * static_cast<double>(step + 1) / cfg.warmup_steps;
}

inline StepResult train_step(ModelParams<float>& p, const TrainingPack& pack, AdamState& opt,
                             const TrainConfig& cfg) {
  ModelParams<float> g = zeros_like(p);
  StepResult r;
  r.loss = loss_and_grad(p, pack, &g);
  r.tokens = pack.tokens();
  r.waste = pack.waste;
  if (!std::isfinite(r.loss)) {
    std::ostringstream os;
    os << "non-finite loss " << r.loss << " at step " << opt.step + 1 << " (" << r.tokens
       << " tokens, " << pack.batch.instances() << " instances, times";
    for (double t : pack.times) os << ' ' << t;
    os << ")";
    throw TrainingError(os.str());
  }
  r.grad_norm = grad_norm(g);
  if (!std::isfinite(r.grad_norm)) {
    throw TrainingError(detail::concat("non-finite gradient norm at step ", opt.step + 1));
  }
  if (cfg.grad_clip > 0.0 && r.grad_norm > cfg.grad_clip) {
    const float s = static_cast<float>(cfg.grad_clip / r.grad_norm);
    for (MatrixF* m : detail::param_list(g)) *m *= s;
  }
  adam_update(p, g, opt, scheduled_lr(cfg, opt.step), cfg.beta1, cfg.beta2, cfg.adam_eps);
  return r;
}

// Mean loss over packs whose noise, times and labels are fixed.
inline double evaluate_loss(const ModelParams<float>& p, const std::vector<TrainingPack>& packs) {
  double total = 0.0;
  std::size_t n = 0;
  for (const TrainingPack& pack : packs) {
    total += loss_and_grad(p, pack, nullptr) * pack.batch.instances();
    n += pack.batch.instances();
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training loop

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg)
      : cfg_(std::move(cfg)),
        codec_((cfg_.validate(), cfg_.codec)),
        params_(init_model_params<float>(cfg_.model, cfg_.seed)),
        opt_(init_adam(params_)) {}

  // Resume from existing parameters (optimizer moments restart at zero).
  Trainer(TrainConfig cfg, ModelParams<float> params) : Trainer(std::move(cfg)) {
    detail::require(parameter_count(params) == parameter_count(params_),
                    "resumed parameters do not match the configured model");
    params_ = std::move(params);
  }

  StepResult step() {
    if (cursor_ >= epoch_.size()) {
      epoch_ = make_epoch(cfg_.data, codec_, cfg_.model.patch_size, cfg_.tokens_per_step,
                          cfg_.noise, epoch_index_++);
      cursor_ = 0;
    }
    return train_step(params_, epoch_[cursor_++], opt_, cfg_);
  }

  // A fixed held-out set (its own seed, no class dropout) for comparable losses.
  const std::vector<TrainingPack>& eval_packs() {
    if (eval_.empty()) {
      DatasetSpec spec = cfg_.data;
      spec.seed = cfg_.data.seed ^ 0xA5A5A5A5ull;
      spec.instances_per_epoch = cfg_.eval_instances;
      NoiseConfig noise = cfg_.noise;
      noise.class_drop = 0.0;
      eval_ = make_epoch(spec, codec_, cfg_.model.patch_size, cfg_.tokens_per_step, noise, 0);
    }
    return eval_;
  }

  double eval_loss() { return evaluate_loss(params_, eval_packs()); }

  const TrainConfig& config() const { return cfg_; }
  const ToyCodec& codec() const { return codec_; }
  ModelParams<float>& params() { return params_; }
  long steps_done() const { return opt_.step; }
  int epochs_started() const { return epoch_index_; }

 private:
  TrainConfig cfg_;
  ToyCodec codec_;
  ModelParams<float> params_;
  AdamState opt_;
  std::vector<TrainingPack> epoch_;
  std::size_t cursor_ = 0;
  int epoch_index_ = 0;
  std::vector<TrainingPack> eval_;
};

struct TrainSummary {
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
  long steps = 0;
  std::filesystem::path checkpoint;
};

// Writes loss.csv (step,loss,waste,tokens), periodic checkpoint_<step>.nitc and
// the final model.nitc under out_dir. `on_step` may be empty.
inline TrainSummary run_training(Trainer& trainer, const std::filesystem::path& out_dir,
                                 const std::function<void(long, const StepResult&)>& on_step = {}) {
  std::filesystem::create_directories(out_dir);
  const TrainConfig& cfg = trainer.config();
  std::ofstream log(out_dir / "loss.csv", std::ios::trunc);
  log << "step,loss,waste,tokens\n";
  TrainSummary s;
  s.initial_eval_loss = trainer.eval_loss();
  while (trainer.steps_done() < cfg.total_steps) {
    const StepResult r = trainer.step();
    const long step = trainer.steps_done();
    log << step << ',' << detail::fmt(r.loss) << ',' << detail::fmt(r.waste) << ',' << r.tokens
        << '\n';
    if (on_step) on_step(step, r);
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
      log.flush();
      save_checkpoint(out_dir / ("checkpoint_" + std::to_string(step) + ".nitc"),
                      trainer.params(), trainer.codec().config());
    }
  }
  log.flush();
  s.final_eval_loss = trainer.eval_loss();
  s.steps = trainer.steps_done();
  s.checkpoint = out_dir / "model.nitc";
  save_checkpoint(s.checkpoint, trainer.params(), trainer.codec().config());
  return s;
}

}  // namespace nit
