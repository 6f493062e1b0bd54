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

// nit: train / sample / pack-plan / verify / stats.

#include <Eigen/Core>
#include <png.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nit/image_io.hpp"
#include "nit/nit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string versions_compiler() {
#ifdef __VERSION__
  return __VERSION__;
#else
  return "unknown";
#endif
}

// Every run records how to repeat it.
void write_manifest(const fs::path& out, const std::string& command,
                    const std::vector<std::string>& argv, const json& config,
                    std::uint64_t seed) {
  json m;
  m["command"] = command;
  m["argv"] = argv;
  m["config"] = config;
  m["config_hash"] = fnv1a_hex(config.dump());
  m["seed"] = seed;
  m["versions"] = {
      {"nit", nit::kVersion},
      {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                    "." + std::to_string(EIGEN_MINOR_VERSION)},
      {"libpng", PNG_LIBPNG_VER_STRING},
      {"compiler", versions_compiler()},
  };
  fs::create_directories(out);
  std::ofstream os(out / ("manifest_" + command + ".json"), std::ios::trunc);
  os << m.dump(2) << '\n';
}

json config_json(const nit::TrainConfig& c) {
  json j = json::object();
  for (const auto& [k, v] : nit::config_entries(c)) j[k] = v;
  return j;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out = "nit_out";
  std::map<std::string, std::string> overrides;
};

int run_train(const TrainArgs& a, const std::vector<std::string>& argv) {
  nit::TrainConfig cfg;
  if (!a.config.empty()) {
    std::ifstream is(a.config);
    if (!is) throw nit::ValidationError("cannot open config " + a.config);
    cfg = nit::parse_config(is);
  }
  for (const auto& [k, v] : a.overrides) nit::set_config_value(cfg, k, v);
  cfg.validate();
  const fs::path out(a.out);
  fs::create_directories(out);
  {
    std::ofstream os(out / "config.txt", std::ios::trunc);
    os << nit::format_config(cfg);
  }
  write_manifest(out, "train", argv, config_json(cfg), cfg.seed);

  nit::Trainer trainer(cfg);
  const long report_every = std::max(1, cfg.total_steps / 20);
  const nit::TrainSummary s =
      nit::run_training(trainer, out, [&](long step, const nit::StepResult& r) {
        if (step % report_every == 0 || step == cfg.total_steps) {
          std::cout << "step " << step << " loss " << r.loss << " tokens " << r.tokens
                    << " waste " << r.waste << '\n';
        }
      });
  std::cout << "held-out loss " << s.initial_eval_loss << " -> " << s.final_eval_loss << " after "
            << s.steps << " steps\ncheckpoint " << s.checkpoint.string() << '\n';
  return 0;
}

struct SampleArgs {
  std::string checkpoint;
  std::string out = "nit_out";
  std::string output = "sample.png";
  int height = 64;
  int width = 64;
  int label = 0;
  int steps = 50;
  double cfg_scale = 1.0;
  std::vector<double> cfg_interval = {0.0, 1.0};
  std::uint64_t seed = 0;
};

int run_sample(const SampleArgs& a, const std::vector<std::string>& argv) {
  nit::CodecConfig codec_cfg;
  nit::ModelParams<float> params;
  if (a.checkpoint.empty()) {
    // No checkpoint: an untrained NiT-tiny with the default codec.
    const nit::TrainConfig defaults;
    codec_cfg = defaults.codec;
    params = nit::init_model_params<float>(defaults.model, defaults.seed);
  } else {
    params = nit::load_checkpoint(a.checkpoint, &codec_cfg);
  }
  const nit::ToyCodec codec(codec_cfg);
  const nit::GuidanceConfig guidance{a.cfg_scale, a.cfg_interval[0], a.cfg_interval[1]};
  guidance.validate();
  nit::detail::require(a.label == nit::kNullLabel ||
                           (a.label >= 0 && a.label < params.config.num_classes),
                       "class ", a.label, " outside [0, ", params.config.num_classes, ")");
  const nit::PixelSize size{a.height, a.width};
  const nit::SampleRequest req{nit::token_grid(size, codec_cfg, params.config.patch_size),
                               a.label, a.seed};
  const std::vector<nit::Tensor3> imgs =
      nit::generate_images(params, codec, size, std::span(&req, 1), a.steps, guidance);

  const fs::path out(a.out);
  json cfg = {{"checkpoint", a.checkpoint}, {"height", a.height},   {"width", a.width},
              {"class", a.label},           {"steps", a.steps},     {"cfg_scale", a.cfg_scale},
              {"cfg_interval", a.cfg_interval}, {"output", a.output}};
  write_manifest(out, "sample", argv, cfg, a.seed);
  const fs::path file = out / a.output;
  nit::write_image(file, nit::to_image8(imgs.front()));
  std::cout << file.string() << "  dominant hue "
            << nit::dominant_hue(imgs.front()) << " deg\n";
  return 0;
}

struct PackPlanArgs {
  std::vector<std::string> items;
  std::int64_t budget = 0;
  int downsample = 32;
  int patch = 1;
  std::string out = "nit_out";
};

// Items are token counts ("1500") or pixel sizes ("512x768").
int run_pack_plan(const PackPlanArgs& a, const std::vector<std::string>& argv) {
  std::vector<std::int64_t> counts;
  for (const std::string& item : a.items) {
    const auto x = item.find('x');
    if (x == std::string::npos) {
      counts.push_back(nit::detail::parse_number<std::int64_t>("token count", item));
    } else {
      const int h = nit::detail::parse_number<int>("height", item.substr(0, x));
      const int w = nit::detail::parse_number<int>("width", item.substr(x + 1));
      const int unit = a.downsample * a.patch;
      nit::detail::require(h > 0 && w > 0 && h % unit == 0 && w % unit == 0, "size ", item,
                           " is not a multiple of ", unit);
      counts.push_back(static_cast<std::int64_t>(h / unit) * (w / unit));
    }
  }
  const nit::PackPlan plan = nit::plan_packing(counts, a.budget);
  const double waste = nit::packing_efficiency(plan, counts);

  json cfg = {{"items", a.items},
              {"budget", a.budget},
              {"downsample", a.downsample},
              {"patch", a.patch}};
  write_manifest(a.out, "pack-plan", argv, cfg, 0);
  std::ostringstream text;
  text << "pack\ttokens\tinstances\n";
  for (std::size_t p = 0; p < plan.packs.size(); ++p) {
    std::int64_t used = 0;
    std::string members;
    for (std::size_t idx : plan.packs[p]) {
      used += counts[idx];
      members += (members.empty() ? "" : ",") + std::to_string(idx);
    }
    text << p << '\t' << used << '\t' << members << '\n';
  }
  text << "waste\t" << std::fixed << std::setprecision(4) << waste << '\n';
  std::ofstream(fs::path(a.out) / "pack_plan.tsv", std::ios::trunc) << text.str();
  std::cout << text.str();
  return 0;
}

struct VerifyArgs {
  std::vector<std::string> suites;
  bool inject_fault = false;
  std::uint64_t seed = nit::VerifyOptions{}.seed;
  std::string out = "nit_out";
};

int run_verify(const VerifyArgs& a, const std::vector<std::string>& argv) {
  nit::VerifyOptions opts;
  opts.seed = a.seed;
  opts.inject_fault = a.inject_fault;
  const std::vector<std::string> suites = a.suites.empty() ? nit::verify_suite_names() : a.suites;
  write_manifest(a.out, "verify", argv,
                 {{"suites", suites}, {"inject_fault", a.inject_fault}}, a.seed);
  std::vector<nit::CheckResult> results;
  for (const std::string& s : suites) {
    results.push_back(nit::run_suite(s, opts));
    nit::write_verify_report(std::cout, {results.back()});
    std::cout.flush();
  }
  const fs::path out(a.out);
  {
    std::ofstream csv(out / "verify.csv", std::ios::trunc);
    nit::write_verify_csv(csv, results);
    std::ofstream txt(out / "verify.txt", std::ios::trunc);
    nit::write_verify_report(txt, results);
  }
  std::vector<std::string> failed;
  for (const auto& r : results) {
    if (!r.passed) failed.push_back(r.suite);
  }
  if (failed.empty()) {
    std::cout << "all " << results.size() << " suites passed\n";
    return 0;
  }
  std::cout << "failed suites:";
  for (const auto& f : failed) std::cout << ' ' << f;
  std::cout << '\n';
  return 1;
}

struct StatsArgs {
  std::string log;
  std::string output = "loss.png";
  std::string out = "nit_out";
  int smooth = 50;
  int width = 800;
  int height = 480;
};

int run_stats(const StatsArgs& a, const std::vector<std::string>& argv) {
  std::ifstream is(a.log);
  if (!is) throw nit::ValidationError("cannot open loss log " + a.log);
  const nit::LossLog log = nit::read_loss_csv(is);
  write_manifest(a.out, "stats", argv,
                 {{"log", a.log}, {"output", a.output}, {"smooth", a.smooth}}, 0);
  const fs::path file = fs::path(a.out) / a.output;
  nit::write_image(file, nit::plot_loss(log, a.width, a.height, a.smooth));
  std::cout << file.string() << "  (" << log.step.size() << " steps";
  if (!log.loss.empty()) {
    std::cout << ", loss " << log.loss.front() << " -> " << log.loss.back();
  }
  std::cout << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Native-resolution diffusion transformer toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", nit::kVersion);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train on the synthetic dataset");
  t->add_option("--config", train.config, "key = value config file")->check(CLI::ExistingFile);
  t->add_option("--out", train.out, "output directory");
  // One flag per config key; flags override the config file.
  const nit::TrainConfig defaults;
  std::map<std::string, std::string> flag_values;
  for (const auto& [key, value] : nit::config_entries(defaults)) {
    std::string names = "--" + key;
    if (key.find('_') != std::string::npos) {
      std::string dashed = key;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      names += ",--" + dashed;
    }
    t->add_option(names, flag_values[key], "config key (default " + value + ")");
  }

  SampleArgs sample;
  auto* s = app.add_subcommand("sample", "generate one image");
  s->add_option("--checkpoint", sample.checkpoint, "model checkpoint (default: untrained)")
      ->check(CLI::ExistingFile);
  s->add_option("--height", sample.height, "pixel height")->capture_default_str();
  s->add_option("--width", sample.width, "pixel width")->capture_default_str();
  s->add_option("--class", sample.label, "class label, -1 for unconditional")
      ->capture_default_str();
  s->add_option("--steps", sample.steps, "Euler steps")->capture_default_str();
  s->add_option("--cfg-scale", sample.cfg_scale, "guidance scale")->capture_default_str();
  s->add_option("--cfg-interval", sample.cfg_interval, "guidance interval lo hi")
      ->expected(2)
      ->capture_default_str();
  s->add_option("--seed", sample.seed, "noise seed")->capture_default_str();
  s->add_option("--output", sample.output, "image file name (.png or .ppm)")
      ->capture_default_str();
  s->add_option("--out", sample.out, "output directory")->capture_default_str();

  PackPlanArgs pack;
  auto* p = app.add_subcommand("pack-plan", "print a longest-pack-first plan");
  p->add_option("items", pack.items, "token counts or HxW pixel sizes")->required();
  p->add_option("--budget", pack.budget, "tokens per pack")->required();
  p->add_option("--downsample", pack.downsample, "codec downsample factor")->capture_default_str();
  p->add_option("--patch", pack.patch, "patch size")->capture_default_str();
  p->add_option("--out", pack.out, "output directory")->capture_default_str();

  VerifyArgs verify;
  auto* v = app.add_subcommand("verify", "run the self-check suites");
  v->add_option("--suite", verify.suites, "suite to run (repeatable; default all)")
      ->check(CLI::IsMember(nit::verify_suite_names()));
  v->add_flag("--inject-fault", verify.inject_fault, "negate streaming attention logits");
  v->add_option("--seed", verify.seed, "random seed")->capture_default_str();
  v->add_option("--out", verify.out, "output directory")->capture_default_str();

  StatsArgs stats;
  auto* st = app.add_subcommand("stats", "plot a loss log");
  st->add_option("log", stats.log, "loss.csv from train")->required()->check(CLI::ExistingFile);
  st->add_option("--output", stats.output, "image file name (.png or .ppm)")
      ->capture_default_str();
  st->add_option("--smooth", stats.smooth, "running-mean window")->capture_default_str();
  st->add_option("--width", stats.width, "plot width")->capture_default_str();
  st->add_option("--height", stats.height, "plot height")->capture_default_str();
  st->add_option("--out", stats.out, "output directory")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (t->parsed()) {
      for (const auto& [key, value] : nit::config_entries(defaults)) {
        if (t->count("--" + key) > 0) train.overrides[key] = flag_values[key];
      }
      return run_train(train, args);
    }
    if (s->parsed()) return run_sample(sample, args);
    if (p->parsed()) return run_pack_plan(pack, args);
    if (v->parsed()) return run_verify(verify, args);
    if (st->parsed()) return run_stats(stats, args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
