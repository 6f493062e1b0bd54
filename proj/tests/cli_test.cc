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

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "gtest/gtest.h"
#include "json.hpp"

namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string out;
};

// Runs the CLI with stdout and stderr captured together.
CliRun nit(const std::string& args) {
  const std::string cmd = std::string(NIT_CLI_PATH) + " " + args + " 2>&1";
  CliRun r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path temp_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("nit_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

TEST(CliTest, SampleIsBitwiseDeterministic) {
  const fs::path d = temp_dir("sample");
  const std::string args = "sample --height 96 --width 160 --class 3 --seed 7 --steps 8";
  const CliRun a = nit(args + " --out " + (d / "a").string());
  const CliRun b = nit(args + " --out " + (d / "b").string());
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  const std::string pa = slurp(d / "a" / "sample.png"), pb = slurp(d / "b" / "sample.png");
  ASSERT_GT(pa.size(), 8u);
  EXPECT_EQ(pa.substr(1, 3), "PNG");
  EXPECT_EQ(pa, pb);
  const CliRun c = nit("sample --height 96 --width 160 --class 3 --seed 8 --steps 8 --out " +
                    (d / "c").string());
  ASSERT_EQ(c.code, 0) << c.out;
  EXPECT_NE(slurp(d / "c" / "sample.png"), pa);
}

TEST(CliTest, SampleFromTrainedCheckpointAndPpm) {
  const fs::path d = temp_dir("sample_ckpt");
  ASSERT_EQ(nit("train --steps 2 --out " + (d / "run").string()).code, 0);
  const CliRun r = nit("sample --checkpoint " + (d / "run" / "model.nitc").string() +
                    " --height 32 --width 48 --class 1 --steps 4 --cfg-scale 2 "
                    "--cfg-interval 0 0.7 --output s.ppm --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string ppm = slurp(d / "s.ppm");
  EXPECT_EQ(ppm.substr(0, 11), "P6\n48 32\n25");
  EXPECT_EQ(ppm.size(), std::string("P6\n48 32\n255\n").size() + 48 * 32 * 3);
}

TEST(CliTest, SampleRejectsBadRequests) {
  const fs::path d = temp_dir("sample_bad");
  EXPECT_NE(nit("sample --height 100 --width 64 --out " + d.string()).code, 0);
  EXPECT_NE(nit("sample --class 9 --out " + d.string()).code, 0);
  EXPECT_NE(nit("sample --cfg-interval 0.8 0.2 --out " + d.string()).code, 0);
}

TEST(CliTest, PackPlanPrintsWaste) {
  const fs::path d = temp_dir("pack");
  const CliRun r = nit("pack-plan 1500 1500 500 --budget 2048 --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("waste\t0.1455"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("0\t2000\t0,2"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("1\t1500\t1"), std::string::npos) << r.out;
  EXPECT_EQ(slurp(d / "pack_plan.tsv"), r.out);
  // Pixel sizes at downsample 32: 1280x1200 -> 40x37.5 is rejected.
  EXPECT_NE(nit("pack-plan 1280x1200 --budget 4096 --out " + d.string()).code, 0);
  const CliRun px = nit("pack-plan 512x512 256x256 --budget 300 --out " + d.string());
  ASSERT_EQ(px.code, 0) << px.out;
  EXPECT_NE(px.out.find("0\t256\t0"), std::string::npos) << px.out;
  EXPECT_NE(nit("pack-plan 3000 --budget 2048 --out " + d.string()).code, 0);
}

TEST(CliTest, TrainWithZeroStepsWritesInitialCheckpointAndEmptyLog) {
  const fs::path d = temp_dir("train0");
  const CliRun r = nit("train --steps 0 --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(slurp(d / "loss.csv"), "step,loss,waste,tokens\n");
  EXPECT_TRUE(fs::exists(d / "model.nitc"));
  EXPECT_TRUE(fs::exists(d / "config.txt"));
}

TEST(CliTest, FlagsOverrideConfigFile) {
  const fs::path d = temp_dir("override");
  {
    std::ofstream cfg(d / "run.cfg");
    cfg << "# short run\nsteps = 3\nhidden = 32\ntokens_per_step = 128\n";
  }
  const CliRun r = nit("train --config " + (d / "run.cfg").string() + " --steps 2 --out " +
                    (d / "out").string());
  ASSERT_EQ(r.code, 0) << r.out;
  std::istringstream log(slurp(d / "out" / "loss.csv"));
  std::string line;
  int rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 3);  // header + 2 steps
  const std::string cfg = slurp(d / "out" / "config.txt");
  EXPECT_NE(cfg.find("steps = 2\n"), std::string::npos);
  EXPECT_NE(cfg.find("hidden = 32\n"), std::string::npos);
  EXPECT_NE(cfg.find("tokens_per_step = 128\n"), std::string::npos);

  // The written config alone reproduces the run.
  const CliRun again = nit("train --config " + (d / "out" / "config.txt").string() + " --out " +
                        (d / "again").string());
  ASSERT_EQ(again.code, 0) << again.out;
  EXPECT_EQ(slurp(d / "again" / "loss.csv"), slurp(d / "out" / "loss.csv"));
  EXPECT_EQ(slurp(d / "again" / "model.nitc"), slurp(d / "out" / "model.nitc"));
}

TEST(CliTest, UnknownFlagsAndKeysRejected) {
  const fs::path d = temp_dir("unknown");
  EXPECT_NE(nit("train --steps 0 --bogus 1 --out " + d.string()).code, 0);
  EXPECT_NE(nit("sample --colour 3 --out " + d.string()).code, 0);
  {
    std::ofstream cfg(d / "bad.cfg");
    cfg << "stepz = 3\n";
  }
  const CliRun r = nit("train --config " + (d / "bad.cfg").string() + " --out " + d.string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("stepz"), std::string::npos) << r.out;
  EXPECT_NE(nit("frobnicate").code, 0);
}

TEST(CliTest, ManifestRecordsConfigSeedAndVersions) {
  const fs::path d = temp_dir("manifest");
  ASSERT_EQ(nit("train --steps 0 --seed 5 --out " + d.string()).code, 0);
  const auto m = nlohmann::json::parse(slurp(d / "manifest_train.json"));
  EXPECT_EQ(m["command"], "train");
  EXPECT_EQ(m["seed"], 5);
  EXPECT_EQ(m["config"]["seed"], "5");
  EXPECT_EQ(m["config_hash"].get<std::string>().size(), 16u);
  EXPECT_TRUE(m["versions"].contains("nit"));
  EXPECT_TRUE(m["versions"].contains("eigen"));
  EXPECT_TRUE(m["argv"].is_array());
  ASSERT_EQ(nit("train --steps 0 --seed 6 --out " + (d / "b").string()).code, 0);
  const auto m2 = nlohmann::json::parse(slurp(d / "b" / "manifest_train.json"));
  EXPECT_NE(m2["config_hash"], m["config_hash"]);
}

TEST(CliTest, VerifyPassesOnCleanBuild) {
  const fs::path d = temp_dir("verify");
  const CliRun r = nit("verify --out " + d.string());
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("all 6 suites passed"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("max |packed - reference|"), std::string::npos) << r.out;
  const std::string csv = slurp(d / "verify.csv");
  EXPECT_EQ(csv.rfind("suite,passed,metric,tolerance,seconds\n", 0), 0u);
  EXPECT_NE(csv.find("attention_oracle,1,"), std::string::npos) << csv;
  EXPECT_TRUE(fs::exists(d / "verify.txt"));
}

TEST(CliTest, VerifyWithInjectedFaultFailsAndNamesSuite) {
  const fs::path d = temp_dir("fault");
  const CliRun r = nit("verify --inject-fault --out " + d.string());
  EXPECT_NE(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("FAIL attention_oracle"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("failed suites: attention_oracle"), std::string::npos) << r.out;
  EXPECT_NE(slurp(d / "verify.csv").find("attention_oracle,0,"), std::string::npos);
}

TEST(CliTest, StatsRendersPlot) {
  const fs::path d = temp_dir("stats");
  ASSERT_EQ(nit("train --steps 3 --out " + d.string()).code, 0);
  const CliRun r = nit("stats " + (d / "loss.csv").string() + " --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(slurp(d / "loss.png").substr(1, 3), "PNG");
  EXPECT_TRUE(fs::exists(d / "manifest_stats.json"));
  EXPECT_TRUE(fs::exists(d / "manifest_train.json"));
}

}  // namespace
