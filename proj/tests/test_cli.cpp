// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Drives the built command-line binary as a separate process.

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "qsd/pipeline/config.hpp"
#include "qsd/pipeline/metrics.hpp"

namespace fs = std::filesystem;
using namespace qsd::pipeline;

namespace {

const char* kTinyConfig = R"([dataset]
n_train = 16
n_calib = 8
n_eval = 4
height = 8
width = 8
classes = 3
seed = 5

[schedule]
steps = 20
reference_steps = 200

[model]
base_width = 8
time_embed_dim = 16

[train]
epochs = 3
batch = 8
lr = 2e-3

[quant]
adaround_steps = 20

[calib]
preset = custom
n_samples = 16
ddim_steps = 8
tap_stride = 4

[eval]
ddim_steps = 5
psnr_list = 100, 10
)";

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("qsd_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path tiny_config() {
  const auto p = fs::temp_directory_path() / "qsd_cli_tiny.ini";
  std::ofstream(p, std::ios::binary) << kTinyConfig;
  return p;
}

struct Run {
  int code = -1;
  std::string err;
};

// Runs the binary with `args`; stderr is captured.
Run run_cli(const std::string& args) {
  const auto err = fs::temp_directory_path() / "qsd_cli_stderr.txt";
  const std::string cmd = std::string(QSD_CLI_PATH) + " " + args + " >/dev/null 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err);
  return r;
}

const std::vector<std::string> kStages = {"synth",    "train", "quantize", "calibrate", "calibrate --variant timestep",
                                          "transmit --psnr 10", "evaluate --quantized noise_timestep,timestep",
                                          "report"};

void run_all(const fs::path& out) {
  for (const auto& s : kStages) {
    const auto r = run_cli("--config " + tiny_config().string() + " --out " + out.string() + " --seed 3 " + s);
    ASSERT_EQ(r.code, 0) << s << ": " << r.err;
  }
}

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(Cli, UnknownFlagIsUsageError) {
  auto r = run_cli("--no-such-flag synth");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("kind=usage"), std::string::npos) << r.err;
}

TEST(Cli, MissingSubcommandIsUsageError) { EXPECT_EQ(run_cli("--out /tmp").code, 2); }

TEST(Cli, EvaluateWithoutQuantizedCheckpointNamesIt) {
  const auto out = scratch("missing");
  ASSERT_EQ(run_cli("--config " + tiny_config().string() + " --out " + out.string() + " train").code, 0);
  auto r = run_cli("--config " + tiny_config().string() + " --out " + out.string() + " evaluate");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("kind=missing_artifact"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("quant_noise_timestep.qckpt"), std::string::npos) << r.err;
}

TEST(Cli, MissingConfigFileIsMissingArtifact) {
  auto r = run_cli("--config /nonexistent/qsd.ini --out " + scratch("nocfg").string() + " synth");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("artifact=\"/nonexistent/qsd.ini\""), std::string::npos) << r.err;
}

TEST(Cli, ConfigParseFailureHasItsOwnCode) {
  const auto dir = scratch("badcfg");
  std::ofstream(dir / "bad.ini") << "[train]\nepochs = many\n";
  std::ofstream(dir / "unknown.ini") << "[train]\nwarp = 9\n";
  for (const char* f : {"bad.ini", "unknown.ini"}) {
    auto r = run_cli("--config " + (dir / f).string() + " --out " + dir.string() + " synth");
    EXPECT_EQ(r.code, 4) << f;
    EXPECT_NE(r.err.find("kind=config"), std::string::npos) << r.err;
  }
}

TEST(Cli, ExitCodesAreDistinct) {
  const auto dir = scratch("codes");
  std::ofstream(dir / "bad.ini") << "[train]\nepochs = many\n";
  const int usage = run_cli("--bogus synth").code;
  const int missing = run_cli("--out " + dir.string() + " report").code;
  const int config = run_cli("--config " + (dir / "bad.ini").string() + " synth").code;
  EXPECT_NE(usage, 0);
  EXPECT_NE(missing, 0);
  EXPECT_NE(config, 0);
  EXPECT_NE(usage, missing);
  EXPECT_NE(usage, config);
  EXPECT_NE(missing, config);
}

// Every stage twice into separate directories: identical file sets and bytes.
TEST(Cli, FullPipelineRerunIsByteIdentical) {
  const auto a = scratch("rerun_a"), b = scratch("rerun_b");
  run_all(a);
  run_all(b);
  const auto fa = files_under(a), fb = files_under(b);
  ASSERT_EQ(fa, fb);
  for (const auto& f : fa) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;

  for (const char* f : {"fp.ckpt", "quant_nearest.qckpt", "quant_noise_timestep.qckpt", "quant_timestep.qckpt",
                        "calibset_noise_timestep.bin", "conditions.csv", "models.csv", "summary.csv", "summary.md",
                        "loss.csv", "calibration_noise_timestep.csv", "images/grid_psnr10.ppm"})
    EXPECT_TRUE(fs::exists(a / f)) << f;

  // Each subcommand leaves a manifest carrying the config hash and seed.
  const auto cfg = load_config(tiny_config());
  auto ts = cfg;
  ts.calib.variant = CalibVariant::timestep;
  for (const char* m : {"synth", "train", "quantize", "calibrate_noise_timestep", "calibrate_timestep", "transmit",
                        "evaluate", "report"}) {
    const auto text = slurp(a / (std::string("manifest_") + m + ".txt"));
    const auto& effective = std::string(m) == "calibrate_timestep" ? ts : cfg;
    EXPECT_NE(text.find("config_hash = " + config_hash(effective)), std::string::npos) << m;
    EXPECT_NE(text.find("seed = 3\n"), std::string::npos) << m;
    EXPECT_NE(text.find("tool_version = "), std::string::npos) << m;
  }

  // One summary row per model with bits, size, FLOPs and per-condition quality columns.
  const auto models = read_models_csv(a / "models.csv");
  const auto conds = read_conditions_csv(a / "conditions.csv");
  EXPECT_EQ(models.size(), 3u);
  EXPECT_EQ(conds.size(), 2u * 3u);
  const auto t = summarize(models, conds);
  std::istringstream summary(slurp(a / "summary.csv"));
  std::string header;
  std::getline(summary, header);
  std::string expected;
  for (std::size_t i = 0; i < t.header.size(); ++i) expected += (i ? "," : "") + t.header[i];
  EXPECT_EQ(header, expected);
  for (const char* col : {"weight_bits", "payload_bits", "flops_raw", "flops_weighted", "mse@100", "miou@100",
                          "mse@10", "miou@10"})
    EXPECT_NE(header.find(col), std::string::npos) << col;
  for (const auto& m : models) {
    if (m.bits == 8) {
      EXPECT_EQ(m.size_reduction_pct, 75.0);
    }
  }
}

TEST(Cli, SeedChangesOutputs) {
  const auto a = scratch("seed_a"), b = scratch("seed_b");
  const auto cfg = tiny_config().string();
  ASSERT_EQ(run_cli("--config " + cfg + " --out " + a.string() + " --seed 1 train").code, 0);
  ASSERT_EQ(run_cli("--config " + cfg + " --out " + b.string() + " --seed 2 train").code, 0);
  EXPECT_NE(slurp(a / "fp.ckpt"), slurp(b / "fp.ckpt"));
}
