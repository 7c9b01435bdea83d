// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Subcommands exchange data only through files in
// --out, and every subcommand regenerates the synthetic splits from the
// config, so any stage can be rerun on its own.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qsd/calib/calibset.hpp"
#include "qsd/error.hpp"
#include "qsd/net/denoiser.hpp"
#include "qsd/pipeline/config.hpp"
#include "qsd/pipeline/dataset.hpp"
#include "qsd/pipeline/link.hpp"
#include "qsd/pipeline/metrics.hpp"
#include "qsd/pipeline/stages.hpp"
#include "qsd/pipeline/train.hpp"
#include "qsd/quant/qcheckpoint.hpp"

namespace fs = std::filesystem;
using namespace qsd;
using namespace qsd::pipeline;

namespace {

// Exit codes.
constexpr int kExitOther = 1;
constexpr int kExitUsage = 2;
constexpr int kExitMissing = 3;
constexpr int kExitConfig = 4;

struct Globals {
  std::string config;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  /// calibrate --variant; overrides [calib] variant.
  std::string variant;
};

struct Context {
  RunConfig cfg;
  std::uint64_t seed = 0;
  fs::path out;
};

Context make_context(const Globals& g) {
  Context c;
  if (!g.config.empty()) {
    c.cfg = load_config(g.config);
  } else if (g.preset == "desk") {
    c.cfg = RunConfig::desk();
  } else if (g.preset == "paper") {
    c.cfg = RunConfig::paper();
  } else {
    throw ConfigError("unknown preset '" + g.preset + "' (expected desk or paper)");
  }
  if (!g.variant.empty()) c.cfg.calib.variant = calib_variant_from_string(g.variant);
  c.cfg.validate();
  c.seed = g.seed.value_or(c.cfg.seed);
  c.out = g.out;
  fs::create_directories(c.out);
  // The resolved config, so the directory documents how it was produced.
  std::ofstream os(c.out / "config.ini", std::ios::binary);
  os << to_ini(c.cfg);
  if (!os) throw IoError("cannot write " + (c.out / "config.ini").string());
  return c;
}

// Artifact names, relative to --out.
const char* kFpCheckpoint = "fp.ckpt";
std::string quant_checkpoint(const std::string& variant) { return "quant_" + variant + ".qckpt"; }

void require(const fs::path& p, const std::string& produced_by) {
  if (!fs::exists(p))
    throw MissingArtifactError(p.string(), p.string() + " does not exist (run '" + produced_by + "' first)");
}

void write_sizes_csv(const fs::path& path, const quant::SizeReport& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "tensor,numel,bits,payload_bits\n";
  for (const auto& t : s.tensors) os << t.key << "," << t.numel << "," << t.bits << "," << t.payload_bits << "\n";
  os << "total,,," << s.payload_bits << "\n";
  os << "metadata,,," << s.metadata_bits << "\n";
  os << "fp_payload,,32," << s.fp_payload_bits << "\n";
  if (!os) throw IoError("write failed for " + path.string());
}

std::optional<double> parse_psnr(const std::string& s) {
  if (s == "clean") return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("--psnr expects a number or 'clean', got '" + s + "'");
}

struct Loaded {
  net::Denoiser model;
  diffusion::NoiseSchedule schedule;
};

Loaded load_fp(const Context& c) {
  const auto path = c.out / kFpCheckpoint;
  require(path, "train");
  auto ck = net::load_checkpoint(path);
  return {net::model_from_checkpoint(ck), net::schedule_from_checkpoint(ck)};
}

// --- subcommands -----------------------------------------------------------

void cmd_synth(const Context& c) {
  auto sp = synth_splits(c.cfg.dataset);
  const auto path = c.out / "dataset.csv";
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "split,index,map_fingerprint,render_seed\n";
  char buf[128];
  auto dump = [&](const char* name, const std::vector<Example>& xs) {
    for (std::size_t i = 0; i < xs.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s,%zu,%016llx,%llu\n", name, i,
                    static_cast<unsigned long long>(xs[i].map.fingerprint()),
                    static_cast<unsigned long long>(xs[i].render_seed));
      os << buf;
    }
  };
  dump("train", sp.train);
  dump("calib", sp.calib);
  dump("eval", sp.eval);
  if (!os) throw IoError("write failed for " + path.string());

  // Map | image pairs of the first evaluation examples.
  std::vector<num::Tensor> tiles;
  for (std::size_t i = 0; i < std::min<std::size_t>(8, sp.eval.size()); ++i) {
    tiles.push_back(colorize(sp.eval[i].map));
    tiles.push_back(sp.eval[i].image);
  }
  if (!tiles.empty()) write_ppm(c.out / "dataset_preview.ppm", image_grid(tiles, 2));
  write_manifest(c.out, "synth", c.cfg, c.seed,
                 {{"n_train", std::to_string(sp.train.size())},
                  {"n_calib", std::to_string(sp.calib.size())},
                  {"n_eval", std::to_string(sp.eval.size())}});
}

void cmd_train(const Context& c) {
  auto sp = synth_splits(c.cfg.dataset);
  auto tr = train_fp(c.cfg, sp.train, c.seed, c.out / "fp_last_good.ckpt");
  net::save_checkpoint(c.out / kFpCheckpoint, tr.model, tr.schedule);
  write_loss_csv(c.out / "loss.csv", tr.curve);
  write_manifest(c.out, "train", c.cfg, c.seed,
                 {{"output", kFpCheckpoint}, {"steps", std::to_string(tr.curve.size())}});
}

void cmd_quantize(const Context& c) {
  auto fp = load_fp(c);
  quant::QuantModel qm(fp.model, c.cfg.quant_config());
  const auto name = quant_checkpoint("nearest");
  quant::save_quantized(c.out / name, qm, fp.schedule);
  write_sizes_csv(c.out / "size_nearest.csv", quant::size_bits(qm));
  write_manifest(c.out, "quantize", c.cfg, c.seed,
                 {{"input", kFpCheckpoint}, {"output", name}, {"bits", std::to_string(c.cfg.quant.bits)}});
}

void cmd_calibrate(const Context& c) {
  const auto variant = to_string(c.cfg.calib.variant);
  auto fp = load_fp(c);
  auto sp = synth_splits(c.cfg.dataset);
  auto set = make_calibration_set(fp.model, fp.schedule, maps_of(sp.calib), c.cfg, c.seed);
  const auto set_name = "calibset_" + variant + ".bin";
  calib::save_calibration_set(c.out / set_name, set);

  quant::QuantModel qm(fp.model, c.cfg.quant_config());
  auto rep = quantize_and_calibrate(qm, set, c.cfg, c.seed);
  const auto name = quant_checkpoint(variant);
  quant::save_quantized(c.out / name, qm, fp.schedule);
  write_calibration_csv(c.out / ("calibration_" + variant + ".csv"), rep);
  write_sizes_csv(c.out / ("size_" + variant + ".csv"), quant::size_bits(qm));
  write_manifest(c.out, "calibrate_" + variant, c.cfg, c.seed,
                 {{"input", kFpCheckpoint},
                  {"calibration_set", set_name},
                  {"calibration_samples", std::to_string(set.samples.size())},
                  {"variant", variant},
                  {"output", name}});
}

// Loads "fp" or a quantized checkpoint by variant name.
struct NamedModel {
  std::string name;
  std::string file;
  int bits = 32;
  quant::SizeReport size;
  Loaded loaded;
};

NamedModel load_named(const Context& c, const std::string& name) {
  if (name == "fp") {
    auto l = load_fp(c);
    auto size = quant::size_bits(l.model);
    return {name, kFpCheckpoint, 32, size, std::move(l)};
  }
  const auto file = quant_checkpoint(name);
  const auto path = c.out / file;
  require(path, name == "nearest" ? "quantize" : "calibrate --variant " + name);
  auto ck = quant::load_quantized(path);
  auto size = quant::size_bits(ck);
  return {name, file, ck.bits, size, {net::model_from_checkpoint(ck.base), net::schedule_from_checkpoint(ck.base)}};
}

void cmd_transmit(const Context& c, const std::string& model_name, const std::string& psnr_text) {
  const auto psnr = parse_psnr(psnr_text);
  auto m = load_named(c, model_name);
  auto sp = synth_splits(c.cfg.dataset);
  auto maps = maps_of(sp.eval);
  auto res = run_link(m.loaded.model, m.loaded.schedule, maps, psnr, c.cfg.eval, c.seed);

  const auto stem = "transmit_" + model_name + "_psnr" + psnr_label(psnr);
  const auto dir = c.out / stem;
  fs::create_directories(dir);
  std::ofstream os(c.out / (stem + ".csv"), std::ios::binary);
  if (!os) throw IoError("cannot write " + (c.out / (stem + ".csv")).string());
  os << "index,compressed_bits,uncompressed_bits,runs,miou\n";
  char buf[160];
  for (std::size_t i = 0; i < res.images.size(); ++i) {
    char img[32];
    std::snprintf(img, sizeof img, "image_%03zu.ppm", i);
    write_ppm(dir / img, res.images[i]);
    const double miou = mean_iou(maps[i], classify_image(res.images[i], c.cfg.dataset.classes));
    const auto& b = res.bandwidth[i];
    std::snprintf(buf, sizeof buf, "%zu,%llu,%llu,%llu,%.9g\n", i, static_cast<unsigned long long>(b.compressed_bits),
                  static_cast<unsigned long long>(b.uncompressed_bits), static_cast<unsigned long long>(b.runs), miou);
    os << buf;
  }
  if (!os) throw IoError("write failed for " + stem + ".csv");
  write_manifest(c.out, "transmit", c.cfg, c.seed,
                 {{"model", m.file}, {"psnr_db", psnr_label(psnr)}, {"images", std::to_string(res.images.size())}});
}

void cmd_evaluate(const Context& c, const std::vector<std::string>& quantized) {
  if (quantized.empty()) throw ConfigError("evaluate needs at least one quantized model");
  std::vector<NamedModel> loaded;
  loaded.push_back(load_named(c, "fp"));
  for (const auto& q : quantized) {
    if (q == "fp") throw ConfigError("--quantized lists quantized variants; fp is always included");
    loaded.push_back(load_named(c, q));
  }
  auto sp = synth_splits(c.cfg.dataset);
  std::vector<EvalModel> models;
  for (auto& m : loaded) models.push_back({m.name, &m.loaded.model, m.bits, m.size});

  auto rep = evaluate(models, loaded.front().loaded.schedule, sp.eval, {maps_of(sp.train), maps_of(sp.calib)}, c.cfg,
                      c.seed, c.out / "images");
  write_conditions_csv(c.out / "conditions.csv", rep.conditions);
  write_models_csv(c.out / "models.csv", rep.models);
  std::map<std::string, std::string> extra{{"conditions", std::to_string(rep.conditions.size())}};
  for (const auto& m : loaded) extra["model." + m.name] = m.file;
  write_manifest(c.out, "evaluate", c.cfg, c.seed, extra);
}

void cmd_report(const Context& c) {
  const auto cpath = c.out / "conditions.csv", mpath = c.out / "models.csv";
  require(cpath, "evaluate");
  require(mpath, "evaluate");
  auto t = summarize(read_models_csv(mpath), read_conditions_csv(cpath));
  write_summary_csv(c.out / "summary.csv", t);
  write_summary_markdown(c.out / "summary.md", t);
  write_manifest(c.out, "report", c.cfg, c.seed, {{"inputs", "conditions.csv,models.csv"}, {"rows", std::to_string(t.rows.size())}});
}

std::string quoted(const std::string& s) {
  std::string r = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') r += '\\';
    r += ch == '\n' ? ' ' : ch;
  }
  return r + "\"";
}

int fail(int code, const std::string& kind, const std::string& message, const std::string& artifact = {}) {
  std::cerr << "qsd: error kind=" << kind;
  if (!artifact.empty()) std::cerr << " artifact=" << quoted(artifact);
  std::cerr << " message=" << quoted(message) << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-aware conditional diffusion with post-training quantization"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", kToolVersion);

  Globals g;
  app.add_option("--config", g.config, "INI config file (defaults to the preset)");
  app.add_option("--preset", g.preset, "Built-in config when --config is absent")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--seed", g.seed, "Run seed (defaults to [run] seed of the config)");
  app.add_option("--out", g.out, "Directory for every input and output artifact")->capture_default_str();

  std::string model_name = "noise_timestep", psnr_text = "10";
  std::vector<std::string> quantized{"noise_timestep"};

  auto* synth = app.add_subcommand("synth", "Render the synthetic splits and a preview");
  auto* train = app.add_subcommand("train", "Train the full-precision denoiser");
  auto* quantize = app.add_subcommand("quantize", "Nearest-rounding weight quantization");
  auto* calibrate = app.add_subcommand("calibrate", "Build a calibration set and run block-wise AdaRound");
  calibrate->add_option("--variant", g.variant, "noise_timestep or timestep (defaults to the config)")
      ->check(CLI::IsMember({"noise_timestep", "timestep"}));
  auto* transmit = app.add_subcommand("transmit", "Send the evaluation maps over the channel and regenerate");
  transmit->add_option("--model", model_name, "fp, nearest, noise_timestep or timestep")->capture_default_str();
  transmit->add_option("--psnr", psnr_text, "Channel PSNR in dB, or 'clean'")->capture_default_str();
  auto* eval = app.add_subcommand("evaluate", "Quality, size and FLOPs of fp against quantized models");
  eval->add_option("--quantized", quantized, "Quantized variants to compare")->delimiter(',')->capture_default_str();
  auto* report = app.add_subcommand("report", "Merge evaluation CSVs into one summary table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kExitUsage, "usage", e.what());
  }

  try {
    const auto ctx = make_context(g);
    if (synth->parsed()) cmd_synth(ctx);
    else if (train->parsed()) cmd_train(ctx);
    else if (quantize->parsed()) cmd_quantize(ctx);
    else if (calibrate->parsed()) cmd_calibrate(ctx);
    else if (transmit->parsed()) cmd_transmit(ctx, model_name, psnr_text);
    else if (eval->parsed()) cmd_evaluate(ctx, quantized);
    else if (report->parsed()) cmd_report(ctx);
  } catch (const MissingArtifactError& e) {
    return fail(kExitMissing, "missing_artifact", e.what(), e.artifact());
  } catch (const ConfigError& e) {
    return fail(kExitConfig, "config", e.what());
  } catch (const LeakageError& e) {
    return fail(kExitOther, "leakage", e.what());
  } catch (const DivergenceError& e) {
    return fail(kExitOther, "divergence", e.what());
  } catch (const std::exception& e) {
    return fail(kExitOther, "runtime", e.what());
  }
  return 0;
}
