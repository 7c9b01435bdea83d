// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/pipeline/stages.hpp"

#include <cstdio>
#include <fstream>

#include "qsd/error.hpp"

namespace qsd::pipeline {

calib::CalibrationSet make_calibration_set(net::Denoiser& fp, const diffusion::NoiseSchedule& sched,
                                           const std::vector<channel::SemanticMap>& calib_maps,
                                           const RunConfig& cfg, std::uint64_t seed) {
  if (fp.weight_provider()) throw ConfigError("calibration set: the sampling model must be full precision");
  auto sc = cfg.calib.set;
  sc.seed = seed;
  if (cfg.calib.variant == CalibVariant::timestep)
    return calib::timestep_only_variant(fp, fp.config().in_channels, sched, calib_maps, sc);
  return calib::build_calibration_set(fp, fp.config().in_channels, sched, calib_maps, sc);
}

quant::CalibrationReport quantize_and_calibrate(quant::QuantModel& qm, const calib::CalibrationSet& set,
                                                const RunConfig& cfg, std::uint64_t seed) {
  auto h = cfg.quant.adaround;
  h.seed = seed;
  return quant::calibrate_model(qm, calib::to_inputs(set), h);
}

void write_calibration_csv(const std::filesystem::path& path, const quant::CalibrationReport& rep) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "block,quantizers,heldout_mse_nearest,heldout_mse_calibrated,final_reconstruction\n";
  char buf[256];
  for (const auto& b : rep.blocks) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.9g,%.9g,%.9g\n", b.block.c_str(), b.quantizers, b.heldout_mse_nearest,
                  b.heldout_mse_calibrated, b.final_reconstruction);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "end_to_end,0,%.9g,%.9g,0\n", rep.eps_mse_nearest, rep.eps_mse_calibrated);
  os << buf;
  if (!os) throw IoError("write failed for " + path.string());
}

void write_manifest(const std::filesystem::path& dir, const std::string& command, const RunConfig& cfg,
                    std::uint64_t seed, const std::map<std::string, std::string>& extra) {
  std::map<std::string, std::string> kv = extra;
  kv["tool_version"] = kToolVersion;
  kv["command"] = command;
  kv["config_hash"] = config_hash(cfg);
  kv["preset"] = cfg.preset;
  kv["seed"] = std::to_string(seed);
  kv["dataset_seed"] = std::to_string(cfg.dataset.seed);
  kv["checkpoint_format"] = "QSDCKPT1";
  kv["quantized_format"] = "QSDQCKP1";
  kv["calibset_format"] = "QSDCSET1";
  std::filesystem::create_directories(dir);
  const auto path = dir / ("manifest_" + command + ".txt");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
  if (!os) throw IoError("write failed for " + path.string());
}

}  // namespace qsd::pipeline
