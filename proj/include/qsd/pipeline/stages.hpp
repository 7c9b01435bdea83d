// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "qsd/calib/calibset.hpp"
#include "qsd/net/denoiser.hpp"
#include "qsd/pipeline/config.hpp"
#include "qsd/quant/calibrate.hpp"
#include "qsd/quant/quant_model.hpp"

namespace qsd::pipeline {

inline constexpr const char* kToolVersion = "qsemdiff 0.1.0";

/// Calibration set of the configured variant from the full-precision model,
/// conditioned on the calibration split.
calib::CalibrationSet make_calibration_set(net::Denoiser& fp, const diffusion::NoiseSchedule& sched,
                                           const std::vector<channel::SemanticMap>& calib_maps,
                                           const RunConfig& cfg, std::uint64_t seed);

/// Block-wise AdaRound of `qm` on `set`; qm must wrap the model that produced it.
quant::CalibrationReport quantize_and_calibrate(quant::QuantModel& qm, const calib::CalibrationSet& set,
                                                const RunConfig& cfg, std::uint64_t seed);

/// Header "block,quantizers,heldout_mse_nearest,heldout_mse_calibrated,final_reconstruction";
/// the last row, block "end_to_end", carries the eps MSE pair.
void write_calibration_csv(const std::filesystem::path& path, const quant::CalibrationReport& rep);

/// "key = value" lines: tool version, command, config hash, seeds and the
/// given extras, sorted by key. Contains nothing run-dependent beyond its
/// inputs, so reruns produce identical files.
void write_manifest(const std::filesystem::path& dir, const std::string& command, const RunConfig& cfg,
                    std::uint64_t seed, const std::map<std::string, std::string>& extra = {});

}  // namespace qsd::pipeline
