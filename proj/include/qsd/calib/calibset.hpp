// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "qsd/channel/channel.hpp"
#include "qsd/diffusion/model.hpp"
#include "qsd/diffusion/schedule.hpp"
#include "qsd/quant/calibrate.hpp"

namespace qsd::calib {

/// `n` levels spaced linearly over [lo, hi], both ends included.
std::vector<double> linspace(std::size_t n, double lo, double hi);

struct CalibSetConfig {
  std::size_t n_samples = 64;
  std::size_t ddim_steps = 100;
  std::size_t tap_stride = 25;
  std::vector<double> psnr_levels = linspace(8, 1.0, 100.0);
  double guidance_scale = 1.0;
  /// Trajectories generated per forward batch. Results do not depend on it.
  std::size_t batch = 16;
  std::uint64_t seed = 0;

  static CalibSetConfig paper_preset();
  static CalibSetConfig desk_preset();

  std::size_t taps_per_trajectory() const { return tap_stride ? ddim_steps / tap_stride : 0; }
  std::size_t trajectories() const;
  /// Throws ConfigError unless n_samples splits evenly into trajectories and
  /// the trajectories split evenly over the PSNR levels.
  void validate() const;

  bool operator==(const CalibSetConfig&) const = default;
};

struct CalibrationSample {
  num::Tensor x_t;      // (image_channels, H, W)
  int t = 0;
  num::Tensor y_noisy;  // (C, H, W)
  /// Empty for the clean-channel sentinel.
  std::optional<double> psnr_level;
  /// Index of the source map in the list passed to the builder.
  std::size_t map_index = 0;
};

struct CalibrationSet {
  CalibSetConfig config;
  /// Tapped timesteps, noisiest first.
  std::vector<int> taps;
  /// Ordered by trajectory, then by tap.
  std::vector<CalibrationSample> samples;
};

/// Trajectory i conditions on maps[i % maps.size()] corrupted at
/// psnr_levels[i % L] (stream "calib/channel/i") and starts from x_T drawn
/// from stream "calib/xT/i". Deterministic DDIM (eta = 0) with the
/// full-precision `model`.
CalibrationSet build_calibration_set(diffusion::EpsModel& model, std::size_t image_channels,
                                     const diffusion::NoiseSchedule& sched,
                                     const std::vector<channel::SemanticMap>& maps, const CalibSetConfig& cfg);

/// Same trajectories and seeds with clean conditioning maps; every
/// psnr_level is the clean sentinel.
CalibrationSet timestep_only_variant(diffusion::EpsModel& model, std::size_t image_channels,
                                     const diffusion::NoiseSchedule& sched,
                                     const std::vector<channel::SemanticMap>& maps, const CalibSetConfig& cfg);

/// Batched (x, t, y) in sample order.
quant::CalibInputs to_inputs(const CalibrationSet& set);

// File: magic "QSDCSET1", u32 version, config, tap list, then per sample
// t, psnr tag, psnr, map index, x_t and y tensor blocks.
void save_calibration_set(const std::filesystem::path& path, const CalibrationSet& set);
CalibrationSet load_calibration_set(const std::filesystem::path& path);

}  // namespace qsd::calib
