// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qsd/calib/calibset.hpp"
#include "qsd/diffusion/schedule.hpp"
#include "qsd/net/denoiser.hpp"
#include "qsd/quant/calibrate.hpp"
#include "qsd/quant/quant_model.hpp"

namespace qsd::pipeline {

struct DatasetSpec {
  std::size_t n_train = 256;
  std::size_t n_calib = 32;
  std::size_t n_eval = 16;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 6;
  std::uint64_t seed = 1;
  bool operator==(const DatasetSpec&) const = default;
};

struct ScheduleSpec {
  std::size_t steps = 200;
  /// Betas of the reference chain; the actual ends are scaled by
  /// reference_steps / steps so the total noise level is kept.
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t reference_steps = 1000;
  bool operator==(const ScheduleSpec&) const = default;
};

struct ModelSpec {
  std::size_t base_width = 32;
  std::size_t depth = 2;
  std::size_t time_embed_dim = 64;
  int groups = 8;
  double null_cond_prob = 0.2;
  bool operator==(const ModelSpec&) const = default;
};

struct TrainSpec {
  std::size_t epochs = 30;
  std::size_t batch = 16;
  double lr = 1e-3;
  double lambda_kl = 1e-3;
  double psnr_min = 1.0;
  double psnr_max = 100.0;
  bool operator==(const TrainSpec&) const = default;
};

struct QuantSpec {
  int bits = 8;
  quant::RangePolicy policy = quant::RangePolicy::mse_grid;
  bool split = true;
  bool quantize_activations = false;
  int activation_bits = 8;
  quant::AdaRoundHyper adaround{};
  bool operator==(const QuantSpec&) const = default;
};

enum class CalibVariant { noise_timestep, timestep };
CalibVariant calib_variant_from_string(const std::string& s);
std::string to_string(CalibVariant v);

struct CalibSpec {
  /// "desk" or "paper" supply the defaults of `set` for keys absent from a
  /// config file; "custom" keeps the run preset's values.
  std::string preset = "desk";
  CalibVariant variant = CalibVariant::noise_timestep;
  calib::CalibSetConfig set = calib::CalibSetConfig::desk_preset();
  bool operator==(const CalibSpec&) const = default;
};

enum class SamplerKind { ddim, ddpm };
SamplerKind sampler_from_string(const std::string& s);
std::string to_string(SamplerKind s);

struct EvalSpec {
  std::vector<double> psnr_list{100.0, 20.0, 10.0};
  double guidance_scale = 2.0;
  SamplerKind sampler = SamplerKind::ddim;
  std::size_t ddim_steps = 40;
  /// Images per forward batch during sampling; results do not depend on it.
  std::size_t batch = 16;
  bool operator==(const EvalSpec&) const = default;
};

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  ScheduleSpec schedule;
  ModelSpec model;
  TrainSpec train;
  QuantSpec quant;
  CalibSpec calib;
  EvalSpec eval;

  static RunConfig desk();
  static RunConfig paper();

  net::DenoiserConfig denoiser() const;
  diffusion::NoiseSchedule noise_schedule() const;
  quant::QuantConfig quant_config() const;
  /// Throws ConfigError on any out-of-range field.
  void validate() const;

  bool operator==(const RunConfig&) const = default;
};

/// Flat INI text; every field is written, so parse(to_ini(c)) == c.
std::string to_ini(const RunConfig& c);
/// Keys absent from the text keep the defaults of the named preset
/// ([run] preset, default "desk"). Unknown sections or keys throw ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// FNV-1a 64 of to_ini(c), as 16 hex digits.
std::string config_hash(const RunConfig& c);

}  // namespace qsd::pipeline
