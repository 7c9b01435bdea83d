// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <vector>

#include "qsd/diffusion/schedule.hpp"
#include "qsd/net/denoiser.hpp"
#include "qsd/pipeline/config.hpp"
#include "qsd/pipeline/dataset.hpp"

namespace qsd::pipeline {

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double total = 0.0;
  double diffusion = 0.0;
  double kl = 0.0;
};

struct TrainResult {
  net::Denoiser model;
  diffusion::NoiseSchedule schedule;
  std::vector<StepRecord> curve;
  /// Mean total loss of each epoch.
  std::vector<double> epoch_loss;
};

/// Adam on the total loss. Every conditioning map goes through the channel
/// at a PSNR drawn uniformly from [psnr_min, psnr_max] and is replaced by the
/// null condition with probability null_cond_prob. Initialization uses
/// stream (seed, "model/init"); batching (seed, "train/shuffle"); t, eps,
/// PSNR, channel noise and dropout (seed, "train-noise").
///
/// On a non-finite loss the parameters of the last finite step are written
/// to `last_good` (when non-empty) and DivergenceError is thrown.
TrainResult train_fp(const RunConfig& cfg, const std::vector<Example>& data, std::uint64_t seed,
                     const std::filesystem::path& last_good = {});

/// Header "step,epoch,total,diffusion,kl".
void write_loss_csv(const std::filesystem::path& path, const std::vector<StepRecord>& curve);

}  // namespace qsd::pipeline
