// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qsd/quant/quant_model.hpp"

namespace qsd::quant {

struct AdaRoundHyper {
  std::size_t steps = 1000;
  std::size_t batch = 8;
  double lr_logits = 1e-2;
  double lr_scale = 4e-5;
  double lambda_round = 0.01;
  /// Exponent of the rounding regularizer, annealed linearly after warmup.
  double b_start = 20.0;
  double b_end = 2.0;
  /// Fraction of steps before the regularizer switches on.
  double warmup = 0.2;
  /// Every k-th calibration sample is held out for reporting; 0 holds out none.
  std::size_t holdout_every = 8;
  /// Batch size of gradient-free replays.
  std::size_t chunk = 16;
  std::uint64_t seed = 0;

  bool operator==(const AdaRoundHyper&) const = default;
};

/// Soft-rounding state for quantizer `index`, initialized so that hardening
/// reproduces its current nearest rounding.
SoftQuantizer make_soft(const QuantModel& qm, std::size_t index);
SoftQuantizer make_soft(const Tensor& weight, const QuantizerParams& q, std::size_t index);

/// Per-sample reconstruction loss on the given sample indices; must build its
/// graph through the soft weights.
using ReconstructionFn = std::function<Tensor(const std::vector<std::size_t>&)>;

struct RoundingResult {
  double final_reconstruction = 0.0;
  std::size_t steps = 0;
};

/// Minimizes recon + lambda_round * sum(1 - |2h - 1|^b) over logits and log
/// scales with Adam, then hardens: each params[i] gets the learned scale, the
/// logits, and mode adaround. Throws DivergenceError naming `name` on a
/// non-finite loss.
RoundingResult optimize_rounding(std::vector<SoftQuantizer>& soft, const std::vector<QuantizerParams*>& params,
                                 std::size_t samples, const ReconstructionFn& recon, const AdaRoundHyper& hyper,
                                 const std::string& name);

/// Calibration inputs: model inputs replayed through the network.
struct CalibInputs {
  Tensor x;
  std::vector<int> t;
  Tensor y;
  std::size_t size() const { return t.size(); }
};

struct BlockReport {
  std::string block;
  std::size_t quantizers = 0;
  /// Per-element output MSE against the full-precision block on held-out inputs.
  double heldout_mse_nearest = 0.0;
  double heldout_mse_calibrated = 0.0;
  double final_reconstruction = 0.0;
};

struct CalibrationReport {
  std::vector<BlockReport> blocks;
  std::size_t train_samples = 0;
  std::size_t heldout_samples = 0;
  /// Per-element eps MSE of the quantized model against full precision, held out.
  double eps_mse_nearest = 0.0;
  double eps_mse_calibrated = 0.0;
};

/// Calibrates blocks in graph order. Each block's target is the
/// full-precision block applied to the full-precision prefix output; the
/// quantized block sees the output of the already-calibrated quantized prefix.
CalibrationReport calibrate_model(QuantModel& qm, const CalibInputs& inputs, const AdaRoundHyper& hyper);

/// Samples used for calibration and for held-out reporting.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n, std::size_t every);

}  // namespace qsd::quant
