// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

namespace qsd::diffusion {

/// Linear beta schedule and the derived per-step coefficients. Index t runs
/// over [0, T); alpha_bar[t] is the product of alpha[0..t].
struct NoiseSchedule {
  std::size_t steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  /// posterior_var[0] is 0.
  std::vector<double> posterior_var;
  /// log(posterior_var) with entry 0 replaced by entry 1 (or log beta[0] when T = 1).
  std::vector<double> posterior_log_var_clipped;
  /// Posterior mean coefficients: mean = coef_x0[t] * x0 + coef_xt[t] * x_t.
  std::vector<double> coef_x0;
  std::vector<double> coef_xt;

  std::size_t size() const noexcept { return steps; }
  /// alpha_bar at t, with alpha_bar(-1) = 1.
  double alpha_bar_at(long t) const { return t < 0 ? 1.0 : alpha_bar.at(static_cast<std::size_t>(t)); }
  /// Throws ConfigError naming `what` when t is outside [0, T).
  void check_step(long t, const char* what) const;
};

/// Throws ConfigError unless T >= 1 and 0 < beta_start <= beta_end < 1.
NoiseSchedule build_schedule(std::size_t steps, double beta_start, double beta_end);

/// Betas that keep the total noise of a `reference_steps` schedule when the
/// chain is shortened to `steps`: both ends are multiplied by reference_steps / steps.
NoiseSchedule build_scaled_schedule(std::size_t steps, double beta_start, double beta_end,
                                    std::size_t reference_steps);

}  // namespace qsd::diffusion
