// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/diffusion/schedule.hpp"

#include <cmath>
#include <string>

#include "qsd/error.hpp"

namespace qsd::diffusion {

void NoiseSchedule::check_step(long t, const char* what) const {
  if (t < 0 || static_cast<std::size_t>(t) >= steps)
    throw ConfigError(std::string(what) + ": timestep " + std::to_string(t) + " outside [0, " +
                      std::to_string(steps) + ")");
}

NoiseSchedule build_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1, got " + std::to_string(beta_start) + ", " +
                      std::to_string(beta_end));
  NoiseSchedule s;
  s.steps = steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(steps);
  for (std::size_t t = 0; t < steps; ++t)
    s.beta[t] = steps == 1 ? beta_start
                           : beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                              static_cast<double>(steps - 1);
  s.alpha.resize(steps);
  s.alpha_bar.resize(steps);
  double prod = 1.0;
  for (std::size_t t = 0; t < steps; ++t) {
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  s.posterior_var.resize(steps);
  s.coef_x0.resize(steps);
  s.coef_xt.resize(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    const double ab = s.alpha_bar[t];
    const double ab_prev = s.alpha_bar_at(static_cast<long>(t) - 1);
    s.posterior_var[t] = s.beta[t] * (1.0 - ab_prev) / (1.0 - ab);
    s.coef_x0[t] = std::sqrt(ab_prev) * s.beta[t] / (1.0 - ab);
    s.coef_xt[t] = std::sqrt(s.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab);
  }
  s.posterior_log_var_clipped.resize(steps);
  for (std::size_t t = 1; t < steps; ++t) s.posterior_log_var_clipped[t] = std::log(s.posterior_var[t]);
  s.posterior_log_var_clipped[0] = steps > 1 ? s.posterior_log_var_clipped[1] : std::log(s.beta[0]);
  return s;
}

NoiseSchedule build_scaled_schedule(std::size_t steps, double beta_start, double beta_end,
                                    std::size_t reference_steps) {
  if (steps < 1) throw ConfigError("schedule: T must be >= 1");
  const double k = static_cast<double>(reference_steps) / static_cast<double>(steps);
  return build_schedule(steps, beta_start * k, beta_end * k);
}

}  // namespace qsd::diffusion
