// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "qsd/diffusion/model.hpp"
#include "qsd/diffusion/schedule.hpp"
#include "qsd/numerics/rng.hpp"

namespace qsd::diffusion {

/// eps_null + scale * (eps_cond - eps_null), v from the conditioned pass.
/// The two passes share one batched forward; scale == 1 skips the null pass.
ModelOutput guided_eps(EpsModel& model, const num::Tensor& x_t, const std::vector<int>& t, const num::Tensor& y,
                       double scale);

struct SampleOptions {
  double guidance_scale = 1.0;
  /// Clamp the implied x0 to [-1, 1] before forming the mean.
  bool clip_x0 = true;
};

/// One ancestral step at timestep t (shared by the whole batch). No noise is
/// drawn at t = 0.
num::Tensor p_sample_step(EpsModel& model, const num::Tensor& x_t, int t, const num::Tensor& y,
                          const NoiseSchedule& sched, num::RngStream& stream, const SampleOptions& opt = {});

/// Full chain from x_T ~ N(0, I) drawn from `stream`. Image shape is
/// (N, image_channels, H, W) with N, H, W taken from y.
num::Tensor ddpm_sample(EpsModel& model, const num::Tensor& y, std::size_t image_channels, const NoiseSchedule& sched,
                        num::RngStream& stream, const SampleOptions& opt = {});

struct DdimOptions {
  std::size_t steps = 50;
  double eta = 0.0;
  double guidance_scale = 1.0;
  bool clip_x0 = true;
  /// 0 disables taps.
  std::size_t tap_stride = 0;
};

/// Model input captured during sampling.
struct Tap {
  num::Tensor x_t;
  int t = 0;
  /// Position on the subsampled trajectory, 0 = noisiest.
  std::size_t position = 0;
};

struct DdimResult {
  num::Tensor x0;
  std::vector<Tap> taps;
};

/// Uniformly spaced timesteps i * T / steps, ascending.
std::vector<int> ddim_timesteps(std::size_t T, std::size_t steps);

/// DDIM from a given x_T. Taps record the model input at trajectory positions
/// k with (k + 1) % tap_stride == 0, counting from the noisy end. With eta > 0
/// the step noise comes from `stream`.
DdimResult ddim_sample_from(EpsModel& model, const num::Tensor& x_T, const num::Tensor& y, const NoiseSchedule& sched,
                            const DdimOptions& opt, num::RngStream& stream);

/// DDIM with x_T drawn from `stream`.
DdimResult ddim_sample(EpsModel& model, const num::Tensor& y, std::size_t image_channels, const NoiseSchedule& sched,
                       const DdimOptions& opt, num::RngStream& stream);

}  // namespace qsd::diffusion
