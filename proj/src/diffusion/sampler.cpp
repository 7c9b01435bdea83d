// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/diffusion/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "qsd/diffusion/losses.hpp"
#include "qsd/error.hpp"
#include "qsd/numerics/ops.hpp"
#include "qsd/numerics/random.hpp"

namespace qsd::diffusion {

using num::Tensor;

ModelOutput guided_eps(EpsModel& model, const Tensor& x_t, const std::vector<int>& t, const Tensor& y, double scale) {
  num::NoGradGuard ng;
  if (scale == 1.0) return model.forward(x_t, t, y);
  const std::size_t n = x_t.dim(0);
  std::vector<int> tt(t);
  tt.insert(tt.end(), t.begin(), t.end());
  auto both = model.forward(num::concat_batch<float>({x_t, x_t}), tt,
                            num::concat_batch<float>({y, Tensor(y.shape(), 0.0f)}));
  const std::size_t per = x_t.numel() / n, half = n * per;
  std::vector<float> eps(half), v(half);
  for (std::size_t i = 0; i < half; ++i) {
    const float c = both.eps[i], u = both.eps[half + i];
    eps[i] = u + static_cast<float>(scale) * (c - u);
    v[i] = both.v[i];
  }
  return ModelOutput{Tensor(x_t.shape(), std::move(eps)), Tensor(x_t.shape(), std::move(v))};
}

namespace {

float clip_unit(double x, bool on) { return static_cast<float>(on ? std::clamp(x, -1.0, 1.0) : x); }

}  // namespace

Tensor p_sample_step(EpsModel& model, const Tensor& x_t, int t, const Tensor& y, const NoiseSchedule& sched,
                     num::RngStream& stream, const SampleOptions& opt) {
  sched.check_step(t, "p_sample_step");
  num::NoGradGuard ng;
  const std::vector<int> ts(x_t.dim(0), t);
  auto out = guided_eps(model, x_t, ts, y, opt.guidance_scale);
  const double ab = sched.alpha_bar[t];
  const double c0 = sched.coef_x0[t], ct = sched.coef_xt[t];
  const double lb = std::log(sched.beta[t]), lq = sched.posterior_log_var_clipped[t];
  Tensor z;
  if (t > 0) z = num::sample_normal(stream, x_t.shape());
  std::vector<float> next(x_t.numel());
  for (std::size_t i = 0; i < next.size(); ++i) {
    const double xt = x_t[i];
    const double x0 = clip_unit((xt - std::sqrt(1.0 - ab) * out.eps[i]) / std::sqrt(ab), opt.clip_x0);
    const double mean = c0 * x0 + ct * xt;
    double x = mean;
    if (t > 0) {
      const double v = out.v[i];
      x += std::exp(0.5 * (v * lb + (1.0 - v) * lq)) * z[i];
    }
    next[i] = static_cast<float>(x);
  }
  return Tensor(x_t.shape(), std::move(next));
}

Tensor ddpm_sample(EpsModel& model, const Tensor& y, std::size_t image_channels, const NoiseSchedule& sched,
                   num::RngStream& stream, const SampleOptions& opt) {
  if (y.rank() != 4) throw ShapeError("ddpm_sample: condition must be (N,C,H,W), got " + num::shape_str(y.shape()));
  Tensor x = num::sample_normal(stream, {y.dim(0), image_channels, y.dim(2), y.dim(3)});
  for (long t = static_cast<long>(sched.size()) - 1; t >= 0; --t)
    x = p_sample_step(model, x, static_cast<int>(t), y, sched, stream, opt);
  return x;
}

std::vector<int> ddim_timesteps(std::size_t T, std::size_t steps) {
  if (steps < 1 || steps > T)
    throw ConfigError("ddim: steps " + std::to_string(steps) + " must be in [1, T = " + std::to_string(T) + "]");
  std::vector<int> ts(steps);
  for (std::size_t i = 0; i < steps; ++i) ts[i] = static_cast<int>(i * T / steps);
  return ts;
}

DdimResult ddim_sample_from(EpsModel& model, const Tensor& x_T, const Tensor& y, const NoiseSchedule& sched,
                            const DdimOptions& opt, num::RngStream& stream) {
  const auto ts = ddim_timesteps(sched.size(), opt.steps);
  if (opt.eta < 0.0 || opt.eta > 1.0) throw ConfigError("ddim: eta must be in [0, 1]");
  if (opt.tap_stride > opt.steps)
    throw ConfigError("ddim: tap stride " + std::to_string(opt.tap_stride) + " exceeds steps " +
                      std::to_string(opt.steps));
  num::NoGradGuard ng;
  DdimResult r;
  Tensor x = x_T;
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const std::size_t i = ts.size() - 1 - k;
    const int t = ts[i];
    const long t_prev = i == 0 ? -1 : ts[i - 1];
    if (opt.tap_stride > 0 && (k + 1) % opt.tap_stride == 0) r.taps.push_back(Tap{x, t, k});
    auto out = guided_eps(model, x, std::vector<int>(x.dim(0), t), y, opt.guidance_scale);
    const double ab = sched.alpha_bar[t], ab_prev = sched.alpha_bar_at(t_prev);
    const double sigma = opt.eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    Tensor z;
    if (sigma > 0.0) z = num::sample_normal(stream, x.shape());
    std::vector<float> next(x.numel());
    for (std::size_t j = 0; j < next.size(); ++j) {
      const double xt = x[j], e = out.eps[j];
      const double x0 = clip_unit((xt - std::sqrt(1.0 - ab) * e) / std::sqrt(ab), opt.clip_x0);
      // eps is recomputed from the clipped x0.
      const double e_used = opt.clip_x0 ? (xt - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab) : e;
      double v = std::sqrt(ab_prev) * x0 + dir * e_used;
      if (sigma > 0.0) v += sigma * z[j];
      next[j] = static_cast<float>(v);
    }
    x = Tensor(x.shape(), std::move(next));
  }
  r.x0 = x;
  return r;
}

DdimResult ddim_sample(EpsModel& model, const Tensor& y, std::size_t image_channels, const NoiseSchedule& sched,
                       const DdimOptions& opt, num::RngStream& stream) {
  if (y.rank() != 4) throw ShapeError("ddim_sample: condition must be (N,C,H,W), got " + num::shape_str(y.shape()));
  Tensor x_T = num::sample_normal(stream, {y.dim(0), image_channels, y.dim(2), y.dim(3)});
  return ddim_sample_from(model, x_T, y, sched, opt, stream);
}

}  // namespace qsd::diffusion
