// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "qsd/diffusion/model.hpp"
#include "qsd/diffusion/schedule.hpp"

namespace qsd::diffusion {

/// sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps, one t per sample.
template <class T>
num::BasicTensor<T> q_sample(const num::BasicTensor<T>& x0, const std::vector<int>& t, const num::BasicTensor<T>& eps,
                             const NoiseSchedule& sched);

/// Batch mean of the per-sample L2 norm of eps - eps_hat.
template <class T>
num::BasicTensor<T> noise_l2_loss(const num::BasicTensor<T>& eps, const num::BasicTensor<T>& eps_hat);

/// Runs the model on q_sample(x0, t, eps) and returns noise_l2_loss.
template <class T>
num::BasicTensor<T> diffusion_loss(BasicEpsModel<T>& model, const num::BasicTensor<T>& x0,
                                   const num::BasicTensor<T>& y, const std::vector<int>& t,
                                   const num::BasicTensor<T>& eps, const NoiseSchedule& sched);

/// KL(N(m1, e^lv1) || N(m2, e^lv2)) in nats.
double gaussian_kl(double mean1, double log_var1, double mean2, double log_var2);

/// -log of the probability mass N(mean, e^log_var) puts on the 2/255-wide bin
/// around x0 in [-1, 1]; the outermost bins extend to infinity.
double discretized_gaussian_nll(double x0, double mean, double log_var);

/// Model log-variance v log(beta_t) + (1 - v) log(clipped posterior variance).
template <class T>
num::BasicTensor<T> model_log_variance(const num::BasicTensor<T>& v, const std::vector<int>& t,
                                       const NoiseSchedule& sched);

/// Elementwise mean over batch of KL(p_model || q_posterior) for samples with
/// t >= 1 and the discretized decoder NLL for t = 0. The model mean is built
/// from a detached eps, so gradient reaches only `out.v`.
template <class T>
num::BasicTensor<T> kl_loss(const BasicModelOutput<T>& out, const num::BasicTensor<T>& x_t,
                            const num::BasicTensor<T>& x0, const std::vector<int>& t, const NoiseSchedule& sched);

/// l_d + lambda * l_kl.
template <class T>
num::BasicTensor<T> total_loss(const num::BasicTensor<T>& l_d, const num::BasicTensor<T>& l_kl, double lambda);

template <class T>
struct LossTerms {
  num::BasicTensor<T> total;
  num::BasicTensor<T> diffusion;
  num::BasicTensor<T> kl;
};

/// One model pass feeding both terms.
template <class T>
LossTerms<T> training_losses(BasicEpsModel<T>& model, const num::BasicTensor<T>& x0, const num::BasicTensor<T>& y,
                             const std::vector<int>& t, const num::BasicTensor<T>& eps, const NoiseSchedule& sched,
                             double lambda);

}  // namespace qsd::diffusion
