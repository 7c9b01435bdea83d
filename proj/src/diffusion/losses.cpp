// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/diffusion/losses.hpp"

#include <cmath>
#include <numbers>

#include "qsd/error.hpp"
#include "qsd/numerics/ops.hpp"

namespace qsd::diffusion {

using num::BasicTensor;

namespace {

template <class T>
BasicTensor<T> per_sample(const std::vector<int>& t, const NoiseSchedule& sched, double (*f)(const NoiseSchedule&, int),
                          const char* what) {
  std::vector<T> v(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    sched.check_step(t[i], what);
    v[i] = static_cast<T>(f(sched, t[i]));
  }
  return BasicTensor<T>({t.size()}, std::move(v));
}

template <class T>
void check_batch(const BasicTensor<T>& x, const std::vector<int>& t, const char* what) {
  if (x.rank() < 1 || x.dim(0) != t.size())
    throw ShapeError(std::string(what) + ": batch " + num::shape_str(x.shape()) + " vs " + std::to_string(t.size()) +
                     " timesteps");
}

double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }
double std_normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

constexpr double kBinHalfWidth = 1.0 / 255.0;
constexpr double kEdge = 0.999;
constexpr double kMinProb = 1e-12;

// -log P and d(-log P)/d(log_var) for the discretized decoder.
std::pair<double, double> decoder_nll_and_grad(double x0, double mean, double log_var) {
  const double sigma = std::exp(0.5 * log_var);
  const bool low_edge = x0 < -kEdge, high_edge = x0 > kEdge;
  const double u = (x0 + kBinHalfWidth - mean) / sigma;
  const double w = (x0 - kBinHalfWidth - mean) / sigma;
  double p;
  if (low_edge) p = std_normal_cdf(u);
  else if (high_edge) p = std_normal_cdf(-w);
  else if (w > 0.0) p = std_normal_cdf(-w) - std_normal_cdf(-u);
  else p = std_normal_cdf(u) - std_normal_cdf(w);
  if (!(p > kMinProb)) return {-std::log(kMinProb), 0.0};
  const double upper = high_edge ? 0.0 : std_normal_pdf(u) * u;
  const double lower = low_edge ? 0.0 : std_normal_pdf(w) * w;
  return {-std::log(p), (upper - lower) / (2.0 * p)};
}

}  // namespace

double gaussian_kl(double mean1, double log_var1, double mean2, double log_var2) {
  const double d = mean1 - mean2;
  return 0.5 * (log_var2 - log_var1 + std::exp(log_var1 - log_var2) + d * d * std::exp(-log_var2) - 1.0);
}

double discretized_gaussian_nll(double x0, double mean, double log_var) {
  return decoder_nll_and_grad(x0, mean, log_var).first;
}

template <class T>
BasicTensor<T> q_sample(const BasicTensor<T>& x0, const std::vector<int>& t, const BasicTensor<T>& eps,
                        const NoiseSchedule& sched) {
  check_batch(x0, t, "q_sample");
  if (x0.shape() != eps.shape())
    throw ShapeError("q_sample: x0 " + num::shape_str(x0.shape()) + " vs eps " + num::shape_str(eps.shape()));
  auto a = per_sample<T>(t, sched, [](const NoiseSchedule& s, int i) { return std::sqrt(s.alpha_bar[i]); }, "q_sample");
  auto b = per_sample<T>(t, sched, [](const NoiseSchedule& s, int i) { return std::sqrt(1.0 - s.alpha_bar[i]); },
                         "q_sample");
  return num::add(num::mul(x0, a), num::mul(eps, b));
}

template <class T>
BasicTensor<T> noise_l2_loss(const BasicTensor<T>& eps, const BasicTensor<T>& eps_hat) {
  return num::mean(num::sqrt(num::sum_per_sample(num::square(num::sub(eps, eps_hat)))));
}

template <class T>
BasicTensor<T> diffusion_loss(BasicEpsModel<T>& model, const BasicTensor<T>& x0, const BasicTensor<T>& y,
                              const std::vector<int>& t, const BasicTensor<T>& eps, const NoiseSchedule& sched) {
  auto x_t = q_sample(x0, t, eps, sched);
  return noise_l2_loss(eps, model.forward(x_t, t, y).eps);
}

template <class T>
BasicTensor<T> model_log_variance(const BasicTensor<T>& v, const std::vector<int>& t, const NoiseSchedule& sched) {
  check_batch(v, t, "model_log_variance");
  auto base = per_sample<T>(
      t, sched, [](const NoiseSchedule& s, int i) { return s.posterior_log_var_clipped[i]; }, "model_log_variance");
  auto span = per_sample<T>(
      t, sched, [](const NoiseSchedule& s, int i) { return std::log(s.beta[i]) - s.posterior_log_var_clipped[i]; },
      "model_log_variance");
  return num::add(num::mul(v, span), base);
}

template <class T>
BasicTensor<T> kl_loss(const BasicModelOutput<T>& out, const BasicTensor<T>& x_t, const BasicTensor<T>& x0,
                       const std::vector<int>& t, const NoiseSchedule& sched) {
  check_batch(x_t, t, "kl_loss");
  if (out.eps.shape() != x_t.shape() || out.v.shape() != x_t.shape() || x0.shape() != x_t.shape())
    throw ShapeError("kl_loss: eps " + num::shape_str(out.eps.shape()) + ", v " + num::shape_str(out.v.shape()) +
                     ", x_t " + num::shape_str(x_t.shape()) + ", x0 " + num::shape_str(x0.shape()));
  auto log_var = model_log_variance(out.v, t, sched);
  const std::size_t n = x_t.dim(0), per = x_t.numel() / n;
  std::vector<T> value(x_t.numel());
  auto dvalue = std::make_shared<std::vector<T>>(x_t.numel());
  for (std::size_t s = 0; s < n; ++s) {
    const int ts = t[s];
    const double ab = sched.alpha_bar[ts];
    const double c0 = sched.coef_x0[ts], ct = sched.coef_xt[ts];
    for (std::size_t j = 0; j < per; ++j) {
      const std::size_t i = s * per + j;
      const double xt = x_t[i], x0v = x0[i], lv = log_var[i];
      const double x0_pred = (xt - std::sqrt(1.0 - ab) * static_cast<double>(out.eps[i])) / std::sqrt(ab);
      const double mean_p = c0 * x0_pred + ct * xt;
      if (ts == 0) {
        auto [nll, g] = decoder_nll_and_grad(x0v, mean_p, lv);
        value[i] = static_cast<T>(nll);
        (*dvalue)[i] = static_cast<T>(g);
      } else {
        const double mean_q = c0 * x0v + ct * xt;
        const double lv_q = sched.posterior_log_var_clipped[ts];
        value[i] = static_cast<T>(gaussian_kl(mean_p, lv, mean_q, lv_q));
        (*dvalue)[i] = static_cast<T>(0.5 * (std::exp(lv - lv_q) - 1.0));
      }
    }
  }
  auto terms = BasicTensor<T>::make_op(x_t.shape(), std::move(value), "variance_terms", {log_var},
                                       [dvalue](num::detail::Node<T>& o) {
                                         auto& p = *o.parents[0];
                                         p.ensure_grad();
                                         for (std::size_t i = 0; i < o.grad.size(); ++i)
                                           p.grad[i] += o.grad[i] * (*dvalue)[i];
                                       });
  return num::mean(terms);
}

template <class T>
BasicTensor<T> total_loss(const BasicTensor<T>& l_d, const BasicTensor<T>& l_kl, double lambda) {
  return num::add(l_d, num::mul_scalar(l_kl, lambda));
}

template <class T>
LossTerms<T> training_losses(BasicEpsModel<T>& model, const BasicTensor<T>& x0, const BasicTensor<T>& y,
                             const std::vector<int>& t, const BasicTensor<T>& eps, const NoiseSchedule& sched,
                             double lambda) {
  auto x_t = q_sample(x0.detach(), t, eps.detach(), sched);
  auto out = model.forward(x_t, t, y);
  LossTerms<T> r;
  r.diffusion = noise_l2_loss(eps, out.eps);
  r.kl = kl_loss(out, x_t, x0, t, sched);
  r.total = total_loss(r.diffusion, r.kl, lambda);
  return r;
}

#define QSD_INSTANTIATE(T)                                                                                           \
  template BasicTensor<T> q_sample(const BasicTensor<T>&, const std::vector<int>&, const BasicTensor<T>&,          \
                                   const NoiseSchedule&);                                                          \
  template BasicTensor<T> noise_l2_loss(const BasicTensor<T>&, const BasicTensor<T>&);                              \
  template BasicTensor<T> diffusion_loss(BasicEpsModel<T>&, const BasicTensor<T>&, const BasicTensor<T>&,          \
                                         const std::vector<int>&, const BasicTensor<T>&, const NoiseSchedule&);    \
  template BasicTensor<T> model_log_variance(const BasicTensor<T>&, const std::vector<int>&, const NoiseSchedule&); \
  template BasicTensor<T> kl_loss(const BasicModelOutput<T>&, const BasicTensor<T>&, const BasicTensor<T>&,        \
                                  const std::vector<int>&, const NoiseSchedule&);                                  \
  template BasicTensor<T> total_loss(const BasicTensor<T>&, const BasicTensor<T>&, double);                         \
  template LossTerms<T> training_losses(BasicEpsModel<T>&, const BasicTensor<T>&, const BasicTensor<T>&,           \
                                        const std::vector<int>&, const BasicTensor<T>&, const NoiseSchedule&, double);

QSD_INSTANTIATE(float)
QSD_INSTANTIATE(double)
#undef QSD_INSTANTIATE

}  // namespace qsd::diffusion
