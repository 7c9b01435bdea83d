// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/quant/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <span>

#include "qsd/error.hpp"
#include "qsd/numerics/ops.hpp"
#include "qsd/numerics/optim.hpp"

namespace qsd::quant {

SoftQuantizer make_soft(const Tensor& weight, const QuantizerParams& q, std::size_t index) {
  SoftQuantizer s;
  s.quantizer = index;
  s.weight = weight.detach();
  s.log_scale = Tensor({1}, static_cast<float>(std::log(static_cast<double>(q.scale))));
  QuantizerParams eff = q;
  eff.scale = num::exp(s.log_scale)[0];
  eff.mode = RoundMode::nearest;
  eff.rounding_logits.clear();
  s.floor_scale = eff.scale;
  std::vector<float> fl(weight.numel());
  for (std::size_t i = 0; i < fl.size(); ++i) fl[i] = std::floor(s.weight[i] / s.floor_scale);
  s.floor_codes = Tensor(weight.shape(), std::move(fl));
  s.logits = Tensor(weight.shape(), init_rounding_logits(s.weight, eff));
  s.log_scale.set_requires_grad(true);
  s.logits.set_requires_grad(true);
  return s;
}

SoftQuantizer make_soft(const QuantModel& qm, std::size_t index) {
  const auto& q = qm.quantizers().at(index);
  return make_soft(qm.fp_slice(q), q.params, index);
}

RoundingResult optimize_rounding(std::vector<SoftQuantizer>& soft, const std::vector<QuantizerParams*>& params,
                                 std::size_t samples, const ReconstructionFn& recon, const AdaRoundHyper& h,
                                 const std::string& name) {
  if (samples == 0) throw ConfigError("calibration of " + name + ": no calibration inputs");
  if (soft.size() != params.size()) throw Error("optimize_rounding: soft/params size mismatch");
  RoundingResult r;
  if (h.steps == 0 || soft.empty()) return r;
  std::vector<Tensor> logits, scales;
  for (auto& s : soft) logits.push_back(s.logits), scales.push_back(s.log_scale);
  num::Adam opt_logits(logits, {.lr = h.lr_logits});
  num::Adam opt_scales(scales, {.lr = h.lr_scale});
  std::vector<Tensor> all(logits);
  all.insert(all.end(), scales.begin(), scales.end());
  num::RngStream stream(h.seed, "adaround/" + name);
  const std::size_t batch = std::min(h.batch, samples);
  const std::size_t warm = static_cast<std::size_t>(std::ceil(h.warmup * static_cast<double>(h.steps)));
  for (std::size_t step = 0; step < h.steps; ++step) {
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) i = stream.uniform_int(samples);
    Tensor rec = recon(idx);
    Tensor loss = rec;
    if (step >= warm && h.lambda_round > 0.0) {
      const double rel = h.steps > warm ? static_cast<double>(step - warm) / static_cast<double>(h.steps - warm) : 1.0;
      const double b = h.b_start + (h.b_end - h.b_start) * rel;
      for (const auto& s : soft) {
        Tensor dist = num::abs(num::add_scalar(num::mul_scalar(soft_rounding(s.logits), 2.0), -1.0));
        Tensor term = num::add_scalar(num::mul_scalar(num::sum(num::pow(dist, b)), -1.0),
                                      static_cast<double>(s.logits.numel()));
        loss = num::add(loss, num::mul_scalar(term, h.lambda_round));
      }
    }
    const float lv = loss.item();
    if (!std::isfinite(lv))
      throw DivergenceError("calibration of block " + name + " diverged at step " + std::to_string(step) +
                            " (loss " + std::to_string(lv) + ")");
    num::backward(loss, std::span<Tensor>(all));
    opt_logits.step();
    opt_scales.step();
    r.final_reconstruction = rec.item();
  }
  r.steps = h.steps;
  for (std::size_t i = 0; i < soft.size(); ++i) {
    QuantizerParams& p = *params[i];
    p.scale = num::exp(soft[i].log_scale.detach())[0];
    p.mode = RoundMode::adaround;
    p.floor_scale = soft[i].floor_scale;
    p.rounding_logits = soft[i].logits.values();
    p.validate(soft[i].weight.numel());
  }
  return r;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n, std::size_t every) {
  std::vector<std::size_t> train, held;
  for (std::size_t i = 0; i < n; ++i) (every > 0 && i % every == every - 1 ? held : train).push_back(i);
  return {train, held};
}

namespace {

using net::ActivationState;

ActivationState gather_state(const ActivationState& s, const std::vector<std::size_t>& idx) {
  ActivationState out;
  for (const auto& [k, v] : s) out.emplace(k, num::gather_batch(v, idx));
  return out;
}

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = begin + i;
  return v;
}

std::size_t state_batch(const ActivationState& s) { return s.at("x").dim(0); }

// Runs one block over the whole state in chunks without recording a graph.
void run_block_chunked(const net::Denoiser& m, std::size_t block, ActivationState& s,
                       const net::WeightProvider* p, std::size_t chunk) {
  num::NoGradGuard ng;
  const auto& b = m.graph().blocks[block];
  std::vector<std::string> keys{b.output};
  if (!b.save_as.empty()) keys.push_back(b.save_as);
  const std::size_t n = state_batch(s);
  std::map<std::string, std::vector<Tensor>> parts;
  for (std::size_t i = 0; i < n; i += chunk) {
    auto sub = gather_state(s, range(i, std::min(n, i + chunk)));
    m.run_block(block, sub, p);
    for (const auto& k : keys) parts[k].push_back(sub.at(k));
  }
  for (auto& [k, v] : parts) s[k] = num::concat_batch(v);
}

double per_element_mse(const Tensor& a, const Tensor& b) {
  double e = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    e += d * d;
  }
  return e / static_cast<double>(a.numel());
}

Tensor eps_chunked(net::Denoiser& m, const ActivationState& s, const net::WeightProvider* p, std::size_t chunk) {
  ActivationState st = s;
  for (std::size_t b = 0; b < m.graph().blocks.size(); ++b) run_block_chunked(m, b, st, p, chunk);
  return m.output_from(st).eps;
}

}  // namespace

CalibrationReport calibrate_model(QuantModel& qm, const CalibInputs& in, const AdaRoundHyper& h) {
  if (in.size() == 0) throw ConfigError("calibrate_model: empty calibration set");
  if (h.chunk == 0 || h.batch == 0) throw ConfigError("calibrate_model: batch and chunk must be >= 1");
  net::Denoiser& m = qm.base();
  auto [train_idx, held_idx] = holdout_split(in.size(), h.holdout_every);
  if (train_idx.empty()) throw ConfigError("calibrate_model: every sample is held out");
  auto full = m.initial_state(in.x, in.t, in.y);
  ActivationState fp_train = gather_state(full, train_idx), q_train = fp_train;
  ActivationState fp_held, q_held;
  if (!held_idx.empty()) fp_held = gather_state(full, held_idx), q_held = fp_held;

  CalibrationReport rep;
  rep.train_samples = train_idx.size();
  rep.heldout_samples = held_idx.size();
  if (qm.config().quantize_activations) {
    auto first = range(0, std::min(train_idx.size(), h.chunk));
    auto sub = gather_state(fp_train, first);
    std::vector<int> ts;
    for (auto i : first) ts.push_back(in.t[train_idx[i]]);
    qm.fit_activation_ranges(sub.at("x"), ts, sub.at("y"));
  }
  Tensor eps_fp_held;
  if (!held_idx.empty()) {
    eps_fp_held = eps_chunked(m, fp_held, nullptr, h.chunk);
    rep.eps_mse_nearest = per_element_mse(eps_chunked(m, q_held, &qm, h.chunk), eps_fp_held);
  }

  for (std::size_t bi = 0; bi < m.graph().blocks.size(); ++bi) {
    const auto& blk = m.graph().blocks[bi];
    BlockReport br;
    br.block = blk.name;
    ActivationState fp_train_next = fp_train, fp_held_next = fp_held;
    run_block_chunked(m, bi, fp_train_next, nullptr, h.chunk);
    if (!held_idx.empty()) {
      run_block_chunked(m, bi, fp_held_next, nullptr, h.chunk);
      ActivationState probe = q_held;
      run_block_chunked(m, bi, probe, &qm, h.chunk);
      br.heldout_mse_nearest = per_element_mse(probe.at(blk.output), fp_held_next.at(blk.output));
    }

    std::vector<SoftQuantizer> soft;
    std::vector<QuantizerParams*> params;
    for (auto li : blk.layers)
      for (auto qi : qm.layer_quantizers(li)) {
        soft.push_back(make_soft(qm, qi));
        params.push_back(&qm.quantizers()[qi].params);
      }
    br.quantizers = soft.size();
    const Tensor target = fp_train_next.at(blk.output);
    ReconstructionFn recon = [&](const std::vector<std::size_t>& idx) {
      auto sub = gather_state(q_train, idx);
      m.run_block(bi, sub, &qm);
      Tensor diff = num::sub(sub.at(blk.output), num::gather_batch(target, idx));
      return num::mul_scalar(num::sum(num::square(diff)), 1.0 / static_cast<double>(idx.size()));
    };
    qm.begin_soft(&soft);
    try {
      br.final_reconstruction = optimize_rounding(soft, params, train_idx.size(), recon, h, blk.name)
                                    .final_reconstruction;
    } catch (...) {
      qm.end_soft();
      throw;
    }
    qm.end_soft();
    for (auto li : blk.layers) qm.refresh_layer(li);

    run_block_chunked(m, bi, q_train, &qm, h.chunk);
    if (!held_idx.empty()) {
      run_block_chunked(m, bi, q_held, &qm, h.chunk);
      br.heldout_mse_calibrated = per_element_mse(q_held.at(blk.output), fp_held_next.at(blk.output));
    }
    fp_train = std::move(fp_train_next);
    fp_held = std::move(fp_held_next);
    rep.blocks.push_back(br);
  }
  if (!held_idx.empty()) rep.eps_mse_calibrated = per_element_mse(m.output_from(q_held).eps, eps_fp_held);
  return rep;
}

}  // namespace qsd::quant
