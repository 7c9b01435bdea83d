// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/quant/quant_model.hpp"

#include <algorithm>
#include <cmath>

#include "qsd/error.hpp"
#include "qsd/numerics/ops.hpp"

namespace qsd::quant {

using net::LayerKind;

QuantModel::QuantModel(net::Denoiser& base, const QuantConfig& cfg) : base_(&base), cfg_(cfg) {
  if (cfg.passthrough()) return;
  signed_range(cfg.bits).validate(1);
  const auto& layers = base.graph().layers;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& L = layers[li];
    if (L.kind == LayerKind::group_norm) continue;
    const Tensor& w = base.params().get(L.weight_name());
    if (cfg.split && L.concat_split > 0) {
      const std::size_t bounds[3] = {0, L.concat_split, L.in_channels};
      for (int b = 0; b < 2; ++b) {
        WeightQuantizer q;
        q.layer = li;
        q.begin = bounds[b];
        q.end = bounds[b + 1];
        q.is_slice = true;
        q.key = L.weight_name() + "[" + std::to_string(q.begin) + ":" + std::to_string(q.end) + "]";
        quantizers_.push_back(q);
      }
    } else {
      WeightQuantizer q;
      q.layer = li;
      q.end = w.dim(1);
      q.key = L.weight_name();
      quantizers_.push_back(q);
    }
  }
  for (auto& q : quantizers_) q.params = fit_range(fp_slice(q), cfg.bits, cfg.policy);
  refresh();
}

std::vector<std::size_t> QuantModel::layer_quantizers(std::size_t layer) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < quantizers_.size(); ++i)
    if (quantizers_[i].layer == layer) out.push_back(i);
  return out;
}

const WeightQuantizer& QuantModel::find(const std::string& key) const {
  for (const auto& q : quantizers_)
    if (q.key == key) return q;
  throw Error("quant model: no quantizer '" + key + "'");
}

Tensor QuantModel::fp_slice(const WeightQuantizer& q) const {
  const Tensor w = base_->params().get(base_->graph().layers[q.layer].weight_name()).detach();
  return q.is_slice ? num::slice_channels(w, q.begin, q.end) : w;
}

void QuantModel::refresh_layer(std::size_t layer) {
  const auto ids = layer_quantizers(layer);
  if (ids.empty()) return;
  num::NoGradGuard ng;
  Tensor w;
  for (auto i : ids) {
    Tensor part = quantize_dequantize(fp_slice(quantizers_[i]), quantizers_[i].params);
    w = w.defined() ? num::concat_channels(w, part) : part;
  }
  cache_[layer] = w;
}

void QuantModel::refresh() {
  for (std::size_t li = 0; li < base_->graph().layers.size(); ++li) refresh_layer(li);
}

void QuantModel::begin_soft(std::vector<SoftQuantizer>* soft) { soft_ = soft; }
void QuantModel::end_soft() { soft_ = nullptr; }

Tensor soft_rounding(const Tensor& logits) {
  return num::clip(num::add_scalar(num::mul_scalar(num::sigmoid(logits), kZeta - kGamma), kGamma), 0.0, 1.0);
}

Tensor soft_quantize(const Tensor& floor_codes, const Tensor& log_scale, const Tensor& logits, std::int32_t c_min,
                     std::int32_t c_max) {
  const Tensor code = num::clip(num::add(floor_codes, soft_rounding(logits)), c_min, c_max);
  return num::mul(code, num::exp(log_scale));
}

Tensor QuantModel::soft_weight(const SoftQuantizer& s) const {
  const auto& p = quantizers_[s.quantizer].params;
  return soft_quantize(s.floor_codes, s.log_scale, s.logits, p.c_min, p.c_max);
}

Tensor QuantModel::weight(const net::LayerInfo& layer, const Tensor& stored) const {
  if (cfg_.passthrough() || layer.kind == LayerKind::group_norm) return stored;
  const std::size_t li = layer.index;
  if (soft_) {
    const auto ids = layer_quantizers(li);
    const bool touched = std::any_of(soft_->begin(), soft_->end(), [&](const SoftQuantizer& s) {
      return std::find(ids.begin(), ids.end(), s.quantizer) != ids.end();
    });
    if (touched) {
      Tensor w;
      for (auto qi : ids) {
        Tensor part;
        for (const auto& s : *soft_)
          if (s.quantizer == qi) part = soft_weight(s);
        if (!part.defined()) part = quantize_dequantize(fp_slice(quantizers_[qi]), quantizers_[qi].params);
        w = w.defined() ? num::concat_channels(w, part) : part;
      }
      return w;
    }
  }
  auto it = cache_.find(li);
  return it == cache_.end() ? stored : it->second;
}

Tensor QuantModel::activation(const net::LayerInfo& layer, const Tensor& x) const {
  if (!cfg_.quantize_activations || cfg_.passthrough()) return x;
  const std::size_t li = layer.index;
  auto it = act_scales_.find(li);
  if (it == act_scales_.end()) return x;
  const auto r = signed_range(cfg_.activation_bits);
  const double s = it->second;
  return num::mul_scalar(num::clip(num::round_ste(num::mul_scalar(x, 1.0 / s)), r.c_min, r.c_max), s);
}

namespace {

struct ProviderScope {
  net::Denoiser& m;
  const net::WeightProvider* prev;
  ProviderScope(net::Denoiser& model, const net::WeightProvider* p) : m(model), prev(model.weight_provider()) {
    m.set_weight_provider(p);
  }
  ~ProviderScope() { m.set_weight_provider(prev); }
};

class RangeRecorder : public net::WeightProvider {
 public:
  explicit RangeRecorder(std::map<std::size_t, float>& out) : out_(out) {}
  Tensor activation(const net::LayerInfo& layer, const Tensor& x) const override {
    const std::size_t li = layer.index;
    float m = 0.0f;
    for (float v : x.data()) m = std::max(m, std::abs(v));
    auto& slot = out_[li];
    slot = std::max(slot, m);
    return x;
  }

 private:
  std::map<std::size_t, float>& out_;
};

}  // namespace

diffusion::ModelOutput QuantModel::forward(const Tensor& x, const std::vector<int>& t, const Tensor& y) {
  ProviderScope scope(*base_, this);
  return base_->forward(x, t, y);
}

void QuantModel::fit_activation_ranges(const Tensor& x, const std::vector<int>& t, const Tensor& y) {
  std::map<std::size_t, float> amax;
  RangeRecorder rec(amax);
  {
    num::NoGradGuard ng;
    ProviderScope scope(*base_, &rec);
    base_->forward(x, t, y);
  }
  const auto r = signed_range(cfg_.activation_bits);
  for (auto [li, m] : amax) act_scales_[li] = m > 0.0f ? m / static_cast<float>(r.c_max) : 1.0f;
}

}  // namespace qsd::quant
