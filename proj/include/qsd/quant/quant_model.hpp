// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "qsd/net/denoiser.hpp"
#include "qsd/quant/quantizer.hpp"

namespace qsd::quant {

/// bits >= 32 turns quantization off (pass-through).
struct QuantConfig {
  int bits = 8;
  bool split = true;
  RangePolicy policy = RangePolicy::mse_grid;
  /// Fake-quantize the input of every conv/linear layer (per-tensor minmax).
  bool quantize_activations = false;
  int activation_bits = 8;

  bool passthrough() const { return bits >= 32; }
};

/// Quantizer for a weight tensor, or for the channel slice [begin, end) of
/// dimension 1 when the layer consumes a concatenation.
struct WeightQuantizer {
  std::string key;
  std::size_t layer = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  bool is_slice = false;
  QuantizerParams params;
};

/// Live soft-rounding state of one quantizer while its block is calibrated.
struct SoftQuantizer {
  std::size_t quantizer = 0;
  Tensor weight;       // full-precision slice, constant
  float floor_scale = 1.0f;
  Tensor floor_codes;  // floor(weight / floor_scale), constant
  Tensor log_scale;    // (1), trainable
  Tensor logits;       // shape of `weight`, trainable
};

/// Fake-quantized view of a denoiser. Shadow full-precision weights stay in
/// the base model; forward uses w_hat for every conv/linear weight.
class QuantModel : public diffusion::EpsModel, public net::WeightProvider {
 public:
  /// Fits a nearest-rounding range for every quantizer.
  QuantModel(net::Denoiser& base, const QuantConfig& cfg);

  const QuantConfig& config() const { return cfg_; }
  net::Denoiser& base() { return *base_; }
  const net::Denoiser& base() const { return *base_; }

  std::vector<WeightQuantizer>& quantizers() { return quantizers_; }
  const std::vector<WeightQuantizer>& quantizers() const { return quantizers_; }
  std::size_t quantizer_count() const { return quantizers_.size(); }
  /// Quantizer indices of a layer, in channel order.
  std::vector<std::size_t> layer_quantizers(std::size_t layer) const;
  const WeightQuantizer& find(const std::string& key) const;

  /// Full-precision weight slice of a quantizer.
  Tensor fp_slice(const WeightQuantizer& q) const;
  /// Recomputes cached w_hat of every layer (after editing params).
  void refresh();
  void refresh_layer(std::size_t layer);

  /// Routes the given quantizers through differentiable soft rounding until
  /// end_soft() is called.
  void begin_soft(std::vector<SoftQuantizer>* soft);
  void end_soft();

  Tensor weight(const net::LayerInfo& layer, const Tensor& stored) const override;
  Tensor activation(const net::LayerInfo& layer, const Tensor& x) const override;

  diffusion::ModelOutput forward(const Tensor& x, const std::vector<int>& t, const Tensor& y) override;

  /// Records max |input| per conv/linear layer over a full-precision pass.
  void fit_activation_ranges(const Tensor& x, const std::vector<int>& t, const Tensor& y);
  const std::map<std::size_t, float>& activation_scales() const { return act_scales_; }
  void set_activation_scale(std::size_t layer, float scale) { act_scales_[layer] = scale; }

 private:
  Tensor soft_weight(const SoftQuantizer& s) const;

  net::Denoiser* base_;
  QuantConfig cfg_;
  std::vector<WeightQuantizer> quantizers_;
  std::map<std::size_t, Tensor> cache_;
  std::vector<SoftQuantizer>* soft_ = nullptr;
  std::map<std::size_t, float> act_scales_;
};

/// Differentiable soft-rounded weight: s * clip(floor_codes + h(logits), c_min, c_max)
/// with s = exp(log_scale).
Tensor soft_quantize(const Tensor& floor_codes, const Tensor& log_scale, const Tensor& logits, std::int32_t c_min,
                     std::int32_t c_max);
/// h(logits) = clip(sigmoid(logits) (zeta - gamma) + gamma, 0, 1).
Tensor soft_rounding(const Tensor& logits);

}  // namespace qsd::quant
