// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "qsd/numerics/tensor.hpp"

namespace qsd::quant {

using num::Tensor;

enum class RoundMode { nearest, adaround };
enum class RangePolicy { minmax, mse_grid };

RangePolicy range_policy_from_string(std::string_view s);
std::string_view to_string(RangePolicy p);

/// Rectified-sigmoid stretch used by soft rounding: h = clip(sigmoid(a) (zeta - gamma) + gamma, 0, 1).
inline constexpr double kZeta = 1.1;
inline constexpr double kGamma = -0.1;

/// Symmetric signed uniform quantizer: w_hat = scale * clip(code, c_min, c_max).
struct QuantizerParams {
  int bits = 8;
  float scale = 1.0f;
  std::int32_t c_min = -128;
  std::int32_t c_max = 127;
  RoundMode mode = RoundMode::nearest;
  /// Per-element soft-rounding logits; present iff mode == adaround.
  std::vector<float> rounding_logits;
  /// adaround: the floor is taken at this scale (the scale in effect when
  /// rounding was learned); 0 means `scale`.
  float floor_scale = 0.0f;
  /// Set by fit_range when the weights were all zero (scale is then 1).
  bool degenerate = false;

  /// Throws ConfigError when bits < 2, scale <= 0, the range does not fit
  /// 2^bits codes, or the logits disagree with the mode.
  void validate(std::size_t numel) const;
};

/// Signed range for `bits`: [-2^(bits-1), 2^(bits-1) - 1].
QuantizerParams signed_range(int bits);

/// Integer codes. nearest: round half away from zero of w / s; adaround:
/// floor(w / floor_scale) + [logit >= 0]. Both are clipped to [c_min, c_max].
std::vector<std::int32_t> integer_codes(const Tensor& w, const QuantizerParams& q);
/// scale * code for each element.
Tensor dequantize(const std::vector<std::int32_t>& codes, const num::Shape& shape, float scale);
Tensor quantize_dequantize(const Tensor& w, const QuantizerParams& q);

/// Nearest-mode parameters with a fitted scale. All-zero w gives scale 1 and
/// `degenerate` set.
QuantizerParams fit_range(const Tensor& w, int bits, RangePolicy policy);
/// Candidate scale multipliers tried by mse_grid: (16 + i) / 80 for i in [0, 80).
std::vector<double> mse_grid_factors();
/// Squared reconstruction error sum |w - q(w)|^2.
double quantization_sse(const Tensor& w, const QuantizerParams& q);

/// Logits whose hardened rounding equals nearest rounding and whose soft
/// rounding equals the fractional part of w / scale.
std::vector<float> init_rounding_logits(const Tensor& w, const QuantizerParams& q);

/// Two's-complement codes packed little-endian at `bits` per code, padded to
/// a whole byte.
std::vector<std::uint8_t> pack_codes(const std::vector<std::int32_t>& codes, int bits);
std::vector<std::int32_t> unpack_codes(const std::vector<std::uint8_t>& bytes, std::size_t count, int bits);

}  // namespace qsd::quant
