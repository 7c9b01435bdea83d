// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/quant/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "qsd/error.hpp"

namespace qsd::quant {

RangePolicy range_policy_from_string(std::string_view s) {
  if (s == "minmax") return RangePolicy::minmax;
  if (s == "mse_grid") return RangePolicy::mse_grid;
  throw ConfigError("unknown range policy '" + std::string(s) + "' (expected minmax or mse_grid)");
}

std::string_view to_string(RangePolicy p) { return p == RangePolicy::minmax ? "minmax" : "mse_grid"; }

void QuantizerParams::validate(std::size_t numel) const {
  if (bits < 2 || bits > 16) throw ConfigError("quantizer: bits must be in [2, 16], got " + std::to_string(bits));
  if (!(scale > 0.0f) || !std::isfinite(scale)) throw ConfigError("quantizer: scale must be > 0, got " + std::to_string(scale));
  if (c_min > c_max || static_cast<std::int64_t>(c_max) - c_min + 1 > (std::int64_t{1} << bits))
    throw ConfigError("quantizer: range [" + std::to_string(c_min) + ", " + std::to_string(c_max) + "] exceeds " +
                      std::to_string(bits) + " bits");
  if (!(floor_scale >= 0.0f)) throw ConfigError("quantizer: floor_scale must be >= 0");
  const bool has = !rounding_logits.empty();
  if (has != (mode == RoundMode::adaround) || (has && rounding_logits.size() != numel))
    throw ConfigError("quantizer: rounding logits must be present exactly in adaround mode and match the weight size");
}

QuantizerParams signed_range(int bits) {
  QuantizerParams q;
  q.bits = bits;
  q.c_min = -(1 << (bits - 1));
  q.c_max = (1 << (bits - 1)) - 1;
  return q;
}

std::vector<std::int32_t> integer_codes(const Tensor& w, const QuantizerParams& q) {
  q.validate(w.numel());
  std::vector<std::int32_t> c(w.numel());
  const float s = q.mode == RoundMode::adaround && q.floor_scale > 0.0f ? q.floor_scale : q.scale;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const float r = w[i] / s;
    float code = q.mode == RoundMode::nearest ? std::round(r)
                                              : std::floor(r) + (q.rounding_logits[i] >= 0.0f ? 1.0f : 0.0f);
    code = std::clamp(code, static_cast<float>(q.c_min), static_cast<float>(q.c_max));
    c[i] = static_cast<std::int32_t>(code);
  }
  return c;
}

Tensor dequantize(const std::vector<std::int32_t>& codes, const num::Shape& shape, float scale) {
  std::vector<float> v(codes.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = scale * static_cast<float>(codes[i]);
  return Tensor(shape, std::move(v));
}

Tensor quantize_dequantize(const Tensor& w, const QuantizerParams& q) {
  return dequantize(integer_codes(w, q), w.shape(), q.scale);
}

double quantization_sse(const Tensor& w, const QuantizerParams& q) {
  auto wq = quantize_dequantize(w, q);
  double e = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double d = static_cast<double>(w[i]) - wq[i];
    e += d * d;
  }
  return e;
}

std::vector<double> mse_grid_factors() {
  std::vector<double> f(80);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<double>(16 + i) / 80.0;
  return f;
}

QuantizerParams fit_range(const Tensor& w, int bits, RangePolicy policy) {
  if (!w.defined() || w.numel() == 0) throw ConfigError("fit_range: empty weight tensor");
  QuantizerParams q = signed_range(bits);
  float amax = 0.0f;
  for (float v : w.data()) amax = std::max(amax, std::abs(v));
  if (amax == 0.0f) {
    q.scale = 1.0f;
    q.degenerate = true;
    return q;
  }
  const double base = static_cast<double>(amax) / q.c_max;
  q.scale = static_cast<float>(base);
  if (policy == RangePolicy::minmax) return q;
  double best = std::numeric_limits<double>::infinity();
  float best_scale = q.scale;
  for (double f : mse_grid_factors()) {
    QuantizerParams c = q;
    c.scale = static_cast<float>(base * f);
    const double e = quantization_sse(w, c);
    if (e < best) best = e, best_scale = c.scale;
  }
  q.scale = best_scale;
  return q;
}

std::vector<float> init_rounding_logits(const Tensor& w, const QuantizerParams& q) {
  std::vector<float> a(w.numel());
  const float s = q.scale;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float r = w[i] / s;
    const double frac = static_cast<double>(r) - std::floor(r);
    const double p = std::clamp((frac - kGamma) / (kZeta - kGamma), 1e-6, 1.0 - 1e-6);
    float logit = static_cast<float>(std::log(p / (1.0 - p)));
    const bool up = std::round(r) > std::floor(r);
    if (up && logit < 0.0f) logit = 0.0f;
    if (!up && logit >= 0.0f) logit = -1e-6f;
    a[i] = logit;
  }
  return a;
}

std::vector<std::uint8_t> pack_codes(const std::vector<std::int32_t>& codes, int bits) {
  std::vector<std::uint8_t> out((codes.size() * static_cast<std::size_t>(bits) + 7) / 8, 0);
  const std::uint32_t mask = bits >= 32 ? 0xffffffffu : ((1u << bits) - 1u);
  std::size_t bit = 0;
  for (auto c : codes) {
    const std::uint32_t u = static_cast<std::uint32_t>(c) & mask;
    for (int b = 0; b < bits; ++b, ++bit)
      if (u >> b & 1u) out[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
  }
  return out;
}

std::vector<std::int32_t> unpack_codes(const std::vector<std::uint8_t>& bytes, std::size_t count, int bits) {
  if (bytes.size() * 8 < count * static_cast<std::size_t>(bits)) throw IoError("unpack_codes: payload too short");
  std::vector<std::int32_t> out(count);
  std::size_t bit = 0;
  for (auto& c : out) {
    std::uint32_t u = 0;
    for (int b = 0; b < bits; ++b, ++bit)
      if (bytes[bit / 8] >> (bit % 8) & 1u) u |= 1u << b;
    if (bits < 32 && (u >> (bits - 1) & 1u)) u |= ~((1u << bits) - 1u);
    c = static_cast<std::int32_t>(u);
  }
  return out;
}

}  // namespace qsd::quant
