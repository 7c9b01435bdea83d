// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/numerics/random.hpp"

namespace qsd::num {

Tensor sample_normal(RngStream& stream, const Shape& shape) {
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = static_cast<float>(stream.normal());
  return Tensor(shape, std::move(v));
}

Tensor sample_uniform(RngStream& stream, const Shape& shape, double lo, double hi) {
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = static_cast<float>(stream.uniform(lo, hi));
  return Tensor(shape, std::move(v));
}

}  // namespace qsd::num
