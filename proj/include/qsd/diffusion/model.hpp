// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "qsd/numerics/tensor.hpp"

namespace qsd::diffusion {

/// eps: predicted noise, shape of x_t. v: variance interpolation weight in
/// [0, 1], same shape.
template <class T>
struct BasicModelOutput {
  num::BasicTensor<T> eps;
  num::BasicTensor<T> v;
};

/// A conditional noise predictor. `t` holds one timestep per sample and `y`
/// the conditioning maps (N, C, H, W). An all-zeros `y` is the null condition.
template <class T>
class BasicEpsModel {
 public:
  virtual ~BasicEpsModel() = default;
  virtual BasicModelOutput<T> forward(const num::BasicTensor<T>& x, const std::vector<int>& t,
                                      const num::BasicTensor<T>& y) = 0;
};

using ModelOutput = BasicModelOutput<float>;
using EpsModel = BasicEpsModel<float>;

}  // namespace qsd::diffusion
