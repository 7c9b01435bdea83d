// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "qsd/numerics/tensor.hpp"

namespace qsd::num {

/// Adam over a fixed parameter group. Parameters are updated in place
/// through `mutable_data()`; missing gradients count as zero.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::vector<Tensor> params, Options opts);

  void step();
  void zero_grad();
  std::vector<Tensor>& params() noexcept { return params_; }
  long steps() const noexcept { return t_; }

 private:
  std::vector<Tensor> params_;
  Options opts_;
  std::vector<std::vector<float>> m_, v_;
  long t_ = 0;
};

}  // namespace qsd::num
