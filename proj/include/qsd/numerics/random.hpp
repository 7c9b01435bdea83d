// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "qsd/numerics/rng.hpp"
#include "qsd/numerics/tensor.hpp"

namespace qsd::num {

/// I.i.d. standard normal entries; advances `stream` by numel(shape).
Tensor sample_normal(RngStream& stream, const Shape& shape);

/// I.i.d. uniform entries in [lo, hi); advances `stream` by numel(shape).
Tensor sample_uniform(RngStream& stream, const Shape& shape, double lo, double hi);

}  // namespace qsd::num
