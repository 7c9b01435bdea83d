// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "qsd/numerics/tensor.hpp"

namespace qsd::num {

// Binary elementwise ops. `b` must have the same shape as `a`, hold a single
// element, or have a shape that is a leading prefix of `a`'s shape (e.g. a
// per-sample (N, C) vector added onto an (N, C, H, W) feature map).
template <class T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <class T> BasicTensor<T> add_scalar(const BasicTensor<T>& x, double c);
template <class T> BasicTensor<T> mul_scalar(const BasicTensor<T>& x, double c);

// Unary elementwise ops.
template <class T> BasicTensor<T> silu(const BasicTensor<T>& x);
template <class T> BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <class T> BasicTensor<T> exp(const BasicTensor<T>& x);
template <class T> BasicTensor<T> log(const BasicTensor<T>& x);
/// Subgradient 0 at x == 0.
template <class T> BasicTensor<T> sqrt(const BasicTensor<T>& x);
template <class T> BasicTensor<T> square(const BasicTensor<T>& x);
template <class T> BasicTensor<T> abs(const BasicTensor<T>& x);
/// x^p for x >= 0.
template <class T> BasicTensor<T> pow(const BasicTensor<T>& x, double p);
/// Gradient passes where lo <= x <= hi, zero outside.
template <class T> BasicTensor<T> clip(const BasicTensor<T>& x, double lo, double hi);
/// Round half away from zero; straight-through (identity) gradient.
template <class T> BasicTensor<T> round_ste(const BasicTensor<T>& x);
/// Floor, detached from the graph.
template <class T> BasicTensor<T> floor_const(const BasicTensor<T>& x);

// Reductions.
template <class T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <class T> BasicTensor<T> mean(const BasicTensor<T>& x);
/// Sums every dimension except the first: (N, ...) -> (N).
template <class T> BasicTensor<T> sum_per_sample(const BasicTensor<T>& x);

// Layout ops on (N, C, ...) tensors.
template <class T> BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// Channels [begin, end) of dimension 1.
template <class T> BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t end);
/// Rows `index` of dimension 0, in order.
template <class T> BasicTensor<T> gather_batch(const BasicTensor<T>& x, const std::vector<std::size_t>& index);
/// Concatenation along dimension 0.
template <class T> BasicTensor<T> concat_batch(const std::vector<BasicTensor<T>>& parts);
template <class T> BasicTensor<T> avg_pool2(const BasicTensor<T>& x);
template <class T> BasicTensor<T> nearest_upsample2(const BasicTensor<T>& x);

// Layers.
/// x (N, Cin, H, W), w (Cout, Cin, K, K), optional bias (Cout). Stride 1;
/// pad < 0 selects K / 2 (size-preserving for odd K).
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                      int pad = -1);
/// x (N, in), w (out, in), optional bias (out).
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias);
/// x (N, C, ...), per-channel affine gamma/beta (C). The group count is
/// reduced to C when C < groups; C must then be a multiple of it.
template <class T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          int groups = 8, double eps = 1e-5);

/// Effective group count used by group_norm for `channels`.
int group_count(std::size_t channels, int groups);

// Generic dispatch used by the op registry and the gradient-check suite.
enum class OpKind {
  conv2d,
  linear,
  group_norm,
  silu,
  add,
  mul,
  concat_channels,
  avg_pool2,
  nearest_upsample2,
  sum,
  mean,
  square,
  sqrt,
  exp,
  log,
  clip,
  round_ste,
  sub,
  div,
  sigmoid,
  abs,
  pow,
  slice_channels,
  sum_per_sample,
};

struct OpAttrs {
  int pad = -1;
  int groups = 8;
  double eps = 1e-5;
  double lo = -1.0;
  double hi = 1.0;
  double exponent = 2.0;
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Throws ConfigError for unknown names.
OpKind op_kind_from_string(std::string_view name);
std::string_view to_string(OpKind kind);
const std::vector<OpKind>& all_op_kinds();

/// Applies `kind` to `inputs`. Layer kinds take optional trailing inputs
/// (bias, gamma/beta); an undefined tensor means "absent".
template <class T>
BasicTensor<T> forward_op(OpKind kind, const std::vector<BasicTensor<T>>& inputs, const OpAttrs& attrs = {});

}  // namespace qsd::num
