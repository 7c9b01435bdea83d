// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/numerics/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "qsd/error.hpp"

namespace qsd::num {

namespace {

template <class T>
using Node = detail::Node<T>;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_rank(std::string_view op, const Shape& s, std::size_t rank) {
  if (s.size() != rank)
    shape_fail(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

template <class T, class F, class DF>
BasicTensor<T> unary(const BasicTensor<T>& x, const char* op, F f, DF df) {
  std::vector<T> y(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return BasicTensor<T>::make_op(x.shape(), std::move(y), op, {x}, [df](Node<T>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      p.grad[i] += out.grad[i] * df(p.value[i], out.value[i]);
  });
}

std::size_t broadcast_inner(const Shape& a, const Shape& b, std::string_view op) {
  if (a == b) return 1;
  if (numel(b) == 1) return numel(a);
  if (b.size() < a.size() && std::equal(b.begin(), b.end(), a.begin())) return numel(a) / numel(b);
  shape_fail(op, "cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
}

// Derivative callbacks receive (a, b) and return d(out)/da or d(out)/db.
template <class T, class F, class DA, class DB>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op, F f, DA da, DB db) {
  const std::size_t inner = broadcast_inner(a.shape(), b.shape(), op);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(av[i], bv[i / inner]);
  return BasicTensor<T>::make_op(a.shape(), std::move(y), op, {a, b}, [inner, da, db](Node<T>& out) {
    auto& pa = *out.parents[0];
    auto& pb = *out.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i)
        pa.grad[i] += out.grad[i] * da(pa.value[i], pb.value[i / inner]);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      // Accumulate per broadcast group before adding, so the summation
      // order is fixed by the layout.
      for (std::size_t j = 0; j < pb.value.size(); ++j) {
        double acc = 0.0;
        for (std::size_t i = j * inner; i < (j + 1) * inner; ++i)
          acc += static_cast<double>(out.grad[i] * db(pa.value[i], pb.value[j]));
        pb.grad[j] += static_cast<T>(acc);
      }
    }
  });
}

template <class T>
T round_half_away(T v) {
  return std::round(v);  // std::round rounds halfway cases away from zero
}

// Column layout: row (c * K + ki) * K + kj, column n * Ho * Wo + oy * Wo + ox.
template <class T>
void im2col(const T* x, std::size_t n_batch, std::size_t c_in, std::size_t h, std::size_t w, std::size_t k,
            std::ptrdiff_t pad, std::size_t ho, std::size_t wo, T* cols) {
  const std::size_t npix = ho * wo;
  const std::size_t ncol = n_batch * npix;
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = cols + ((c * k + ki) * k + kj) * ncol;
        for (std::size_t n = 0; n < n_batch; ++n) {
          const T* plane = x + (n * c_in + c) * h * w;
          T* dst = row + n * npix;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ki) - pad;
            T* drow = dst + oy * wo;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
              std::fill(drow, drow + wo, T{0});
              continue;
            }
            const T* srow = plane + static_cast<std::size_t>(iy) * w;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kj) - pad;
              drow[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? T{0} : srow[ix];
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, std::size_t n_batch, std::size_t c_in, std::size_t h, std::size_t w, std::size_t k,
            std::ptrdiff_t pad, std::size_t ho, std::size_t wo, T* dx) {
  const std::size_t npix = ho * wo;
  const std::size_t ncol = n_batch * npix;
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = cols + ((c * k + ki) * k + kj) * ncol;
        for (std::size_t n = 0; n < n_batch; ++n) {
          T* plane = dx + (n * c_in + c) * h * w;
          const T* src = row + n * npix;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ki) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            T* drow = plane + static_cast<std::size_t>(iy) * w;
            const T* srow = src + oy * wo;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kj) - pad;
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T{1}; }, [](T, T) { return T{1}; });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T{1}; }, [](T, T) { return T{-1}; });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T{1} / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, double c) {
  const T cc = static_cast<T>(c);
  return unary(x, "add_scalar", [cc](T v) { return v + cc; }, [](T, T) { return T{1}; });
}

template <class T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& x, double c) {
  const T cc = static_cast<T>(c);
  return unary(x, "mul_scalar", [cc](T v) { return v * cc; }, [cc](T, T) { return cc; });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return unary(
      x, "sigmoid", [](T v) { return T{1} / (T{1} + std::exp(-v)); }, [](T, T y) { return y * (T{1} - y); });
}

template <class T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
  return unary(
      x, "silu", [](T v) { return v / (T{1} + std::exp(-v)); },
      [](T v, T) {
        const T s = T{1} / (T{1} + std::exp(-v));
        return s * (T{1} + v * (T{1} - s));
      });
}

template <class T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  return unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
BasicTensor<T> log(const BasicTensor<T>& x) {
  return unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <class T>
BasicTensor<T> sqrt(const BasicTensor<T>& x) {
  return unary(
      x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return y > T{0} ? T{0.5} / y : T{0}; });
}

template <class T>
BasicTensor<T> square(const BasicTensor<T>& x) {
  return unary(x, "square", [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <class T>
BasicTensor<T> abs(const BasicTensor<T>& x) {
  return unary(
      x, "abs", [](T v) { return std::abs(v); },
      [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

template <class T>
BasicTensor<T> pow(const BasicTensor<T>& x, double p) {
  const T pp = static_cast<T>(p);
  return unary(
      x, "pow", [pp](T v) { return std::pow(v, pp); },
      [pp](T v, T) { return v > T{0} ? pp * std::pow(v, pp - T{1}) : (pp == T{1} ? T{1} : T{0}); });
}

template <class T>
BasicTensor<T> clip(const BasicTensor<T>& x, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError("clip: lo > hi");
  const T l = static_cast<T>(lo), h = static_cast<T>(hi);
  return unary(
      x, "clip", [l, h](T v) { return std::clamp(v, l, h); },
      [l, h](T v, T) { return (v >= l && v <= h) ? T{1} : T{0}; });
}

template <class T>
BasicTensor<T> round_ste(const BasicTensor<T>& x) {
  return unary(x, "round_ste", [](T v) { return round_half_away(v); }, [](T, T) { return T{1}; });
}

template <class T>
BasicTensor<T> floor_const(const BasicTensor<T>& x) {
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::floor(x[i]);
  return BasicTensor<T>(x.shape(), std::move(y));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  return BasicTensor<T>::make_op(Shape{1}, {static_cast<T>(acc)}, "sum", {x}, [](Node<T>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (auto& g : p.grad) g += out.grad[0];
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  const double n = static_cast<double>(x.numel());
  return BasicTensor<T>::make_op(Shape{1}, {static_cast<T>(acc / n)}, "mean", {x}, [n](Node<T>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const T g = static_cast<T>(out.grad[0] / n);
    for (auto& v : p.grad) v += g;
  });
}

template <class T>
BasicTensor<T> sum_per_sample(const BasicTensor<T>& x) {
  const std::size_t n = x.dim(0);
  const std::size_t inner = x.numel() / n;
  std::vector<T> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < inner; ++j) acc += static_cast<double>(x[i * inner + j]);
    y[i] = static_cast<T>(acc);
  }
  return BasicTensor<T>::make_op(Shape{n}, std::move(y), "sum_per_sample", {x}, [inner](Node<T>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += out.grad[i / inner];
  });
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size() || sa[0] != sb[0] ||
      !std::equal(sa.begin() + 2, sa.end(), sb.begin() + 2))
    shape_fail("concat_channels", "incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  const std::size_t n = sa[0];
  const std::size_t inner = numel(sa) / (sa[0] * sa[1]);
  const std::size_t ca = sa[1] * inner, cb = sb[1] * inner;
  Shape so = sa;
  so[1] = sa[1] + sb[1];
  std::vector<T> y(numel(so));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().begin() + i * ca, ca, y.begin() + i * (ca + cb));
    std::copy_n(b.data().begin() + i * cb, cb, y.begin() + i * (ca + cb) + ca);
  }
  return BasicTensor<T>::make_op(std::move(so), std::move(y), "concat_channels", {a, b},
                                 [n, ca, cb](Node<T>& out) {
                                   auto& pa = *out.parents[0];
                                   auto& pb = *out.parents[1];
                                   if (pa.requires_grad) pa.ensure_grad();
                                   if (pb.requires_grad) pb.ensure_grad();
                                   for (std::size_t i = 0; i < n; ++i) {
                                     const T* g = out.grad.data() + i * (ca + cb);
                                     if (pa.requires_grad)
                                       for (std::size_t j = 0; j < ca; ++j) pa.grad[i * ca + j] += g[j];
                                     if (pb.requires_grad)
                                       for (std::size_t j = 0; j < cb; ++j) pb.grad[i * cb + j] += g[ca + j];
                                   }
                                 });
}

template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (s.size() < 2 || begin >= end || end > s[1])
    shape_fail("slice_channels", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                                     shape_str(s));
  const std::size_t n = s[0];
  const std::size_t inner = numel(s) / (s[0] * s[1]);
  const std::size_t row = s[1] * inner;
  const std::size_t off = begin * inner, len = (end - begin) * inner;
  Shape so = s;
  so[1] = end - begin;
  std::vector<T> y(n * len);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(x.data().begin() + i * row + off, len, y.begin() + i * len);
  return BasicTensor<T>::make_op(std::move(so), std::move(y), "slice_channels", {x},
                                 [n, row, off, len](Node<T>& out) {
                                   auto& p = *out.parents[0];
                                   if (!p.requires_grad) return;
                                   p.ensure_grad();
                                   for (std::size_t i = 0; i < n; ++i)
                                     for (std::size_t j = 0; j < len; ++j)
                                       p.grad[i * row + off + j] += out.grad[i * len + j];
                                 });
}

template <class T>
BasicTensor<T> gather_batch(const BasicTensor<T>& x, const std::vector<std::size_t>& index) {
  if (index.empty()) shape_fail("gather_batch", "empty index");
  const std::size_t n = x.dim(0);
  const std::size_t row = x.numel() / n;
  Shape so = x.shape();
  so[0] = index.size();
  std::vector<T> y(index.size() * row);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) shape_fail("gather_batch", "index out of range for " + shape_str(x.shape()));
    std::copy_n(x.data().begin() + index[i] * row, row, y.begin() + i * row);
  }
  return BasicTensor<T>::make_op(std::move(so), std::move(y), "gather_batch", {x}, [index, row](Node<T>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < row; ++j) p.grad[index[i] * row + j] += out.grad[i * row + j];
  });
}

template <class T>
BasicTensor<T> concat_batch(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) shape_fail("concat_batch", "no inputs");
  Shape so = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != so.size() || !std::equal(so.begin() + 1, so.end(), p.shape().begin() + 1))
      shape_fail("concat_batch", "incompatible shapes " + shape_str(so) + " and " + shape_str(p.shape()));
    total += p.dim(0);
  }
  so[0] = total;
  std::vector<T> y;
  y.reserve(numel(so));
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(y.size());
    y.insert(y.end(), p.data().begin(), p.data().end());
  }
  return BasicTensor<T>::make_op(std::move(so), std::move(y), "concat_batch", parts, [offsets](Node<T>& out) {
    for (std::size_t k = 0; k < out.parents.size(); ++k) {
      auto& p = *out.parents[k];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (std::size_t j = 0; j < p.grad.size(); ++j) p.grad[j] += out.grad[offsets[k] + j];
    }
  });
}

template <class T>
BasicTensor<T> avg_pool2(const BasicTensor<T>& x) {
  require_rank("avg_pool2", x.shape(), 4);
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) shape_fail("avg_pool2", "odd spatial size " + shape_str(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<T> y(nc * ho * wo);
  const auto xv = x.data();
  for (std::size_t c = 0; c < nc; ++c)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        const T* p = xv.data() + c * h * w + 2 * i * w + 2 * j;
        y[(c * ho + i) * wo + j] = (p[0] + p[1] + p[w] + p[w + 1]) * T{0.25};
      }
  return BasicTensor<T>::make_op(Shape{x.dim(0), x.dim(1), ho, wo}, std::move(y), "avg_pool2", {x},
                                 [nc, h, w, ho, wo](Node<T>& out) {
                                   auto& p = *out.parents[0];
                                   if (!p.requires_grad) return;
                                   p.ensure_grad();
                                   for (std::size_t c = 0; c < nc; ++c)
                                     for (std::size_t i = 0; i < ho; ++i)
                                       for (std::size_t j = 0; j < wo; ++j) {
                                         const T g = out.grad[(c * ho + i) * wo + j] * T{0.25};
                                         T* q = p.grad.data() + c * h * w + 2 * i * w + 2 * j;
                                         q[0] += g;
                                         q[1] += g;
                                         q[w] += g;
                                         q[w + 1] += g;
                                       }
                                 });
}

template <class T>
BasicTensor<T> nearest_upsample2(const BasicTensor<T>& x) {
  require_rank("nearest_upsample2", x.shape(), 4);
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = 2 * h, wo = 2 * w;
  std::vector<T> y(nc * ho * wo);
  const auto xv = x.data();
  for (std::size_t c = 0; c < nc; ++c)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) y[(c * ho + i) * wo + j] = xv[(c * h + i / 2) * w + j / 2];
  return BasicTensor<T>::make_op(Shape{x.dim(0), x.dim(1), ho, wo}, std::move(y), "nearest_upsample2", {x},
                                 [nc, h, w, ho, wo](Node<T>& out) {
                                   auto& p = *out.parents[0];
                                   if (!p.requires_grad) return;
                                   p.ensure_grad();
                                   for (std::size_t c = 0; c < nc; ++c)
                                     for (std::size_t i = 0; i < h; ++i)
                                       for (std::size_t j = 0; j < w; ++j) {
                                         const T* g = out.grad.data() + (c * ho + 2 * i) * wo + 2 * j;
                                         p.grad[(c * h + i) * w + j] += (g[0] + g[1]) + (g[wo] + g[wo + 1]);
                                       }
                                 });
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias, int pad) {
  require_rank("conv2d", x.shape(), 4);
  require_rank("conv2d", w.shape(), 4);
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin || w.dim(3) != k)
    shape_fail("conv2d", "input " + shape_str(x.shape()) + " incompatible with kernel " + shape_str(w.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
    shape_fail("conv2d", "bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) + " outputs");
  const std::ptrdiff_t p = pad < 0 ? static_cast<std::ptrdiff_t>(k / 2) : pad;
  const std::ptrdiff_t ho_s = static_cast<std::ptrdiff_t>(h) + 2 * p - static_cast<std::ptrdiff_t>(k) + 1;
  const std::ptrdiff_t wo_s = static_cast<std::ptrdiff_t>(wd) + 2 * p - static_cast<std::ptrdiff_t>(k) + 1;
  if (ho_s <= 0 || wo_s <= 0)
    shape_fail("conv2d", "kernel " + shape_str(w.shape()) + " larger than padded input " + shape_str(x.shape()));
  const std::size_t ho = static_cast<std::size_t>(ho_s), wo = static_cast<std::size_t>(wo_s);
  const std::size_t npix = ho * wo, ncol = n * npix, krows = cin * k * k;

  // One product per sample keeps each sample's result independent of the
  // batch it travels in.
  const std::size_t xs = cin * h * wd;
  std::vector<T> cols(krows * npix);
  std::vector<T> y(n * cout * npix);
  for (std::size_t i = 0; i < n; ++i) {
    im2col(x.data().data() + i * xs, 1, cin, h, wd, k, p, ho, wo, cols.data());
    MatMap<T> ym(y.data() + i * cout * npix, cout, npix);
    ym.noalias() = ConstMatMap<T>(w.data().data(), cout, krows) * ConstMatMap<T>(cols.data(), krows, npix);
    if (bias.defined())
      for (std::size_t co = 0; co < cout; ++co) ym.row(co).array() += bias[co];
  }
  cols.clear();
  cols.shrink_to_fit();

  std::vector<BasicTensor<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return BasicTensor<T>::make_op(
      Shape{n, cout, ho, wo}, std::move(y), "conv2d", inputs,
      [n, cin, h, wd, k, p, ho, wo, cout, npix, ncol, krows](Node<T>& out) {
        auto& px = *out.parents[0];
        auto& pw = *out.parents[1];
        Node<T>* pb = out.parents.size() > 2 ? out.parents[2].get() : nullptr;
        RowMat<T> g(cout, ncol);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t co = 0; co < cout; ++co)
            std::copy_n(out.grad.data() + (i * cout + co) * npix, npix, g.data() + co * ncol + i * npix);
        if (pb && pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t co = 0; co < cout; ++co) {
            double acc = 0.0;
            for (std::size_t q = 0; q < ncol; ++q) acc += static_cast<double>(g(co, q));
            pb->grad[co] += static_cast<T>(acc);
          }
        }
        if (pw.requires_grad) {
          std::vector<T> cols(krows * ncol);
          im2col(px.value.data(), n, cin, h, wd, k, p, ho, wo, cols.data());
          pw.ensure_grad();
          MatMap<T>(pw.grad.data(), cout, krows).noalias() +=
              g * ConstMatMap<T>(cols.data(), krows, ncol).transpose();
        }
        if (px.requires_grad) {
          RowMat<T> dcols = ConstMatMap<T>(pw.value.data(), cout, krows).transpose() * g;
          px.ensure_grad();
          col2im(dcols.data(), n, cin, h, wd, k, p, ho, wo, px.grad.data());
        }
      });
}

template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias) {
  require_rank("linear", x.shape(), 2);
  require_rank("linear", w.shape(), 2);
  const std::size_t n = x.dim(0), in = x.dim(1), out_f = w.dim(0);
  if (w.dim(1) != in) shape_fail("linear", "input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f))
    shape_fail("linear", "bias " + shape_str(bias.shape()) + " for " + std::to_string(out_f) + " outputs");
  std::vector<T> y(n * out_f);
  MatMap<T> ym(y.data(), n, out_f);
  for (std::size_t i = 0; i < n; ++i)
    ym.row(i).noalias() =
        ConstMatMap<T>(x.data().data() + i * in, 1, in) * ConstMatMap<T>(w.data().data(), out_f, in).transpose();
  if (bias.defined())
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out_f; ++j) ym(i, j) += bias[j];
  std::vector<BasicTensor<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return BasicTensor<T>::make_op(Shape{n, out_f}, std::move(y), "linear", inputs, [n, in, out_f](Node<T>& out) {
    auto& px = *out.parents[0];
    auto& pw = *out.parents[1];
    Node<T>* pb = out.parents.size() > 2 ? out.parents[2].get() : nullptr;
    ConstMatMap<T> g(out.grad.data(), n, out_f);
    if (px.requires_grad) {
      px.ensure_grad();
      MatMap<T>(px.grad.data(), n, in).noalias() += g * ConstMatMap<T>(pw.value.data(), out_f, in);
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      MatMap<T>(pw.grad.data(), out_f, in).noalias() += g.transpose() * ConstMatMap<T>(px.value.data(), n, in);
    }
    if (pb && pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t j = 0; j < out_f; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(g(i, j));
        pb->grad[j] += static_cast<T>(acc);
      }
    }
  });
}

int group_count(std::size_t channels, int groups) {
  if (groups <= 0) throw ConfigError("group_norm: group count must be positive");
  const std::size_t g = std::min<std::size_t>(channels, static_cast<std::size_t>(groups));
  if (channels % g != 0)
    throw ShapeError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                     std::to_string(g) + " groups");
  return static_cast<int>(g);
}

template <class T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          int groups, double eps) {
  if (x.rank() < 2) shape_fail("group_norm", "rank < 2: " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.numel() / (n * c);
  if (gamma.defined() && gamma.numel() != c)
    shape_fail("group_norm", "gamma " + shape_str(gamma.shape()) + " for " + std::to_string(c) + " channels");
  if (beta.defined() && beta.numel() != c)
    shape_fail("group_norm", "beta " + shape_str(beta.shape()) + " for " + std::to_string(c) + " channels");
  const std::size_t g = static_cast<std::size_t>(group_count(c, groups));
  const std::size_t cpg = c / g, m = cpg * hw;

  std::vector<T> y(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(n * g);
  const auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t gi = 0; gi < g; ++gi) {
      const std::size_t base = (i * c + gi * cpg) * hw;
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += static_cast<double>(xv[base + j]);
      const double mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double d = static_cast<double>(xv[base + j]) - mu;
        ss += d * d;
      }
      const double r = 1.0 / std::sqrt(ss / static_cast<double>(m) + eps);
      rstd[i * g + gi] = static_cast<T>(r);
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t ch = gi * cpg + j / hw;
        const T xh = static_cast<T>((static_cast<double>(xv[base + j]) - mu) * r);
        xhat[base + j] = xh;
        const T ga = gamma.defined() ? gamma[ch] : T{1};
        const T be = beta.defined() ? beta[ch] : T{0};
        y[base + j] = xh * ga + be;
      }
    }

  std::vector<BasicTensor<T>> inputs{x};
  const bool has_gamma = gamma.defined(), has_beta = beta.defined();
  if (has_gamma) inputs.push_back(gamma);
  if (has_beta) inputs.push_back(beta);
  return BasicTensor<T>::make_op(
      x.shape(), std::move(y), "group_norm", inputs,
      [n, c, hw, g, cpg, m, has_gamma, has_beta, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& out) {
        auto& px = *out.parents[0];
        Node<T>* pg = has_gamma ? out.parents[1].get() : nullptr;
        Node<T>* pbeta = has_beta ? out.parents[has_gamma ? 2 : 1].get() : nullptr;
        if (pg && pg->requires_grad) {
          pg->ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < hw; ++j) {
                const std::size_t idx = (i * c + ch) * hw + j;
                acc += static_cast<double>(out.grad[idx]) * static_cast<double>(xhat[idx]);
              }
            pg->grad[ch] += static_cast<T>(acc);
          }
        }
        if (pbeta && pbeta->requires_grad) {
          pbeta->ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < hw; ++j) acc += static_cast<double>(out.grad[(i * c + ch) * hw + j]);
            pbeta->grad[ch] += static_cast<T>(acc);
          }
        }
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t gi = 0; gi < g; ++gi) {
            const std::size_t base = (i * c + gi * cpg) * hw;
            double a = 0.0, b = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const std::size_t ch = gi * cpg + j / hw;
              const double dxh = static_cast<double>(out.grad[base + j]) * (pg ? static_cast<double>(pg->value[ch]) : 1.0);
              a += dxh;
              b += dxh * static_cast<double>(xhat[base + j]);
            }
            const double r = static_cast<double>(rstd[i * g + gi]);
            const double md = static_cast<double>(m);
            for (std::size_t j = 0; j < m; ++j) {
              const std::size_t ch = gi * cpg + j / hw;
              const double dxh = static_cast<double>(out.grad[base + j]) * (pg ? static_cast<double>(pg->value[ch]) : 1.0);
              px.grad[base + j] +=
                  static_cast<T>(r * (dxh - a / md - static_cast<double>(xhat[base + j]) * b / md));
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

namespace {
struct KindName {
  OpKind kind;
  std::string_view name;
};
constexpr std::array<KindName, 24> kKindNames{{
    {OpKind::conv2d, "conv2d"},
    {OpKind::linear, "linear"},
    {OpKind::group_norm, "group_norm"},
    {OpKind::silu, "silu"},
    {OpKind::add, "add"},
    {OpKind::mul, "mul"},
    {OpKind::concat_channels, "concat_channels"},
    {OpKind::avg_pool2, "avg_pool2"},
    {OpKind::nearest_upsample2, "nearest_upsample2"},
    {OpKind::sum, "sum"},
    {OpKind::mean, "mean"},
    {OpKind::square, "square"},
    {OpKind::sqrt, "sqrt"},
    {OpKind::exp, "exp"},
    {OpKind::log, "log"},
    {OpKind::clip, "clip"},
    {OpKind::round_ste, "round_ste"},
    {OpKind::sub, "sub"},
    {OpKind::div, "div"},
    {OpKind::sigmoid, "sigmoid"},
    {OpKind::abs, "abs"},
    {OpKind::pow, "pow"},
    {OpKind::slice_channels, "slice_channels"},
    {OpKind::sum_per_sample, "sum_per_sample"},
}};
}  // namespace

OpKind op_kind_from_string(std::string_view name) {
  for (const auto& kn : kKindNames)
    if (kn.name == name) return kn.kind;
  throw ConfigError("unknown op kind '" + std::string(name) + "'");
}

std::string_view to_string(OpKind kind) {
  for (const auto& kn : kKindNames)
    if (kn.kind == kind) return kn.name;
  return "?";
}

const std::vector<OpKind>& all_op_kinds() {
  static const std::vector<OpKind> kinds = [] {
    std::vector<OpKind> v;
    for (const auto& kn : kKindNames) v.push_back(kn.kind);
    return v;
  }();
  return kinds;
}

template <class T>
BasicTensor<T> forward_op(OpKind kind, const std::vector<BasicTensor<T>>& in, const OpAttrs& attrs) {
  auto arg = [&](std::size_t i) -> const BasicTensor<T>& {
    static const BasicTensor<T> absent;
    return i < in.size() ? in[i] : absent;
  };
  auto need = [&](std::size_t count) {
    if (in.size() < count)
      throw ShapeError(std::string(to_string(kind)) + ": expected " + std::to_string(count) + " inputs, got " +
                       std::to_string(in.size()));
    for (std::size_t i = 0; i < count; ++i)
      if (!in[i].defined()) throw ShapeError(std::string(to_string(kind)) + ": input " + std::to_string(i) + " undefined");
  };
  switch (kind) {
    case OpKind::conv2d: need(2); return conv2d(in[0], in[1], arg(2), attrs.pad);
    case OpKind::linear: need(2); return linear(in[0], in[1], arg(2));
    case OpKind::group_norm: need(1); return group_norm(in[0], arg(1), arg(2), attrs.groups, attrs.eps);
    case OpKind::silu: need(1); return silu(in[0]);
    case OpKind::add: need(2); return add(in[0], in[1]);
    case OpKind::mul: need(2); return mul(in[0], in[1]);
    case OpKind::sub: need(2); return sub(in[0], in[1]);
    case OpKind::div: need(2); return div(in[0], in[1]);
    case OpKind::concat_channels: need(2); return concat_channels(in[0], in[1]);
    case OpKind::slice_channels: need(1); return slice_channels(in[0], attrs.begin, attrs.end);
    case OpKind::avg_pool2: need(1); return avg_pool2(in[0]);
    case OpKind::nearest_upsample2: need(1); return nearest_upsample2(in[0]);
    case OpKind::sum: need(1); return sum(in[0]);
    case OpKind::mean: need(1); return mean(in[0]);
    case OpKind::sum_per_sample: need(1); return sum_per_sample(in[0]);
    case OpKind::square: need(1); return square(in[0]);
    case OpKind::sqrt: need(1); return sqrt(in[0]);
    case OpKind::exp: need(1); return exp(in[0]);
    case OpKind::log: need(1); return log(in[0]);
    case OpKind::clip: need(1); return clip(in[0], attrs.lo, attrs.hi);
    case OpKind::round_ste: need(1); return round_ste(in[0]);
    case OpKind::sigmoid: need(1); return sigmoid(in[0]);
    case OpKind::abs: need(1); return abs(in[0]);
    case OpKind::pow: need(1); return pow(in[0], attrs.exponent);
  }
  throw ConfigError("forward_op: unhandled op kind");
}

#define QSD_INSTANTIATE_OPS(T)                                                                              \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> div(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, double);                                        \
  template BasicTensor<T> mul_scalar(const BasicTensor<T>&, double);                                        \
  template BasicTensor<T> silu(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> exp(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> log(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> sqrt(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> square(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> abs(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> pow(const BasicTensor<T>&, double);                                               \
  template BasicTensor<T> clip(const BasicTensor<T>&, double, double);                                      \
  template BasicTensor<T> round_ste(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> floor_const(const BasicTensor<T>&);                                               \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> sum_per_sample(const BasicTensor<T>&);                                            \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> slice_channels(const BasicTensor<T>&, std::size_t, std::size_t);                  \
  template BasicTensor<T> gather_batch(const BasicTensor<T>&, const std::vector<std::size_t>&);             \
  template BasicTensor<T> concat_batch(const std::vector<BasicTensor<T>>&);                                 \
  template BasicTensor<T> avg_pool2(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> nearest_upsample2(const BasicTensor<T>&);                                         \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, int); \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);      \
  template BasicTensor<T> group_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,   \
                                     int, double);                                                          \
  template BasicTensor<T> forward_op(OpKind, const std::vector<BasicTensor<T>>&, const OpAttrs&);

QSD_INSTANTIATE_OPS(float)
QSD_INSTANTIATE_OPS(double)

#undef QSD_INSTANTIATE_OPS

}  // namespace qsd::num
