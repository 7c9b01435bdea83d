// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/pipeline/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <unordered_set>

#include "qsd/error.hpp"
#include "qsd/numerics/rng.hpp"
#include "qsd/pipeline/config.hpp"

namespace qsd::pipeline {

using channel::SemanticMap;
using num::Tensor;

namespace {

Example make_example(std::size_t i, std::size_t h, std::size_t w, std::size_t classes, std::uint64_t seed) {
  num::RngStream st(seed, "synth/map/" + std::to_string(i));
  std::vector<std::uint16_t> ids(h * w, static_cast<std::uint16_t>(st.uniform_int(classes)));
  const std::size_t rects = 2 + st.uniform_int(3);
  for (std::size_t r = 0; r < rects; ++r) {
    const auto cls = static_cast<std::uint16_t>(st.uniform_int(classes));
    const std::size_t lo_h = std::max<std::size_t>(2, h / 8), lo_w = std::max<std::size_t>(2, w / 8);
    const std::size_t rh = lo_h + st.uniform_int(h / 2 - lo_h + 1);
    const std::size_t rw = lo_w + st.uniform_int(w / 2 - lo_w + 1);
    const std::size_t y0 = st.uniform_int(h - rh + 1), x0 = st.uniform_int(w - rw + 1);
    for (std::size_t y = y0; y < y0 + rh; ++y)
      for (std::size_t x = x0; x < x0 + rw; ++x) ids[y * w + x] = cls;
  }
  Example ex;
  ex.map = SemanticMap(h, w, classes, std::move(ids));
  ex.render_seed = num::RngStream(seed, "synth/render/" + std::to_string(i)).next_u64();
  ex.image = render_image(ex.map, ex.render_seed);
  return ex;
}

void check_dims(std::size_t h, std::size_t w, std::size_t classes) {
  if (h < 4 || w < 4) throw ConfigError("synth: height and width must be >= 4");
  if (classes < 2 || classes > 65535) throw ConfigError("synth: classes must be in [2, 65535]");
}

}  // namespace

Color class_color(std::size_t c, std::size_t classes) {
  if (c >= classes) throw ConfigError("class_color: class " + std::to_string(c) + " out of range");
  if (c < 8) return {c & 1 ? 0.6 : -0.6, c & 2 ? 0.6 : -0.6, c & 4 ? 0.6 : -0.6};
  num::RngStream st(0, "palette/" + std::to_string(c));
  return {st.uniform(-0.8, 0.8), st.uniform(-0.8, 0.8), st.uniform(-0.8, 0.8)};
}

Tensor render_image(const SemanticMap& map, std::uint64_t seed) {
  map.validate();
  const std::size_t h = map.height, w = map.width, plane = h * w;
  std::vector<Color> palette(map.classes);
  for (std::size_t c = 0; c < map.classes; ++c) palette[c] = class_color(c, map.classes);
  num::RngStream jitter(seed, "render");
  std::vector<float> px(3 * plane);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t c = map.at(y, x);
      const double fx = 1.0 + static_cast<double>(c % 3), fy = 1.0 + static_cast<double>((c / 3) % 3);
      const double arg = 2.0 * std::numbers::pi *
                             (fx * static_cast<double>(x) / static_cast<double>(w) +
                              fy * static_cast<double>(y) / static_cast<double>(h)) +
                         0.7 * static_cast<double>(c);
      const double tex = kTextureAmplitude * std::sin(arg);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = palette[c][ch] + tex + kJitterSigma * jitter.normal();
        px[ch * plane + y * w + x] = static_cast<float>(std::clamp(v, -1.0, 1.0));
      }
    }
  return Tensor({3, h, w}, std::move(px));
}

std::vector<Example> synth_dataset(std::size_t n, std::size_t height, std::size_t width, std::size_t classes,
                                   std::uint64_t seed) {
  check_dims(height, width, classes);
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_example(i, height, width, classes, seed));
  return out;
}

Splits synth_splits(const DatasetSpec& spec) {
  check_dims(spec.height, spec.width, spec.classes);
  const std::size_t total = spec.n_train + spec.n_calib + spec.n_eval;
  std::unordered_set<std::uint64_t> seen;
  std::vector<Example> pool;
  for (std::size_t i = 0; pool.size() < total; ++i) {
    if (i >= 100 * total + 100) throw ConfigError("synth: cannot draw " + std::to_string(total) + " distinct maps");
    auto ex = make_example(i, spec.height, spec.width, spec.classes, spec.seed);
    if (seen.insert(ex.map.fingerprint()).second) pool.push_back(std::move(ex));
  }
  Splits s;
  auto take = [&pool](std::size_t b, std::size_t e) {
    return std::vector<Example>(std::make_move_iterator(pool.begin() + static_cast<std::ptrdiff_t>(b)),
                                std::make_move_iterator(pool.begin() + static_cast<std::ptrdiff_t>(e)));
  };
  s.train = take(0, spec.n_train);
  s.calib = take(spec.n_train, spec.n_train + spec.n_calib);
  s.eval = take(spec.n_train + spec.n_calib, total);
  return s;
}

void check_disjoint(const std::vector<SemanticMap>& a, const char* a_name, const std::vector<SemanticMap>& b,
                    const char* b_name) {
  std::unordered_set<std::uint64_t> fa;
  for (const auto& m : a) fa.insert(m.fingerprint());
  for (const auto& m : b)
    if (fa.count(m.fingerprint()) && std::find(a.begin(), a.end(), m) != a.end())
      throw LeakageError(std::string("map sets overlap: a ") + b_name + " map also occurs in the " + a_name + " set");
}

std::vector<SemanticMap> maps_of(const std::vector<Example>& xs) {
  std::vector<SemanticMap> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(x.map);
  return out;
}

SemanticMap classify_image(const Tensor& image, std::size_t classes) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("classify_image: expected (3, H, W)");
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  std::vector<Color> palette(classes);
  for (std::size_t c = 0; c < classes; ++c) palette[c] = class_color(c, classes);
  std::vector<std::uint16_t> ids(plane);
  for (std::size_t p = 0; p < plane; ++p) {
    double best = 0.0;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      double d = 0.0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double e = static_cast<double>(image[ch * plane + p]) - palette[c][ch];
        d += e * e;
      }
      if (c == 0 || d < best) best = d, arg = c;
    }
    ids[p] = static_cast<std::uint16_t>(arg);
  }
  return SemanticMap(h, w, classes, std::move(ids));
}

double mean_iou(const SemanticMap& truth, const SemanticMap& pred) {
  if (truth.height != pred.height || truth.width != pred.width || truth.classes != pred.classes)
    throw ShapeError("mean_iou: maps differ in size or class count");
  std::vector<std::size_t> inter(truth.classes, 0), uni(truth.classes, 0);
  for (std::size_t i = 0; i < truth.ids.size(); ++i) {
    const auto a = truth.ids[i], b = pred.ids[i];
    if (a == b) {
      ++inter[a];
      ++uni[a];
    } else {
      ++uni[a];
      ++uni[b];
    }
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < truth.classes; ++c)
    if (uni[c]) sum += static_cast<double>(inter[c]) / static_cast<double>(uni[c]), ++present;
  return present ? sum / static_cast<double>(present) : 1.0;
}

}  // namespace qsd::pipeline
