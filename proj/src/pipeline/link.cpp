// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/pipeline/link.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "qsd/diffusion/sampler.hpp"
#include "qsd/error.hpp"
#include "qsd/numerics/ops.hpp"
#include "qsd/numerics/random.hpp"
#include "qsd/pipeline/dataset.hpp"

namespace qsd::pipeline {

using num::Tensor;

namespace {

Tensor batch1(const Tensor& t) {
  num::Shape s{1};
  s.insert(s.end(), t.shape().begin(), t.shape().end());
  return t.reshape(std::move(s));
}

Tensor unbatch(const Tensor& batch, std::size_t i) {
  return num::gather_batch(batch, {i}).reshape(num::Shape(batch.shape().begin() + 1, batch.shape().end()));
}

}  // namespace

LinkResult run_link(diffusion::EpsModel& model, const diffusion::NoiseSchedule& sched,
                    const std::vector<channel::SemanticMap>& maps, std::optional<double> psnr_db,
                    const EvalSpec& spec, std::uint64_t seed) {
  if (psnr_db && !(*psnr_db >= 0.0)) throw ConfigError("run_link: psnr must be >= 0");
  if (spec.batch == 0) throw ConfigError("run_link: batch must be >= 1");
  LinkResult r;
  std::vector<Tensor> x_T;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    r.bandwidth.push_back(channel::bandwidth_bits(maps[i]));
    num::RngStream ch(seed, "link/channel/" + std::to_string(i));
    r.received.push_back(channel::awgn(channel::encode_map(maps[i]), psnr_db, ch).tensor);
    num::RngStream xs(seed, "link/xT/" + std::to_string(i));
    x_T.push_back(num::sample_normal(xs, {1, 3, maps[i].height, maps[i].width}));
  }
  if (spec.sampler == SamplerKind::ddpm) {
    diffusion::SampleOptions opt;
    opt.guidance_scale = spec.guidance_scale;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      num::RngStream st(seed, "link/ddpm/" + std::to_string(i));
      const Tensor y = batch1(r.received[i]);
      Tensor x = x_T[i];
      for (long t = static_cast<long>(sched.size()) - 1; t >= 0; --t)
        x = diffusion::p_sample_step(model, x, static_cast<int>(t), y, sched, st, opt);
      r.images.push_back(unbatch(x, 0));
    }
    return r;
  }
  diffusion::DdimOptions opt;
  opt.steps = spec.ddim_steps;
  opt.guidance_scale = spec.guidance_scale;
  for (std::size_t first = 0; first < maps.size(); first += spec.batch) {
    const std::size_t last = std::min(maps.size(), first + spec.batch);
    std::vector<Tensor> xs(x_T.begin() + static_cast<std::ptrdiff_t>(first),
                           x_T.begin() + static_cast<std::ptrdiff_t>(last));
    std::vector<Tensor> ys;
    for (std::size_t i = first; i < last; ++i) ys.push_back(batch1(r.received[i]));
    // eta = 0 draws nothing from this stream.
    num::RngStream unused(seed, "link/ddim");
    const auto res = diffusion::ddim_sample_from(model, num::concat_batch(xs), num::concat_batch(ys), sched, opt, unused);
    for (std::size_t j = 0; j < last - first; ++j) r.images.push_back(unbatch(res.x0, j));
  }
  return r;
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm: expected (3, H, W)");
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> px(3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(image[c * plane + p]), -1.0, 1.0);
      px[3 * p + c] = static_cast<unsigned char>(std::lround((v + 1.0) * 127.5));
    }
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

Tensor image_grid(const std::vector<Tensor>& images, std::size_t cols) {
  if (images.empty() || cols == 0) throw ShapeError("image_grid: nothing to tile");
  const std::size_t h = images[0].dim(1), w = images[0].dim(2);
  for (const auto& im : images)
    if (im.shape() != images[0].shape() || im.dim(0) != 3) throw ShapeError("image_grid: images differ in shape");
  const std::size_t rows = (images.size() + cols - 1) / cols;
  const std::size_t gh = rows * (h + 1) + 1, gw = cols * (w + 1) + 1, plane = gh * gw;
  std::vector<float> g(3 * plane, 1.0f);
  for (std::size_t k = 0; k < images.size(); ++k) {
    const std::size_t oy = 1 + (k / cols) * (h + 1), ox = 1 + (k % cols) * (w + 1);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) g[c * plane + (oy + y) * gw + ox + x] = images[k][(c * h + y) * w + x];
  }
  return Tensor({3, gh, gw}, std::move(g));
}

Tensor colorize(const channel::SemanticMap& map) {
  map.validate();
  const std::size_t plane = map.height * map.width;
  std::vector<float> px(3 * plane);
  for (std::size_t p = 0; p < plane; ++p) {
    const auto col = class_color(map.ids[p], map.classes);
    for (std::size_t c = 0; c < 3; ++c) px[c * plane + p] = static_cast<float>(col[c]);
  }
  return Tensor({3, map.height, map.width}, std::move(px));
}

}  // namespace qsd::pipeline
