// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/pipeline/train.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "qsd/diffusion/losses.hpp"
#include "qsd/error.hpp"
#include "qsd/numerics/ops.hpp"
#include "qsd/numerics/optim.hpp"
#include "qsd/numerics/random.hpp"

namespace qsd::pipeline {

using num::Tensor;

namespace {

Tensor stack(const std::vector<Tensor>& parts) {
  std::vector<Tensor> b;
  b.reserve(parts.size());
  for (const auto& p : parts) {
    num::Shape s{1};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    b.push_back(p.reshape(std::move(s)));
  }
  return num::concat_batch(b);
}

}  // namespace

TrainResult train_fp(const RunConfig& cfg, const std::vector<Example>& data, std::uint64_t seed,
                     const std::filesystem::path& last_good) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: empty training set");
  num::RngStream init(seed, "model/init");
  TrainResult r{net::Denoiser(cfg.denoiser(), init), cfg.noise_schedule(), {}, {}};
  auto& model = r.model;
  const auto& sched = r.schedule;
  const auto& tc = cfg.train;
  for (const auto& ex : data)
    if (ex.map.classes != cfg.dataset.classes || ex.image.dim(1) != ex.map.height)
      throw ShapeError("train: example does not match the configured dataset");

  std::vector<Tensor> onehot;
  onehot.reserve(data.size());
  for (const auto& ex : data) onehot.push_back(channel::encode_map(ex.map).tensor);
  const Tensor null_cond(onehot[0].shape(), 0.0f);

  num::Adam opt(model.params().tensors(), num::Adam::Options{tc.lr});
  num::RngStream shuffle(seed, "train/shuffle"), noise(seed, "train-noise");
  std::vector<std::size_t> order(data.size());
  std::vector<std::vector<float>> snapshot;
  auto take_snapshot = [&] {
    snapshot.clear();
    for (const auto& p : opt.params()) snapshot.emplace_back(p.data().begin(), p.data().end());
  };

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.uniform_int(i)]);
    double epoch_sum = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t first = 0; first < order.size(); first += tc.batch) {
      const std::size_t last = std::min(order.size(), first + tc.batch);
      std::vector<Tensor> xs, ys;
      std::vector<int> t;
      for (std::size_t k = first; k < last; ++k) {
        const std::size_t i = order[k];
        xs.push_back(data[i].image);
        const double psnr = noise.uniform(tc.psnr_min, tc.psnr_max);
        Tensor y = channel::awgn(channel::OneHotMap{onehot[i], std::nullopt}, psnr, noise).tensor;
        if (noise.uniform() < cfg.model.null_cond_prob) y = null_cond;
        ys.push_back(std::move(y));
        t.push_back(static_cast<int>(noise.uniform_int(sched.size())));
      }
      const Tensor x0 = stack(xs), y = stack(ys);
      const Tensor eps = num::sample_normal(noise, x0.shape());
      auto losses = diffusion::training_losses(model, x0, y, t, eps, sched, tc.lambda_kl);
      const double total = losses.total.item();
      if (!std::isfinite(total)) {
        if (!last_good.empty() && !snapshot.empty()) {
          for (std::size_t j = 0; j < snapshot.size(); ++j)
            std::copy(snapshot[j].begin(), snapshot[j].end(), opt.params()[j].mutable_data().begin());
          net::save_checkpoint(last_good, model, sched);
        }
        throw DivergenceError("train: non-finite loss at step " + std::to_string(step) + " (epoch " +
                              std::to_string(epoch) + ")");
      }
      take_snapshot();
      num::backward(losses.total);
      opt.step();
      opt.zero_grad();
      r.curve.push_back({step, epoch, total, losses.diffusion.item(), losses.kl.item()});
      epoch_sum += total;
      ++epoch_steps;
      ++step;
    }
    r.epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_steps));
  }
  return r;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepRecord>& curve) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "step,epoch,total,diffusion,kl\n";
  char buf[160];
  for (const auto& s : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g\n", s.step, s.epoch, s.total, s.diffusion, s.kl);
    os << buf;
  }
  if (!os) throw IoError("write failed for " + path.string());
}

}  // namespace qsd::pipeline
