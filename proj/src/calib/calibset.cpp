// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/calib/calibset.hpp"

#include <algorithm>
#include <fstream>
#include <string>

#include "qsd/diffusion/sampler.hpp"
#include "qsd/error.hpp"
#include "qsd/numerics/ops.hpp"
#include "qsd/numerics/random.hpp"
#include "qsd/numerics/serialize.hpp"

namespace qsd::calib {

using num::Tensor;

namespace {
constexpr char kMagic[] = "QSDCSET1";
constexpr std::uint32_t kVersion = 1;

Tensor with_batch_dim(const Tensor& t) {
  num::Shape s{1};
  s.insert(s.end(), t.shape().begin(), t.shape().end());
  return t.reshape(std::move(s));
}

Tensor sample_of(const Tensor& batch, std::size_t i) {
  Tensor one = num::gather_batch(batch, {i});
  return one.reshape(num::Shape(batch.shape().begin() + 1, batch.shape().end()));
}

CalibrationSet build(diffusion::EpsModel& model, std::size_t image_channels, const diffusion::NoiseSchedule& sched,
                     const std::vector<channel::SemanticMap>& maps, const CalibSetConfig& cfg, bool noisy) {
  cfg.validate();
  if (maps.empty()) throw ConfigError("calibration set: no conditioning maps");
  if (image_channels == 0) throw ConfigError("calibration set: image_channels must be >= 1");
  for (const auto& m : maps) {
    m.validate();
    if (m.height != maps[0].height || m.width != maps[0].width || m.classes != maps[0].classes)
      throw ShapeError("calibration set: conditioning maps differ in size or class count");
  }
  diffusion::DdimOptions opt;
  opt.steps = cfg.ddim_steps;
  opt.eta = 0.0;
  opt.guidance_scale = cfg.guidance_scale;
  opt.tap_stride = cfg.tap_stride;

  const std::size_t n_traj = cfg.trajectories();
  const std::size_t L = cfg.psnr_levels.size();
  CalibrationSet set{cfg, {}, {}};
  set.samples.reserve(cfg.n_samples);
  for (std::size_t first = 0; first < n_traj; first += cfg.batch) {
    const std::size_t last = std::min(n_traj, first + cfg.batch);
    std::vector<Tensor> xs, ys;
    std::vector<std::optional<double>> levels;
    for (std::size_t i = first; i < last; ++i) {
      const auto& map = maps[i % maps.size()];
      num::RngStream xs_stream(cfg.seed, "calib/xT/" + std::to_string(i));
      xs.push_back(num::sample_normal(xs_stream, {1, image_channels, map.height, map.width}));
      std::optional<double> level;
      if (noisy) level = cfg.psnr_levels[i % L];
      num::RngStream ch_stream(cfg.seed, "calib/channel/" + std::to_string(i));
      ys.push_back(with_batch_dim(channel::awgn(channel::encode_map(map), level, ch_stream).tensor));
      levels.push_back(level);
    }
    const Tensor y = num::concat_batch(ys);
    // eta = 0 draws nothing from this stream.
    num::RngStream unused(cfg.seed, "calib/ddim");
    auto res = diffusion::ddim_sample_from(model, num::concat_batch(xs), y, sched, opt, unused);
    if (set.taps.empty())
      for (const auto& tap : res.taps) set.taps.push_back(tap.t);
    for (std::size_t j = 0; j < last - first; ++j)
      for (const auto& tap : res.taps)
        set.samples.push_back(CalibrationSample{sample_of(tap.x_t, j), tap.t, sample_of(y, j), levels[j],
                                                (first + j) % maps.size()});
  }
  if (set.samples.size() != cfg.n_samples)
    throw Error("calibration set: produced " + std::to_string(set.samples.size()) + " samples, expected " +
                std::to_string(cfg.n_samples));
  return set;
}
}  // namespace

std::vector<double> linspace(std::size_t n, double lo, double hi) {
  if (n == 0) return {};
  if (n == 1) return {lo};
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  v.back() = hi;
  return v;
}

CalibSetConfig CalibSetConfig::paper_preset() { return CalibSetConfig{}; }

CalibSetConfig CalibSetConfig::desk_preset() {
  CalibSetConfig c;
  c.ddim_steps = 40;
  c.tap_stride = 10;
  return c;
}

std::size_t CalibSetConfig::trajectories() const {
  const std::size_t k = taps_per_trajectory();
  return k ? n_samples / k : 0;
}

void CalibSetConfig::validate() const {
  if (n_samples == 0) throw ConfigError("calibration set: n_samples must be >= 1");
  if (tap_stride == 0 || tap_stride > ddim_steps)
    throw ConfigError("calibration set: tap_stride must be in [1, ddim_steps]");
  if (batch == 0) throw ConfigError("calibration set: batch must be >= 1");
  if (psnr_levels.empty()) throw ConfigError("calibration set: psnr level list is empty");
  for (double p : psnr_levels)
    if (!(p >= 0.0)) throw ConfigError("calibration set: psnr levels must be >= 0");
  const std::size_t k = taps_per_trajectory();
  if (n_samples % k != 0)
    throw ConfigError("calibration set: n_samples " + std::to_string(n_samples) + " is not a multiple of the " +
                      std::to_string(k) + " taps per trajectory");
  if (n_samples % psnr_levels.size() != 0 || trajectories() % psnr_levels.size() != 0)
    throw ConfigError("calibration set: " + std::to_string(trajectories()) + " trajectories of " +
                      std::to_string(k) + " taps cannot be split evenly over " +
                      std::to_string(psnr_levels.size()) + " psnr levels");
}

CalibrationSet build_calibration_set(diffusion::EpsModel& model, std::size_t image_channels,
                                     const diffusion::NoiseSchedule& sched,
                                     const std::vector<channel::SemanticMap>& maps, const CalibSetConfig& cfg) {
  return build(model, image_channels, sched, maps, cfg, true);
}

CalibrationSet timestep_only_variant(diffusion::EpsModel& model, std::size_t image_channels,
                                     const diffusion::NoiseSchedule& sched,
                                     const std::vector<channel::SemanticMap>& maps, const CalibSetConfig& cfg) {
  return build(model, image_channels, sched, maps, cfg, false);
}

quant::CalibInputs to_inputs(const CalibrationSet& set) {
  if (set.samples.empty()) throw ConfigError("calibration set is empty");
  std::vector<Tensor> xs, ys;
  quant::CalibInputs in;
  for (const auto& s : set.samples) {
    xs.push_back(with_batch_dim(s.x_t));
    ys.push_back(with_batch_dim(s.y_noisy));
    in.t.push_back(s.t);
  }
  in.x = num::concat_batch(xs);
  in.y = num::concat_batch(ys);
  return in;
}

void save_calibration_set(const std::filesystem::path& path, const CalibrationSet& set) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write calibration set " + path.string());
  const auto& c = set.config;
  os.write(kMagic, 8);
  num::write_u32(os, kVersion);
  num::write_u64(os, c.n_samples);
  num::write_u64(os, c.ddim_steps);
  num::write_u64(os, c.tap_stride);
  num::write_f64(os, c.guidance_scale);
  num::write_u64(os, c.batch);
  num::write_u64(os, c.seed);
  num::write_u64(os, c.psnr_levels.size());
  for (double p : c.psnr_levels) num::write_f64(os, p);
  num::write_u64(os, set.taps.size());
  for (int t : set.taps) num::write_u32(os, static_cast<std::uint32_t>(t));
  num::write_u64(os, set.samples.size());
  for (const auto& s : set.samples) {
    num::write_u32(os, static_cast<std::uint32_t>(s.t));
    num::write_u32(os, s.psnr_level ? 1u : 0u);
    num::write_f64(os, s.psnr_level.value_or(0.0));
    num::write_u64(os, s.map_index);
    num::write_tensor(os, s.x_t);
    num::write_tensor(os, s.y_noisy);
  }
  if (!os) throw IoError("write failed for " + path.string());
}

CalibrationSet load_calibration_set(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError(path.string(), "calibration set not found: " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != std::string(kMagic, 8))
    throw IoError("calibration set " + path.string() + ": bad magic");
  if (num::read_u32(is) != kVersion) throw IoError("calibration set: unsupported version");
  CalibrationSet set;
  auto& c = set.config;
  c.n_samples = num::read_u64(is);
  c.ddim_steps = num::read_u64(is);
  c.tap_stride = num::read_u64(is);
  c.guidance_scale = num::read_f64(is);
  c.batch = num::read_u64(is);
  c.seed = num::read_u64(is);
  const auto nl = num::read_u64(is);
  if (nl > 4096) throw IoError("calibration set: implausible level count");
  c.psnr_levels.resize(nl);
  for (auto& p : c.psnr_levels) p = num::read_f64(is);
  const auto nt = num::read_u64(is);
  if (nt > 1u << 20) throw IoError("calibration set: implausible tap count");
  set.taps.resize(nt);
  for (auto& t : set.taps) t = static_cast<int>(num::read_u32(is));
  const auto ns = num::read_u64(is);
  if (ns != c.n_samples) throw IoError("calibration set: sample count does not match its manifest");
  for (std::uint64_t i = 0; i < ns; ++i) {
    CalibrationSample s;
    s.t = static_cast<int>(num::read_u32(is));
    const bool has = num::read_u32(is) != 0;
    const double p = num::read_f64(is);
    if (has) s.psnr_level = p;
    s.map_index = num::read_u64(is);
    s.x_t = num::read_tensor(is);
    s.y_noisy = num::read_tensor(is);
    set.samples.push_back(std::move(s));
  }
  c.validate();
  return set;
}

}  // namespace qsd::calib
