// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/channel/channel.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <string>

#include "qsd/error.hpp"
#include "qsd/numerics/random.hpp"
#include "qsd/numerics/serialize.hpp"

namespace qsd::channel {

SemanticMap::SemanticMap(std::size_t h, std::size_t w, std::size_t c, std::vector<std::uint16_t> v)
    : height(h), width(w), classes(c), ids(std::move(v)) {
  validate();
}

void SemanticMap::validate() const {
  if (classes < 2) throw ConfigError("semantic map: need at least 2 classes, got " + std::to_string(classes));
  if (height == 0 || width == 0) throw ConfigError("semantic map: empty grid");
  if (ids.size() != height * width)
    throw ConfigError("semantic map: " + std::to_string(ids.size()) + " ids for " + std::to_string(height) + "x" +
                      std::to_string(width));
  for (auto id : ids)
    if (id >= classes)
      throw ConfigError("semantic map: class id " + std::to_string(id) + " >= C = " + std::to_string(classes));
}

std::uint64_t SemanticMap::fingerprint() const {
  std::string bytes = std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(classes) + ":";
  bytes.reserve(bytes.size() + ids.size() * 2);
  for (auto id : ids) {
    bytes.push_back(static_cast<char>(id & 0xff));
    bytes.push_back(static_cast<char>(id >> 8));
  }
  return num::fnv1a64(bytes);
}

OneHotMap encode_map(const SemanticMap& map) {
  map.validate();
  const std::size_t hw = map.height * map.width;
  num::Tensor t({map.classes, map.height, map.width}, 0.0f);
  auto d = t.mutable_data();
  for (std::size_t p = 0; p < hw; ++p) d[map.ids[p] * hw + p] = static_cast<float>(kPeak);
  return OneHotMap{t, std::nullopt};
}

SemanticMap decode_argmax(const num::Tensor& onehot) {
  if (onehot.rank() != 3) throw ShapeError("decode_argmax: expected (C,H,W), got " + num::shape_str(onehot.shape()));
  const std::size_t c = onehot.dim(0), h = onehot.dim(1), w = onehot.dim(2), hw = h * w;
  std::vector<std::uint16_t> ids(hw);
  for (std::size_t p = 0; p < hw; ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (onehot[k * hw + p] > onehot[best * hw + p]) best = k;
    ids[p] = static_cast<std::uint16_t>(best);
  }
  return SemanticMap(h, w, c, std::move(ids));
}

unsigned class_bits(std::size_t classes) {
  if (classes < 2) throw ConfigError("class_bits: need at least 2 classes");
  return static_cast<unsigned>(std::bit_width(classes - 1));
}

Bandwidth bandwidth_bits(const SemanticMap& map) {
  map.validate();
  constexpr std::uint64_t kMaxRun = 65535;
  constexpr std::uint64_t kLengthBits = 16;
  const std::uint64_t cb = class_bits(map.classes);
  Bandwidth bw;
  bw.uncompressed_bits = static_cast<std::uint64_t>(map.ids.size()) * cb;
  std::size_t i = 0;
  while (i < map.ids.size()) {
    std::size_t j = i + 1;
    while (j < map.ids.size() && map.ids[j] == map.ids[i] && j - i < kMaxRun) ++j;
    ++bw.runs;
    i = j;
  }
  bw.compressed_bits = bw.runs * (cb + kLengthBits);
  return bw;
}

double noise_sigma(double psnr_db) { return kPeak * std::pow(10.0, -psnr_db / 20.0); }

OneHotMap awgn(const OneHotMap& x, std::optional<double> psnr_db, num::RngStream& stream) {
  if (!psnr_db) return OneHotMap{x.tensor, std::nullopt};
  if (*psnr_db < 0.0) throw ConfigError("awgn: PSNR must be >= 0 dB, got " + std::to_string(*psnr_db));
  const float sigma = static_cast<float>(noise_sigma(*psnr_db));
  num::Tensor z = num::sample_normal(stream, x.tensor.shape());
  std::vector<float> y(x.tensor.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.tensor[i] + sigma * z[i];
  return OneHotMap{num::Tensor(x.tensor.shape(), std::move(y)), psnr_db};
}

double measure_psnr(const num::Tensor& clean, const num::Tensor& noisy) {
  if (clean.shape() != noisy.shape())
    throw ShapeError("measure_psnr: shapes " + num::shape_str(clean.shape()) + " and " +
                     num::shape_str(noisy.shape()) + " differ");
  double se = 0.0;
  for (std::size_t i = 0; i < clean.numel(); ++i) {
    const double d = static_cast<double>(clean[i]) - static_cast<double>(noisy[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(clean.numel());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(kPeak * kPeak / mse));
}

void write_map_file(const std::filesystem::path& path, const SemanticMap& map) {
  map.validate();
  std::ofstream os(path);
  if (!os) throw IoError("cannot write map file " + path.string());
  os << map.height << ' ' << map.width << ' ' << map.classes << '\n';
  for (std::size_t y = 0; y < map.height; ++y) {
    for (std::size_t x = 0; x < map.width; ++x) os << (x ? " " : "") << map.at(y, x);
    os << '\n';
  }
}

SemanticMap read_map_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError(path.string(), "map file not found: " + path.string());
  std::size_t h = 0, w = 0, c = 0;
  if (!(is >> h >> w >> c)) throw IoError("map file " + path.string() + ": bad header");
  std::vector<std::uint16_t> ids(h * w);
  for (auto& id : ids) {
    long v;
    if (!(is >> v) || v < 0 || v > 65535) throw IoError("map file " + path.string() + ": bad class id");
    id = static_cast<std::uint16_t>(v);
  }
  return SemanticMap(h, w, c, std::move(ids));
}

void write_noisy_map(const std::filesystem::path& path, const OneHotMap& map) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  num::write_u32(os, map.psnr_db ? 1u : 0u);
  num::write_f32(os, map.psnr_db ? static_cast<float>(*map.psnr_db) : 0.0f);
  num::write_tensor(os, map.tensor);
}

OneHotMap read_noisy_map(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError(path.string(), "noisy map not found: " + path.string());
  const auto tag = num::read_u32(is);
  const float psnr = num::read_f32(is);
  OneHotMap m{num::read_tensor(is), std::nullopt};
  if (tag == 1) m.psnr_db = psnr;
  else if (tag != 0) throw IoError("noisy map: unknown tag");
  return m;
}

}  // namespace qsd::channel
