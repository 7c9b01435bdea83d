// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "qsd/numerics/rng.hpp"
#include "qsd/numerics/tensor.hpp"

namespace qsd::channel {

/// Per-pixel class ids, row-major.
struct SemanticMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::vector<std::uint16_t> ids;

  SemanticMap() = default;
  SemanticMap(std::size_t h, std::size_t w, std::size_t c, std::vector<std::uint16_t> ids);

  std::uint16_t at(std::size_t y, std::size_t x) const { return ids[y * width + x]; }
  /// Throws ConfigError when an id is out of range or C < 2.
  void validate() const;
  /// Content hash used by the leakage guard.
  std::uint64_t fingerprint() const;

  bool operator==(const SemanticMap&) const = default;
};

/// One-hot tensor (C, H, W). `psnr_db` is empty for a clean encoding.
struct OneHotMap {
  num::Tensor tensor;
  std::optional<double> psnr_db;
};

/// Peak value of the normalized one-hot encoding; the PSNR reference.
inline constexpr double kPeak = 1.0;
/// Returned by measure_psnr when the two tensors are identical.
inline constexpr double kPsnrCap = 200.0;

OneHotMap encode_map(const SemanticMap& map);
/// Per-pixel argmax over channels; ties resolve to the lowest class id.
SemanticMap decode_argmax(const num::Tensor& onehot);

struct Bandwidth {
  std::uint64_t compressed_bits = 0;
  std::uint64_t uncompressed_bits = 0;
  std::uint64_t runs = 0;
};

/// Bits needed to code one class id.
unsigned class_bits(std::size_t classes);
/// Run-length cost over the row-major scan: ceil(log2 C) class bits plus a
/// 16-bit length per run. Runs longer than 65535 pixels are split.
Bandwidth bandwidth_bits(const SemanticMap& map);

/// Noise standard deviation giving `psnr_db` against a unit peak.
double noise_sigma(double psnr_db);

/// y = x + sigma * z. An empty `psnr_db` is the clean-channel sentinel and
/// returns the input unchanged without consuming draws.
OneHotMap awgn(const OneHotMap& x, std::optional<double> psnr_db, num::RngStream& stream);

/// 10 log10(MAX^2 / MSE), capped at kPsnrCap.
double measure_psnr(const num::Tensor& clean, const num::Tensor& noisy);

// Map file: "H W C" header line, then H lines of W class ids.
void write_map_file(const std::filesystem::path& path, const SemanticMap& map);
SemanticMap read_map_file(const std::filesystem::path& path);

// Noisy map file: u32 tag (0 clean, 1 psnr), f32 psnr, tensor block.
void write_noisy_map(const std::filesystem::path& path, const OneHotMap& map);
OneHotMap read_noisy_map(const std::filesystem::path& path);

}  // namespace qsd::channel
