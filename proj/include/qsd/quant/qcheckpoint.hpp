// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qsd/net/denoiser.hpp"
#include "qsd/quant/quant_model.hpp"

namespace qsd::quant {

/// One stored quantizer: integer codes of a weight tensor or channel slice.
struct QuantRecord {
  std::string key;
  std::string weight_name;
  std::size_t begin = 0;
  std::size_t end = 0;
  int bits = 8;
  float scale = 1.0f;
  std::int32_t c_min = 0;
  std::int32_t c_max = 0;
  num::Shape shape;
  std::vector<std::int32_t> codes;
};

struct QuantizedCheckpoint {
  /// Weights hold the dequantized values; everything else is full precision.
  net::Checkpoint base;
  std::vector<QuantRecord> records;
  int bits = 32;
};

/// Bits of a quantizer's side information: scale and both clip bounds, 32 bits each.
inline constexpr std::uint64_t kMetadataBitsPerQuantizer = 96;

struct TensorSize {
  std::string key;
  std::size_t numel = 0;
  int bits = 32;
  std::uint64_t payload_bits = 0;
};

/// Weight payload of conv/linear weights. Biases and normalization
/// parameters stay full precision and are not part of the payload.
struct SizeReport {
  std::vector<TensorSize> tensors;
  std::uint64_t payload_bits = 0;
  std::uint64_t metadata_bits = 0;
  std::uint64_t fp_payload_bits = 0;
  /// 1 - payload / fp_payload; 0 for an empty model.
  double reduction() const;
};

SizeReport size_bits(const QuantModel& qm);
SizeReport size_bits(const QuantizedCheckpoint& ck);
/// Full-precision model: 32 bits per weight element, no metadata.
SizeReport size_bits(const net::Denoiser& model);

void save_quantized(const std::filesystem::path& path, const QuantModel& qm, const diffusion::NoiseSchedule& sched);
QuantizedCheckpoint load_quantized(const std::filesystem::path& path);

}  // namespace qsd::quant
