// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "qsd/channel/channel.hpp"
#include "qsd/numerics/tensor.hpp"

namespace qsd::pipeline {

struct DatasetSpec;

/// Amplitude of the fixed per-class sinusoidal texture.
inline constexpr double kTextureAmplitude = 0.1;
/// Standard deviation of the seeded texture jitter.
inline constexpr double kJitterSigma = 0.05;

using Color = std::array<double, 3>;

/// Base color of class `c` in [-1, 1]^3. The first eight classes sit on the
/// corners of the cube scaled by 0.6; further classes take seeded colors.
Color class_color(std::size_t c, std::size_t classes);

/// Image (3, H, W) in [-1, 1]: base color + class texture + jitter drawn from
/// stream (seed, "render").
num::Tensor render_image(const channel::SemanticMap& map, std::uint64_t seed);

struct Example {
  channel::SemanticMap map;
  num::Tensor image;
  /// Jitter seed used by render_image.
  std::uint64_t render_seed = 0;
};

/// Background plus 2 to 4 axis-aligned rectangles. Example i uses streams
/// (seed, "synth/map/i") and render seed derived from (seed, i).
std::vector<Example> synth_dataset(std::size_t n, std::size_t height, std::size_t width, std::size_t classes,
                                   std::uint64_t seed);

struct Splits {
  std::vector<Example> train;
  std::vector<Example> calib;
  std::vector<Example> eval;
};

/// Three pairwise-disjoint splits (by map content) drawn from one stream;
/// duplicate maps are skipped.
Splits synth_splits(const DatasetSpec& spec);

/// Throws LeakageError naming the two sets when any map occurs in both.
void check_disjoint(const std::vector<channel::SemanticMap>& a, const char* a_name,
                    const std::vector<channel::SemanticMap>& b, const char* b_name);

std::vector<channel::SemanticMap> maps_of(const std::vector<Example>& xs);

/// Per-pixel nearest base color (ties to the lowest id).
channel::SemanticMap classify_image(const num::Tensor& image, std::size_t classes);

/// Mean intersection over union across the classes present in either map.
double mean_iou(const channel::SemanticMap& truth, const channel::SemanticMap& pred);

}  // namespace qsd::pipeline
