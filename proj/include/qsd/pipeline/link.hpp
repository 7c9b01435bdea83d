// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "qsd/channel/channel.hpp"
#include "qsd/diffusion/model.hpp"
#include "qsd/diffusion/schedule.hpp"
#include "qsd/pipeline/config.hpp"

namespace qsd::pipeline {

struct LinkResult {
  /// Regenerated images (3, H, W), one per map.
  std::vector<num::Tensor> images;
  /// Received (noisy) one-hot maps.
  std::vector<num::Tensor> received;
  std::vector<channel::Bandwidth> bandwidth;
};

/// Sender encodes each map, the channel corrupts it at `psnr_db` (empty: clean
/// channel), the receiver samples an image conditioned on it. Map i draws its
/// channel noise from (seed, "link/channel/i"), x_T from (seed, "link/xT/i")
/// and DDPM step noise from (seed, "link/ddpm/i"), so each image depends only
/// on (model, map, psnr, seed, i).
LinkResult run_link(diffusion::EpsModel& model, const diffusion::NoiseSchedule& sched,
                    const std::vector<channel::SemanticMap>& maps, std::optional<double> psnr_db,
                    const EvalSpec& spec, std::uint64_t seed);

/// Binary PPM (P6). `image` is (3, H, W) in [-1, 1]; values are clamped and
/// mapped to round((v + 1) * 127.5).
void write_ppm(const std::filesystem::path& path, const num::Tensor& image);

/// Tiles equally sized (3, H, W) images into a grid, row-major, with a
/// one-pixel white border.
num::Tensor image_grid(const std::vector<num::Tensor>& images, std::size_t cols);

/// Palette rendering of a map without texture or jitter.
num::Tensor colorize(const channel::SemanticMap& map);

}  // namespace qsd::pipeline
