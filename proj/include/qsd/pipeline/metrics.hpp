// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qsd/diffusion/model.hpp"
#include "qsd/diffusion/schedule.hpp"
#include "qsd/net/denoiser.hpp"
#include "qsd/pipeline/config.hpp"
#include "qsd/pipeline/dataset.hpp"
#include "qsd/quant/qcheckpoint.hpp"

namespace qsd::pipeline {

std::uint64_t conv_flops(std::size_t cin, std::size_t cout, std::size_t k, std::size_t hout, std::size_t wout);
std::uint64_t linear_flops(std::size_t in, std::size_t out);
/// Normalization or activation over `elements` values.
std::uint64_t elementwise_flops(std::size_t elements);

struct FlopsEntry {
  std::string name;
  std::uint64_t flops = 0;
  /// Multiply-adds against a weight tensor (conv, linear).
  bool weight_op = false;
};

inline constexpr const char* kFlopsConvention =
    "FLOPs per network evaluation of one sample: conv 2*Cin*Cout*K^2*Hout*Wout, linear 2*in*out, "
    "normalization and activation 5*elements; weighted = weight-op FLOPs * bits/32 + all other FLOPs";

struct FlopsReport {
  std::vector<FlopsEntry> entries;
  std::uint64_t weight_ops = 0;
  std::uint64_t other_ops = 0;

  std::uint64_t raw() const { return weight_ops + other_ops; }
  /// Raw count for bits >= 32.
  double weighted(int bits) const;
};

/// Analytic count over the layer graph for (height, width) inputs. Pooling,
/// upsampling, concatenation and residual additions are not counted.
FlopsReport flops_count(const net::DenoiserConfig& cfg, std::size_t height, std::size_t width);

struct ConditionRow {
  std::string model;
  /// Empty for the clean channel.
  std::optional<double> psnr_db;
  double mse = 0.0;
  double miou = 0.0;
  std::size_t count = 0;
  bool operator==(const ConditionRow&) const = default;
};

struct ModelRow {
  std::string model;
  int bits = 32;
  std::uint64_t payload_bits = 0;
  std::uint64_t metadata_bits = 0;
  double size_reduction_pct = 0.0;
  std::uint64_t flops_raw = 0;
  double flops_weighted = 0.0;
  double flops_reduction_pct = 0.0;
  bool operator==(const ModelRow&) const = default;
};

struct MetricsReport {
  std::vector<ConditionRow> conditions;
  std::vector<ModelRow> models;
};

struct EvalModel {
  std::string name;
  diffusion::EpsModel* model = nullptr;
  int bits = 32;
  quant::SizeReport size;
};

/// Map sets the evaluation maps must not overlap.
struct HeldOutMaps {
  std::vector<channel::SemanticMap> train;
  std::vector<channel::SemanticMap> calib;
};

/// For every PSNR in cfg.eval.psnr_list and every model: mean per-pixel MSE
/// of the regenerated image against the rendered ground truth, and mIoU of
/// the transmitted map against the nearest-palette classification of the
/// regenerated image. Every model sees the same channel noise and x_T.
/// When `image_dir` is non-empty, writes one grid per condition
/// (map | ground truth | one column per model) as P6 files.
MetricsReport evaluate(const std::vector<EvalModel>& models, const diffusion::NoiseSchedule& sched,
                       const std::vector<Example>& eval_set, const HeldOutMaps& others, const RunConfig& cfg,
                       std::uint64_t seed, const std::filesystem::path& image_dir = {});

ModelRow model_row(const std::string& name, int bits, const quant::SizeReport& size, const FlopsReport& flops);

/// "clean" or the PSNR with up to 9 significant digits.
std::string psnr_label(std::optional<double> psnr_db);

// CSV schemas.
inline constexpr const char* kConditionHeader = "model,psnr_db,mse,miou,count";
inline constexpr const char* kModelHeader =
    "model,bits,payload_bits,metadata_bits,size_reduction_pct,flops_raw,flops_weighted,flops_reduction_pct";

void write_conditions_csv(const std::filesystem::path& path, const std::vector<ConditionRow>& rows);
void write_models_csv(const std::filesystem::path& path, const std::vector<ModelRow>& rows);
std::vector<ConditionRow> read_conditions_csv(const std::filesystem::path& path);
std::vector<ModelRow> read_models_csv(const std::filesystem::path& path);

/// One row per model: bits, size, FLOPs, then mse and miou per channel
/// condition in first-seen order. Models without a size row keep empty
/// size cells; missing conditions are empty.
struct SummaryTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
SummaryTable summarize(const std::vector<ModelRow>& models, const std::vector<ConditionRow>& conditions);
void write_summary_csv(const std::filesystem::path& path, const SummaryTable& t);
/// Markdown table preceded by the FLOPs convention line.
void write_summary_markdown(const std::filesystem::path& path, const SummaryTable& t);

}  // namespace qsd::pipeline
