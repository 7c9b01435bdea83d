// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "qsd/diffusion/model.hpp"
#include "qsd/diffusion/schedule.hpp"
#include "qsd/numerics/rng.hpp"
#include "qsd/numerics/tensor.hpp"

namespace qsd::net {

using num::Tensor;

struct DenoiserConfig {
  std::size_t in_channels = 3;
  std::size_t cond_channels = 6;
  std::size_t base_width = 32;
  std::size_t depth = 2;
  std::size_t time_embed_dim = 64;
  /// Probability of replacing the condition by the null map during training.
  double null_cond_prob = 0.2;
  int groups = 8;

  /// Throws ConfigError on an invalid combination.
  void validate() const;
  /// Channel width of resolution level l.
  std::size_t width(std::size_t level) const;
  bool operator==(const DenoiserConfig&) const = default;
};

/// Sinusoidal embedding, one row per timestep: (N, dim) with entry 2i =
/// sin(t w_i), 2i+1 = cos(t w_i), w_i = 10000^(-2i/dim). dim must be even.
Tensor time_embedding(const std::vector<int>& t, std::size_t dim);

enum class LayerKind { conv, linear, group_norm };

/// A parameterized layer. conv/linear layers own "<name>.weight" and
/// "<name>.bias"; group norms own "<name>.gamma" and "<name>.beta".
struct LayerInfo {
  std::string name;
  LayerKind kind = LayerKind::conv;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  /// Spatial size is image size / 2^level; linear layers use level 0 and act per sample.
  std::size_t level = 0;
  /// Nonzero when the layer input is concat(a, b): channel count of a.
  std::size_t concat_split = 0;
  std::size_t block = 0;
  /// Position in BlockGraph::layers.
  std::size_t index = 0;

  std::string weight_name() const;
  std::string bias_name() const;
  std::vector<std::string> param_names() const;
};

enum class BlockKind { time_embed, input_conv, res, output };

/// Named activations flowing between blocks. Keys: "x", "y", "temb", "h",
/// "skip<l>", "out".
using ActivationState = std::map<std::string, Tensor>;

struct Block {
  std::string name;
  BlockKind kind = BlockKind::res;
  /// Layers owned by the block, in execution order.
  std::vector<std::size_t> layers;
  /// True when the block's first input is a channel concatenation.
  bool concat_input = false;
  /// State keys read, and the key written.
  std::vector<std::string> inputs;
  std::string output;
  /// Residual blocks: level of the input before any pool/upsample; pool or
  /// upsample applied first; skip key concatenated after it; skip key written.
  bool pool_input = false;
  bool upsample_input = false;
  std::string concat_key;
  std::string save_as;
};

/// Blocks in a valid execution order; layers partition the model's parameters.
struct BlockGraph {
  std::vector<Block> blocks;
  std::vector<LayerInfo> layers;
};

/// Supplies the weights a layer uses, and optionally transforms a layer's
/// input. The default returns the stored full-precision tensors unchanged.
class WeightProvider {
 public:
  virtual ~WeightProvider() = default;
  virtual Tensor weight(const LayerInfo& layer, const Tensor& stored) const { (void)layer; return stored; }
  virtual Tensor activation(const LayerInfo& layer, const Tensor& x) const { (void)layer; return x; }
};

/// Named parameter tensors in creation order.
class ParamStore {
 public:
  void add(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor> tensors() const;
  std::size_t total() const;

 private:
  std::vector<std::string> names_;
  std::map<std::string, Tensor> index_;
};

/// Concatenation-conditioned U-Net predicting (eps, v) from (x_t, t, y).
/// Output channels [0, in) are eps; [in, 2 in) pass through a sigmoid into v.
class Denoiser : public diffusion::EpsModel {
 public:
  Denoiser(const DenoiserConfig& cfg, num::RngStream& init);

  const DenoiserConfig& config() const { return cfg_; }
  const BlockGraph& graph() const { return graph_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::size_t parameter_count() const { return params_.total(); }

  /// Routes every layer through `p`; nullptr restores full precision.
  void set_weight_provider(const WeightProvider* p) { provider_ = p; }
  const WeightProvider* weight_provider() const { return provider_; }

  diffusion::ModelOutput forward(const Tensor& x, const std::vector<int>& t, const Tensor& y) override;

  /// Block-wise execution: initial_state, run_block for each block in order,
  /// then output_from. `provider` may be nullptr.
  ActivationState initial_state(const Tensor& x, const std::vector<int>& t, const Tensor& y) const;
  void run_block(std::size_t index, ActivationState& state, const WeightProvider* provider) const;
  diffusion::ModelOutput output_from(const ActivationState& state) const;

  /// Applies a single layer; exposed for block calibration.
  Tensor apply_layer(const LayerInfo& layer, const Tensor& x, const WeightProvider* provider) const;

 private:
  Tensor res_block(const Block& b, const Tensor& h, const Tensor& temb, const WeightProvider* p) const;
  void check_inputs(const Tensor& x, const std::vector<int>& t, const Tensor& y) const;

  DenoiserConfig cfg_;
  BlockGraph graph_;
  ParamStore params_;
  const WeightProvider* provider_ = nullptr;
};

/// Builds the block graph for a config without allocating parameters.
BlockGraph enumerate_blocks(const DenoiserConfig& cfg);
/// Exact parameter count of a config.
std::size_t parameter_count(const DenoiserConfig& cfg);
/// Splits a network output (N, 2 in, H, W) into eps and sigmoid-bounded v.
diffusion::ModelOutput split_output(const Tensor& out, std::size_t in_channels);

struct Checkpoint {
  DenoiserConfig config;
  std::size_t schedule_steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::map<std::string, Tensor> params;
};

void save_checkpoint(const std::filesystem::path& path, const Denoiser& model, const diffusion::NoiseSchedule& sched);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Rebuilds a model from a checkpoint; throws IoError on missing or misshaped parameters.
Denoiser model_from_checkpoint(const Checkpoint& ck);
diffusion::NoiseSchedule schedule_from_checkpoint(const Checkpoint& ck);

}  // namespace qsd::net
