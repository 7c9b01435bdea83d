// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/net/denoiser.hpp"

#include <cmath>
#include <fstream>

#include "qsd/error.hpp"
#include "qsd/numerics/ops.hpp"
#include "qsd/numerics/random.hpp"
#include "qsd/numerics/serialize.hpp"

namespace qsd::net {

void DenoiserConfig::validate() const {
  if (in_channels < 1) throw ConfigError("denoiser: in_channels must be >= 1");
  if (cond_channels < 2) throw ConfigError("denoiser: cond_channels must be >= 2");
  if (depth < 1) throw ConfigError("denoiser: depth must be >= 1");
  if (groups < 1) throw ConfigError("denoiser: groups must be >= 1");
  if (base_width == 0 || base_width % static_cast<std::size_t>(groups) != 0)
    throw ConfigError("denoiser: base_width " + std::to_string(base_width) + " must be a multiple of groups " +
                      std::to_string(groups));
  if (time_embed_dim == 0 || time_embed_dim % 2 != 0) throw ConfigError("denoiser: time_embed_dim must be even");
  if (!(null_cond_prob >= 0.0 && null_cond_prob <= 1.0)) throw ConfigError("denoiser: null_cond_prob outside [0, 1]");
}

std::size_t DenoiserConfig::width(std::size_t level) const { return level == 0 ? base_width : 2 * base_width; }

Tensor time_embedding(const std::vector<int>& t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("time_embedding: dim must be even, got " + std::to_string(dim));
  if (t.empty()) throw ShapeError("time_embedding: no timesteps");
  std::vector<float> v(t.size() * dim);
  for (std::size_t n = 0; n < t.size(); ++n)
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double w = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      const double arg = static_cast<double>(t[n]) * w;
      v[n * dim + 2 * i] = static_cast<float>(std::sin(arg));
      v[n * dim + 2 * i + 1] = static_cast<float>(std::cos(arg));
    }
  return Tensor({t.size(), dim}, std::move(v));
}

std::string LayerInfo::weight_name() const { return name + (kind == LayerKind::group_norm ? ".gamma" : ".weight"); }
std::string LayerInfo::bias_name() const { return name + (kind == LayerKind::group_norm ? ".beta" : ".bias"); }
std::vector<std::string> LayerInfo::param_names() const { return {weight_name(), bias_name()}; }

void ParamStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw Error("param store: duplicate parameter " + name);
  names_.push_back(name);
  index_.emplace(name, std::move(t));
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("param store: unknown parameter " + name);
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("param store: unknown parameter " + name);
  return it->second;
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  for (const auto& n : names_) out.push_back(index_.at(n));
  return out;
}

std::size_t ParamStore::total() const {
  std::size_t n = 0;
  for (const auto& [_, t] : index_) n += t.numel();
  return n;
}

namespace {

struct GraphBuilder {
  BlockGraph g;

  std::size_t layer(Block& b, std::string name, LayerKind kind, std::size_t cin, std::size_t cout, std::size_t k,
                    std::size_t level, std::size_t split = 0) {
    LayerInfo li;
    li.name = std::move(name);
    li.kind = kind;
    li.in_channels = cin;
    li.out_channels = cout;
    li.kernel = k;
    li.level = level;
    li.concat_split = split;
    li.block = g.blocks.size();
    li.index = g.layers.size();
    g.layers.push_back(li);
    b.layers.push_back(g.layers.size() - 1);
    return g.layers.size() - 1;
  }

  void res(const DenoiserConfig& cfg, const std::string& name, std::size_t cin, std::size_t cout, std::size_t level,
           std::size_t split, Block b) {
    b.name = name;
    b.kind = BlockKind::res;
    b.concat_input = split > 0;
    b.output = "h";
    layer(b, name + ".gn1", LayerKind::group_norm, cin, cin, 1, level);
    layer(b, name + ".conv1", LayerKind::conv, cin, cout, 3, level, split);
    layer(b, name + ".temb", LayerKind::linear, cfg.time_embed_dim, cout, 1, 0);
    layer(b, name + ".gn2", LayerKind::group_norm, cout, cout, 1, level);
    layer(b, name + ".conv2", LayerKind::conv, cout, cout, 3, level);
    if (cin != cout) layer(b, name + ".skip", LayerKind::conv, cin, cout, 1, level, split);
    g.blocks.push_back(std::move(b));
  }
};

}  // namespace

BlockGraph enumerate_blocks(const DenoiserConfig& cfg) {
  cfg.validate();
  GraphBuilder gb;
  const std::size_t d = cfg.time_embed_dim;
  {
    Block b;
    b.name = "time";
    b.kind = BlockKind::time_embed;
    b.inputs = {"tsin"};
    b.output = "temb";
    gb.layer(b, "time.lin0", LayerKind::linear, d, d, 1, 0);
    gb.layer(b, "time.lin1", LayerKind::linear, d, d, 1, 0);
    gb.g.blocks.push_back(std::move(b));
  }
  {
    Block b;
    b.name = "input";
    b.kind = BlockKind::input_conv;
    b.inputs = {"x", "y"};
    b.output = "h";
    gb.layer(b, "input.conv", LayerKind::conv, cfg.in_channels + cfg.cond_channels, cfg.base_width, 3, 0);
    gb.g.blocks.push_back(std::move(b));
  }
  std::size_t c = cfg.base_width;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    Block b;
    b.inputs = {"h", "temb"};
    b.pool_input = l > 0;
    b.save_as = "skip" + std::to_string(l);
    gb.res(cfg, "down" + std::to_string(l), c, cfg.width(l), l, 0, b);
    c = cfg.width(l);
  }
  {
    Block b;
    b.inputs = {"h", "temb"};
    b.pool_input = true;
    gb.res(cfg, "mid", c, c, cfg.depth, 0, b);
  }
  for (std::size_t l = cfg.depth; l-- > 0;) {
    Block b;
    const std::string skip = "skip" + std::to_string(l);
    b.inputs = {"h", "temb", skip};
    b.upsample_input = true;
    b.concat_key = skip;
    const std::size_t cout = cfg.width(l == 0 ? 0 : l - 1);
    gb.res(cfg, "up" + std::to_string(l), c + cfg.width(l), cout, l, c, b);
    c = cout;
  }
  {
    Block b;
    b.name = "output";
    b.kind = BlockKind::output;
    b.inputs = {"h"};
    b.output = "out";
    gb.layer(b, "output.gn", LayerKind::group_norm, c, c, 1, 0);
    gb.layer(b, "output.conv", LayerKind::conv, c, 2 * cfg.in_channels, 3, 0);
    gb.g.blocks.push_back(std::move(b));
  }
  for (const auto& li : gb.g.layers)
    if (li.kind == LayerKind::group_norm) num::group_count(li.in_channels, cfg.groups);
  return gb.g;
}

namespace {

num::Shape weight_shape(const LayerInfo& li) {
  switch (li.kind) {
    case LayerKind::conv: return {li.out_channels, li.in_channels, li.kernel, li.kernel};
    case LayerKind::linear: return {li.out_channels, li.in_channels};
    case LayerKind::group_norm: return {li.in_channels};
  }
  return {};
}

std::size_t layer_params(const LayerInfo& li) { return num::numel(weight_shape(li)) + li.out_channels; }

}  // namespace

std::size_t parameter_count(const DenoiserConfig& cfg) {
  std::size_t n = 0;
  for (const auto& li : enumerate_blocks(cfg).layers) n += layer_params(li);
  return n;
}

Denoiser::Denoiser(const DenoiserConfig& cfg, num::RngStream& init) : cfg_(cfg), graph_(enumerate_blocks(cfg)) {
  for (const auto& li : graph_.layers) {
    const auto ws = weight_shape(li);
    if (li.kind == LayerKind::group_norm) {
      params_.add(li.weight_name(), Tensor(ws, 1.0f));
      params_.add(li.bias_name(), Tensor({li.out_channels}, 0.0f));
      continue;
    }
    const double fan_in = static_cast<double>(li.in_channels * li.kernel * li.kernel);
    const double bound = std::sqrt(3.0 / fan_in);
    params_.add(li.weight_name(), num::sample_uniform(init, ws, -bound, bound));
    params_.add(li.bias_name(), Tensor({li.out_channels}, 0.0f));
  }
  for (const auto& n : params_.names()) params_.get(n).set_requires_grad(true);
}

Tensor Denoiser::apply_layer(const LayerInfo& li, const Tensor& x, const WeightProvider* p) const {
  const Tensor& w = params_.get(li.weight_name());
  const Tensor& b = params_.get(li.bias_name());
  if (li.kind == LayerKind::group_norm) return num::group_norm(x, w, b, cfg_.groups);
  const Tensor xin = p ? p->activation(li, x) : x;
  const Tensor wq = p ? p->weight(li, w) : w;
  if (li.kind == LayerKind::linear) return num::linear(xin, wq, b);
  return num::conv2d(xin, wq, b);
}

Tensor Denoiser::res_block(const Block& blk, const Tensor& h, const Tensor& temb, const WeightProvider* p) const {
  const auto& L = graph_.layers;
  const auto& ids = blk.layers;
  Tensor a = num::silu(apply_layer(L[ids[0]], h, p));
  a = apply_layer(L[ids[1]], a, p);
  a = num::add(a, apply_layer(L[ids[2]], num::silu(temb), p));
  a = num::silu(apply_layer(L[ids[3]], a, p));
  a = apply_layer(L[ids[4]], a, p);
  const Tensor shortcut = ids.size() > 5 ? apply_layer(L[ids[5]], h, p) : h;
  return num::add(a, shortcut);
}

void Denoiser::check_inputs(const Tensor& x, const std::vector<int>& t, const Tensor& y) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels)
    throw ShapeError("denoiser: x must be (N," + std::to_string(cfg_.in_channels) + ",H,W), got " +
                     num::shape_str(x.shape()));
  if (y.rank() != 4 || y.dim(1) != cfg_.cond_channels)
    throw ShapeError("denoiser: y must be (N," + std::to_string(cfg_.cond_channels) + ",H,W), got " +
                     num::shape_str(y.shape()));
  if (x.dim(0) != y.dim(0) || x.dim(2) != y.dim(2) || x.dim(3) != y.dim(3))
    throw ShapeError("denoiser: x " + num::shape_str(x.shape()) + " and y " + num::shape_str(y.shape()) +
                     " disagree on batch or spatial size");
  if (t.size() != x.dim(0)) throw ShapeError("denoiser: batch of " + std::to_string(x.dim(0)) + " with " +
                                             std::to_string(t.size()) + " timesteps");
  const std::size_t m = std::size_t{1} << cfg_.depth;
  if (x.dim(2) % m != 0 || x.dim(3) % m != 0)
    throw ShapeError("denoiser: spatial size " + num::shape_str(x.shape()) + " not divisible by " + std::to_string(m));
}

diffusion::ModelOutput split_output(const Tensor& out, std::size_t in) {
  return {num::slice_channels(out, 0, in), num::sigmoid(num::slice_channels(out, in, 2 * in))};
}

diffusion::ModelOutput Denoiser::forward(const Tensor& x, const std::vector<int>& t, const Tensor& y) {
  check_inputs(x, t, y);
  const auto* p = provider_;
  const auto& B = graph_.blocks;
  const auto& L = graph_.layers;
  Tensor temb = time_embedding(t, cfg_.time_embed_dim);
  temb = apply_layer(L[B[0].layers[1]], num::silu(apply_layer(L[B[0].layers[0]], temb, p)), p);
  Tensor h = apply_layer(L[B[1].layers[0]], num::concat_channels(x, y), p);
  std::vector<Tensor> skips;
  std::size_t bi = 2;
  for (std::size_t l = 0; l < cfg_.depth; ++l, ++bi) {
    if (l > 0) h = num::avg_pool2(h);
    h = res_block(B[bi], h, temb, p);
    skips.push_back(h);
  }
  h = res_block(B[bi++], num::avg_pool2(h), temb, p);
  for (std::size_t l = cfg_.depth; l-- > 0; ++bi)
    h = res_block(B[bi], num::concat_channels(num::nearest_upsample2(h), skips[l]), temb, p);
  const Block& ob = B[bi];
  Tensor out = apply_layer(L[ob.layers[1]], num::silu(apply_layer(L[ob.layers[0]], h, p)), p);
  return split_output(out, cfg_.in_channels);
}

ActivationState Denoiser::initial_state(const Tensor& x, const std::vector<int>& t, const Tensor& y) const {
  check_inputs(x, t, y);
  return {{"x", x}, {"y", y}, {"tsin", time_embedding(t, cfg_.time_embed_dim)}};
}

void Denoiser::run_block(std::size_t index, ActivationState& s, const WeightProvider* p) const {
  const Block& b = graph_.blocks.at(index);
  const auto& L = graph_.layers;
  auto in = [&](const std::string& k) -> const Tensor& {
    auto it = s.find(k);
    if (it == s.end()) throw Error("block " + b.name + ": missing state '" + k + "'");
    return it->second;
  };
  switch (b.kind) {
    case BlockKind::time_embed:
      s["temb"] = apply_layer(L[b.layers[1]], num::silu(apply_layer(L[b.layers[0]], in("tsin"), p)), p);
      break;
    case BlockKind::input_conv:
      s["h"] = apply_layer(L[b.layers[0]], num::concat_channels(in("x"), in("y")), p);
      break;
    case BlockKind::res: {
      Tensor h = in("h");
      if (b.pool_input) h = num::avg_pool2(h);
      if (b.upsample_input) h = num::nearest_upsample2(h);
      if (!b.concat_key.empty()) h = num::concat_channels(h, in(b.concat_key));
      Tensor out = res_block(b, h, in("temb"), p);
      if (!b.save_as.empty()) s[b.save_as] = out;
      s["h"] = out;
      break;
    }
    case BlockKind::output:
      s["out"] = apply_layer(L[b.layers[1]], num::silu(apply_layer(L[b.layers[0]], in("h"), p)), p);
      break;
  }
}

diffusion::ModelOutput Denoiser::output_from(const ActivationState& s) const {
  auto it = s.find("out");
  if (it == s.end()) throw Error("output_from: state has no 'out'; run every block first");
  return split_output(it->second, cfg_.in_channels);
}

namespace {
constexpr char kMagic[] = "QSDCKPT1";
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Denoiser& model, const diffusion::NoiseSchedule& sched) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  const auto& c = model.config();
  os.write(kMagic, 8);
  num::write_u32(os, kVersion);
  for (auto v : {c.in_channels, c.cond_channels, c.base_width, c.depth, c.time_embed_dim}) num::write_u64(os, v);
  num::write_f64(os, c.null_cond_prob);
  num::write_u32(os, static_cast<std::uint32_t>(c.groups));
  num::write_u64(os, sched.steps);
  num::write_f64(os, sched.beta_start);
  num::write_f64(os, sched.beta_end);
  const auto& names = model.params().names();
  num::write_u64(os, names.size());
  for (const auto& n : names) {
    num::write_string(os, n);
    num::write_tensor(os, model.params().get(n));
  }
  if (!os) throw IoError("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError(path.string(), "checkpoint not found: " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != std::string(kMagic, 8))
    throw IoError("checkpoint " + path.string() + ": bad magic");
  if (num::read_u32(is) != kVersion) throw IoError("checkpoint " + path.string() + ": unsupported version");
  Checkpoint ck;
  auto& c = ck.config;
  for (auto* v : {&c.in_channels, &c.cond_channels, &c.base_width, &c.depth, &c.time_embed_dim})
    *v = num::read_u64(is);
  c.null_cond_prob = num::read_f64(is);
  c.groups = static_cast<int>(num::read_u32(is));
  ck.schedule_steps = num::read_u64(is);
  ck.beta_start = num::read_f64(is);
  ck.beta_end = num::read_f64(is);
  const auto n = num::read_u64(is);
  if (n > 100000) throw IoError("checkpoint: implausible parameter count");
  for (std::uint64_t i = 0; i < n; ++i) {
    auto name = num::read_string(is);
    ck.params.emplace(std::move(name), num::read_tensor(is));
  }
  return ck;
}

Denoiser model_from_checkpoint(const Checkpoint& ck) {
  num::RngStream unused(0, "checkpoint/init");
  Denoiser m(ck.config, unused);
  for (const auto& name : m.params().names()) {
    auto it = ck.params.find(name);
    if (it == ck.params.end()) throw IoError("checkpoint: missing parameter " + name);
    Tensor& dst = m.params().get(name);
    if (it->second.shape() != dst.shape())
      throw IoError("checkpoint: parameter " + name + " has shape " + num::shape_str(it->second.shape()) +
                    ", model expects " + num::shape_str(dst.shape()));
    std::copy(it->second.data().begin(), it->second.data().end(), dst.mutable_data().begin());
  }
  if (ck.params.size() != m.params().names().size()) throw IoError("checkpoint: unexpected extra parameters");
  return m;
}

diffusion::NoiseSchedule schedule_from_checkpoint(const Checkpoint& ck) {
  return diffusion::build_schedule(ck.schedule_steps, ck.beta_start, ck.beta_end);
}

}  // namespace qsd::net
