// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/pipeline/config.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "qsd/error.hpp"

namespace qsd::pipeline {

namespace {

std::string fmt_double(double v) {
  // Shortest text that reads back to the same double.
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw ConfigError("config: cannot format number");
  return std::string(buf, end);
}

std::string fmt_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt_double(v[i]);
  return s;
}

std::string key_name(const std::string& section, const std::string& key) { return section + "." + key; }

template <class T>
T parse_int(const std::string& key, const std::string& s) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError("config: " + key + ": not an integer: '" + s + "'");
  return v;
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v))
    throw ConfigError("config: " + key + ": not a number: '" + s + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config: " + key + ": not a boolean: '" + s + "'");
}

// One entry per INI key: how to read it into a config and how to print it.
struct Field {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, const std::vector<std::string>&)> read;
  std::function<std::string(const RunConfig&)> write;
};

const std::string& single(const std::string& k, const std::vector<std::string>& in) {
  if (in.size() != 1) throw ConfigError("config: " + k + " expects one value");
  return in[0];
}

template <class T, class Get>
Field int_field(std::string sec, std::string key, Get get) {
  const std::string k = key_name(sec, key);
  return {sec, key, [get, k](RunConfig& c, const std::vector<std::string>& in) { get(c) = parse_int<T>(k, single(k, in)); },
          [get](const RunConfig& c) { return std::to_string(get(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field double_field(std::string sec, std::string key, Get get) {
  const std::string k = key_name(sec, key);
  return {sec, key, [get, k](RunConfig& c, const std::vector<std::string>& in) { get(c) = parse_double(k, single(k, in)); },
          [get](const RunConfig& c) { return fmt_double(get(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field bool_field(std::string sec, std::string key, Get get) {
  const std::string k = key_name(sec, key);
  return {sec, key, [get, k](RunConfig& c, const std::vector<std::string>& in) { get(c) = parse_bool(k, single(k, in)); },
          [get](const RunConfig& c) { return std::string(get(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <class Get>
Field list_field(std::string sec, std::string key, Get get) {
  const std::string k = key_name(sec, key);
  return {sec, key,
          [get, k](RunConfig& c, const std::vector<std::string>& in) {
            std::vector<double> v;
            for (const auto& s : in) v.push_back(parse_double(k, s));
            get(c) = std::move(v);
          },
          [get](const RunConfig& c) { return fmt_list(get(const_cast<RunConfig&>(c))); }};
}

#define QSD_GET(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"run", "preset", [](RunConfig&, const std::vector<std::string>&) {},  // consumed before the other keys
       [](const RunConfig& c) { return c.preset; }},
      int_field<std::uint64_t>("run", "seed", QSD_GET(seed)),

      int_field<std::size_t>("dataset", "n_train", QSD_GET(dataset.n_train)),
      int_field<std::size_t>("dataset", "n_calib", QSD_GET(dataset.n_calib)),
      int_field<std::size_t>("dataset", "n_eval", QSD_GET(dataset.n_eval)),
      int_field<std::size_t>("dataset", "height", QSD_GET(dataset.height)),
      int_field<std::size_t>("dataset", "width", QSD_GET(dataset.width)),
      int_field<std::size_t>("dataset", "classes", QSD_GET(dataset.classes)),
      int_field<std::uint64_t>("dataset", "seed", QSD_GET(dataset.seed)),

      int_field<std::size_t>("schedule", "steps", QSD_GET(schedule.steps)),
      double_field("schedule", "beta_start", QSD_GET(schedule.beta_start)),
      double_field("schedule", "beta_end", QSD_GET(schedule.beta_end)),
      int_field<std::size_t>("schedule", "reference_steps", QSD_GET(schedule.reference_steps)),

      int_field<std::size_t>("model", "base_width", QSD_GET(model.base_width)),
      int_field<std::size_t>("model", "depth", QSD_GET(model.depth)),
      int_field<std::size_t>("model", "time_embed_dim", QSD_GET(model.time_embed_dim)),
      int_field<int>("model", "groups", QSD_GET(model.groups)),
      double_field("model", "null_cond_prob", QSD_GET(model.null_cond_prob)),

      int_field<std::size_t>("train", "epochs", QSD_GET(train.epochs)),
      int_field<std::size_t>("train", "batch", QSD_GET(train.batch)),
      double_field("train", "lr", QSD_GET(train.lr)),
      double_field("train", "lambda_kl", QSD_GET(train.lambda_kl)),
      double_field("train", "psnr_min", QSD_GET(train.psnr_min)),
      double_field("train", "psnr_max", QSD_GET(train.psnr_max)),

      int_field<int>("quant", "bits", QSD_GET(quant.bits)),
      {"quant", "policy",
       [](RunConfig& c, const std::vector<std::string>& in) {
         c.quant.policy = quant::range_policy_from_string(single("quant.policy", in));
       },
       [](const RunConfig& c) { return std::string(quant::to_string(c.quant.policy)); }},
      bool_field("quant", "split", QSD_GET(quant.split)),
      bool_field("quant", "quantize_activations", QSD_GET(quant.quantize_activations)),
      int_field<int>("quant", "activation_bits", QSD_GET(quant.activation_bits)),
      int_field<std::size_t>("quant", "adaround_steps", QSD_GET(quant.adaround.steps)),
      int_field<std::size_t>("quant", "adaround_batch", QSD_GET(quant.adaround.batch)),
      double_field("quant", "lr_logits", QSD_GET(quant.adaround.lr_logits)),
      double_field("quant", "lr_scale", QSD_GET(quant.adaround.lr_scale)),
      double_field("quant", "lambda_round", QSD_GET(quant.adaround.lambda_round)),
      double_field("quant", "b_start", QSD_GET(quant.adaround.b_start)),
      double_field("quant", "b_end", QSD_GET(quant.adaround.b_end)),
      double_field("quant", "warmup", QSD_GET(quant.adaround.warmup)),
      int_field<std::size_t>("quant", "holdout_every", QSD_GET(quant.adaround.holdout_every)),
      int_field<std::size_t>("quant", "chunk", QSD_GET(quant.adaround.chunk)),

      {"calib", "preset", [](RunConfig&, const std::vector<std::string>&) {},  // consumed before the other keys
       [](const RunConfig& c) { return c.calib.preset; }},
      {"calib", "variant",
       [](RunConfig& c, const std::vector<std::string>& in) {
         c.calib.variant = calib_variant_from_string(single("calib.variant", in));
       },
       [](const RunConfig& c) { return to_string(c.calib.variant); }},
      int_field<std::size_t>("calib", "n_samples", QSD_GET(calib.set.n_samples)),
      int_field<std::size_t>("calib", "ddim_steps", QSD_GET(calib.set.ddim_steps)),
      int_field<std::size_t>("calib", "tap_stride", QSD_GET(calib.set.tap_stride)),
      list_field("calib", "psnr_levels", QSD_GET(calib.set.psnr_levels)),
      double_field("calib", "guidance_scale", QSD_GET(calib.set.guidance_scale)),
      int_field<std::size_t>("calib", "batch", QSD_GET(calib.set.batch)),

      list_field("eval", "psnr_list", QSD_GET(eval.psnr_list)),
      double_field("eval", "guidance_scale", QSD_GET(eval.guidance_scale)),
      {"eval", "sampler",
       [](RunConfig& c, const std::vector<std::string>& in) {
         c.eval.sampler = sampler_from_string(single("eval.sampler", in));
       },
       [](const RunConfig& c) { return to_string(c.eval.sampler); }},
      int_field<std::size_t>("eval", "ddim_steps", QSD_GET(eval.ddim_steps)),
      int_field<std::size_t>("eval", "batch", QSD_GET(eval.batch)),
  };
  return f;
}

#undef QSD_GET

calib::CalibSetConfig calib_preset(const std::string& name) {
  calib::CalibSetConfig s;
  if (name == "desk")
    s = calib::CalibSetConfig::desk_preset();
  else if (name == "paper")
    s = calib::CalibSetConfig::paper_preset();
  else
    throw ConfigError("config: unknown calibration preset '" + name + "'");
  s.guidance_scale = 2.0;
  return s;
}

}  // namespace

CalibVariant calib_variant_from_string(const std::string& s) {
  if (s == "noise_timestep") return CalibVariant::noise_timestep;
  if (s == "timestep") return CalibVariant::timestep;
  throw ConfigError("config: unknown calibration variant '" + s + "' (noise_timestep|timestep)");
}

std::string to_string(CalibVariant v) { return v == CalibVariant::timestep ? "timestep" : "noise_timestep"; }

SamplerKind sampler_from_string(const std::string& s) {
  if (s == "ddim") return SamplerKind::ddim;
  if (s == "ddpm") return SamplerKind::ddpm;
  throw ConfigError("config: unknown sampler '" + s + "' (ddim|ddpm)");
}

std::string to_string(SamplerKind s) { return s == SamplerKind::ddpm ? "ddpm" : "ddim"; }

RunConfig RunConfig::desk() {
  RunConfig c;
  c.calib.set = calib_preset("desk");
  return c;
}

RunConfig RunConfig::paper() {
  RunConfig c = desk();
  c.preset = "paper";
  c.schedule.steps = 1000;
  c.calib.preset = "paper";
  c.calib.set = calib_preset("paper");
  c.eval.ddim_steps = 100;
  return c;
}

net::DenoiserConfig RunConfig::denoiser() const {
  net::DenoiserConfig d;
  d.in_channels = 3;
  d.cond_channels = dataset.classes;
  d.base_width = model.base_width;
  d.depth = model.depth;
  d.time_embed_dim = model.time_embed_dim;
  d.null_cond_prob = model.null_cond_prob;
  d.groups = model.groups;
  return d;
}

diffusion::NoiseSchedule RunConfig::noise_schedule() const {
  return diffusion::build_scaled_schedule(schedule.steps, schedule.beta_start, schedule.beta_end,
                                          schedule.reference_steps);
}

quant::QuantConfig RunConfig::quant_config() const {
  quant::QuantConfig q;
  q.bits = quant.bits;
  q.split = quant.split;
  q.policy = quant.policy;
  q.quantize_activations = quant.quantize_activations;
  q.activation_bits = quant.activation_bits;
  return q;
}

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  need(preset == "desk" || preset == "paper", "run.preset must be desk or paper");
  need(dataset.n_train >= 1 && dataset.n_calib >= 1 && dataset.n_eval >= 1, "dataset split sizes must be >= 1");
  need(dataset.height >= 4 && dataset.width >= 4, "dataset height and width must be >= 4");
  need(dataset.classes >= 2 && dataset.classes <= 65535, "dataset.classes must be in [2, 65535]");
  need(schedule.reference_steps >= 1, "schedule.reference_steps must be >= 1");
  need(train.epochs >= 1 && train.batch >= 1, "train.epochs and train.batch must be >= 1");
  need(train.lr > 0.0, "train.lr must be > 0");
  need(train.lambda_kl >= 0.0, "train.lambda_kl must be >= 0");
  need(train.psnr_min >= 0.0 && train.psnr_min <= train.psnr_max, "train psnr range must satisfy 0 <= min <= max");
  need((quant.bits >= 2 && quant.bits <= 16) || quant.bits == 32, "quant.bits must be in [2, 16] or 32");
  need(quant.activation_bits >= 2 && quant.activation_bits <= 16, "quant.activation_bits must be in [2, 16]");
  need(quant.adaround.batch >= 1 && quant.adaround.chunk >= 1, "quant batch sizes must be >= 1");
  need(calib.preset == "desk" || calib.preset == "paper" || calib.preset == "custom",
       "calib.preset must be desk, paper or custom");
  need(!eval.psnr_list.empty(), "eval.psnr_list is empty");
  for (double p : eval.psnr_list) need(p >= 0.0, "eval psnr values must be >= 0");
  need(eval.guidance_scale >= 0.0, "eval.guidance_scale must be >= 0");
  need(eval.batch >= 1, "eval.batch must be >= 1");
  need(eval.ddim_steps >= 1 && eval.ddim_steps <= schedule.steps, "eval.ddim_steps must be in [1, schedule.steps]");
  need(calib.set.ddim_steps <= schedule.steps, "calib.ddim_steps exceeds schedule.steps");
  denoiser().validate();
  calib.set.validate();
  (void)noise_schedule();
}

std::string to_ini(const RunConfig& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      os << (section.empty() ? "" : "\n") << "[" << f.section << "]\n";
      section = f.section;
    }
    os << f.key << " = " << f.write(c) << "\n";
  }
  return os.str();
}

RunConfig parse_config(const std::string& text) {
  std::istringstream is(text);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(is);
  } catch (const CLI::Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  std::map<std::string, std::vector<std::string>> values;
  for (const auto& it : items) {
    if (it.name == "++" || it.name == "--") continue;
    if (it.parents.size() != 1) throw ConfigError("config: key '" + it.name + "' outside a [section]");
    const std::string k = key_name(it.parents[0], it.name);
    if (!values.emplace(k, it.inputs).second) throw ConfigError("config: duplicate key " + k);
  }
  std::map<std::string, const Field*> by_key;
  for (const auto& f : fields()) by_key[key_name(f.section, f.key)] = &f;
  for (const auto& [k, v] : values)
    if (!by_key.count(k)) throw ConfigError("config: unknown key " + k);

  RunConfig c = RunConfig::desk();
  if (auto it = values.find("run.preset"); it != values.end()) {
    const auto& p = single("run.preset", it->second);
    if (p == "paper")
      c = RunConfig::paper();
    else if (p != "desk")
      throw ConfigError("config: unknown run preset '" + p + "'");
  }
  if (auto it = values.find("calib.preset"); it != values.end()) {
    c.calib.preset = single("calib.preset", it->second);
    if (c.calib.preset != "custom") c.calib.set = calib_preset(c.calib.preset);
  }
  for (const auto& [k, v] : values) by_key.at(k)->read(c, v);
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError(path.string(), "config file not found: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string config_hash(const RunConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_ini(c)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace qsd::pipeline
