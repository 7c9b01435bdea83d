// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/pipeline/metrics.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "qsd/error.hpp"
#include "qsd/pipeline/link.hpp"

namespace qsd::pipeline {

using num::Tensor;

std::uint64_t conv_flops(std::size_t cin, std::size_t cout, std::size_t k, std::size_t hout, std::size_t wout) {
  return 2ULL * cin * cout * k * k * hout * wout;
}

std::uint64_t linear_flops(std::size_t in, std::size_t out) { return 2ULL * in * out; }

std::uint64_t elementwise_flops(std::size_t elements) { return 5ULL * elements; }

double FlopsReport::weighted(int bits) const {
  if (bits >= 32) return static_cast<double>(raw());
  return static_cast<double>(weight_ops) * static_cast<double>(bits) / 32.0 + static_cast<double>(other_ops);
}

FlopsReport flops_count(const net::DenoiserConfig& cfg, std::size_t height, std::size_t width) {
  cfg.validate();
  const std::size_t div = std::size_t{1} << cfg.depth;
  if (height == 0 || width == 0 || height % div || width % div)
    throw ShapeError("flops_count: image size must be a positive multiple of 2^depth");
  const auto graph = net::enumerate_blocks(cfg);
  FlopsReport r;
  auto add = [&r](std::string name, std::uint64_t f, bool weight) {
    (weight ? r.weight_ops : r.other_ops) += f;
    r.entries.push_back({std::move(name), f, weight});
  };
  auto pixels = [&](std::size_t level) { return (height >> level) * (width >> level); };
  for (const auto& b : graph.blocks) {
    for (auto li : b.layers) {
      const auto& L = graph.layers[li];
      const std::size_t hw = pixels(L.level);
      switch (L.kind) {
        case net::LayerKind::conv:
          add(L.name, conv_flops(L.in_channels, L.out_channels, L.kernel, height >> L.level, width >> L.level), true);
          break;
        case net::LayerKind::linear:
          add(L.name, linear_flops(L.in_channels, L.out_channels), true);
          break;
        case net::LayerKind::group_norm:
          add(L.name, elementwise_flops(L.in_channels * hw), false);
          // Every normalization feeds a SiLU.
          add(L.name + ".silu", elementwise_flops(L.in_channels * hw), false);
          break;
      }
    }
    if (b.kind == net::BlockKind::time_embed) add(b.name + ".silu", elementwise_flops(cfg.time_embed_dim), false);
    if (b.kind == net::BlockKind::res) add(b.name + ".temb_silu", elementwise_flops(cfg.time_embed_dim), false);
    if (b.kind == net::BlockKind::output) add(b.name + ".sigmoid", elementwise_flops(cfg.in_channels * pixels(0)), false);
  }
  return r;
}

std::string psnr_label(std::optional<double> psnr_db) {
  if (!psnr_db) return "clean";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", *psnr_db);
  return buf;
}

ModelRow model_row(const std::string& name, int bits, const quant::SizeReport& size, const FlopsReport& flops) {
  ModelRow m;
  m.model = name;
  m.bits = bits;
  m.payload_bits = size.payload_bits;
  m.metadata_bits = size.metadata_bits;
  m.size_reduction_pct = 100.0 * size.reduction();
  m.flops_raw = flops.raw();
  m.flops_weighted = flops.weighted(bits);
  m.flops_reduction_pct = m.flops_raw ? 100.0 * (1.0 - m.flops_weighted / static_cast<double>(m.flops_raw)) : 0.0;
  return m;
}

MetricsReport evaluate(const std::vector<EvalModel>& models, const diffusion::NoiseSchedule& sched,
                       const std::vector<Example>& eval_set, const HeldOutMaps& others, const RunConfig& cfg,
                       std::uint64_t seed, const std::filesystem::path& image_dir) {
  if (models.empty()) throw ConfigError("evaluate: no models");
  if (eval_set.empty()) throw ConfigError("evaluate: empty evaluation set");
  for (const auto& m : models) {
    if (!m.model) throw ConfigError("evaluate: model '" + m.name + "' is null");
    if (m.name.empty() || m.name.find_first_of(",\n") != std::string::npos)
      throw ConfigError("evaluate: model names must be non-empty and free of commas");
  }
  const auto maps = maps_of(eval_set);
  check_disjoint(others.train, "training", maps, "evaluation");
  check_disjoint(others.calib, "calibration", maps, "evaluation");

  const auto flops = flops_count(cfg.denoiser(), cfg.dataset.height, cfg.dataset.width);
  MetricsReport rep;
  for (const auto& m : models) rep.models.push_back(model_row(m.name, m.bits, m.size, flops));
  if (!image_dir.empty()) std::filesystem::create_directories(image_dir);

  const std::size_t shown = std::min<std::size_t>(eval_set.size(), 8);
  for (double psnr : cfg.eval.psnr_list) {
    std::vector<std::vector<Tensor>> outputs;
    for (const auto& m : models) {
      auto link = run_link(*m.model, sched, maps, psnr, cfg.eval, seed);
      ConditionRow row{m.name, psnr, 0.0, 0.0, eval_set.size()};
      for (std::size_t i = 0; i < eval_set.size(); ++i) {
        const Tensor& img = link.images[i];
        const Tensor& gt = eval_set[i].image;
        double se = 0.0;
        for (std::size_t k = 0; k < img.numel(); ++k) {
          const double d = static_cast<double>(img[k]) - static_cast<double>(gt[k]);
          se += d * d;
        }
        row.mse += se / static_cast<double>(img.numel());
        row.miou += mean_iou(eval_set[i].map, classify_image(img, cfg.dataset.classes));
      }
      row.mse /= static_cast<double>(eval_set.size());
      row.miou /= static_cast<double>(eval_set.size());
      rep.conditions.push_back(row);
      outputs.push_back(std::move(link.images));
    }
    if (!image_dir.empty()) {
      std::vector<Tensor> tiles;
      for (std::size_t i = 0; i < shown; ++i) {
        tiles.push_back(colorize(eval_set[i].map));
        tiles.push_back(eval_set[i].image);
        for (const auto& out : outputs) tiles.push_back(out[i]);
      }
      write_ppm(image_dir / ("grid_psnr" + psnr_label(psnr) + ".ppm"), image_grid(tiles, 2 + models.size()));
    }
  }
  return rep;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <class T>
T num_cell(const std::string& s, const std::filesystem::path& path) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw IoError(path.string() + ": bad numeric cell '" + s + "'");
  return v;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, const char* header,
                                               std::size_t columns) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError(path.string(), "metrics file not found: " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != header) throw IoError(path.string() + ": unexpected header");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != columns) throw IoError(path.string() + ": wrong column count in '" + line + "'");
    rows.push_back(std::move(cells));
  }
  return rows;
}

void write_lines(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

}  // namespace

void write_conditions_csv(const std::filesystem::path& path, const std::vector<ConditionRow>& rows) {
  std::string s = std::string(kConditionHeader) + "\n";
  for (const auto& r : rows)
    s += r.model + "," + psnr_label(r.psnr_db) + "," + fmt(r.mse) + "," + fmt(r.miou) + "," + std::to_string(r.count) +
         "\n";
  write_lines(path, s);
}

void write_models_csv(const std::filesystem::path& path, const std::vector<ModelRow>& rows) {
  std::string s = std::string(kModelHeader) + "\n";
  for (const auto& r : rows)
    s += r.model + "," + std::to_string(r.bits) + "," + std::to_string(r.payload_bits) + "," +
         std::to_string(r.metadata_bits) + "," + fmt(r.size_reduction_pct) + "," + std::to_string(r.flops_raw) + "," +
         fmt(r.flops_weighted) + "," + fmt(r.flops_reduction_pct) + "\n";
  write_lines(path, s);
}

std::vector<ConditionRow> read_conditions_csv(const std::filesystem::path& path) {
  std::vector<ConditionRow> out;
  for (const auto& c : read_csv(path, kConditionHeader, 5)) {
    ConditionRow r;
    r.model = c[0];
    if (c[1] != "clean") r.psnr_db = num_cell<double>(c[1], path);
    r.mse = num_cell<double>(c[2], path);
    r.miou = num_cell<double>(c[3], path);
    r.count = num_cell<std::size_t>(c[4], path);
    out.push_back(r);
  }
  return out;
}

std::vector<ModelRow> read_models_csv(const std::filesystem::path& path) {
  std::vector<ModelRow> out;
  for (const auto& c : read_csv(path, kModelHeader, 8)) {
    ModelRow r;
    r.model = c[0];
    r.bits = num_cell<int>(c[1], path);
    r.payload_bits = num_cell<std::uint64_t>(c[2], path);
    r.metadata_bits = num_cell<std::uint64_t>(c[3], path);
    r.size_reduction_pct = num_cell<double>(c[4], path);
    r.flops_raw = num_cell<std::uint64_t>(c[5], path);
    r.flops_weighted = num_cell<double>(c[6], path);
    r.flops_reduction_pct = num_cell<double>(c[7], path);
    out.push_back(r);
  }
  return out;
}

SummaryTable summarize(const std::vector<ModelRow>& models, const std::vector<ConditionRow>& conditions) {
  std::vector<std::string> names, labels;
  auto note = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  for (const auto& m : models) note(names, m.model);
  for (const auto& c : conditions) note(names, c.model), note(labels, psnr_label(c.psnr_db));

  SummaryTable t;
  t.header = {"model", "weight_bits", "payload_bits", "size_reduction_pct", "flops_raw", "flops_weighted",
              "flops_reduction_pct"};
  for (const auto& l : labels) {
    t.header.push_back("mse@" + l);
    t.header.push_back("miou@" + l);
  }
  for (const auto& n : names) {
    std::vector<std::string> row{n};
    auto m = std::find_if(models.begin(), models.end(), [&](const ModelRow& r) { return r.model == n; });
    if (m != models.end())
      row.insert(row.end(), {std::to_string(m->bits), std::to_string(m->payload_bits), fmt(m->size_reduction_pct),
                             std::to_string(m->flops_raw), fmt(m->flops_weighted), fmt(m->flops_reduction_pct)});
    else
      row.resize(7);
    for (const auto& l : labels) {
      auto c = std::find_if(conditions.begin(), conditions.end(),
                            [&](const ConditionRow& r) { return r.model == n && psnr_label(r.psnr_db) == l; });
      if (c != conditions.end()) {
        row.push_back(fmt(c->mse));
        row.push_back(fmt(c->miou));
      } else {
        row.insert(row.end(), 2, "");
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

void write_summary_csv(const std::filesystem::path& path, const SummaryTable& t) {
  std::string s;
  auto line = [&s](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) s += (i ? "," : "") + cells[i];
    s += "\n";
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  write_lines(path, s);
}

void write_summary_markdown(const std::filesystem::path& path, const SummaryTable& t) {
  std::string s = std::string("FLOPs convention: ") + kFlopsConvention + ".\n\n";
  auto line = [&s](const std::vector<std::string>& cells) {
    s += "|";
    for (const auto& c : cells) s += " " + c + " |";
    s += "\n";
  };
  line(t.header);
  line(std::vector<std::string>(t.header.size(), "---"));
  for (const auto& r : t.rows) line(r);
  write_lines(path, s);
}

}  // namespace qsd::pipeline
