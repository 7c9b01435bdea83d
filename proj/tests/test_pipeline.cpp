// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "qsd/error.hpp"
#include "qsd/numerics/ops.hpp"
#include "qsd/numerics/random.hpp"
#include "qsd/pipeline/config.hpp"
#include "qsd/pipeline/dataset.hpp"
#include "qsd/pipeline/link.hpp"
#include "qsd/pipeline/metrics.hpp"
#include "qsd/pipeline/stages.hpp"
#include "qsd/pipeline/train.hpp"
#include "qsd/quant/qcheckpoint.hpp"

namespace qsd::pipeline {
namespace {

namespace fs = std::filesystem;
using num::Tensor;

RunConfig tiny() {
  RunConfig c = RunConfig::desk();
  c.dataset = {16, 8, 4, 8, 8, 3, 5};
  c.schedule.steps = 20;
  c.schedule.reference_steps = 200;
  c.model.base_width = 8;
  c.model.time_embed_dim = 16;
  c.train.epochs = 3;
  c.train.batch = 8;
  c.train.lr = 2e-3;
  c.calib.preset = "custom";
  c.calib.set.n_samples = 16;
  c.calib.set.ddim_steps = 8;
  c.calib.set.tap_stride = 4;
  c.eval.ddim_steps = 5;
  c.eval.psnr_list = {100, 10};
  c.quant.adaround.steps = 20;
  return c;
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("qsd_pipeline_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Trained once, shared by the tests that need a model.
struct Trained {
  RunConfig cfg = tiny();
  Splits splits = synth_splits(cfg.dataset);
  TrainResult tr = train_fp(cfg, splits.train, 3);
  static Trained& get() {
    static Trained t;
    return t;
  }
};

// ---- config ----

TEST(RunConfig, RoundTripsThroughIni) {
  for (auto c : {RunConfig::desk(), RunConfig::paper(), tiny()}) {
    c.seed = 123456789012345ULL;
    c.train.lr = 0.1 + 0.2;
    c.calib.variant = CalibVariant::timestep;
    c.quant.policy = quant::RangePolicy::minmax;
    c.eval.sampler = SamplerKind::ddpm;
    const auto text = to_ini(c);
    const auto back = parse_config(text);
    EXPECT_EQ(back, c);
    EXPECT_EQ(to_ini(back), text);
    EXPECT_EQ(config_hash(back), config_hash(c));
  }
}

TEST(RunConfig, DocumentedDefaults) {
  const auto d = RunConfig::desk();
  EXPECT_EQ(d.dataset.height, 32u);
  EXPECT_EQ(d.dataset.classes, 6u);
  EXPECT_EQ(d.schedule.steps, 200u);
  EXPECT_EQ(d.train.epochs, 30u);
  EXPECT_EQ(d.train.batch, 16u);
  EXPECT_DOUBLE_EQ(d.train.lr, 1e-3);
  EXPECT_DOUBLE_EQ(d.train.lambda_kl, 1e-3);
  EXPECT_EQ(d.eval.psnr_list, (std::vector<double>{100, 20, 10}));
  EXPECT_DOUBLE_EQ(d.eval.guidance_scale, 2.0);
  EXPECT_EQ(d.calib.set.ddim_steps, 40u);
  EXPECT_EQ(d.calib.set.tap_stride, 10u);
  const auto p = RunConfig::paper();
  EXPECT_EQ(p.schedule.steps, 1000u);
  EXPECT_EQ(p.calib.set.ddim_steps, 100u);
  EXPECT_EQ(p.calib.set.tap_stride, 25u);
  EXPECT_EQ(p.eval.ddim_steps, 100u);
  // The desk chain keeps the noise level of the 1000-step reference chain.
  const auto s = d.noise_schedule();
  EXPECT_NEAR(s.beta.front(), 5e-4, 1e-15);
  EXPECT_NEAR(s.beta.back(), 0.1, 1e-15);
  EXPECT_LT(s.alpha_bar.back(), 1e-4);
}

TEST(RunConfig, PartialFilesUsePresetDefaults) {
  const auto c = parse_config("[run]\npreset = paper\nseed = 9\n\n[train]\nepochs = 2\n");
  EXPECT_EQ(c.schedule.steps, 1000u);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.train.epochs, 2u);
  EXPECT_EQ(parse_config(""), RunConfig::desk());
  const auto lv = parse_config("[calib]\npsnr_levels = 5, 50\nn_samples = 16\n");
  EXPECT_EQ(lv.calib.set.psnr_levels, (std::vector<double>{5, 50}));
}

TEST(RunConfig, RejectsBadInput) {
  EXPECT_THROW(parse_config("[train]\nepoch = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("[nope]\nx = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nlr = fast\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nepochs = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("[quant]\nbits = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[quant]\nsplit = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("[eval]\nsampler = euler\n"), ConfigError);
  EXPECT_THROW(parse_config("[calib]\nn_samples = 60\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\npreset = huge\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/run.ini"), MissingArtifactError);
}

TEST(RunConfig, HashTracksContent) {
  auto a = RunConfig::desk(), b = a;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b.quant.bits = 4;
  EXPECT_NE(config_hash(a), config_hash(b));
}

// ---- dataset ----

TEST(Synth, DeterministicAndInRange) {
  const auto a = synth_dataset(6, 16, 16, 6, 11), b = synth_dataset(6, 16, 16, 6, 11);
  const auto c = synth_dataset(6, 16, 16, 6, 12);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].map, b[i].map);
    EXPECT_EQ(a[i].image.values(), b[i].image.values());
    differs |= !(a[i].map == c[i].map);
    for (float v : a[i].image.values()) {
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(render_image(a[0].map, a[0].render_seed).values(), a[0].image.values());
}

TEST(Synth, DegenerateDimsRejected) {
  EXPECT_THROW(synth_dataset(1, 2, 8, 3, 0), ConfigError);
  EXPECT_THROW(synth_dataset(1, 8, 8, 1, 0), ConfigError);
}

TEST(Synth, RenderThenClassifyRecoversMap) {
  for (const auto& ex : synth_dataset(20, 32, 32, 6, 4))
    EXPECT_GT(mean_iou(ex.map, classify_image(ex.image, 6)), 0.95);
}

TEST(Synth, SplitsAreDisjoint) {
  DatasetSpec s{40, 10, 10, 8, 8, 3, 2};
  const auto sp = synth_splits(s);
  EXPECT_EQ(sp.train.size(), 40u);
  EXPECT_EQ(sp.calib.size(), 10u);
  EXPECT_EQ(sp.eval.size(), 10u);
  EXPECT_NO_THROW(check_disjoint(maps_of(sp.train), "train", maps_of(sp.eval), "eval"));
  EXPECT_NO_THROW(check_disjoint(maps_of(sp.calib), "calib", maps_of(sp.eval), "eval"));
  EXPECT_NO_THROW(check_disjoint(maps_of(sp.train), "train", maps_of(sp.calib), "calib"));
  auto leaky = maps_of(sp.eval);
  leaky.push_back(sp.train[3].map);
  EXPECT_THROW(check_disjoint(maps_of(sp.train), "train", leaky, "eval"), LeakageError);
}

TEST(Metrics, MeanIouHandExample) {
  channel::SemanticMap a(1, 4, 3, {0, 0, 1, 1}), b(1, 4, 3, {0, 1, 1, 1});
  // class 0: 1/2, class 1: 2/3, class 2 absent.
  EXPECT_DOUBLE_EQ(mean_iou(a, b), (0.5 + 2.0 / 3.0) / 2.0);
  EXPECT_DOUBLE_EQ(mean_iou(a, a), 1.0);
}

// ---- flops and size ----

TEST(Flops, FormulaExamples) {
  EXPECT_EQ(conv_flops(3, 8, 3, 32, 32), 442368u);
  EXPECT_EQ(linear_flops(64, 64), 8192u);
  EXPECT_EQ(elementwise_flops(10), 50u);
}

TEST(Flops, WeightedConvention) {
  const auto f = flops_count(RunConfig::desk().denoiser(), 32, 32);
  EXPECT_EQ(f.raw(), f.weight_ops + f.other_ops);
  EXPECT_DOUBLE_EQ(f.weighted(8), 0.25 * static_cast<double>(f.weight_ops) + static_cast<double>(f.other_ops));
  EXPECT_DOUBLE_EQ(f.weighted(32), static_cast<double>(f.raw()));
  std::uint64_t sum = 0;
  for (const auto& e : f.entries) sum += e.flops;
  EXPECT_EQ(sum, f.raw());
}

TEST(Flops, WeightOpsMatchParameterShapes) {
  // Conv: 2 * numel(weight) * output pixels; linear: 2 * numel(weight).
  num::RngStream init(1, "test/init");
  const auto cfg = RunConfig::desk().denoiser();
  net::Denoiser m(cfg, init);
  std::uint64_t expect = 0;
  for (const auto& li : m.graph().layers) {
    if (li.kind == net::LayerKind::group_norm) continue;
    const auto& w = m.params().get(li.weight_name());
    const std::uint64_t px = li.kind == net::LayerKind::conv ? (32u >> li.level) * (32u >> li.level) : 1u;
    expect += 2 * w.numel() * px;
  }
  EXPECT_EQ(flops_count(cfg, 32, 32).weight_ops, expect);
}

TEST(Size, EightBitPayloadIsAQuarter) {
  num::RngStream init(2, "test/init");
  net::Denoiser m(tiny().denoiser(), init);
  quant::QuantModel q(m, tiny().quant_config());
  const auto f = flops_count(m.config(), 8, 8);
  const auto fp = model_row("fp", 32, quant::size_bits(m), f);
  const auto q8 = model_row("q8", 8, quant::size_bits(q), f);
  EXPECT_EQ(4 * q8.payload_bits, fp.payload_bits);
  EXPECT_EQ(q8.size_reduction_pct, 75.0);
  EXPECT_EQ(fp.size_reduction_pct, 0.0);
  EXPECT_GT(q8.metadata_bits, 0u);
  EXPECT_EQ(q8.flops_raw, fp.flops_raw);
  EXPECT_LT(q8.flops_weighted, fp.flops_weighted);
}

// ---- training ----

TEST(Train, ProgressesAndIsDeterministic) {
  auto& t = Trained::get();
  const std::size_t per_epoch = (t.cfg.dataset.n_train + t.cfg.train.batch - 1) / t.cfg.train.batch;
  ASSERT_EQ(t.tr.curve.size(), t.cfg.train.epochs * per_epoch);
  ASSERT_EQ(t.tr.epoch_loss.size(), t.cfg.train.epochs);
  EXPECT_LT(t.tr.epoch_loss.back(), t.tr.curve.front().total);
  auto again = train_fp(t.cfg, t.splits.train, 3);
  ASSERT_EQ(again.curve.size(), t.tr.curve.size());
  for (std::size_t i = 0; i < again.curve.size(); ++i) EXPECT_EQ(again.curve[i].total, t.tr.curve[i].total);
  for (const auto& n : again.model.params().names())
    EXPECT_EQ(again.model.params().get(n).values(), t.tr.model.params().get(n).values());
}

TEST(Train, NoKlBranchCompletes) {
  auto cfg = tiny();
  cfg.train.lambda_kl = 0.0;
  cfg.train.epochs = 1;
  const auto r = train_fp(cfg, synth_splits(cfg.dataset).train, 1);
  for (const auto& s : r.curve) EXPECT_DOUBLE_EQ(s.total, s.diffusion);
}

TEST(Train, DivergenceAbortsWithLastGoodCheckpoint) {
  auto cfg = tiny();
  cfg.train.lr = 1e30;
  const auto dir = temp_dir("diverge");
  EXPECT_THROW(train_fp(cfg, synth_splits(cfg.dataset).train, 1, dir / "last_good.bin"), DivergenceError);
  ASSERT_TRUE(fs::exists(dir / "last_good.bin"));
  const auto ck = net::load_checkpoint(dir / "last_good.bin");
  for (const auto& [n, t] : ck.params)
    for (float v : t.values()) ASSERT_TRUE(std::isfinite(v)) << n;
}

TEST(Train, CheckpointReloadReproducesForward) {
  auto& t = Trained::get();
  const auto dir = temp_dir("ckpt");
  net::save_checkpoint(dir / "fp.bin", t.tr.model, t.tr.schedule);
  auto ck = net::load_checkpoint(dir / "fp.bin");
  auto m = net::model_from_checkpoint(ck);
  num::RngStream st(4, "test/x");
  const Tensor x = num::sample_normal(st, {2, 3, 8, 8});
  const Tensor y = num::sample_uniform(st, {2, 3, 8, 8}, 0, 1);
  EXPECT_EQ(m.forward(x, {3, 17}, y).eps.values(), t.tr.model.forward(x, {3, 17}, y).eps.values());
  EXPECT_EQ(net::schedule_from_checkpoint(ck).alpha_bar, t.tr.schedule.alpha_bar);
  write_loss_csv(dir / "loss.csv", t.tr.curve);
  std::ifstream is(dir / "loss.csv");
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "step,epoch,total,diffusion,kl");
}

// ---- link ----

TEST(Link, DeterministicAndBatchIndependent) {
  auto& t = Trained::get();
  const auto maps = maps_of(t.splits.eval);
  auto spec = t.cfg.eval;
  const auto a = run_link(t.tr.model, t.tr.schedule, maps, 20.0, spec, 7);
  const auto b = run_link(t.tr.model, t.tr.schedule, maps, 20.0, spec, 7);
  spec.batch = 1;
  const auto c = run_link(t.tr.model, t.tr.schedule, maps, 20.0, spec, 7);
  ASSERT_EQ(a.images.size(), maps.size());
  for (std::size_t i = 0; i < maps.size(); ++i) {
    EXPECT_EQ(a.images[i].values(), b.images[i].values());
    EXPECT_EQ(a.images[i].values(), c.images[i].values());
    EXPECT_EQ(a.bandwidth[i].compressed_bits, channel::bandwidth_bits(maps[i]).compressed_bits);
  }
  // Sample i depends on its own streams only.
  const std::vector<channel::SemanticMap> rest(maps.begin(), maps.begin() + 2);
  const auto d = run_link(t.tr.model, t.tr.schedule, rest, 20.0, t.cfg.eval, 7);
  EXPECT_EQ(d.images[1].values(), a.images[1].values());
}

TEST(Link, CleanChannelConditionsOnExactOneHot) {
  auto& t = Trained::get();
  const auto maps = maps_of(t.splits.eval);
  const auto r = run_link(t.tr.model, t.tr.schedule, maps, std::nullopt, t.cfg.eval, 1);
  for (std::size_t i = 0; i < maps.size(); ++i)
    EXPECT_EQ(r.received[i].values(), channel::encode_map(maps[i]).tensor.values());
}

TEST(Link, GuidanceScaleChangesOutput) {
  auto& t = Trained::get();
  const auto maps = maps_of(t.splits.eval);
  auto spec = t.cfg.eval;
  const auto g2 = run_link(t.tr.model, t.tr.schedule, maps, 20.0, spec, 1);
  spec.guidance_scale = 0.0;
  const auto g0 = run_link(t.tr.model, t.tr.schedule, maps, 20.0, spec, 1);
  double diff = 0.0, n = 0.0;
  for (std::size_t i = 0; i < maps.size(); ++i)
    for (std::size_t k = 0; k < g2.images[i].numel(); ++k, n += 1.0)
      diff += std::abs(static_cast<double>(g2.images[i][k]) - g0.images[i][k]);
  EXPECT_GT(diff / n, 1e-3);
}

TEST(Link, DdpmSamplerRuns) {
  auto& t = Trained::get();
  auto spec = t.cfg.eval;
  spec.sampler = SamplerKind::ddpm;
  const auto maps = maps_of(t.splits.eval);
  const auto a = run_link(t.tr.model, t.tr.schedule, maps, 10.0, spec, 2);
  const auto b = run_link(t.tr.model, t.tr.schedule, maps, 10.0, spec, 2);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    EXPECT_EQ(a.images[i].shape(), (num::Shape{3, 8, 8}));
    EXPECT_EQ(a.images[i].values(), b.images[i].values());
  }
}

TEST(Link, PpmLayout) {
  const auto dir = temp_dir("ppm");
  Tensor im({3, 2, 2}, std::vector<float>{-1, 1, 0, 0.5f, -1, -1, -1, -1, 1, 1, 1, 1});
  write_ppm(dir / "a.ppm", im);
  const auto s = slurp(dir / "a.ppm");
  ASSERT_EQ(s.substr(0, 11), "P6\n2 2\n255\n");
  const auto* px = reinterpret_cast<const unsigned char*>(s.data() + 11);
  ASSERT_EQ(s.size(), 11u + 12u);
  EXPECT_EQ(px[0], 0);    // (0,0) red
  EXPECT_EQ(px[3], 255);  // (0,1) red
  EXPECT_EQ(px[6], 128);  // (1,0) red: round(127.5)
  EXPECT_EQ(px[2], 255);  // (0,0) blue
  const auto g = image_grid({im, im, im}, 2);
  EXPECT_EQ(g.shape(), (num::Shape{3, 7, 7}));
}

// ---- evaluation ----

TEST(Evaluate, SelfComparisonAndBookkeeping) {
  auto& t = Trained::get();
  const auto dir = temp_dir("eval");
  const auto size = quant::size_bits(t.tr.model);
  std::vector<EvalModel> ms{{"fp", &t.tr.model, 32, size}, {"fp_again", &t.tr.model, 32, size}};
  HeldOutMaps others{maps_of(t.splits.train), maps_of(t.splits.calib)};
  const auto rep = evaluate(ms, t.tr.schedule, t.splits.eval, others, t.cfg, 1, dir / "img");
  ASSERT_EQ(rep.conditions.size(), t.cfg.eval.psnr_list.size() * 2);
  for (std::size_t i = 0; i < rep.conditions.size(); i += 2) {
    EXPECT_EQ(rep.conditions[i].mse, rep.conditions[i + 1].mse);
    EXPECT_EQ(rep.conditions[i].miou, rep.conditions[i + 1].miou);
    EXPECT_GE(rep.conditions[i].miou, 0.0);
    EXPECT_LE(rep.conditions[i].miou, 1.0);
  }
  EXPECT_TRUE(fs::exists(dir / "img" / "grid_psnr100.ppm"));
  EXPECT_TRUE(fs::exists(dir / "img" / "grid_psnr10.ppm"));

  write_conditions_csv(dir / "c.csv", rep.conditions);
  write_models_csv(dir / "m.csv", rep.models);
  EXPECT_EQ(read_conditions_csv(dir / "c.csv").size(), rep.conditions.size());
  const auto back = read_models_csv(dir / "m.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0], rep.models[0]);
  EXPECT_THROW(read_models_csv(dir / "c.csv"), IoError);
  EXPECT_THROW(read_models_csv(dir / "none.csv"), MissingArtifactError);

  auto leaky = t.splits.eval;
  leaky.push_back(t.splits.train[0]);
  EXPECT_THROW(evaluate(ms, t.tr.schedule, leaky, others, t.cfg, 1), LeakageError);
  leaky.back() = t.splits.calib[0];
  EXPECT_THROW(evaluate(ms, t.tr.schedule, leaky, others, t.cfg, 1), LeakageError);
}

TEST(Evaluate, SummaryColumns) {
  std::vector<ModelRow> models{{"fp", 32, 800, 0, 0, 1000, 1000, 0}, {"q8", 8, 200, 96, 75, 1000, 400, 60}};
  std::vector<ConditionRow> conds{{"fp", 100.0, 0.1, 0.9, 4}, {"q8", 100.0, 0.2, 0.8, 4}, {"fp", 10.0, 0.3, 0.7, 4}};
  const auto t = summarize(models, conds);
  EXPECT_EQ(t.header, (std::vector<std::string>{"model", "weight_bits", "payload_bits", "size_reduction_pct",
                                                "flops_raw", "flops_weighted", "flops_reduction_pct", "mse@100",
                                                "miou@100", "mse@10", "miou@10"}));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[1][1], "8");
  EXPECT_EQ(t.rows[1][3], "75");
  EXPECT_EQ(t.rows[1][8], "0.8");
  EXPECT_EQ(t.rows[1][9], "");
  const auto dir = temp_dir("summary");
  write_summary_markdown(dir / "s.md", t);
  EXPECT_NE(slurp(dir / "s.md").find(kFlopsConvention), std::string::npos);
}

// ---- stages ----

TEST(Stages, CalibrationReportAndManifest) {
  auto& t = Trained::get();
  auto set = make_calibration_set(t.tr.model, t.tr.schedule, maps_of(t.splits.calib), t.cfg, 2);
  EXPECT_EQ(set.samples.size(), 16u);
  for (const auto& s : set.samples) EXPECT_TRUE(s.psnr_level.has_value());
  auto ts_cfg = t.cfg;
  ts_cfg.calib.variant = CalibVariant::timestep;
  for (const auto& s : make_calibration_set(t.tr.model, t.tr.schedule, maps_of(t.splits.calib), ts_cfg, 2).samples)
    EXPECT_FALSE(s.psnr_level.has_value());

  quant::QuantModel qm(t.tr.model, t.cfg.quant_config());
  const auto rep = quantize_and_calibrate(qm, set, t.cfg, 2);
  EXPECT_EQ(rep.blocks.size(), t.tr.model.graph().blocks.size());
  const auto dir = temp_dir("stages");
  write_calibration_csv(dir / "calib.csv", rep);
  std::ifstream is(dir / "calib.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(is, line)) ++lines;
  EXPECT_EQ(lines, rep.blocks.size() + 2);

  write_manifest(dir, "train", t.cfg, 5, {{"checkpoint", "fp.bin"}});
  const auto first = slurp(dir / "manifest_train.txt");
  write_manifest(dir, "train", t.cfg, 5, {{"checkpoint", "fp.bin"}});
  EXPECT_EQ(slurp(dir / "manifest_train.txt"), first);
  EXPECT_NE(first.find("config_hash = " + config_hash(t.cfg)), std::string::npos);
}

}  // namespace
}  // namespace qsd::pipeline
