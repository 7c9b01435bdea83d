// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero
// when any criterion fails. Criteria 6 to 8 and 10 share full desk-preset
// runs (train, two calibration variants, evaluation) for each seed.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qsd/calib/calibset.hpp"
#include "qsd/channel/channel.hpp"
#include "qsd/diffusion/losses.hpp"
#include "qsd/net/denoiser.hpp"
#include "qsd/numerics/random.hpp"
#include "qsd/pipeline/config.hpp"
#include "qsd/pipeline/dataset.hpp"
#include "qsd/pipeline/metrics.hpp"
#include "qsd/pipeline/stages.hpp"
#include "qsd/pipeline/train.hpp"
#include "qsd/quant/qcheckpoint.hpp"
#include "qsd/quant/quantizer.hpp"
#include "support/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace qsd;
using namespace qsd::pipeline;

namespace {

// Pinned tolerances.
constexpr double kPayloadReduction = 0.75;           // 1: exact
constexpr std::size_t kPropertyCases = 10000;        // 2: cases per property
constexpr double kGradRelTol = 1e-3;                 // 3
constexpr double kGradAbsFloor = 1e-6;               // 3
constexpr int kGradInstances = 10;                   // 3
constexpr std::size_t kForwardDraws = 100000;        // 4
constexpr double kStdErrors = 3.0;                   // 4
constexpr double kPsnrTolDb = 0.2;                   // 5
constexpr int kPsnrDraws = 100;                      // 5
constexpr double kMiouMargin = 0.10;                 // 7

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// --- 1 ---------------------------------------------------------------------

Outcome memory_ratio(const fs::path& dir) {
  const auto cfg = RunConfig::desk();
  num::RngStream init(cfg.seed, "model/init");
  net::Denoiser fp(cfg.denoiser(), init);
  quant::QuantModel qm(fp, cfg.quant_config());
  const auto path = dir / "criterion1.qckpt";
  quant::save_quantized(path, qm, cfg.noise_schedule());
  const auto stored = quant::size_bits(quant::load_quantized(path));
  const auto full = quant::size_bits(fp);
  const bool exact = stored.payload_bits * 4 == full.payload_bits && stored.fp_payload_bits == full.payload_bits &&
                     stored.reduction() == kPayloadReduction;
  return {exact && stored.metadata_bits > 0,
          fmt("payload %llu of %llu bits, reduction %.4f%%, metadata %llu bits reported separately",
              static_cast<unsigned long long>(stored.payload_bits),
              static_cast<unsigned long long>(full.payload_bits), 100.0 * stored.reduction(),
              static_cast<unsigned long long>(stored.metadata_bits))};
}

// --- 2 ---------------------------------------------------------------------

Outcome quantizer_properties() {
  num::RngStream s(2, "acceptance/quantizer");
  std::size_t bound_fail = 0, idem_fail = 0, mono_fail = 0, clip_fail = 0, clip_checked = 0;
  auto random_params = [&] {
    auto q = quant::signed_range(2 + static_cast<int>(s.uniform_int(7)));
    q.scale = static_cast<float>(s.uniform(1e-4, 1.0));
    return q;
  };
  for (std::size_t c = 0; c < kPropertyCases; ++c) {
    // In-range round trip: |w - w_hat| <= s/2, evaluated in double.
    auto q = random_params();
    const double lo = double(q.c_min) * q.scale, hi = double(q.c_max) * q.scale;
    auto w = num::sample_uniform(s, {16}, lo, hi);
    auto wq = quant::quantize_dequantize(w, q);
    for (std::size_t i = 0; i < w.numel(); ++i)
      if (w[i] >= lo && w[i] <= hi && std::abs(double(w[i]) - double(wq[i])) > double(q.scale) / 2) ++bound_fail;
  }
  for (std::size_t c = 0; c < kPropertyCases; ++c) {
    auto q = random_params();
    auto w = num::sample_uniform(s, {16}, 1.5 * q.c_min * q.scale, 1.5 * q.c_max * q.scale);
    auto wq = quant::quantize_dequantize(w, q);
    if (quant::quantize_dequantize(wq, q).values() != wq.values()) ++idem_fail;
  }
  for (std::size_t c = 0; c < kPropertyCases; ++c) {
    auto q = random_params();
    auto v = num::sample_uniform(s, {16}, 1.5 * q.c_min * q.scale, 1.5 * q.c_max * q.scale).values();
    std::sort(v.begin(), v.end());
    auto wq = quant::quantize_dequantize(num::Tensor({16}, v), q);
    for (std::size_t i = 1; i < v.size(); ++i)
      if (wq[i - 1] > wq[i]) ++mono_fail;
  }
  for (std::size_t c = 0; c < kPropertyCases; ++c) {
    // Beyond half a step outside the grid every value lands on its end point.
    auto q = random_params();
    const double step = q.scale;
    const double hi = (q.c_max + 0.5) * step, lo = (q.c_min - 0.5) * step;
    std::vector<float> v(16);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double mag = s.uniform(1.0001, 100.0);
      v[i] = static_cast<float>(i % 2 ? hi * mag : lo * mag);
    }
    auto wq = quant::quantize_dequantize(num::Tensor({16}, v), q);
    const float top = q.scale * static_cast<float>(q.c_max), bottom = q.scale * static_cast<float>(q.c_min);
    for (std::size_t i = 0; i < v.size(); ++i, ++clip_checked)
      if (wq[i] != (i % 2 ? top : bottom)) ++clip_fail;
  }
  const bool ok = bound_fail + idem_fail + mono_fail + clip_fail == 0;
  return {ok, fmt("%zu cases per property; violations: bound %zu, idempotence %zu, monotone %zu, clip %zu of %zu",
                  kPropertyCases, bound_fail, idem_fail, mono_fail, clip_fail, clip_checked)};
}

// --- 3 ---------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto cases = qsd::testing::gradient_cases();
  std::set<std::string> failed;
  double worst = 0.0;
  std::size_t checked = 0;
  for (const auto& c : cases) {
    num::RngStream rng(1234, "gradcheck/" + c.name);
    for (int i = 0; i < kGradInstances; ++i) {
      auto [fn, inputs] = c.make(rng);
      auto r = qsd::testing::grad_check(fn, inputs, 1e-3, kGradRelTol, kGradAbsFloor);
      worst = std::max(worst, r.worst_rel);
      checked += r.checked;
      if (!r.ok || r.checked == 0) failed.insert(c.name);
    }
  }
  std::string names;
  for (const auto& n : failed) names += " " + n;
  return {failed.empty(), fmt("%zu op cases x %d instances, %zu derivatives, worst relative error %.2e%s%s",
                              cases.size(), kGradInstances, checked, worst, failed.empty() ? "" : "; failed:",
                              names.c_str())};
}

// --- 4 ---------------------------------------------------------------------

Outcome forward_statistics() {
  const auto sched = RunConfig::paper().noise_schedule();
  num::RngStream s(4, "acceptance/q_sample");
  const double x0v = 0.5;
  num::Tensor x0({kForwardDraws}, static_cast<float>(x0v));
  bool ok = true;
  std::string detail;
  for (int t : {0, 249, 499, 749, 999}) {
    auto eps = num::sample_normal(s, {kForwardDraws});
    auto xt = diffusion::q_sample(x0.reshape({kForwardDraws, 1}), std::vector<int>(kForwardDraws, t),
                                  eps.reshape({kForwardDraws, 1}), sched);
    double mean = 0.0;
    for (std::size_t i = 0; i < kForwardDraws; ++i) mean += xt[i];
    mean /= kForwardDraws;
    double var = 0.0;
    for (std::size_t i = 0; i < kForwardDraws; ++i) var += (xt[i] - mean) * (xt[i] - mean);
    var /= kForwardDraws - 1;
    const double ab = sched.alpha_bar_at(t);
    const double want_mean = std::sqrt(ab) * x0v, want_var = 1.0 - ab;
    const double se_mean = std::sqrt(want_var / kForwardDraws);
    const double se_var = want_var * std::sqrt(2.0 / (kForwardDraws - 1));
    const double zm = (mean - want_mean) / se_mean, zv = (var - want_var) / se_var;
    ok = ok && std::abs(zm) <= kStdErrors && std::abs(zv) <= kStdErrors;
    detail += fmt("%st=%d z_mean %+.2f z_var %+.2f", detail.empty() ? "" : ", ", t, zm, zv);
  }
  return {ok, fmt("N=%zu, T=1000; ", kForwardDraws) + detail};
}

// --- 5 ---------------------------------------------------------------------

Outcome channel_fidelity() {
  std::vector<std::uint16_t> ids(32 * 32);
  num::RngStream layout(5, "acceptance/map");
  for (auto& id : ids) id = static_cast<std::uint16_t>(layout.uniform_int(8));
  const auto x = channel::encode_map(channel::SemanticMap(32, 32, 8, ids));
  num::RngStream s(5, "acceptance/awgn");
  bool ok = x.tensor.shape() == num::Shape{8, 32, 32};
  std::string detail;
  for (double target : {0.0, 10.0, 20.0, 40.0}) {
    double acc = 0.0;
    for (int d = 0; d < kPsnrDraws; ++d) acc += channel::measure_psnr(x.tensor, channel::awgn(x, target, s).tensor);
    const double got = acc / kPsnrDraws;
    ok = ok && std::abs(got - target) <= kPsnrTolDb;
    detail += fmt("%s%.0f->%.3f", detail.empty() ? "" : ", ", target, got);
  }
  return {ok, "8x32x32 one-hot, 100 draws, target->measured dB: " + detail};
}

// --- 9 ---------------------------------------------------------------------

struct Strata {
  std::map<int, std::size_t> per_tap;
  std::map<double, std::size_t> per_level;
  std::size_t clean = 0;
};

Strata strata(const calib::CalibrationSet& set) {
  Strata st;
  for (const auto& smp : set.samples) {
    ++st.per_tap[smp.t];
    if (smp.psnr_level) ++st.per_level[*smp.psnr_level];
    else ++st.clean;
  }
  return st;
}

bool uniform_counts(const auto& m, std::size_t want) {
  return std::all_of(m.begin(), m.end(), [&](const auto& kv) { return kv.second == want; });
}

Outcome calibration_contract(const calib::CalibrationSet* desk_set) {
  auto cfg = RunConfig::paper();
  cfg.validate();
  num::RngStream init(cfg.seed, "model/init");
  net::Denoiser fp(cfg.denoiser(), init);
  auto sp = synth_splits(cfg.dataset);
  const auto set = make_calibration_set(fp, cfg.noise_schedule(), maps_of(sp.calib), cfg, 0);
  const auto st = strata(set);
  bool ok = set.samples.size() == 64 && set.taps.size() == 4 && st.per_tap.size() == 4 &&
            uniform_counts(st.per_tap, 16) && st.per_level.size() == 8 && uniform_counts(st.per_level, 8) &&
            st.clean == 0;
  std::string levels;
  for (const auto& [lv, n] : st.per_level) levels += fmt("%s%.3g:%zu", levels.empty() ? "" : " ", lv, n);
  std::string detail = fmt("paper: %zu samples, taps {%d,%d,%d,%d}, %zu levels {%s}", set.samples.size(),
                           set.taps.at(0), set.taps.at(1), set.taps.at(2), set.taps.at(3), st.per_level.size(),
                           levels.c_str());
  if (desk_set) {
    // Same stratification on the desk preset: equal counts per tap and per
    // level, every tap holding every level equally often.
    const auto ds = strata(*desk_set);
    const auto& dc = desk_set->config;
    const std::size_t n = desk_set->samples.size(), L = dc.psnr_levels.size(), K = dc.taps_per_trajectory();
    std::map<std::pair<int, double>, std::size_t> joint;
    for (const auto& smp : desk_set->samples)
      if (smp.psnr_level) ++joint[{smp.t, *smp.psnr_level}];
    const bool desk_ok = n == dc.n_samples && desk_set->taps.size() == K && ds.per_tap.size() == K &&
                         uniform_counts(ds.per_tap, n / K) && ds.per_level.size() == L &&
                         uniform_counts(ds.per_level, n / L) && joint.size() == K * L &&
                         uniform_counts(joint, n / (K * L)) && ds.clean == 0;
    ok = ok && desk_ok;
    detail += fmt("; desk: %zu samples, %zu taps x %zu levels, %zu per cell%s", n, K, L, n / (K * L),
                  desk_ok ? "" : " (stratification broken)");
  } else {
    ok = false;
    detail += "; desk set unavailable";
  }
  return {ok, detail};
}

// --- desk runs (6, 7, 8, 10) ------------------------------------------------

struct DeskRun {
  quant::CalibrationReport calibrated;
  quant::CalibrationReport timestep_only;
  std::vector<ConditionRow> conditions;
  calib::CalibrationSet set;
  double seconds = 0.0;
};

// One desk-preset run: every artifact lands in `dir` so reruns can be
// compared byte for byte.
DeskRun desk_run(const RunConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(dir);
  const auto sp = synth_splits(cfg.dataset);
  auto tr = train_fp(cfg, sp.train, seed);
  net::save_checkpoint(dir / "fp.ckpt", tr.model, tr.schedule);
  write_loss_csv(dir / "loss.csv", tr.curve);

  DeskRun run;
  auto ts_cfg = cfg;
  ts_cfg.calib.variant = CalibVariant::timestep;
  run.set = make_calibration_set(tr.model, tr.schedule, maps_of(sp.calib), cfg, seed);
  const auto ts_set = make_calibration_set(tr.model, tr.schedule, maps_of(sp.calib), ts_cfg, seed);
  calib::save_calibration_set(dir / "calibset_noise_timestep.bin", run.set);
  calib::save_calibration_set(dir / "calibset_timestep.bin", ts_set);

  quant::QuantModel q_nt(tr.model, cfg.quant_config());
  run.calibrated = quantize_and_calibrate(q_nt, run.set, cfg, seed);
  quant::QuantModel q_ts(tr.model, cfg.quant_config());
  run.timestep_only = quantize_and_calibrate(q_ts, ts_set, ts_cfg, seed);
  quant::save_quantized(dir / "quant_noise_timestep.qckpt", q_nt, tr.schedule);
  quant::save_quantized(dir / "quant_timestep.qckpt", q_ts, tr.schedule);
  write_calibration_csv(dir / "calibration_noise_timestep.csv", run.calibrated);
  write_calibration_csv(dir / "calibration_timestep.csv", run.timestep_only);

  std::vector<EvalModel> models{{"fp", &tr.model, 32, quant::size_bits(tr.model)},
                                {"noise_timestep", &q_nt, cfg.quant.bits, quant::size_bits(q_nt)},
                                {"timestep", &q_ts, cfg.quant.bits, quant::size_bits(q_ts)}};
  auto rep = evaluate(models, tr.schedule, sp.eval, {maps_of(sp.train), maps_of(sp.calib)}, cfg, seed, dir / "images");
  write_conditions_csv(dir / "conditions.csv", rep.conditions);
  write_models_csv(dir / "models.csv", rep.models);
  run.conditions = rep.conditions;
  run.seconds = seconds_since(t0);
  return run;
}

std::optional<double> miou_of(const DeskRun& r, const std::string& model, double psnr) {
  for (const auto& c : r.conditions)
    if (c.model == model && c.psnr_db && *c.psnr_db == psnr) return c.miou;
  return std::nullopt;
}

Outcome calibration_efficacy(const std::vector<DeskRun>& runs) {
  bool ok = !runs.empty();
  std::string detail;
  for (std::size_t s = 0; s < runs.size(); ++s) {
    const auto& rep = runs[s].calibrated;
    std::size_t worse = 0;
    std::string names;
    for (const auto& b : rep.blocks)
      if (!(b.heldout_mse_calibrated <= b.heldout_mse_nearest)) {
        ++worse;
        names += " " + b.block;
      }
    const bool e2e = rep.eps_mse_calibrated < rep.eps_mse_nearest;
    ok = ok && worse == 0 && e2e && !rep.blocks.empty();
    detail += fmt("%sseed %zu: %zu/%zu blocks improved on %zu held-out inputs%s%s, eps MSE %.3e -> %.3e",
                  s ? "; " : "", s, rep.blocks.size() - worse, rep.blocks.size(), rep.heldout_samples,
                  worse ? ", worse:" : "", names.c_str(), rep.eps_mse_nearest, rep.eps_mse_calibrated);
  }
  return {ok, detail};
}

Outcome quality_retention(const std::vector<DeskRun>& runs, const std::vector<double>& psnrs) {
  bool ok = runs.size() >= 3;
  std::string detail;
  double worst = 0.0;
  for (std::size_t s = 0; s < runs.size(); ++s)
    for (double p : psnrs) {
      const auto fp = miou_of(runs[s], "fp", p), q = miou_of(runs[s], "noise_timestep", p);
      if (!fp || !q) {
        ok = false;
        continue;
      }
      const double gap = std::abs(*q - *fp);
      worst = std::max(worst, gap);
      ok = ok && gap <= kMiouMargin;
      detail += fmt("%ss%zu@%g fp %.3f q8 %.3f", detail.empty() ? "" : ", ", s, p, *fp, *q);
    }
  return {ok, fmt("largest |mIoU(q8) - mIoU(fp)| %.4f (limit %.2f); ", worst, kMiouMargin) + detail};
}

Outcome ablation_ordering(const std::vector<DeskRun>& runs) {
  double nt = 0.0, ts = 0.0;
  bool ok = runs.size() >= 3;
  std::string detail;
  for (std::size_t s = 0; s < runs.size(); ++s) {
    const auto a = miou_of(runs[s], "noise_timestep", 10.0), b = miou_of(runs[s], "timestep", 10.0);
    if (!a || !b) {
      ok = false;
      continue;
    }
    nt += *a;
    ts += *b;
    detail += fmt("%ss%zu %.3f vs %.3f", detail.empty() ? "" : ", ", s, *a, *b);
  }
  if (!runs.empty()) {
    nt /= runs.size();
    ts /= runs.size();
  }
  ok = ok && nt >= ts;
  return {ok, fmt("PSNR 10 mean mIoU over %zu seeds: noise+timestep %.4f, timestep-only %.4f (", runs.size(), nt, ts) +
                  detail + ")"};
}

Outcome determinism(const fs::path& first, const fs::path& second) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(first))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), first));
  std::sort(files.begin(), files.end());
  std::size_t other = 0;
  for (const auto& e : fs::recursive_directory_iterator(second))
    if (e.is_regular_file()) ++other;
  std::vector<std::string> differing;
  std::size_t ckpt = 0, csv = 0, ppm = 0;
  for (const auto& f : files) {
    const auto ext = f.extension().string();
    ckpt += ext == ".ckpt" || ext == ".qckpt" || ext == ".bin";
    csv += ext == ".csv";
    ppm += ext == ".ppm";
    if (!fs::exists(second / f) || slurp(first / f) != slurp(second / f)) differing.push_back(f.string());
  }
  const bool ok = !files.empty() && differing.empty() && other == files.size() && ckpt > 0 && csv > 0 && ppm > 0;
  std::string detail = fmt("%zu files compared (%zu checkpoints/sets, %zu CSVs, %zu images)", files.size(), ckpt, csv,
                           ppm);
  for (const auto& d : differing) detail += " differs:" + d;
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string out = "acceptance_out";
  std::size_t seeds = 3;
  std::vector<int> only;
  app.add_option("--out", out, "Scratch directory for run artifacts")->capture_default_str();
  app.add_option("--seeds", seeds, "Desk-preset seeds for criteria 6 to 8")->capture_default_str();
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const fs::path root = out;
  fs::remove_all(root);
  fs::create_directories(root);
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  std::map<int, std::pair<std::string, Outcome>> results;
  auto record = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    o.detail += fmt(" [%.1fs]", seconds_since(t0));
    std::printf("  finished %d (%s)\n", id, name);
    std::fflush(stdout);
    results[id] = {name, o};
  };

  record(1, "memory ratio", [&] { return memory_ratio(root); });
  record(2, "quantizer correctness", quantizer_properties);
  record(3, "gradient fidelity", gradient_fidelity);
  record(4, "forward-process statistics", forward_statistics);
  record(5, "channel fidelity", channel_fidelity);

  const auto cfg = RunConfig::desk();
  std::vector<DeskRun> runs;
  const bool need_desk = wanted(6) || wanted(7) || wanted(8) || wanted(9) || wanted(10);
  if (need_desk) {
    const std::size_t n = (wanted(6) || wanted(7) || wanted(8)) ? seeds : 1;
    for (std::size_t s = 0; s < n; ++s) {
      try {
        runs.push_back(desk_run(cfg, s, root / fmt("desk_seed%zu", s)));
        std::printf("  desk run seed %zu done in %.1fs\n", s, runs.back().seconds);
      } catch (const std::exception& e) {
        std::printf("  desk run seed %zu failed: %s\n", s, e.what());
      }
      std::fflush(stdout);
    }
  }
  record(6, "calibration efficacy", [&] { return calibration_efficacy(runs); });
  record(7, "end-to-end quality retention", [&] { return quality_retention(runs, cfg.eval.psnr_list); });
  record(8, "ablation ordering", [&] { return ablation_ordering(runs); });
  record(9, "calibration-set contract", [&] { return calibration_contract(runs.empty() ? nullptr : &runs.front().set); });
  record(10, "determinism", [&] {
    // Full rerun of the first desk seed, plus the stand-alone artifacts.
    const auto rerun = desk_run(cfg, 0, root / "desk_seed0_rerun");
    (void)rerun;
    return determinism(root / "desk_seed0", root / "desk_seed0_rerun");
  });

  bool all = true;
  std::printf("\n");
  for (const auto& [id, r] : results) {
    all = all && r.second.pass;
    std::printf("%s criterion %d (%s): %s\n", r.second.pass ? "PASS" : "FAIL", id, r.first.c_str(),
                r.second.detail.c_str());
  }
  return all ? 0 : 1;
}
