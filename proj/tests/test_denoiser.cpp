// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "qsd/diffusion/losses.hpp"
#include "qsd/error.hpp"
#include "qsd/net/denoiser.hpp"
#include "qsd/numerics/ops.hpp"
#include "qsd/numerics/optim.hpp"
#include "qsd/numerics/random.hpp"

namespace qsd::net {
namespace {

DenoiserConfig small_config() {
  DenoiserConfig c;
  c.base_width = 8;
  c.time_embed_dim = 16;
  c.cond_channels = 2;
  return c;
}

// Hand count of the residual block: two group norms, two 3x3 convs, the
// timestep projection and a 1x1 shortcut when widths differ.
std::size_t res_params(std::size_t cin, std::size_t cout, std::size_t d) {
  std::size_t n = 2 * cin + (9 * cin * cout + cout) + (d * cout + cout) + 2 * cout + (9 * cout * cout + cout);
  if (cin != cout) n += cin * cout + cout;
  return n;
}

TEST(TimeEmbedding, ZeroStepAlternates) {
  auto e = time_embedding({0}, 8);
  EXPECT_EQ(e.values(), (std::vector<float>{0, 1, 0, 1, 0, 1, 0, 1}));
  EXPECT_THROW(time_embedding({0}, 7), ConfigError);
}

TEST(TimeEmbedding, PairsOnUnitCircleAndLowestFrequency) {
  auto e = time_embedding({3, 117, 10000}, 64);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t i = 0; i < 32; ++i) {
      const double s = e[r * 64 + 2 * i], c = e[r * 64 + 2 * i + 1];
      EXPECT_NEAR(s * s + c * c, 1.0, 1e-6);
    }
  // Last pair at t = 10000: argument 10000 * 10000^(-62/64) = 10000^(1/32).
  const double arg = std::pow(10000.0, 1.0 / 32.0);
  EXPECT_NEAR(arg, 1.3335, 1e-4);
  EXPECT_NEAR(e[2 * 64 + 62], std::sin(arg), 1e-6);
  EXPECT_NEAR(e[2 * 64 + 63], std::cos(arg), 1e-6);
}

TEST(Blocks, DefaultConfigStructure) {
  DenoiserConfig c;
  auto g = enumerate_blocks(c);
  std::vector<std::string> names;
  for (const auto& b : g.blocks) names.push_back(b.name);
  EXPECT_EQ(names, (std::vector<std::string>{"time", "input", "down0", "down1", "mid", "up1", "up0", "output"}));
  std::size_t up_concat = 0;
  for (const auto& b : g.blocks) up_concat += b.concat_input;
  EXPECT_EQ(up_concat, 2u);
  EXPECT_TRUE(g.blocks[5].concat_input && g.blocks[6].concat_input);
}

TEST(Blocks, ParameterCountMatchesHandFormula) {
  DenoiserConfig c;
  const std::size_t d = 64;
  const std::size_t expected = 2 * (d * d + d) + (9 * 9 * 32 + 32) + res_params(32, 32, d) + res_params(32, 64, d) +
                               res_params(64, 64, d) + res_params(128, 32, d) + res_params(64, 32, d) + 2 * 32 +
                               (9 * 32 * 6 + 6);
  EXPECT_EQ(expected, 258342u);
  EXPECT_EQ(parameter_count(c), expected);
  num::RngStream init(1, "test/init");
  Denoiser m(c, init);
  EXPECT_EQ(m.parameter_count(), expected);
}

TEST(Blocks, LayersPartitionParameters) {
  for (std::size_t depth : {1u, 2u, 3u}) {
    auto c = small_config();
    c.depth = depth;
    num::RngStream init(2, "test/init");
    Denoiser m(c, init);
    std::set<std::string> seen;
    std::size_t total = 0;
    for (const auto& b : m.graph().blocks)
      for (auto li : b.layers)
        for (const auto& n : m.graph().layers[li].param_names()) {
          EXPECT_TRUE(seen.insert(n).second) << n;
          total += m.params().get(n).numel();
        }
    EXPECT_EQ(seen.size(), m.params().names().size());
    EXPECT_EQ(total, m.parameter_count());
    std::size_t concat = 0;
    for (const auto& b : m.graph().blocks) concat += b.concat_input;
    EXPECT_EQ(concat, depth);
  }
}

TEST(Forward, ShapesNullConditionAndReplay) {
  auto c = small_config();
  num::RngStream init(3, "test/init"), st(4, "test/data");
  Denoiser m(c, init);
  auto x = num::sample_normal(st, {2, 3, 8, 8});
  auto y = num::sample_uniform(st, {2, 2, 8, 8}, 0, 1);
  std::vector<int> t{3, 150};
  auto out = m.forward(x, t, y);
  EXPECT_EQ(out.eps.shape(), (num::Shape{2, 3, 8, 8}));
  EXPECT_EQ(out.v.shape(), (num::Shape{2, 3, 8, 8}));
  for (float v : out.v.values()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);

  auto null = m.forward(x, t, num::Tensor(y.shape(), 0.0f));
  for (float v : null.eps.values()) ASSERT_TRUE(std::isfinite(v));

  auto s = m.initial_state(x, t, y);
  for (std::size_t i = 0; i < m.graph().blocks.size(); ++i) m.run_block(i, s, nullptr);
  auto replay = m.output_from(s);
  EXPECT_EQ(replay.eps.values(), out.eps.values());
  EXPECT_EQ(replay.v.values(), out.v.values());
}

TEST(Forward, RejectsMismatchedInputs) {
  auto c = small_config();
  num::RngStream init(5, "test/init");
  Denoiser m(c, init);
  EXPECT_THROW(m.forward(num::Tensor({1, 3, 8, 8}), {0}, num::Tensor({1, 2, 4, 4})), ShapeError);
  EXPECT_THROW(m.forward(num::Tensor({1, 3, 8, 8}), {0, 1}, num::Tensor({1, 2, 8, 8})), ShapeError);
  EXPECT_THROW(m.forward(num::Tensor({1, 3, 6, 6}), {0}, num::Tensor({1, 2, 6, 6})), ShapeError);
}

TEST(Forward, ConditioningChangesOutputAfterTraining) {
  auto c = small_config();
  num::RngStream init(6, "test/init"), st(7, "test/train");
  Denoiser m(c, init);
  auto sched = diffusion::build_schedule(50, 1e-3, 0.2);
  // Class 0 maps are dark images, class 1 maps are bright ones.
  num::Tensor y0({1, 2, 8, 8}), y1({1, 2, 8, 8});
  {
    auto a = y0.mutable_data(), b = y1.mutable_data();
    for (std::size_t i = 0; i < 64; ++i) a[i] = 1.0f, b[64 + i] = 1.0f;
  }
  num::Adam opt(m.params().tensors(), {.lr = 2e-3});
  for (int step = 0; step < 60; ++step) {
    auto y = num::concat_batch<float>({y0, y1, y0, y1});
    num::Tensor x0({4, 3, 8, 8});
    auto d = x0.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = (i / 192) % 2 ? 0.8f : -0.8f;
    std::vector<int> t(4);
    for (auto& v : t) v = static_cast<int>(st.uniform_int(50));
    auto loss = diffusion::training_losses<float>(m, x0, y, t, num::sample_normal(st, x0.shape()), sched, 0.001);
    opt.zero_grad();
    num::backward(loss.total);
    opt.step();
  }
  num::NoGradGuard ng;
  auto x = num::sample_normal(st, {1, 3, 8, 8});
  auto a = m.forward(x, {25}, y0).eps, b = m.forward(x, {25}, y1).eps;
  double diff = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff += std::abs(a[i] - b[i]);
  EXPECT_GT(diff / a.numel(), 1e-3);
}

TEST(Checkpoint, RoundTripReproducesForward) {
  auto c = small_config();
  num::RngStream init(8, "test/init"), st(9, "test/x");
  Denoiser m(c, init);
  auto sched = diffusion::build_schedule(40, 1e-3, 0.2);
  const auto path = std::filesystem::temp_directory_path() / "qsd_ckpt_test.bin";
  save_checkpoint(path, m, sched);
  auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.config, c);
  auto m2 = model_from_checkpoint(ck);
  auto s2 = schedule_from_checkpoint(ck);
  EXPECT_EQ(s2.alpha_bar, sched.alpha_bar);
  auto x = num::sample_normal(st, {1, 3, 8, 8});
  num::Tensor y({1, 2, 8, 8}, 0.5f);
  EXPECT_EQ(m.forward(x, {7}, y).eps.values(), m2.forward(x, {7}, y).eps.values());
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), MissingArtifactError);
}

}  // namespace
}  // namespace qsd::net
