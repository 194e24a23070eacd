#include <gtest/gtest.h>

#include <sstream>

#include "patchsr/degrade.hpp"
#include "patchsr/train.hpp"
#include "synthetic.hpp"

using namespace patchsr;

namespace {

const ModelConfig& toy() {
  static const ModelConfig mc = ModelConfig::toy();
  return mc;
}

Corpus toy_corpus(const ModelConfig& mc, int n, int size, std::uint64_t seed) {
  const ParamStore init = make_model(mc, seed);
  const DualBranchModel eraser(mc, init);
  Corpus c;
  for (int i = 0; i < n; ++i) {
    const ImageBuffer gt = synth::textured(size, size, seed * 100 + static_cast<std::uint64_t>(i));
    const std::string text = "image " + std::to_string(i);
    DegradeConfig dc;
    dc.seed = static_cast<std::uint64_t>(i);
    c.removal.push_back(make_sample(mc, gt, realesrgan_lite(gt, dc), text, text));
    I2iConfig ic;
    ic.seed = static_cast<std::uint64_t>(i);
    c.texture.push_back(make_sample(mc, gt, i2i_degrade(gt, ic, eraser, mc), text, text));
  }
  return c;
}

double max_delta(const ParamStore& a, const ParamStore& b, ParamGroup g) {
  double m = 0.0;
  for (const auto& [name, p] : a) {
    if (p.group != g) continue;
    const Tensor& q = b.get(name);
    for (std::size_t i = 0; i < q.size(); ++i) m = std::max(m, std::abs(p.value[i] - q[i]));
  }
  return m;
}

bool bit_equal(const ParamStore& a, const ParamStore& b) {
  for (const auto& [name, p] : a)
    if (!b.contains(name) || b.get(name).data != p.value.data) return false;
  return true;
}

double mean(const std::vector<double>& v, std::size_t from, std::size_t to) {
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += v[i];
  return s / static_cast<double>(to - from);
}

GradcheckInput grad_input(const ModelConfig& mc, double t, std::uint64_t seed) {
  const ImageBuffer gt = synth::textured(8, 8, seed);
  DegradeConfig dc;
  dc.seed = seed;
  dc.factor = 2;
  GradcheckInput in{make_sample(mc, gt, realesrgan_lite(gt, dc), "global", "local"), t, {}};
  Rng rng(seed);
  in.eps = LatentGrid::normal(in.sample.z0.channels(), in.sample.z0.height(), in.sample.z0.width(), rng);
  return in;
}

}  // namespace

TEST(TrainConfig, DefaultsAndValidation) {
  const TrainConfig tc;
  EXPECT_EQ(tc.lambda, 2.0);
  EXPECT_EQ(tc.lambda1, 2.0);
  EXPECT_EQ(tc.lambda2, 0.5);
  EXPECT_EQ(tc.pixel_t_threshold, 0.2);
  EXPECT_EQ(tc.branch_prob, 0.5);
  EXPECT_EQ(tc.warmup_steps, 200);
  EXPECT_EQ(tc.lr, 1e-4);
  TrainConfig bad = tc;
  bad.lambda1 = -1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = tc;
  bad.pixel_t_threshold = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(parse_time_sampling("beta"), ConfigError);
  EXPECT_EQ(parse_time_sampling(to_string(TimeSampling::logit_normal)), TimeSampling::logit_normal);
}

// With bias correction the first update is lr * g / (|g| + eps) per element.
TEST(AdamW, FirstStepAndDecoupledDecay) {
  ParamStore p;
  p.add("w", Tensor({3}, {1.0, -2.0, 0.5}), ParamGroup::control);
  GradStore g;
  g["w"] = Tensor({3}, {0.3, -4.0, 0.0});
  AdamW opt(0.01, 0.9, 0.999, 1e-8, 0.0);
  opt.step(p, g);
  EXPECT_NEAR(p.get("w")[0], 1.0 - 0.01 * 0.3 / (0.3 + 1e-8), 1e-12);
  EXPECT_NEAR(p.get("w")[1], -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 1e-12);
  EXPECT_EQ(p.get("w")[2], 0.5);

  ParamStore q;
  q.add("w", Tensor({1}, {2.0}), ParamGroup::control);
  GradStore zero;
  zero["w"] = Tensor({1});
  AdamW decay(0.1, 0.9, 0.999, 1e-8, 0.5);
  decay.step(q, zero);
  EXPECT_NEAR(q.get("w")[0], 2.0 * (1.0 - 0.1 * 0.5), 1e-12);
}

TEST(TextureStep, FreezesEverythingButTheControlBranch) {
  ParamStore params = make_model(toy(), 5);
  const ParamStore before = params;
  const Corpus c = toy_corpus(toy(), 2, 16, 5);
  TrainConfig tc;
  TrainState state(tc);
  Rng rng(1);
  for (int i = 0; i < 3; ++i) texture_train_step(params, state, {c.texture[static_cast<std::size_t>(i % 2)]}, toy(), tc, rng);
  EXPECT_EQ(max_delta(before, params, ParamGroup::backbone), 0.0);
  EXPECT_EQ(max_delta(before, params, ParamGroup::lora), 0.0);
  EXPECT_EQ(max_delta(before, params, ParamGroup::discriminator), 0.0);
  EXPECT_GT(max_delta(before, params, ParamGroup::control), 0.0);
}

TEST(TextureStep, PixelLossFollowsTheThreshold) {
  ParamStore params = make_model(toy(), 6);
  const Corpus c = toy_corpus(toy(), 1, 16, 6);
  TrainConfig tc;
  TrainState state(tc);
  Rng rng(2);
  const TextureReport mid = texture_train_step(params, state, c.texture, toy(), tc, rng, 0.5);
  EXPECT_FALSE(mid.pixel.has_value());
  EXPECT_EQ(mid.loss, mid.velocity);
  const TextureReport low = texture_train_step(params, state, c.texture, toy(), tc, rng, 0.2);
  ASSERT_TRUE(low.pixel.has_value());
  EXPECT_NEAR(low.loss, low.velocity + *low.pixel, 1e-12);
}

TEST(TextureStep, NonFiniteLossAborts) {
  ParamStore params = make_model(toy(), 7);
  params.get("ctrl.cond_in.w")[0] = std::numeric_limits<double>::quiet_NaN();
  const Corpus c = toy_corpus(toy(), 1, 16, 7);
  TrainConfig tc;
  TrainState state(tc);
  Rng rng(3);
  EXPECT_THROW(texture_train_step(params, state, c.texture, toy(), tc, rng, 0.5), NumericError);
}

TEST(TextureStep, LossDecreasesOnAToyCorpus) {
  ParamStore params = make_model(toy(), 8);
  const Corpus c = toy_corpus(toy(), 8, 16, 8);
  TrainConfig tc;
  TrainState state(tc);
  Rng rng(4);
  std::vector<double> losses;
  for (int step = 0; step < 200; ++step)
    losses.push_back(texture_train_step(params, state, draw_batch(c.texture, 1, rng), toy(), tc, rng).velocity);
  EXPECT_LT(mean(losses, 180, 200), 0.9 * mean(losses, 0, 20));
}

TEST(RemovalStep, UpdatesOnlyLoraAndDiscriminator) {
  ParamStore params = make_model(toy(), 9);
  const ParamStore before = params;
  const Corpus c = toy_corpus(toy(), 2, 16, 9);
  TrainConfig tc;
  TrainState state(tc);
  const RemovalReport r = removal_train_step(params, state, c.removal, toy(), tc);
  EXPECT_TRUE(std::isfinite(r.disc));
  EXPECT_GT(r.disc, 0.0);
  EXPECT_EQ(max_delta(before, params, ParamGroup::backbone), 0.0);
  EXPECT_EQ(max_delta(before, params, ParamGroup::control), 0.0);
  EXPECT_GT(max_delta(before, params, ParamGroup::lora), 0.0);
  EXPECT_GT(max_delta(before, params, ParamGroup::discriminator), 0.0);
  EXPECT_NEAR(r.loss, r.latent + r.pixel_mse + tc.lambda1 * r.perceptual + tc.lambda2 * r.gan, 1e-12);
}

// The discriminator's first update must push real logits up and fake logits down.
TEST(RemovalStep, DiscriminatorSeparatesRealFromFake) {
  ParamStore params = make_model(toy(), 10);
  const Corpus c = toy_corpus(toy(), 1, 16, 10);
  TrainConfig tc;
  tc.lr = 1e-12;
  tc.disc_lr = 1e-2;
  TrainState state(tc);
  std::vector<double> disc;
  for (int i = 0; i < 20; ++i) disc.push_back(removal_train_step(params, state, c.removal, toy(), tc).disc);
  EXPECT_LT(disc.back(), disc.front());
}

TEST(RemovalStep, LatentMseHalvesWithin500Steps) {
  ParamStore params = make_model(toy(), 11);
  const Corpus c = toy_corpus(toy(), 8, 16, 11);
  TrainConfig tc;
  tc.lr = 1e-3;  // the default suits long runs; 500 toy steps need a larger step
  TrainState state(tc);
  Rng rng(5);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 500; ++step) {
    const double l = removal_train_step(params, state, draw_batch(c.removal, 1, rng), toy(), tc).latent;
    if (step < 10) first += l / 10;
    if (step >= 490) last += l / 10;
  }
  EXPECT_LT(last, 0.5 * first);
}

TEST(BranchSchedule, WarmupAndBinomialCounts) {
  const auto s = branch_schedule(200, 10200, 0.5, 3);
  ASSERT_EQ(s.size(), 10200u);
  EXPECT_TRUE(std::all_of(s.begin(), s.begin() + 200, [](Branch b) { return b == Branch::texture; }));
  const auto tex = std::count(s.begin() + 200, s.end(), Branch::texture);
  EXPECT_GE(tex, 4700);
  EXPECT_LE(tex, 5300);
  EXPECT_EQ(s, branch_schedule(200, 10200, 0.5, 3));
  EXPECT_NE(s, branch_schedule(200, 10200, 0.5, 4));
}

TEST(JointTrain, MissingStageTagIsAConfigError) {
  Corpus c = toy_corpus(toy(), 1, 16, 12);
  ParamStore params = make_model(toy(), 12);
  TrainConfig tc;
  tc.warmup_steps = 1;
  tc.total_steps = 2;
  Corpus no_removal = c;
  no_removal.removal.clear();
  EXPECT_THROW(joint_train(params, no_removal, toy(), tc, 0), ConfigError);
  Corpus no_texture = c;
  no_texture.texture.clear();
  EXPECT_THROW(joint_train(params, no_texture, toy(), tc, 0), ConfigError);
}

TEST(JointTrain, DeterministicWithLogAndCheckpoints) {
  const Corpus c = toy_corpus(toy(), 2, 16, 13);
  TrainConfig tc;
  tc.warmup_steps = 3;
  tc.total_steps = 10;
  tc.checkpoint_every = 4;
  auto run = [&](std::ostringstream& log, std::vector<int>& ckpt_steps) {
    ParamStore params = make_model(toy(), 13);
    JointTrainHooks hooks;
    hooks.log = &log;
    hooks.checkpoint = [&](int step, const ParamStore&) { ckpt_steps.push_back(step); };
    joint_train(params, c, toy(), tc, 21, hooks);
    return params;
  };
  std::ostringstream log_a, log_b;
  std::vector<int> ck_a, ck_b;
  const ParamStore a = run(log_a, ck_a);
  const ParamStore b = run(log_b, ck_b);
  EXPECT_TRUE(bit_equal(a, b));
  EXPECT_EQ(ck_a, (std::vector<int>{4, 8, 10}));

  std::istringstream lines(log_a.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step").get<int>(), n);
    if (n < 3) {
      EXPECT_EQ(j.at("branch"), "texture");
    }
    EXPECT_TRUE(j.contains("components"));
    EXPECT_TRUE(j.contains("wall_ms"));
    ++n;
  }
  EXPECT_EQ(n, 10);
}

TEST(Gradcheck, VelocityLossOnSmallestConfig) {
  const ModelConfig mc = ModelConfig::smallest();
  ParamStore params = make_model(mc, 14);
  // Break the zero init so every control path carries gradient.
  Rng rng(99);
  for (auto& [name, p] : params)
    if (p.group == ParamGroup::control || p.group == ParamGroup::lora)
      for (double& v : p.value.data) v += 0.05 * rng.normal();
  const auto rep = gradcheck(params, mc, TrainConfig{}, grad_input(mc, 0.3, 1), CheckedLoss::velocity, 2, 7);
  EXPECT_LT(rep.worst(), 1e-3);
  EXPECT_GT(rep.entries.size(), 50u);
}

TEST(Gradcheck, ZeroMlpOutputLayersReceiveGradientAtInit) {
  const ModelConfig mc = ModelConfig::smallest();
  const ParamStore params = make_model(mc, 15);
  const auto rep = gradcheck(params, mc, TrainConfig{}, grad_input(mc, 0.4, 2), CheckedLoss::velocity, 4, 8,
                             [](const std::string& n) { return n.find("_mlp.2.w") != std::string::npos; });
  ASSERT_FALSE(rep.entries.empty());
  double largest = 0.0;
  for (const auto& e : rep.entries) largest = std::max(largest, std::abs(e.analytic));
  EXPECT_GT(largest, 1e-6);
  EXPECT_LT(rep.worst(), 1e-3);
}

TEST(Gradcheck, DeadPathHasZeroGradient) {
  const ModelConfig mc = ModelConfig::smallest();
  const ParamStore params = make_model(mc, 16);
  const auto rep = gradcheck(params, mc, TrainConfig{}, grad_input(mc, 0.5, 3), CheckedLoss::velocity, 3, 9,
                             [](const std::string& n) { return n.rfind("disc.", 0) == 0; });
  ASSERT_FALSE(rep.entries.empty());
  for (const auto& e : rep.entries) {
    EXPECT_EQ(e.analytic, 0.0) << e.name;
    EXPECT_EQ(e.numeric, 0.0) << e.name;
  }
}
