#include <gtest/gtest.h>

#include <filesystem>
#include <mutex>

#include "patchsr/checkpoint.hpp"
#include "patchsr/config.hpp"
#include "patchsr/image_io.hpp"
#include "patchsr/metrics.hpp"
#include "patchsr/pipeline.hpp"
#include "synthetic.hpp"

using namespace patchsr;
namespace fs = std::filesystem;

namespace {

const ModelConfig& toy() {
  static const ModelConfig mc = ModelConfig::toy();
  return mc;
}

bool bit_equal(const ImageBuffer& a, const ImageBuffer& b) {
  return a.same_shape(b) && a.tensor().data == b.tensor().data;
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("patchsr_pipeline_" + name);
  fs::create_directories(d);
  return d;
}

// Removal velocity is a fixed sentinel, texture velocity zero; every call is logged.
class SentinelModel final : public VelocityModel {
 public:
  static constexpr double kSentinel = 0.125;

  struct Call {
    StageFlag stage;
    std::size_t patch;
    double t;
    Tensor global, local, cond;
  };

  LatentGrid velocity(const PatchCall& c) const override {
    std::lock_guard<std::mutex> lock(mu_);
    calls.push_back({c.stage, c.patch_index, c.t, c.global.tokens, c.local.tokens, c.cond.tensor()});
    return LatentGrid(c.z.channels(), c.z.height(), c.z.width(), c.stage == StageFlag::removal ? kSentinel : 0.0);
  }

  mutable std::vector<Call> calls;

 private:
  mutable std::mutex mu_;
};

}  // namespace

TEST(InferenceConfig, Defaults) {
  const InferenceConfig c;
  EXPECT_EQ(c.t_start, 0.8);
  EXPECT_EQ(c.steps, 16);
  EXPECT_EQ(c.upscale, 4);
  EXPECT_EQ(c.invocations_per_patch(), 17);
  const PatchPlan plan = inference_plan(64, 64, c);
  EXPECT_EQ(plan.patch_h, 16);
  EXPECT_EQ(plan.overlap_h, 4);
  const PatchPlan small = inference_plan(8, 8, c);
  EXPECT_EQ(small.size(), 1u);
  InferenceConfig bad;
  bad.t_start = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(SuperResolve, FourTimesOutputAndSeventeenCallsPerPatch) {
  const ParamStore params = make_model(toy(), 1);
  const DualBranchModel model(toy(), params);
  const CountingModel counter(model);
  const ImageBuffer lq = synth::textured(16, 16, 2);
  SrTrace trace;
  const ImageBuffer sr = super_resolve(lq, "a photo", {}, InferenceConfig{}, counter, toy(), &trace);
  EXPECT_EQ(sr.height(), 64);
  EXPECT_EQ(sr.width(), 64);
  EXPECT_TRUE(sr.in_unit_range());
  const auto per_patch = counter.per_patch();
  EXPECT_EQ(per_patch.size(), trace.plan.size());
  for (const auto& [k, n] : per_patch) EXPECT_EQ(n, 17) << "patch " << k;
  EXPECT_EQ(counter.removal_calls(), static_cast<int>(trace.plan.size()));
  EXPECT_EQ(counter.texture_calls(), 16 * static_cast<int>(trace.plan.size()));
}

TEST(SuperResolve, DeterministicAndThreadInvariant) {
  const ParamStore params = make_model(toy(), 3);
  const DualBranchModel model(toy(), params);
  const ImageBuffer lq = synth::textured(12, 12, 4);
  InferenceConfig cfg;
  cfg.patch = 8;
  cfg.seed = 11;
  const ImageBuffer a = super_resolve(lq, "x", {}, cfg, model, toy());
  EXPECT_TRUE(bit_equal(a, super_resolve(lq, "x", {}, cfg, model, toy())));
  InferenceConfig threaded = cfg;
  threaded.threads = 3;
  EXPECT_TRUE(bit_equal(a, super_resolve(lq, "x", {}, threaded, model, toy())));
  InferenceConfig reseeded = cfg;
  reseeded.seed = 12;
  EXPECT_FALSE(bit_equal(a, super_resolve(lq, "x", {}, reseeded, model, toy())));
}

// With removal velocity c the removal output is encode(bicubic(lq)) - c, and
// every texture call must see exactly that as its condition.
TEST(SuperResolve, TextureStepsAreConditionedOnRemovalOutput) {
  const SentinelModel model;
  const ImageBuffer lq = synth::textured(10, 12, 5);
  InferenceConfig cfg;
  cfg.patch = 8;
  SrTrace trace;
  super_resolve(lq, "g", {}, cfg, model, toy(), &trace);
  LatentGrid expected = toy().codec().encode(imaging::resize_bicubic(lq, 40, 48));
  for (std::size_t i = 0; i < expected.size(); ++i) expected[i] -= SentinelModel::kSentinel;
  int texture_calls = 0;
  for (const auto& c : model.calls) {
    const LatentGrid want = tiling::extract_one(expected, trace.plan, c.patch);
    if (c.stage == StageFlag::removal) {
      EXPECT_EQ(c.t, 1.0);
      continue;
    }
    ++texture_calls;
    ASSERT_EQ(c.cond.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(c.cond[i], want[i], 1e-12);
  }
  EXPECT_EQ(texture_calls, 16 * static_cast<int>(trace.plan.size()));
}

TEST(SuperResolve, PromptRoutingGlobalToBackboneLocalToControl) {
  const SentinelModel model;
  const ImageBuffer lq = synth::textured(12, 12, 6);
  InferenceConfig cfg;
  cfg.patch = 8;
  SrTrace trace;
  super_resolve(lq, "scene", {}, cfg, model, toy(), &trace);
  ASSERT_GT(trace.plan.size(), 1u);
  const Tensor global = toy().embed("scene").tokens;
  for (const auto& c : model.calls) {
    EXPECT_EQ(c.global.data, global.data);
    EXPECT_EQ(c.local.data, toy().embed(trace.patch_texts[c.patch]).tokens.data);
  }
  for (std::size_t a = 0; a < trace.patch_texts.size(); ++a)
    for (std::size_t b = a + 1; b < trace.patch_texts.size(); ++b)
      EXPECT_NE(toy().embed(trace.patch_texts[a]).tokens.data, toy().embed(trace.patch_texts[b]).tokens.data);
}

// In the network itself the local text only reaches the control branch: with a
// zero-initialised control branch it has no effect, while the global text does.
TEST(SuperResolve, NetworkRoutesTextsToTheirBranches) {
  const ParamStore params = make_model(toy(), 7);
  Rng rng(1);
  const LatentGrid z = LatentGrid::normal(12, 4, 4, rng), cond = LatentGrid::normal(12, 4, 4, rng);
  const DualBranchModel model(toy(), params);
  const auto g1 = toy().embed("one"), g2 = toy().embed("two");
  const LatentGrid base = model.velocity({z, 0.5, g1, g1, cond, StageFlag::texture, 0});
  const LatentGrid local_changed = model.velocity({z, 0.5, g1, g2, cond, StageFlag::texture, 0});
  const LatentGrid global_changed = model.velocity({z, 0.5, g2, g1, cond, StageFlag::texture, 0});
  EXPECT_EQ(base.tensor().data, local_changed.tensor().data);
  EXPECT_NE(base.tensor().data, global_changed.tensor().data);
}

TEST(SuperResolve, PatchPromptCountMustMatch) {
  const SentinelModel model;
  InferenceConfig cfg;
  cfg.patch = 8;
  EXPECT_THROW(super_resolve(synth::textured(12, 12, 0), "g", {"only one"}, cfg, model, toy()), DimensionError);
}

TEST(Psnr, CapArithmeticAndSymmetry) {
  const ImageBuffer a = synth::textured(8, 8, 1);
  EXPECT_EQ(psnr(a, a), 100.0);
  ImageBuffer b = a;
  for (std::size_t i = 0; i < b.size(); ++i) b[i] += (i % 2 ? 0.1 : -0.1);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
  EXPECT_EQ(psnr(a, b), psnr(b, a));
  EXPECT_THROW(psnr(a, synth::textured(8, 9, 1)), DimensionError);
}

// On an 11x11 image the valid region is one window; evaluate the formula directly.
TEST(Ssim, SingleWindowMatchesDirectFormula) {
  const ImageBuffer a = synth::textured(11, 11, 3), b = synth::textured(11, 11, 4);
  double w[11], ws = 0.0;
  for (int i = 0; i < 11; ++i) ws += w[i] = std::exp(-(i - 5) * (i - 5) / (2 * 1.5 * 1.5));
  auto y = [](const ImageBuffer& im, int i, int j) {
    return 0.299 * im(0, i, j) + 0.587 * im(1, i, j) + 0.114 * im(2, i, j);
  };
  double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      const double k = w[i] * w[j] / (ws * ws), xa = y(a, i, j), xb = y(b, i, j);
      mx += k * xa;
      my += k * xb;
      sxx += k * xa * xa;
      syy += k * xb * xb;
      sxy += k * xa * xb;
    }
  const double c1 = 1e-4, c2 = 9e-4;
  const double want = (2 * mx * my + c1) * (2 * (sxy - mx * my) + c2) /
                      ((mx * mx + my * my + c1) * (sxx - mx * mx + syy - my * my + c2));
  EXPECT_NEAR(ssim(a, b), want, 1e-12);
}

TEST(Ssim, IdentityInversionSymmetryAndSize) {
  const ImageBuffer a = synth::textured(24, 20, 5);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  ImageBuffer bin(16, 16), inv(16, 16);
  Rng rng(2);
  for (std::size_t i = 0; i < bin.size(); i += 1) bin[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  for (int c = 1; c < 3; ++c)
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) bin(c, i, j) = bin(0, i, j);
  for (std::size_t i = 0; i < bin.size(); ++i) inv[i] = 1.0 - bin[i];
  EXPECT_LT(ssim(bin, inv), 0.0);
  const ImageBuffer b = synth::textured(24, 20, 6);
  EXPECT_EQ(ssim(a, b), ssim(b, a));
  EXPECT_THROW(ssim(synth::textured(10, 20, 0), synth::textured(10, 20, 1)), DimensionError);
}

TEST(Checkpoint, RoundTripIsByteExact) {
  Checkpoint c{make_model(ModelConfig::smallest(), 4), "seed = 4\n", 4};
  const std::string first = serialize_checkpoint(c);
  const Checkpoint back = deserialize_checkpoint(first);
  EXPECT_EQ(back.seed, 4u);
  EXPECT_EQ(back.config, "seed = 4\n");
  EXPECT_EQ(serialize_checkpoint(back), first);
  for (const auto& [name, p] : back.params) {
    EXPECT_EQ(p.group, c.params.param(name).group);
    for (std::size_t i = 0; i < p.value.size(); ++i)
      ASSERT_EQ(p.value[i], static_cast<double>(static_cast<float>(c.params.get(name)[i]))) << name;
  }
  const fs::path path = scratch("ckpt") / "a.dsr";
  save_checkpoint(back, path.string());
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(path.string(), c.params)), first);
}

TEST(Checkpoint, CorruptionIsRejected) {
  const Checkpoint c{make_model(ModelConfig::smallest(), 5), "", 0};
  const std::string good = serialize_checkpoint(c);
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), FormatError);
  std::string bad_version = good;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_checkpoint(bad_version), FormatError);
  EXPECT_THROW(deserialize_checkpoint(good.substr(0, good.size() - 3)), FormatError);
  EXPECT_THROW(deserialize_checkpoint(good + "x"), FormatError);
  try {
    deserialize_checkpoint(good.substr(0, good.size() / 2));
    FAIL() << "truncation accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(Checkpoint, NameMismatchNamesTheTensor) {
  ParamStore schema = make_model(ModelConfig::smallest(), 6);
  ParamStore extra = schema;
  extra.add("stray.w", Tensor({2}), ParamGroup::control);
  try {
    check_against(extra, schema, "x");
    FAIL() << "unknown accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("stray.w"), std::string::npos);
  }
  ParamStore fewer;
  for (const auto& [name, p] : schema)
    if (name != "bb.final.mod.w") fewer.add(name, p.value, p.group);
  try {
    check_against(fewer, schema, "x");
    FAIL() << "missing accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bb.final.mod.w"), std::string::npos);
  }
}

TEST(Config, SnapshotMatchesStatedDefaults) {
  RunConfig c;
  EXPECT_EQ(c.train.lambda, 2.0);
  EXPECT_EQ(c.train.lambda1, 2.0);
  EXPECT_EQ(c.train.lambda2, 0.5);
  EXPECT_EQ(c.infer.t_start, 0.8);
  EXPECT_EQ(c.infer.steps, 16);
  const std::string text = c.to_text();
  EXPECT_NE(text.find("train.lambda = 2\n"), std::string::npos);
  EXPECT_NE(text.find("train.lambda2 = 0.5\n"), std::string::npos);
  EXPECT_NE(text.find("infer.t_start = 0.8\n"), std::string::npos);
  RunConfig back = parse_run_config(text);
  EXPECT_EQ(back.to_text(), text);
}

TEST(Config, ParsesCommentsAndRejectsUnknownKeys) {
  RunConfig c = parse_run_config("# comment\n\n train.lr = 0.002  # trailing\nmodel.codec_factor=2\ni2i.prompt = soft photo\n");
  EXPECT_EQ(c.train.lr, 0.002);
  EXPECT_EQ(c.model.backbone.latent_channels, 12);
  EXPECT_EQ(c.i2i.prompt, "soft photo");
  EXPECT_THROW(parse_run_config("train.learning_rate = 1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("train.lr 1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("train.lr = fast\n"), ConfigError);
  EXPECT_THROW(parse_run_config("train.lr = 1\ntrain.lr = 2\n"), ConfigError);
  EXPECT_THROW(parse_run_config("infer.t_start = 1.5\n"), ConfigError);
}

TEST(ImageIo, PngAndPpmRoundTrip) {
  const fs::path d = scratch("io");
  ImageBuffer img = synth::textured(9, 13, 3);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::round(img[i] * 255.0) / 255.0;
  for (const char* name : {"a.png", "a.ppm"}) {
    io::write_image(d / name, img);
    const ImageBuffer back = io::read_image(d / name);
    ASSERT_TRUE(back.same_shape(img));
    for (std::size_t i = 0; i < img.size(); ++i) ASSERT_NEAR(back[i], img[i], 1e-12) << name;
  }
  fs::remove_all(d);
}
