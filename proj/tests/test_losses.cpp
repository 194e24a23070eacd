#include <gtest/gtest.h>

#include "fd_check.hpp"
#include "patchsr/model.hpp"

using namespace patchsr;

namespace {

ImageBuffer textured(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  ImageBuffer img(h, w);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) img(c, i, j) = 0.5 + 0.3 * std::sin(0.9 * i + 0.4 * c) * std::cos(1.3 * j) + 0.1 * rng.uniform();
  return img;
}

LatentGrid randn(int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  return LatentGrid::normal(c, h, w, rng);
}

}  // namespace

TEST(VelocityLoss, Examples) {
  const auto a = randn(3, 4, 4, 1);
  EXPECT_EQ(velocity_loss(a, a), 0.0);
  EXPECT_DOUBLE_EQ(velocity_loss(LatentGrid(2, 3, 3, 0.0), LatentGrid(2, 3, 3, 1.0)), 1.0);
  EXPECT_THROW(velocity_loss(a, randn(3, 4, 5, 2)), DimensionError);
}

TEST(VelocityLoss, GradientIsScaledResidual) {
  const auto p = randn(3, 4, 4, 3), g = randn(3, 4, 4, 4);
  ag::Tape t;
  ag::Var vp = t.leaf(p.tensor(), true);
  t.backward(loss::velocity(vp, t.constant(g.tensor())));
  const Tensor grad = t.grad(vp);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(grad[i], 2.0 * (p[i] - g[i]) / p.size(), 1e-15);
  auto f = [&](ag::Tape& tape, const std::vector<ag::Var>& v) { return loss::velocity(v[0], tape.constant(g.tensor())); };
  EXPECT_LT(fdcheck::worst_relative_error(f, {p.tensor()}), 1e-6);
}

TEST(PerceptualDistance, IdentitySymmetryAndBlur) {
  const auto a = textured(16, 16, 1), b = textured(16, 16, 2);
  EXPECT_EQ(perceptual_distance(a, a), 0.0);
  EXPECT_DOUBLE_EQ(perceptual_distance(a, b), perceptual_distance(b, a));
  EXPECT_GT(perceptual_distance(a, imaging::gaussian_blur(a, 1.0)), 0.0);
  EXPECT_THROW(perceptual_distance(a, textured(16, 8, 3)), DimensionError);
}

TEST(PixelLoss, ExactCodecAndLambda) {
  const Codec codec(2);
  const auto gt = textured(8, 8, 4);
  EXPECT_EQ(pixel_loss(codec, codec.encode(gt), gt, 2.0), 0.0);
  const auto other = codec.encode(textured(8, 8, 5));
  ag::Tape t(false);
  const double mse = ag::mse(codec.decode(t.constant(other.tensor())), t.constant(gt.tensor())).value()[0];
  EXPECT_DOUBLE_EQ(pixel_loss(codec, other, gt, 0.0), mse);
  EXPECT_NEAR(pixel_loss(codec, other, gt, 2.0), mse + 2.0 * perceptual_distance(codec.decode(other), gt), 1e-15);
  EXPECT_THROW(pixel_loss(codec, other, textured(4, 8, 1), 2.0), DimensionError);
}

TEST(LoraLoss, ReducesToGanTermAtFixedPoint) {
  const ModelConfig cfg = ModelConfig::toy();
  const auto params = make_model(cfg, 1);
  const Codec codec = cfg.codec();
  const auto gt = textured(16, 16, 6);
  const auto z0 = codec.encode(gt);
  ag::Tape t(false);
  Binder b(t, params);
  const double gan = discriminator::generator_term(discriminator::forward(b, t.constant(gt.tensor()))).value()[0];
  EXPECT_NEAR(lora_loss(params, codec, z0, z0, gt, 2.0, 0.5), 0.5 * gan, 1e-15);
  EXPECT_THROW(lora_loss(params, codec, z0, randn(12, 8, 4, 1), gt, 2.0, 0.5), DimensionError);
}

TEST(LoraLoss, LatentTermGradient) {
  const ModelConfig cfg = ModelConfig::toy();
  const auto params = make_model(cfg, 2);
  const auto zhat = randn(12, 4, 4, 7), z0 = randn(12, 4, 4, 8);
  ag::Tape t;
  Binder b(t, params);
  ag::Var zv = t.leaf(zhat.tensor(), true);
  const auto terms = loss::lora(b, cfg.codec(), zv, t.constant(z0.tensor()), t.constant(cfg.codec().decode(z0).tensor()), 2.0, 0.5);
  t.backward(terms.latent);
  const Tensor g = t.grad(zv);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], 2.0 * (zhat[i] - z0[i]) / g.size(), 1e-15);
}

TEST(LoraLoss, FullObjectiveGradient) {
  const ModelConfig cfg = ModelConfig::toy();
  const auto params = make_model(cfg, 3);
  const auto z0 = randn(12, 4, 4, 9);
  const Tensor gt = textured(8, 8, 10).tensor();
  auto f = [&](ag::Tape& t, const std::vector<ag::Var>& v) {
    Binder b(t, params);
    return loss::lora(b, cfg.codec(), v[0], t.constant(z0.tensor()), t.constant(gt), 2.0, 0.5).total;
  };
  EXPECT_LT(fdcheck::worst_relative_error(f, {randn(12, 4, 4, 11).tensor()}), 1e-5);
}

TEST(Losses, NonNegative) {
  const Codec codec(2);
  for (std::uint64_t s = 0; s < 5; ++s) {
    EXPECT_GE(velocity_loss(randn(3, 2, 2, s), randn(3, 2, 2, s + 9)), 0.0);
    EXPECT_GE(pixel_loss(codec, randn(12, 4, 4, s), textured(8, 8, s), 2.0), 0.0);
  }
}

TEST(Discriminator, FiniteAndSmallerThanBackbone) {
  const ModelConfig cfg = ModelConfig{};
  const auto params = make_model(cfg, 4);
  EXPECT_LT(params.count(ParamGroup::discriminator), params.count(ParamGroup::backbone));
  ag::Tape t(false);
  Binder b(t, params);
  const Tensor logits = discriminator::forward(b, t.constant(textured(32, 32, 1).tensor())).value();
  EXPECT_TRUE(logits.all_finite());
  EXPECT_EQ(logits.dim(0), 1);
  const double l = discriminator::loss(t.constant(logits), t.constant(logits)).value()[0];
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_GT(l, 0.0);
}

TEST(Discriminator, GradientMatchesFiniteDifferences) {
  const Tensor img = textured(8, 8, 12).tensor();
  Rng rng(13);
  ParamStore s;
  discriminator::add_params(s, rng);
  std::vector<std::string> names;
  std::vector<Tensor> in;
  for (const auto& [n, p] : s) {
    names.push_back(n);
    in.push_back(p.value);
  }
  auto f = [&](ag::Tape& t, const std::vector<ag::Var>& v) {
    ag::Var x = t.constant(img);
    for (std::size_t l = 0; l < 4; ++l) {
      x = ag::conv2d(x, v[2 * l + 1], v[2 * l], discriminator::kStrides[l], 1);  // names sort as .b before .w
      if (l < 3) x = ag::silu(x);
    }
    return discriminator::generator_term(x);
  };
  EXPECT_EQ(names[0], "disc.c0.b");
  EXPECT_LT(fdcheck::worst_relative_error(f, in), 1e-4);
}
