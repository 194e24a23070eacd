#pragma once

// Training objectives: velocity MSE, pixel + perceptual loss, and the LoRA
// objective with its adversarial term. Each loss has a tape form (for exact
// gradients) and a plain value form.

#include <array>
#include <string>

#include "patchsr/conditioning.hpp"
#include "patchsr/params.hpp"

namespace patchsr {

namespace perceptual {

inline constexpr int kScales = 3;
inline constexpr int kFeatures = 8;
inline constexpr std::uint64_t kSeed = 0x5EEDF00DULL;

/// Fixed random 3x3 filter banks, one per scale. Not learnable.
inline const std::array<Tensor, kScales>& filters() {
  static const std::array<Tensor, kScales> banks = [] {
    std::array<Tensor, kScales> b;
    Rng rng(kSeed);
    for (auto& t : b) {
      t = Tensor({kFeatures, 3, 3, 3});
      for (double& v : t.data) v = rng.normal() * (2.0 / std::sqrt(27.0));
    }
    return b;
  }();
  return banks;
}

/// Sum over scales of the mean squared difference between tanh(conv) feature maps.
inline ag::Var distance(ag::Var a, ag::Var b) {
  if (a.shape() != b.shape()) throw DimensionError("perceptual_distance: shape mismatch");
  ag::Tape& t = *a.tape;
  ag::Var total = t.constant(Tensor({1}));
  for (int s = 0; s < kScales; ++s) {
    if (s > 0) {
      if (a.shape()[1] < 2 || a.shape()[2] < 2) break;
      a = ag::avg_pool2(a);
      b = ag::avg_pool2(b);
    }
    ag::Var w = t.constant(filters()[static_cast<std::size_t>(s)]);
    ag::Var fa = ag::tanh(ag::conv2d(a, w, {}, 1, 1));
    ag::Var fb = ag::tanh(ag::conv2d(b, w, {}, 1, 1));
    total = ag::add(total, ag::mse(fa, fb));
  }
  return total;
}

}  // namespace perceptual

inline double perceptual_distance(const ImageBuffer& a, const ImageBuffer& b) {
  require_same_shape(a, b, "perceptual_distance");
  ag::Tape t(false);
  return perceptual::distance(t.constant(a.tensor()), t.constant(b.tensor())).value()[0];
}

// ------------------------------------------------------------------ discriminator

/// Four strided SiLU convolutions mapping an image to a logit map.
namespace discriminator {

inline constexpr std::array<int, 5> kChannels{3, 8, 16, 16, 1};
inline constexpr std::array<int, 4> kStrides{2, 2, 2, 1};

inline void add_params(ParamStore& s, Rng& rng) {
  for (std::size_t l = 0; l < kStrides.size(); ++l) {
    const int in = kChannels[l], out = kChannels[l + 1];
    Tensor w({out, in, 3, 3});
    const double sd = 1.0 / std::sqrt(9.0 * in);
    for (double& v : w.data) v = sd * rng.normal();
    s.add("disc.c" + std::to_string(l) + ".w", std::move(w), ParamGroup::discriminator);
    s.add("disc.c" + std::to_string(l) + ".b", Tensor({out}), ParamGroup::discriminator);
  }
}

inline ag::Var forward(Binder& b, ag::Var img) {
  ag::Var x = img;
  for (std::size_t l = 0; l < kStrides.size(); ++l) {
    const std::string p = "disc.c" + std::to_string(l);
    const int stride = x.shape()[1] >= 2 && x.shape()[2] >= 2 ? kStrides[l] : 1;
    x = ag::conv2d(x, b(p + ".w"), b(p + ".b"), stride, 1);
    if (l + 1 < kStrides.size()) x = ag::silu(x);
  }
  return x;
}

/// Non-saturating generator term: mean softplus(-D(fake)).
inline ag::Var generator_term(ag::Var logits) { return ag::mean(ag::softplus(ag::scale(logits, -1.0))); }

/// Logistic discriminator loss: mean softplus(-D(real)) + mean softplus(D(fake)).
inline ag::Var loss(ag::Var logits_real, ag::Var logits_fake) {
  return ag::add(ag::mean(ag::softplus(ag::scale(logits_real, -1.0))), ag::mean(ag::softplus(logits_fake)));
}

}  // namespace discriminator

// ------------------------------------------------------------------ losses

namespace loss {

inline ag::Var velocity(ag::Var v_pred, ag::Var v_target) { return ag::mse(v_pred, v_target); }

struct PixelTerms {
  ag::Var total, mse, perceptual;
};

/// mean ||D(z0_hat) - I_gt||^2 + lambda * perceptual(D(z0_hat), I_gt).
inline PixelTerms pixel(const Codec& codec, ag::Var z0_hat, ag::Var img_gt, double lambda) {
  ag::Var decoded = codec.decode(z0_hat);
  if (decoded.shape() != img_gt.shape())
    throw DimensionError("pixel_loss: decoded " + shape_str(decoded.shape()) + " vs target " +
                         shape_str(img_gt.shape()));
  ag::Var m = ag::mse(decoded, img_gt);
  ag::Var p = perceptual::distance(decoded, img_gt);
  return {ag::add(m, ag::scale(p, lambda)), m, p};
}

struct LoraTerms {
  ag::Var total, latent, pixel_mse, perceptual, gan;
};

/// Latent MSE + pixel MSE + lambda1 * perceptual + lambda2 * generator term.
inline LoraTerms lora(Binder& bind, const Codec& codec, ag::Var z_dr_hat, ag::Var z0, ag::Var img_gt, double lambda1,
                      double lambda2) {
  if (z_dr_hat.shape() != z0.shape()) throw DimensionError("lora_loss: latent shape mismatch");
  ag::Var lat = ag::mse(z_dr_hat, z0);
  PixelTerms px = pixel(codec, z_dr_hat, img_gt, 0.0);
  ag::Var decoded = codec.decode(z_dr_hat);
  ag::Var gan = discriminator::generator_term(discriminator::forward(bind, decoded));
  ag::Var total = ag::add(ag::add(lat, px.mse), ag::add(ag::scale(px.perceptual, lambda1), ag::scale(gan, lambda2)));
  return {total, lat, px.mse, px.perceptual, gan};
}

}  // namespace loss

// Value-level conveniences.

inline double velocity_loss(const LatentGrid& v_pred, const LatentGrid& v_target) {
  if (!v_pred.same_shape(v_target)) throw DimensionError("velocity_loss: shape mismatch");
  ag::Tape t(false);
  return loss::velocity(t.constant(v_pred.tensor()), t.constant(v_target.tensor())).value()[0];
}

inline double pixel_loss(const Codec& codec, const LatentGrid& z0_hat, const ImageBuffer& img_gt, double lambda) {
  ag::Tape t(false);
  return loss::pixel(codec, t.constant(z0_hat.tensor()), t.constant(img_gt.tensor()), lambda).total.value()[0];
}

inline double lora_loss(const ParamStore& params, const Codec& codec, const LatentGrid& z_dr_hat, const LatentGrid& z0,
                        const ImageBuffer& img_gt, double lambda1, double lambda2) {
  ag::Tape t(false);
  Binder b(t, params);
  return loss::lora(b, codec, t.constant(z_dr_hat.tensor()), t.constant(z0.tensor()), t.constant(img_gt.tensor()),
                    lambda1, lambda2)
      .total.value()[0];
}

}  // namespace patchsr
