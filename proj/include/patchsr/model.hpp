#pragma once

// Whole-model assembly: configuration, parameter construction, and the
// patch-level velocity interface used by the samplers.

#include <atomic>
#include <map>
#include <mutex>
#include <string>

#include "patchsr/conditioning.hpp"
#include "patchsr/control.hpp"
#include "patchsr/losses.hpp"
#include "patchsr/lora.hpp"

namespace patchsr {

struct ModelConfig {
  BackboneConfig backbone;
  ControlConfig control = ControlConfig::for_backbone(BackboneConfig{});
  LoraConfig lora;
  int codec_factor = 4;
  int txt_tokens = 8;
  std::uint64_t prompt_seed = 0x9E3779B97F4A7C15ULL;

  /// d=32 configuration used for the desk-scale overfit runs.
  static ModelConfig toy() {
    ModelConfig m;
    m.backbone.width = 32;
    m.backbone.n_mm_blocks = 2;
    m.backbone.n_single_blocks = 1;
    m.backbone.n_heads = 4;
    m.backbone.patch = 1;
    m.codec_factor = 2;
    m.backbone.latent_channels = 12;
    m.control = ControlConfig::for_backbone(m.backbone);
    m.lora.rank = 8;
    m.lora.alpha = 8.0;
    return m;
  }

  /// Smallest configuration (gradient verification).
  static ModelConfig smallest() {
    ModelConfig m = toy();
    m.backbone.width = 16;
    m.backbone.n_heads = 2;
    m.backbone.mlp_ratio = 2;
    m.control = ControlConfig::for_backbone(m.backbone);
    m.lora.rank = 2;
    m.lora.alpha = 2.0;
    m.txt_tokens = 4;
    return m;
  }

  Codec codec() const { return Codec(codec_factor); }

  void validate() const {
    backbone.validate();
    control.validate(backbone);
    lora.validate();
    if (backbone.latent_channels != 3 * codec_factor * codec_factor)
      throw ConfigError("model: latent_channels must equal 3 * codec_factor^2");
    if (txt_tokens < 1) throw ConfigError("model: txt_tokens must be >= 1");
  }

  PromptEmbedding embed(const std::string& text) const {
    return embed_prompt(text, prompt_seed, backbone.width, txt_tokens);
  }
};

/// Backbone, control branch (copied from the backbone), LoRA adapters and the
/// discriminator, all initialised from one seed.
inline ParamStore make_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore s;
  Rng rng(mix_seed(seed, 1));
  backbone::add_params(s, cfg.backbone, rng);
  Rng crng(mix_seed(seed, 2));
  control::add_params(s, cfg.backbone, cfg.control, crng);
  Rng lrng(mix_seed(seed, 3));
  lora::add_params(s, cfg.backbone, cfg.lora, lrng);
  Rng drng(mix_seed(seed, 4));
  discriminator::add_params(s, drng);
  return s;
}

namespace model {

/// Dual-branch velocity on the tape: the backbone reads the global prompt, the
/// control branch reads the local prompt and the condition latent.
inline ag::Var forward(Binder& b, const ModelConfig& cfg, ag::Var z_t, double t, ag::Var global_txt,
                       ag::Var local_txt, ag::Var cond) {
  const InjectionBundle inj = control::control_forward(b, cfg.backbone, cfg.control, z_t, cond, t, local_txt);
  return backbone::forward(b, cfg.backbone, z_t, t, global_txt, &inj);
}

}  // namespace model

/// One patch-level model evaluation request.
struct PatchCall {
  const LatentGrid& z;
  double t;
  const PromptEmbedding& global;
  const PromptEmbedding& local;
  const LatentGrid& cond;
  StageFlag stage;
  std::size_t patch_index = 0;
};

class VelocityModel {
 public:
  virtual ~VelocityModel() = default;
  virtual LatentGrid velocity(const PatchCall& call) const = 0;
};

/// Evaluates the network with effective weights materialised once per stage:
/// the texture store carries the bare weights, the removal store the LoRA-merged
/// ones. Both are immutable afterwards, so concurrent calls are safe.
class DualBranchModel final : public VelocityModel {
 public:
  DualBranchModel(ModelConfig cfg, const ParamStore& params)
      : cfg_(std::move(cfg)),
        texture_(lora::apply_lora(params, cfg_.lora.scale(), false)),
        removal_(lora::apply_lora(params, cfg_.lora.scale(), true)) {
    cfg_.validate();
  }

  LatentGrid velocity(const PatchCall& c) const override {
    ag::Tape tape(false);
    Binder b(tape, c.stage == StageFlag::removal ? removal_ : texture_);
    ag::Var v = model::forward(b, cfg_, tape.constant(c.z.tensor()), c.t, tape.constant(c.global.tokens),
                               tape.constant(c.local.tokens), tape.constant(c.cond.tensor()));
    return LatentGrid(v.value());
  }

  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  ParamStore texture_;
  ParamStore removal_;
};

/// Forwards to another model while counting invocations per patch and stage.
class CountingModel final : public VelocityModel {
 public:
  explicit CountingModel(const VelocityModel& inner) : inner_(inner) {}

  LatentGrid velocity(const PatchCall& c) const override {
    {
      std::lock_guard<std::mutex> lock(mu_);
      ++per_patch_[c.patch_index];
      ++(c.stage == StageFlag::removal ? removal_ : texture_);
    }
    return inner_.velocity(c);
  }

  std::map<std::size_t, int> per_patch() const {
    std::lock_guard<std::mutex> lock(mu_);
    return per_patch_;
  }
  int removal_calls() const { return removal_.load(); }
  int texture_calls() const { return texture_.load(); }

 private:
  const VelocityModel& inner_;
  mutable std::mutex mu_;
  mutable std::map<std::size_t, int> per_patch_;
  mutable std::atomic<int> removal_{0};
  mutable std::atomic<int> texture_{0};
};

}  // namespace patchsr
