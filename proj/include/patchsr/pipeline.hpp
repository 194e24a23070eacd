#pragma once

// Two-stage super-resolution: one degradation-removal pass with the LoRA
// branch, then texture generation from a noisy restart state with the
// patch-aware control branch conditioned on the removal output.

#include <string>
#include <vector>

#include "patchsr/accel.hpp"

namespace patchsr {

struct InferenceConfig {
  double t_start = 0.8;
  int steps = 16;     // texture-generation Euler steps
  int upscale = 4;
  int patch = 16;     // latent cells
  int overlap = -1;   // latent cells; negative selects patch / 4
  MaskKind mask = MaskKind::linear_ramp;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const {
    if (!(t_start > 0.0 && t_start < 1.0)) throw ConfigError("infer: t_start must lie in (0,1)");
    if (steps < 1) throw ConfigError("infer: steps must be >= 1");
    if (upscale < 1) throw ConfigError("infer: upscale must be >= 1");
    if (patch < 1) throw ConfigError("infer: patch must be >= 1");
    if (overlap >= patch) throw ConfigError("infer: overlap must be smaller than patch");
    if (threads < 1) throw ConfigError("infer: threads must be >= 1");
  }

  int invocations_per_patch() const { return 1 + steps; }
};

/// Patch plan over a latent of the given size. Patches larger than the latent
/// shrink to fit, and the overlap shrinks with them.
inline PatchPlan inference_plan(int h, int w, const InferenceConfig& cfg) {
  const int ph = std::min(cfg.patch, h), pw = std::min(cfg.patch, w);
  const int o = cfg.overlap < 0 ? cfg.patch / 4 : cfg.overlap;
  return tiling::plan_patches(h, w, ph, pw, std::min(o, ph - 1), std::min(o, pw - 1), cfg.mask);
}

/// Global text plus a coordinate suffix per patch, so local embeddings differ.
inline std::vector<std::string> default_patch_texts(const std::string& global_text, const PatchPlan& plan) {
  std::vector<std::string> out;
  out.reserve(plan.size());
  for (const auto& o : plan.origins)
    out.push_back(global_text + " [patch " + std::to_string(o.row) + "," + std::to_string(o.col) + "]");
  return out;
}

/// Intermediate state of one super_resolve call, for inspection.
struct SrTrace {
  PatchPlan plan;
  LatentGrid z_lq;
  LatentGrid z_dr;
  LatentGrid z_restart;
  std::vector<std::string> patch_texts;
};

inline ImageBuffer super_resolve(const ImageBuffer& lq, const std::string& global_text,
                                 const std::vector<std::string>& patch_texts, const InferenceConfig& cfg,
                                 const VelocityModel& model, const ModelConfig& mc, SrTrace* trace = nullptr) {
  cfg.validate();
  const Codec codec = mc.codec();
  const ImageBuffer up = imaging::resize_bicubic(lq, lq.height() * cfg.upscale, lq.width() * cfg.upscale);
  const LatentGrid z_lq = codec.encode(up);
  const PatchPlan plan = inference_plan(z_lq.height(), z_lq.width(), cfg);

  const std::vector<std::string> texts = patch_texts.empty() ? default_patch_texts(global_text, plan) : patch_texts;
  if (texts.size() != plan.size())
    throw DimensionError("super_resolve: " + std::to_string(texts.size()) + " patch prompts for " +
                         std::to_string(plan.size()) + " patches");
  const PromptEmbedding global = mc.embed(global_text);
  std::vector<PromptEmbedding> locals;
  locals.reserve(texts.size());
  for (const auto& t : texts) locals.push_back(mc.embed(t));

  const LatentGrid z_dr =
      accel::degradation_removal_step(model, z_lq, global, locals, plan, StageFlag::removal, kRemovalTime, cfg.threads);
  const LatentGrid z_restart = accel::build_restart_state(z_dr, cfg.seed, cfg.t_start);

  const TimeGrid grid = flow::make_time_grid(cfg.t_start, cfg.steps);
  LatentGrid z = z_restart;
  for (int k = 0; k < grid.n_steps; ++k) {
    const double t0 = grid.points[static_cast<std::size_t>(k)], t1 = grid.points[static_cast<std::size_t>(k) + 1];
    const LatentGrid v = patchwise_velocity(model, z, z_dr, t0, global, locals, plan, StageFlag::texture, cfg.threads);
    z = flow::euler_step(z, v, t0, t1);
  }
  if (trace) *trace = {plan, z_lq, z_dr, z_restart, texts};
  return codec.decode(z).clamped();
}

inline ImageBuffer super_resolve(const ImageBuffer& lq, const std::string& global_text,
                                 const std::vector<std::string>& patch_texts, const InferenceConfig& cfg,
                                 const ParamStore& params, const ModelConfig& mc) {
  const DualBranchModel model(mc, params);
  return super_resolve(lq, global_text, patch_texts, cfg, model, mc);
}

}  // namespace patchsr
