#pragma once

// The accelerated two-stage schedule around the LoRA branch: one removal pass
// that maps the degraded latent to a clean estimate, and the noisy restart
// state from which texture generation proceeds.

#include <vector>

#include "patchsr/model.hpp"
#include "patchsr/parallel.hpp"
#include "patchsr/tiling.hpp"

namespace patchsr {

inline constexpr double kRemovalTime = 1.0;

/// Evaluates `model` once per patch at time t and aggregates the velocities.
/// `cond` supplies the control-branch condition for each patch (whole-latent
/// coordinates, same plan).
inline LatentGrid patchwise_velocity(const VelocityModel& model, const LatentGrid& z, const LatentGrid& cond, double t,
                                     const PromptEmbedding& global_txt, const std::vector<PromptEmbedding>& local_txts,
                                     const PatchPlan& plan, StageFlag stage, int threads = 1) {
  tiling::check_plan(z, plan, "patchwise_velocity");
  tiling::check_plan(cond, plan, "patchwise_velocity");
  if (local_txts.size() != plan.size())
    throw DimensionError("patchwise_velocity: " + std::to_string(local_txts.size()) + " local prompts for " +
                         std::to_string(plan.size()) + " patches");
  std::vector<LatentGrid> outs(plan.size());
  parallel_for(plan.size(), threads, [&](std::size_t k) {
    const LatentGrid zp = tiling::extract_one(z, plan, k);
    const LatentGrid cp = tiling::extract_one(cond, plan, k);
    outs[k] = model.velocity(PatchCall{zp, t, global_txt, local_txts[k], cp, stage, k});
    if (!outs[k].same_shape(zp))
      throw DimensionError("patchwise_velocity: model returned " + outs[k].shape_string() + " for patch " +
                           zp.shape_string());
  });
  return tiling::aggregate(outs, plan);
}

namespace accel {

/// z_dr = z_lq - t_dr * v, where v is the aggregated removal-stage velocity with
/// z_lq as both state and condition. One model invocation per patch.
inline LatentGrid degradation_removal_step(const VelocityModel& model, const LatentGrid& z_lq,
                                           const PromptEmbedding& global_txt,
                                           const std::vector<PromptEmbedding>& local_txts, const PatchPlan& plan,
                                           StageFlag stage = StageFlag::removal, double t_dr = kRemovalTime,
                                           int threads = 1) {
  if (stage != StageFlag::removal)
    throw StateError("degradation_removal_step: LoRA branch must be enabled (stage flag is texture)");
  const LatentGrid v = patchwise_velocity(model, z_lq, z_lq, t_dr, global_txt, local_txts, plan, stage, threads);
  return flow::predict_clean(z_lq, v, t_dr);
}

/// interpolate_state(z_dr, eps, t) with eps a seeded standard normal.
inline LatentGrid build_restart_state(const LatentGrid& z_dr, std::uint64_t seed, double t) {
  if (!(t > 0.0 && t < 1.0)) throw DomainError("build_restart_state: t must lie in (0,1)");
  Rng rng(seed);
  const LatentGrid eps = LatentGrid::normal(z_dr.channels(), z_dr.height(), z_dr.width(), rng);
  return flow::interpolate_state(z_dr, eps, t);
}

}  // namespace accel
}  // namespace patchsr
