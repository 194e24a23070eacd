#pragma once

// Overlapping patch plans and Multi-Diffusion style weighted aggregation.

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "patchsr/flowmatch.hpp"

namespace patchsr {

enum class MaskKind { uniform, linear_ramp };

inline MaskKind parse_mask_kind(const std::string& s) {
  if (s == "uniform") return MaskKind::uniform;
  if (s == "linear_ramp") return MaskKind::linear_ramp;
  throw ConfigError("unknown mask kind '" + s + "' (expected uniform|linear_ramp)");
}
inline std::string to_string(MaskKind k) { return k == MaskKind::uniform ? "uniform" : "linear_ramp"; }

struct PatchOrigin {
  int row = 0;
  int col = 0;
  bool operator==(const PatchOrigin&) const = default;
};

struct PatchPlan {
  int height = 0;  // latent rows covered
  int width = 0;   // latent cols covered
  int patch_h = 0;
  int patch_w = 0;
  int overlap_h = 0;
  int overlap_w = 0;
  MaskKind kind = MaskKind::linear_ramp;
  std::vector<PatchOrigin> origins;
  Tensor mask;  // patch_h x patch_w
  Tensor norm;  // height x width, summed mask weight per position

  std::size_t size() const { return origins.size(); }

  /// Normalised weight of patch k at absolute position (i, j); 0 outside the patch.
  double weight(std::size_t k, int i, int j) const {
    const auto& o = origins[k];
    const int li = i - o.row, lj = j - o.col;
    if (li < 0 || lj < 0 || li >= patch_h || lj >= patch_w) return 0.0;
    return mask.at(li, lj) / norm.at(i, j);
  }
};

namespace tiling {

/// 1-D ramp profile: rises linearly from 1/(o+1) to 1 across each o-wide border band.
inline std::vector<double> ramp_profile(int p, int o) {
  std::vector<double> w(static_cast<std::size_t>(p));
  for (int i = 0; i < p; ++i) {
    const double up = static_cast<double>(i + 1) / (o + 1);
    const double down = static_cast<double>(p - i) / (o + 1);
    w[static_cast<std::size_t>(i)] = std::min({1.0, up, down});
  }
  return w;
}

inline Tensor make_weight_mask(int ph, int pw, int oh, int ow, MaskKind kind) {
  if (ph <= 0 || pw <= 0 || oh < 0 || ow < 0 || oh >= ph || ow >= pw)
    throw DomainError("make_weight_mask: require 0 <= overlap < patch");
  Tensor m({ph, pw}, 1.0);
  if (kind == MaskKind::uniform) return m;
  const auto rh = ramp_profile(ph, oh);
  const auto rw = ramp_profile(pw, ow);
  for (int i = 0; i < ph; ++i)
    for (int j = 0; j < pw; ++j) m.at(i, j) = rh[static_cast<std::size_t>(i)] * rw[static_cast<std::size_t>(j)];
  return m;
}

inline Tensor make_weight_mask(int p, int o, MaskKind kind) { return make_weight_mask(p, p, o, o, kind); }

/// Origins 0, s, 2s, ... with stride s = p - o; the last one is clamped to dim - p.
inline std::vector<int> axis_origins(int dim, int p, int o) {
  if (p > dim) throw DomainError("plan_patches: patch " + std::to_string(p) + " exceeds dimension " + std::to_string(dim));
  if (p <= 0 || o < 0 || o >= p) throw DomainError("plan_patches: require 0 <= overlap < patch");
  const int s = p - o;
  std::vector<int> out;
  for (int x = 0;; x += s) {
    if (x + p >= dim) {
      out.push_back(dim - p);
      break;
    }
    out.push_back(x);
  }
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline PatchPlan plan_patches(int h, int w, int ph, int pw, int oh, int ow, MaskKind kind = MaskKind::linear_ramp) {
  PatchPlan plan;
  plan.height = h;
  plan.width = w;
  plan.patch_h = ph;
  plan.patch_w = pw;
  plan.overlap_h = oh;
  plan.overlap_w = ow;
  plan.kind = kind;
  const auto rows = axis_origins(h, ph, oh);
  const auto cols = axis_origins(w, pw, ow);
  for (int r : rows)
    for (int c : cols) plan.origins.push_back({r, c});
  plan.mask = make_weight_mask(ph, pw, oh, ow, kind);
  plan.norm = Tensor({h, w});
  for (const auto& o : plan.origins)
    for (int i = 0; i < ph; ++i)
      for (int j = 0; j < pw; ++j) plan.norm.at(o.row + i, o.col + j) += plan.mask.at(i, j);
  return plan;
}

inline PatchPlan plan_patches(int h, int w, int p, int o, MaskKind kind = MaskKind::linear_ramp) {
  return plan_patches(h, w, p, p, o, o, kind);
}

inline void check_plan(const LatentGrid& z, const PatchPlan& plan, const char* op) {
  if (z.height() != plan.height || z.width() != plan.width)
    throw DimensionError(std::string(op) + ": plan covers " + std::to_string(plan.height) + "x" +
                         std::to_string(plan.width) + " but latent is " + z.shape_string());
}

inline LatentGrid extract_one(const LatentGrid& z, const PatchPlan& plan, std::size_t k) {
  const auto& o = plan.origins.at(k);
  LatentGrid out(z.channels(), plan.patch_h, plan.patch_w);
  for (int c = 0; c < z.channels(); ++c)
    for (int i = 0; i < plan.patch_h; ++i)
      for (int j = 0; j < plan.patch_w; ++j) out(c, i, j) = z(c, o.row + i, o.col + j);
  return out;
}

inline std::vector<LatentGrid> extract(const LatentGrid& z, const PatchPlan& plan) {
  check_plan(z, plan, "extract");
  std::vector<LatentGrid> out;
  out.reserve(plan.size());
  for (std::size_t k = 0; k < plan.size(); ++k) out.push_back(extract_one(z, plan, k));
  return out;
}

/// Weighted average of per-patch fields; the weights form a partition of unity.
/// Reduction runs over patches in plan order.
inline LatentGrid aggregate(const std::vector<LatentGrid>& outputs, const PatchPlan& plan) {
  if (outputs.size() != plan.size())
    throw DimensionError("aggregate: " + std::to_string(outputs.size()) + " outputs for " +
                         std::to_string(plan.size()) + " patches");
  if (outputs.empty()) throw DimensionError("aggregate: empty plan");
  const int C = outputs.front().channels();
  for (const auto& o : outputs)
    if (o.channels() != C || o.height() != plan.patch_h || o.width() != plan.patch_w)
      throw DimensionError("aggregate: patch output shape " + o.shape_string());
  for (double n : plan.norm.data)
    if (!(n > 0.0)) throw StateError("aggregate: plan leaves a position with zero total weight");
  LatentGrid acc(C, plan.height, plan.width);
  for (std::size_t k = 0; k < plan.size(); ++k) {
    const auto& o = plan.origins[k];
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < plan.patch_h; ++i)
        for (int j = 0; j < plan.patch_w; ++j) acc(c, o.row + i, o.col + j) += plan.mask.at(i, j) * outputs[k](c, i, j);
  }
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < plan.height; ++i)
      for (int j = 0; j < plan.width; ++j) acc(c, i, j) /= plan.norm.at(i, j);
  return acc;
}

}  // namespace tiling
}  // namespace patchsr
