#pragma once

// Patch-context control branch: a half-depth copy of the backbone's MM blocks.
// It reads the current patch state plus a condition latent and the patch-local
// prompt, and emits per-block image/text features that the main network fuses
// (see fusion.hpp).

#include <string>
#include <vector>

#include "patchsr/backbone.hpp"

namespace patchsr {

struct ControlConfig {
  int n_blocks = 3;
  bool zero_init = true;
  std::vector<std::vector<int>> injection_map;  // control block -> main blocks (0-based)

  static ControlConfig for_backbone(const BackboneConfig& bb, bool zero_init = true) {
    ControlConfig c;
    c.n_blocks = bb.n_mm_blocks / 2;
    c.zero_init = zero_init;
    c.injection_map = fusion::build_injection_map(bb.n_mm_blocks, c.n_blocks);
    return c;
  }

  void validate(const BackboneConfig& bb) const {
    if (n_blocks * 2 != bb.n_mm_blocks)
      throw ConfigError("control: n_blocks must be half of the backbone's MM blocks");
    if (static_cast<int>(injection_map.size()) != n_blocks)
      throw DomainError("control: injection map has " + std::to_string(injection_map.size()) + " rows for " +
                        std::to_string(n_blocks) + " blocks");
    fusion::validate_injection_map(injection_map, bb.n_mm_blocks);
  }
};

namespace control {

inline std::string block_prefix(int i) { return "ctrl.mm" + std::to_string(i); }

/// Adds control parameters. Requires the backbone parameters to be present:
/// control block i starts as a bit-exact copy of main MM block i.
inline void add_params(ParamStore& s, const BackboneConfig& bb, const ControlConfig& cc, Rng& rng) {
  cc.validate(bb);
  const int d = bb.width, tf = bb.token_features();
  s.add("ctrl.cond_in.w", init_linear(d, tf, cc.zero_init ? 0.0 : 1.0, rng), ParamGroup::control);
  s.add("ctrl.cond_in.b", Tensor({d}), ParamGroup::control);
  for (int i = 0; i < cc.n_blocks; ++i) {
    const std::string src = backbone::mm_prefix(i) + ".";
    std::vector<std::pair<std::string, Tensor>> copies;
    for (const auto& [name, p] : s)
      if (name.compare(0, src.size(), src) == 0) copies.emplace_back(block_prefix(i) + "." + name.substr(src.size()), p.value);
    for (auto& [name, t] : copies) s.add(name, std::move(t), ParamGroup::control);
  }
  for (int l = 0; l < bb.n_mm_blocks; ++l) {
    fusion::add_zero_mlp(s, backbone::fuse_prefix(l) + ".img_mlp", d, cc.zero_init, rng);
    fusion::add_context_cross_attention(s, backbone::fuse_prefix(l) + ".txt", d, cc.zero_init, rng);
  }
}

/// Runs the control blocks and expands their outputs to one entry per main MM block.
/// Input image tokens are embed(z_t) + ZeroLinear(patchify(z_cond)).
inline InjectionBundle control_forward(Binder& b, const BackboneConfig& bb, const ControlConfig& cc, ag::Var z_t,
                                       ag::Var z_cond, double t, ag::Var local_txt) {
  if (z_t.shape() != z_cond.shape())
    throw DimensionError("control_forward: state " + shape_str(z_t.shape()) + " vs condition " +
                         shape_str(z_cond.shape()));
  cc.validate(bb);
  ag::Var img = backbone::embed_latent(b, bb, z_t);
  img = ag::add(img, b.linear("ctrl.cond_in", backbone::patchify_raw(z_cond, bb.patch)));
  TokenStreams s{img, backbone::embed_text(b, bb, local_txt)};
  ag::Var act = ag::silu(backbone::timestep_embedding(b, t, bb.width));
  InjectionBundle out;
  out.per_block.resize(static_cast<std::size_t>(bb.n_mm_blocks));
  for (int i = 0; i < cc.n_blocks; ++i) {
    s = backbone::mm_block_forward(b, block_prefix(i), s, act, bb.n_heads);
    for (int m : cc.injection_map[static_cast<std::size_t>(i)]) out.per_block[static_cast<std::size_t>(m)] = s;
  }
  return out;
}

}  // namespace control
}  // namespace patchsr
