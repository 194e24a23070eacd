#pragma once

// Feature fusion between the control branch and the main network.
//
//   image stream: f' = f + M_img(f_c)
//   text stream:  f' = f + M_txt(CrossAttention(P_Q f, P_K f_c, P_V f_c))
//
// M_* are two-layer perceptrons whose output layer starts at zero, so a fresh
// control branch leaves the main network untouched.

#include <string>
#include <vector>

#include "patchsr/params.hpp"

namespace patchsr::fusion {

/// Parameters `{prefix}.0.{w,b}` (random) and `{prefix}.2.{w,b}` (zero at init).
inline void add_zero_mlp(ParamStore& store, const std::string& prefix, int width, bool zero_init, Rng& rng,
                         ParamGroup group = ParamGroup::control) {
  store.add(prefix + ".0.w", init_linear(width, width, 1.0, rng), group);
  store.add(prefix + ".0.b", Tensor({width}), group);
  store.add(prefix + ".2.w", init_linear(width, width, zero_init ? 0.0 : 1.0, rng), group);
  store.add(prefix + ".2.b", Tensor({width}), group);
}

inline ag::Var zero_mlp(Binder& bind, const std::string& prefix, ag::Var x) {
  return bind.linear(prefix + ".2", ag::gelu(bind.linear(prefix + ".0", x)));
}

/// f_img + M(f_c_img).
inline ag::Var inject_image(Binder& bind, const std::string& mlp_prefix, ag::Var f_img, ag::Var f_c_img) {
  if (f_img.shape() != f_c_img.shape())
    throw DimensionError("inject_image: shape mismatch " + shape_str(f_img.shape()) + " vs " +
                         shape_str(f_c_img.shape()));
  return ag::add(f_img, zero_mlp(bind, mlp_prefix, f_c_img));
}

/// Parameters for one Context Cross-Attention fusion: q/k/v projections and its zero-MLP.
inline void add_context_cross_attention(ParamStore& store, const std::string& prefix, int width, bool zero_init,
                                        Rng& rng) {
  store.add(prefix + ".q.w", init_linear(width, width, 1.0, rng), ParamGroup::control);
  store.add(prefix + ".k.w", init_linear(width, width, 1.0, rng), ParamGroup::control);
  store.add(prefix + ".v.w", init_linear(width, width, 1.0, rng), ParamGroup::control);
  add_zero_mlp(store, prefix + ".mlp", width, zero_init, rng);
}

/// Main-branch text tokens query the control-branch text tokens; residual form.
inline ag::Var fuse_text(Binder& bind, const std::string& prefix, ag::Var f_txt, ag::Var f_c_txt, int heads,
                         Tensor* weights_out = nullptr) {
  if (f_txt.shape().size() != 2 || f_txt.shape() != f_c_txt.shape())
    throw DimensionError("fuse_text: both streams need T x d tokens, got " + shape_str(f_txt.shape()) + " vs " +
                         shape_str(f_c_txt.shape()));
  ag::Var q = ag::linear(f_txt, bind(prefix + ".q.w"));
  ag::Var k = ag::linear(f_c_txt, bind(prefix + ".k.w"));
  ag::Var v = ag::linear(f_c_txt, bind(prefix + ".v.w"));
  ag::Var ca = ag::attention(q, k, v, heads, weights_out);
  return ag::add(f_txt, zero_mlp(bind, prefix + ".mlp", ca));
}

/// Control block i (0-based) feeds main blocks [i*r, (i+1)*r), r = n_main / n_ctrl.
inline std::vector<std::vector<int>> build_injection_map(int n_main, int n_ctrl) {
  if (n_main < 1 || n_ctrl < 1 || n_main % n_ctrl != 0)
    throw DomainError("build_injection_map: " + std::to_string(n_main) + " main blocks not divisible by " +
                      std::to_string(n_ctrl) + " control blocks");
  const int r = n_main / n_ctrl;
  std::vector<std::vector<int>> map(static_cast<std::size_t>(n_ctrl));
  for (int i = 0; i < n_ctrl; ++i)
    for (int j = 0; j < r; ++j) map[static_cast<std::size_t>(i)].push_back(i * r + j);
  return map;
}

/// Checks that every main block is fed by exactly one control block.
inline void validate_injection_map(const std::vector<std::vector<int>>& map, int n_main) {
  std::vector<int> hits(static_cast<std::size_t>(n_main), 0);
  for (const auto& targets : map)
    for (int m : targets) {
      if (m < 0 || m >= n_main) throw DomainError("injection map targets block " + std::to_string(m));
      ++hits[static_cast<std::size_t>(m)];
    }
  for (int m = 0; m < n_main; ++m)
    if (hits[static_cast<std::size_t>(m)] != 1)
      throw DomainError("injection map covers main block " + std::to_string(m) + " " +
                        std::to_string(hits[static_cast<std::size_t>(m)]) + " times");
}

}  // namespace patchsr::fusion
