#pragma once

// Toy MM-DiT velocity network.
//
// Latent patches and prompt tokens are embedded to width d, processed by
// joint-attention MM blocks (separate projections and MLPs per stream, shared
// attention over [txt; img]), then by image-only single blocks, and projected
// back to a velocity field of the input's shape. Control-branch features, when
// supplied, are fused after each receiving MM block's own update.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "patchsr/flowmatch.hpp"
#include "patchsr/fusion.hpp"
#include "patchsr/params.hpp"

namespace patchsr {

struct BackboneConfig {
  int width = 64;
  int n_mm_blocks = 6;
  int n_single_blocks = 2;
  int n_heads = 4;
  int patch = 2;
  int latent_channels = 48;
  int mlp_ratio = 2;
  bool pos_embed = true;

  int token_features() const { return latent_channels * patch * patch; }

  void validate() const {
    if (width < 1 || n_heads < 1 || width % n_heads != 0)
      throw ConfigError("backbone: width must be a positive multiple of n_heads");
    if (width % 4 != 0) throw ConfigError("backbone: width must be divisible by 4 (positional features)");
    if (n_mm_blocks < 2 || n_mm_blocks % 2 != 0) throw ConfigError("backbone: n_mm_blocks must be even and >= 2");
    if (n_single_blocks < 0 || patch < 1 || latent_channels < 1 || mlp_ratio < 1)
      throw ConfigError("backbone: invalid block counts or sizes");
  }
};

struct TokenStreams {
  ag::Var img;  // N_img x d
  ag::Var txt;  // T x d
};

/// Raw control features (f_c_img, f_c_txt) per main MM block, before fusion.
struct InjectionBundle {
  std::vector<std::optional<TokenStreams>> per_block;
};

namespace backbone {

// Init gains of the frozen, pretrained-role weights. Modulation is kept small so
// each block perturbs the residual stream moderately.
inline constexpr double kLinearGain = 1.0;
inline constexpr double kModGain = 0.3;
inline constexpr double kPosScale = 0.5;

inline void add_stream_params(ParamStore& s, const std::string& p, int d, int hidden, int mod_chunks, Rng& rng,
                              ParamGroup g, bool pre_only = false) {
  s.add(p + ".mod.w", init_linear(mod_chunks * d, d, kModGain, rng), g);
  s.add(p + ".mod.b", Tensor({mod_chunks * d}), g);
  s.add(p + ".qkv.w", init_linear(3 * d, d, kLinearGain, rng), g);
  s.add(p + ".qkv.b", Tensor({3 * d}), g);
  if (pre_only) return;
  s.add(p + ".proj.w", init_linear(d, d, kLinearGain, rng), g);
  s.add(p + ".proj.b", Tensor({d}), g);
  s.add(p + ".mlp.0.w", init_linear(hidden, d, kLinearGain, rng), g);
  s.add(p + ".mlp.0.b", Tensor({hidden}), g);
  s.add(p + ".mlp.2.w", init_linear(d, hidden, kLinearGain, rng), g);
  s.add(p + ".mlp.2.b", Tensor({d}), g);
}

inline std::string mm_prefix(int l) { return "bb.mm" + std::to_string(l); }
inline std::string single_prefix(int l) { return "bb.single" + std::to_string(l); }

/// The text stream of the last MM block only feeds attention keys and values:
/// nothing downstream reads its updated tokens, so it has no output projection or MLP.
inline bool txt_pre_only(const BackboneConfig& cfg, int l) { return l == cfg.n_mm_blocks - 1; }

/// Names of the linear layers that carry LoRA adapters (all MM-block projections and MLPs).
inline std::vector<std::string> adapted_layers(const BackboneConfig& cfg) {
  std::vector<std::string> out;
  for (int l = 0; l < cfg.n_mm_blocks; ++l)
    for (const char* s : {".img", ".txt"})
      for (const char* lin : {".qkv", ".proj", ".mlp.0", ".mlp.2"}) {
        if (std::string(s) == ".txt" && txt_pre_only(cfg, l) && std::string(lin) != ".qkv") continue;
        out.push_back(mm_prefix(l) + s + lin);
      }
  return out;
}

inline void add_params(ParamStore& s, const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  const int d = cfg.width, hidden = cfg.mlp_ratio * d, tf = cfg.token_features();
  const auto g = ParamGroup::backbone;
  s.add("bb.patch_in.w", init_linear(d, tf, kLinearGain, rng), g);
  s.add("bb.patch_in.b", Tensor({d}), g);
  s.add("bb.txt_in.w", init_linear(d, d, kLinearGain, rng), g);
  s.add("bb.txt_in.b", Tensor({d}), g);
  s.add("bb.t_mlp.0.w", init_linear(d, d, kLinearGain, rng), g);
  s.add("bb.t_mlp.0.b", Tensor({d}), g);
  s.add("bb.t_mlp.2.w", init_linear(d, d, kLinearGain, rng), g);
  s.add("bb.t_mlp.2.b", Tensor({d}), g);
  for (int l = 0; l < cfg.n_mm_blocks; ++l) {
    add_stream_params(s, mm_prefix(l) + ".img", d, hidden, 6, rng, g);
    const bool pre = txt_pre_only(cfg, l);
    add_stream_params(s, mm_prefix(l) + ".txt", d, hidden, pre ? 2 : 6, rng, g, pre);
  }
  for (int l = 0; l < cfg.n_single_blocks; ++l) add_stream_params(s, single_prefix(l), d, hidden, 6, rng, g);
  s.add("bb.final.mod.w", init_linear(2 * d, d, kModGain, rng), g);
  s.add("bb.final.mod.b", Tensor({2 * d}), g);
  s.add("bb.final.proj.w", init_linear(tf, d, kLinearGain, rng), g);
  s.add("bb.final.proj.b", Tensor({tf}), g);
}

// ------------------------------------------------------------------ tokenisation

/// Gather map from a C x h x w latent to (h/q * w/q) x (C*q*q) patch rows.
inline std::shared_ptr<const std::vector<std::size_t>> patchify_index(int C, int h, int w, int q) {
  if (h % q || w % q)
    throw DimensionError("patchify: latent " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by patch " + std::to_string(q));
  const int gh = h / q, gw = w / q;
  auto idx = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(C) * h * w);
  std::size_t k = 0;
  for (int pi = 0; pi < gh; ++pi)
    for (int pj = 0; pj < gw; ++pj)
      for (int c = 0; c < C; ++c)
        for (int di = 0; di < q; ++di)
          for (int dj = 0; dj < q; ++dj)
            (*idx)[k++] = (static_cast<std::size_t>(c) * h + pi * q + di) * w + pj * q + dj;
  return idx;
}

inline std::shared_ptr<const std::vector<std::size_t>> unpatchify_index(int C, int h, int w, int q) {
  const auto fwd = patchify_index(C, h, w, q);
  auto inv = std::make_shared<std::vector<std::size_t>>(fwd->size());
  for (std::size_t k = 0; k < fwd->size(); ++k) (*inv)[(*fwd)[k]] = k;
  return inv;
}

/// Raw (unprojected) patch rows of a C x h x w latent Var.
inline ag::Var patchify_raw(ag::Var z, int q) {
  const Shape& s = z.shape();
  if (s.size() != 3) throw DimensionError("patchify: expected CxHxW latent");
  const int n = (s[1] / q) * (s[2] / q);
  return ag::gather(z, patchify_index(s[0], s[1], s[2], q), {n, s[0] * q * q});
}

inline ag::Var unpatchify_raw(ag::Var rows, int C, int h, int w, int q) {
  return ag::gather(rows, unpatchify_index(C, h, w, q), {C, h, w});
}

/// Fixed 2-D sinusoidal position features, (gh*gw) x d.
inline Tensor pos_embed_2d(int gh, int gw, int d) {
  Tensor pe({gh * gw, d});
  const int quarter = d / 4;
  for (int i = 0; i < gh; ++i)
    for (int j = 0; j < gw; ++j)
      for (int k = 0; k < quarter; ++k) {
        const double f = std::pow(10000.0, -static_cast<double>(k) / quarter);
        const int r = i * gw + j;
        pe.at(r, k) = std::sin(i * f);
        pe.at(r, quarter + k) = std::cos(i * f);
        pe.at(r, 2 * quarter + k) = std::sin(j * f);
        pe.at(r, 3 * quarter + k) = std::cos(j * f);
      }
  for (double& v : pe.data) v *= kPosScale;
  return pe;
}

/// Projected image tokens of z (shared by the main network and the control branch).
inline ag::Var embed_latent(Binder& b, const BackboneConfig& cfg, ag::Var z) {
  const Shape& s = z.shape();
  if (s.size() != 3 || s[0] != cfg.latent_channels)
    throw DimensionError("backbone: expected " + std::to_string(cfg.latent_channels) + " latent channels, got " +
                         shape_str(s));
  ag::Var tok = b.linear("bb.patch_in", patchify_raw(z, cfg.patch));
  if (cfg.pos_embed)
    tok = ag::add(tok, b.tape().constant(pos_embed_2d(s[1] / cfg.patch, s[2] / cfg.patch, cfg.width)));
  return tok;
}

inline ag::Var embed_text(Binder& b, const BackboneConfig& cfg, ag::Var txt) {
  if (txt.shape().size() != 2 || txt.shape()[1] != cfg.width)
    throw DimensionError("backbone: prompt tokens must be T x " + std::to_string(cfg.width));
  return b.linear("bb.txt_in", txt);
}

/// cos/sin features of 1000*t at geometric frequencies, length d.
inline Tensor sinusoidal_features(double t, int d) {
  Tensor f({1, d});
  const int half = d / 2;
  for (int k = 0; k < half; ++k) {
    const double w = std::exp(-std::log(10000.0) * k / half);
    f.at(0, k) = std::cos(1000.0 * t * w);
    f.at(0, half + k) = std::sin(1000.0 * t * w);
  }
  return f;
}

/// Sinusoidal features followed by a two-layer SiLU MLP; 1 x d.
inline ag::Var timestep_embedding(Binder& b, double t, int d) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("timestep_embedding: t outside [0,1]");
  ag::Var f = b.tape().constant(sinusoidal_features(t, d));
  return b.linear("bb.t_mlp.2", ag::silu(b.linear("bb.t_mlp.0", f)));
}

// ------------------------------------------------------------------ blocks

namespace detail {
inline ag::Var modulate(ag::Var x, ag::Var shift, ag::Var scale) {
  return ag::add_rowvec(ag::mul_rowvec(x, ag::add_scalar(scale, 1.0)), shift);
}
inline ag::Var mlp(Binder& b, const std::string& p, ag::Var x) {
  return b.linear(p + ".2", ag::gelu(b.linear(p + ".0", x)));
}
inline void check_finite(ag::Var v, const std::string& where) {
  if (!v.value().all_finite()) throw NumericError("non-finite activation in " + where);
}
}  // namespace detail

/// One joint-attention block. `temb_act` is silu(timestep embedding), 1 x d.
/// `attn_probe` receives the joint attention probabilities when non-null.
inline TokenStreams mm_block_forward(Binder& b, const std::string& p, const TokenStreams& s, ag::Var temb_act,
                                     int heads, Tensor* attn_probe = nullptr) {
  const int d = s.img.shape()[1];
  const int T = s.txt.shape()[0], N = s.img.shape()[0];
  if (s.txt.shape()[1] != d) throw DimensionError("mm_block: stream widths differ");
  ag::Var mi = b.linear(p + ".img.mod", temb_act);
  ag::Var mt = b.linear(p + ".txt.mod", temb_act);
  auto chunk = [d](ag::Var m, int k) { return ag::slice_cols(m, k * d, d); };

  ag::Var xi = detail::modulate(ag::layer_norm(s.img), chunk(mi, 0), chunk(mi, 1));
  ag::Var xt = detail::modulate(ag::layer_norm(s.txt), chunk(mt, 0), chunk(mt, 1));
  ag::Var qkv_i = b.linear(p + ".img.qkv", xi);
  ag::Var qkv_t = b.linear(p + ".txt.qkv", xt);
  ag::Var q = ag::concat_rows(ag::slice_cols(qkv_t, 0, d), ag::slice_cols(qkv_i, 0, d));
  ag::Var k = ag::concat_rows(ag::slice_cols(qkv_t, d, d), ag::slice_cols(qkv_i, d, d));
  ag::Var v = ag::concat_rows(ag::slice_cols(qkv_t, 2 * d, d), ag::slice_cols(qkv_i, 2 * d, d));
  ag::Var a = ag::attention(q, k, v, heads, attn_probe);
  ag::Var at = ag::slice_rows(a, 0, T);
  ag::Var ai = ag::slice_rows(a, T, N);

  ag::Var img = ag::add(s.img, ag::mul_rowvec(b.linear(p + ".img.proj", ai), chunk(mi, 2)));
  img = ag::add(img, ag::mul_rowvec(detail::mlp(b, p + ".img.mlp",
                                                detail::modulate(ag::layer_norm(img), chunk(mi, 3), chunk(mi, 4))),
                                    chunk(mi, 5)));
  detail::check_finite(img, p + ".img");
  if (!b.store().contains(p + ".txt.proj.w")) return {img, s.txt};
  ag::Var txt = ag::add(s.txt, ag::mul_rowvec(b.linear(p + ".txt.proj", at), chunk(mt, 2)));
  txt = ag::add(txt, ag::mul_rowvec(detail::mlp(b, p + ".txt.mlp",
                                                detail::modulate(ag::layer_norm(txt), chunk(mt, 3), chunk(mt, 4))),
                                    chunk(mt, 5)));
  detail::check_finite(txt, p + ".txt");
  return {img, txt};
}

/// Image-only transformer block.
inline ag::Var single_block_forward(Binder& b, const std::string& p, ag::Var img, ag::Var temb_act, int heads) {
  const int d = img.shape()[1];
  ag::Var m = b.linear(p + ".mod", temb_act);
  auto chunk = [d](ag::Var mv, int k) { return ag::slice_cols(mv, k * d, d); };
  ag::Var x = detail::modulate(ag::layer_norm(img), chunk(m, 0), chunk(m, 1));
  ag::Var qkv = b.linear(p + ".qkv", x);
  ag::Var a = ag::attention(ag::slice_cols(qkv, 0, d), ag::slice_cols(qkv, d, d), ag::slice_cols(qkv, 2 * d, d), heads);
  img = ag::add(img, ag::mul_rowvec(b.linear(p + ".proj", a), chunk(m, 2)));
  img = ag::add(img, ag::mul_rowvec(detail::mlp(b, p + ".mlp",
                                                detail::modulate(ag::layer_norm(img), chunk(m, 3), chunk(m, 4))),
                                    chunk(m, 5)));
  detail::check_finite(img, p);
  return img;
}

inline std::string fuse_prefix(int l) { return "ctrl.fuse" + std::to_string(l); }

/// Full velocity prediction for one latent patch. `inj` may be null.
inline ag::Var forward(Binder& b, const BackboneConfig& cfg, ag::Var z_t, double t, ag::Var txt,
                       const InjectionBundle* inj = nullptr) {
  const Shape zs = z_t.shape();
  if (inj && static_cast<int>(inj->per_block.size()) != cfg.n_mm_blocks)
    throw DimensionError("backbone: injection bundle has " + std::to_string(inj->per_block.size()) +
                         " entries for " + std::to_string(cfg.n_mm_blocks) + " MM blocks");
  TokenStreams s{embed_latent(b, cfg, z_t), embed_text(b, cfg, txt)};
  ag::Var act = ag::silu(timestep_embedding(b, t, cfg.width));
  for (int l = 0; l < cfg.n_mm_blocks; ++l) {
    s = mm_block_forward(b, mm_prefix(l), s, act, cfg.n_heads);
    if (inj && inj->per_block[static_cast<std::size_t>(l)]) {
      const TokenStreams& c = *inj->per_block[static_cast<std::size_t>(l)];
      s.img = fusion::inject_image(b, fuse_prefix(l) + ".img_mlp", s.img, c.img);
      s.txt = fusion::fuse_text(b, fuse_prefix(l) + ".txt", s.txt, c.txt, cfg.n_heads);
    }
  }
  ag::Var img = s.img;
  for (int l = 0; l < cfg.n_single_blocks; ++l) img = single_block_forward(b, single_prefix(l), img, act, cfg.n_heads);
  const int d = cfg.width;
  ag::Var fm = b.linear("bb.final.mod", act);
  ag::Var x = detail::modulate(ag::layer_norm(img), ag::slice_cols(fm, 0, d), ag::slice_cols(fm, d, d));
  ag::Var rows = b.linear("bb.final.proj", x);
  return unpatchify_raw(rows, zs[0], zs[1], zs[2], cfg.patch);
}

}  // namespace backbone
}  // namespace patchsr
