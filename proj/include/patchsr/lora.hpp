#pragma once

// Low-rank adapters on the backbone's MM-block linears.

#include <string>

#include "patchsr/backbone.hpp"

namespace patchsr {

enum class StageFlag { removal, texture };

inline const char* to_string(StageFlag s) { return s == StageFlag::removal ? "removal" : "texture"; }

struct LoraConfig {
  int rank = 8;
  double alpha = 8.0;

  double scale() const { return alpha / rank; }
  void validate() const {
    if (rank < 1) throw ConfigError("lora: rank must be >= 1");
    if (!(alpha > 0.0)) throw ConfigError("lora: alpha must be positive");
  }
};

namespace lora {

/// For every adapted layer W (out x in): A (r x in) random, B (out x r) zero.
inline void add_params(ParamStore& s, const BackboneConfig& bb, const LoraConfig& lc, Rng& rng) {
  lc.validate();
  for (const auto& layer : backbone::adapted_layers(bb)) {
    const Tensor& w = s.get(layer + ".w");
    const int out = w.rows(), in = w.cols();
    if (lc.rank > std::min(in, out)) throw ConfigError("lora: rank exceeds layer dimensions of " + layer);
    s.add("lora." + layer + ".A", init_linear(lc.rank, in, 1.0, rng), ParamGroup::lora);
    s.add("lora." + layer + ".B", Tensor({out, lc.rank}), ParamGroup::lora);
  }
}

/// W + scale * B * A for one layer.
inline Tensor effective_weight(const Tensor& w, const Tensor& a, const Tensor& b, double scale) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || b.rows() != w.rows() || a.cols() != w.cols() || a.rows() != b.cols())
    throw DimensionError("apply_lora: adapter shapes " + shape_str(b.shape) + " * " + shape_str(a.shape) +
                         " do not conform to " + shape_str(w.shape));
  Tensor out = w;
  const int r = a.rows();
  for (int i = 0; i < w.rows(); ++i)
    for (int k = 0; k < r; ++k) {
      const double bik = scale * b.at(i, k);
      if (bik == 0.0) continue;
      for (int j = 0; j < w.cols(); ++j) out.at(i, j) += bik * a.at(k, j);
    }
  return out;
}

/// Materialises effective weights. Enabled: every adapted W becomes W + (alpha/r) B A.
/// Disabled: the store is returned unchanged. Adapter tensors are carried along either way.
inline ParamStore apply_lora(const ParamStore& store, double scale, bool enabled) {
  ParamStore out;
  for (const auto& [name, p] : store) {
    Tensor v = p.value;
    const std::string suffix = ".w";
    if (enabled && name.size() > suffix.size() && name.compare(name.size() - 2, 2, suffix) == 0) {
      const std::string layer = name.substr(0, name.size() - 2);
      if (store.contains("lora." + layer + ".A"))
        v = effective_weight(p.value, store.get("lora." + layer + ".A"), store.get("lora." + layer + ".B"), scale);
    }
    out.add(name, std::move(v), p.group);
  }
  return out;
}

}  // namespace lora
}  // namespace patchsr
