#pragma once

// Named parameter storage and its binding onto a Tape.

#include <functional>
#include <map>
#include <string>
#include <unordered_map>

#include "patchsr/autograd.hpp"
#include "patchsr/rng.hpp"

namespace patchsr {

enum class ParamGroup { backbone, control, lora, discriminator };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::control: return "control";
    case ParamGroup::lora: return "lora";
    case ParamGroup::discriminator: return "discriminator";
  }
  return "?";
}

struct Param {
  Tensor value;
  ParamGroup group = ParamGroup::backbone;
};

/// Ordered by name, so every traversal (checkpointing, optimiser updates,
/// gradient reductions) runs in the same order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init, ParamGroup group) {
    auto [it, inserted] = params_.emplace(name, Param{std::move(init), group});
    if (!inserted) throw StateError("ParamStore: duplicate parameter " + name);
    return it->second.value;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const Param& param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw StateError("ParamStore: no parameter named " + name);
    return it->second;
  }
  Param& param(const std::string& name) { return const_cast<Param&>(std::as_const(*this).param(name)); }
  const Tensor& get(const std::string& name) const { return param(name).value; }
  Tensor& get(const std::string& name) { return param(name).value; }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::size_t count(ParamGroup g) const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_)
      if (p.group == g) n += p.value.size();
    return n;
  }

 private:
  std::map<std::string, Param> params_;
};

using GradStore = std::map<std::string, Tensor>;

inline void accumulate(GradStore& into, const GradStore& from, double alpha = 1.0) {
  for (const auto& [name, g] : from) {
    auto it = into.find(name);
    if (it == into.end()) {
      Tensor t = g;
      if (alpha != 1.0)
        for (double& v : t.data) v *= alpha;
      into.emplace(name, std::move(t));
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += alpha * g[i];
    }
  }
}

/// N(0, (gain^2)/fan_in) initialisation; zero gain gives an all-zero tensor.
inline Tensor init_linear(int out, int in, double gain, Rng& rng) {
  Tensor w({out, in});
  if (gain == 0.0) return w;
  const double sd = gain / std::sqrt(static_cast<double>(in));
  for (double& v : w.data) v = sd * rng.normal();
  return w;
}

/// Resolves parameter names to leaf Vars on one Tape, creating each leaf once.
///
/// With LoRA enabled, `weight(layer)` of an adapted layer returns the on-tape
/// effective weight W + scale * B * A, so gradients reach A and B.
class Binder {
 public:
  using Trainable = std::function<bool(const std::string&, const Param&)>;

  Binder(ag::Tape& tape, const ParamStore& store, Trainable trainable = nullptr)
      : tape_(tape), store_(store), trainable_(std::move(trainable)) {}

  ag::Tape& tape() { return tape_; }
  const ParamStore& store() const { return store_; }

  void set_lora(bool enabled, double scale) {
    lora_enabled_ = enabled;
    lora_scale_ = scale;
  }
  bool lora_enabled() const { return lora_enabled_; }

  ag::Var operator()(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    const Param& p = store_.param(name);
    const bool rg = trainable_ && trainable_(name, p);
    ag::Var v = tape_.leaf(p.value, rg);
    leaves_.emplace(name, v);
    return v;
  }

  ag::Var weight(const std::string& layer) {
    const std::string w = layer + ".w";
    if (!lora_enabled_ || !store_.contains("lora." + layer + ".A")) return (*this)(w);
    auto it = effective_.find(layer);
    if (it != effective_.end()) return it->second;
    ag::Var delta = ag::matmul((*this)("lora." + layer + ".B"), (*this)("lora." + layer + ".A"));
    ag::Var eff = ag::add((*this)(w), ag::scale(delta, lora_scale_));
    effective_.emplace(layer, eff);
    return eff;
  }

  ag::Var bias(const std::string& layer) { return (*this)(layer + ".b"); }

  ag::Var linear(const std::string& layer, ag::Var x, bool with_bias = true) {
    return with_bias ? ag::linear(x, weight(layer), bias(layer)) : ag::linear(x, weight(layer));
  }

  /// Gradients of every bound gradient-requiring leaf after tape.backward().
  GradStore grads() const {
    GradStore g;
    for (const auto& [name, v] : leaves_)
      if (tape_.requires_grad(v)) g.emplace(name, tape_.grad(v));
    return g;
  }

 private:
  ag::Tape& tape_;
  const ParamStore& store_;
  Trainable trainable_;
  bool lora_enabled_ = false;
  double lora_scale_ = 1.0;
  std::unordered_map<std::string, ag::Var> leaves_;
  std::unordered_map<std::string, ag::Var> effective_;
};

}  // namespace patchsr
