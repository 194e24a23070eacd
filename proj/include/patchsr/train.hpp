#pragma once

// Training: the texture (ControlNet) and removal (LoRA) steps, the
// discriminator step, AdamW, the alternating joint schedule and a
// finite-difference gradient checker.

#include <chrono>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchsr/accel.hpp"
#include "patchsr/model.hpp"

namespace patchsr {

enum class TimeSampling { uniform, logit_normal };

inline TimeSampling parse_time_sampling(const std::string& s) {
  if (s == "uniform") return TimeSampling::uniform;
  if (s == "logit_normal") return TimeSampling::logit_normal;
  throw ConfigError("unknown t sampling '" + s + "' (expected uniform or logit_normal)");
}
inline std::string to_string(TimeSampling s) { return s == TimeSampling::uniform ? "uniform" : "logit_normal"; }

enum class LrSchedule { constant, cosine };

inline LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  throw ConfigError("unknown lr schedule '" + s + "' (expected constant or cosine)");
}
inline std::string to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "cosine"; }

/// Learning-rate multiplier at `step` of `total`; cosine decays to zero at the end.
inline double lr_factor(LrSchedule s, int step, int total) {
  if (s == LrSchedule::constant || total <= 0) return 1.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total));
}

struct TrainConfig {
  double lambda = 2.0;   // perceptual weight inside the pixel loss
  double lambda1 = 2.0;  // perceptual weight inside the LoRA loss
  double lambda2 = 0.5;  // adversarial weight inside the LoRA loss
  double lr = 1e-4;
  double disc_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  int batch_size = 1;
  int warmup_steps = 200;
  int total_steps = 1000;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  double branch_prob = 0.5;  // probability of a texture step after warmup
  double pixel_t_threshold = 0.2;
  TimeSampling t_sampling = TimeSampling::uniform;
  LrSchedule lr_schedule = LrSchedule::constant;

  void validate() const {
    for (double w : {lambda, lambda1, lambda2, weight_decay})
      if (!(w >= 0.0)) throw ConfigError("train: loss and decay weights must be >= 0");
    if (!(lr > 0.0) || !(disc_lr > 0.0)) throw ConfigError("train: learning rates must be positive");
    if (!(pixel_t_threshold > 0.0 && pixel_t_threshold < 1.0)) throw ConfigError("train: threshold must lie in (0,1)");
    if (!(branch_prob >= 0.0 && branch_prob <= 1.0)) throw ConfigError("train: branch_prob must lie in [0,1]");
    if (batch_size < 1 || warmup_steps < 0 || total_steps < 0 || checkpoint_every < 0)
      throw ConfigError("train: batch_size >= 1 and non-negative step counts required");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0))
      throw ConfigError("train: invalid AdamW constants");
  }
};

/// One training pair in latent form. `cond` is the degraded latent of the same
/// geometry as `z0` (i2i-erased for texture pairs, Real-ESRGAN-lite for removal pairs).
struct TrainSample {
  LatentGrid z0;
  LatentGrid cond;
  ImageBuffer gt;
  PromptEmbedding global;
  PromptEmbedding local;
};

/// Builds a sample; `lq` is upsampled bicubically to the GT size when smaller.
inline TrainSample make_sample(const ModelConfig& mc, const ImageBuffer& gt, const ImageBuffer& lq,
                               const std::string& global_text, const std::string& local_text) {
  const Codec codec = mc.codec();
  const ImageBuffer up = lq.same_shape(gt) ? lq : imaging::resize_bicubic(lq, gt.height(), gt.width());
  return {codec.encode(gt), codec.encode(up), gt, mc.embed(global_text), mc.embed(local_text)};
}

// ------------------------------------------------------------------ optimiser

/// AdamW with bias correction and decoupled weight decay. Moments are keyed by
/// parameter name and updated in name order.
class AdamW {
 public:
  AdamW(double lr, double beta1, double beta2, double eps, double weight_decay)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(ParamStore& params, const GradStore& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (const auto& [name, g] : grads) {
      Tensor& w = params.get(name);
      auto [it, fresh] = m_.try_emplace(name, Tensor(w.shape));
      Tensor& m = it->second;
      Tensor& v = v_.try_emplace(name, Tensor(w.shape)).first->second;
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
        v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
        w[i] -= lr_ * (m[i] / c1 / (std::sqrt(v[i] / c2) + eps_) + wd_ * w[i]);
      }
    }
  }

  int steps() const { return t_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, b1_, b2_, eps_, wd_;
  int t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

struct TrainState {
  explicit TrainState(const TrainConfig& c)
      : control_opt(c.lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay),
        lora_opt(c.lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay),
        disc_opt(c.disc_lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay) {}
  AdamW control_opt, lora_opt, disc_opt;
};

// ------------------------------------------------------------------ steps

struct TextureReport {
  double loss = 0.0;
  double velocity = 0.0;
  std::optional<double> pixel;  // present when some sample had t <= threshold
  std::vector<double> t;
};

struct RemovalReport {
  double loss = 0.0;
  double latent = 0.0;
  double pixel_mse = 0.0;
  double perceptual = 0.0;
  double gan = 0.0;
  double disc = 0.0;
};

namespace train {

inline double sample_t(TimeSampling s, Rng& rng) {
  if (s == TimeSampling::uniform) return rng.uniform_open();
  return 1.0 / (1.0 + std::exp(-rng.normal()));
}

inline void check_loss(double v, const std::string& what, int step_hint) {
  if (!std::isfinite(v))
    throw NumericError(what + ": non-finite loss " + std::to_string(v) +
                       (step_hint >= 0 ? " at step " + std::to_string(step_hint) : std::string()));
}

inline void check_grads(const GradStore& g, const std::string& what) {
  for (const auto& [name, t] : g)
    if (!t.all_finite()) throw NumericError(what + ": non-finite gradient for " + name);
}

/// Velocity loss, plus the pixel loss on the clean prediction when `with_pixel`.
struct TextureTerms {
  ag::Var total, velocity;
  std::optional<ag::Var> pixel;
};

inline TextureTerms texture_objective(Binder& b, const ModelConfig& mc, double lambda, const TrainSample& s, double t,
                                      const LatentGrid& eps, bool with_pixel) {
  ag::Tape& tape = b.tape();
  const LatentGrid zt = flow::interpolate_state(s.z0, eps, t);
  ag::Var zt_v = tape.constant(zt.tensor());
  ag::Var v = model::forward(b, mc, zt_v, t, tape.constant(s.global.tokens), tape.constant(s.local.tokens),
                             tape.constant(s.cond.tensor()));
  ag::Var vel = loss::velocity(v, tape.constant(flow::velocity_target(s.z0, eps).tensor()));
  TextureTerms out{vel, vel, std::nullopt};
  if (with_pixel) {
    ag::Var z0_hat = ag::sub(zt_v, ag::scale(v, t));
    ag::Var px = loss::pixel(mc.codec(), z0_hat, tape.constant(s.gt.tensor()), lambda).total;
    out.pixel = px;
    out.total = ag::add(vel, px);
  }
  return out;
}

/// LoRA objective for one sample: z_dr_hat = z_lq - t_dr * v with LoRA on.
inline loss::LoraTerms removal_objective(Binder& b, const ModelConfig& mc, const TrainConfig& tc,
                                         const TrainSample& s, ag::Var* z_dr_out = nullptr) {
  ag::Tape& tape = b.tape();
  b.set_lora(true, mc.lora.scale());
  ag::Var zl = tape.constant(s.cond.tensor());
  ag::Var v = model::forward(b, mc, zl, kRemovalTime, tape.constant(s.global.tokens), tape.constant(s.local.tokens), zl);
  ag::Var z_dr = ag::sub(zl, ag::scale(v, kRemovalTime));
  if (z_dr_out) *z_dr_out = z_dr;
  return loss::lora(b, mc.codec(), z_dr, tape.constant(s.z0.tensor()), tape.constant(s.gt.tensor()), tc.lambda1,
                    tc.lambda2);
}

inline void average(GradStore& g, double n) {
  for (auto& [_, t] : g)
    for (double& v : t.data) v /= n;
}

}  // namespace train

/// One optimiser update of the control-branch (and fusion) parameters.
inline TextureReport texture_train_step(ParamStore& params, TrainState& state, const std::vector<TrainSample>& batch,
                                        const ModelConfig& mc, const TrainConfig& tc, Rng& rng,
                                        std::optional<double> forced_t = std::nullopt) {
  if (batch.empty()) throw DimensionError("texture_train_step: empty batch");
  TextureReport rep;
  GradStore total;
  double pixel_sum = 0.0;
  int pixel_n = 0;
  for (const auto& s : batch) {
    const double t = forced_t.value_or(train::sample_t(tc.t_sampling, rng));
    const LatentGrid eps = LatentGrid::normal(s.z0.channels(), s.z0.height(), s.z0.width(), rng);
    ag::Tape tape;
    Binder b(tape, params, [](const std::string&, const Param& p) { return p.group == ParamGroup::control; });
    const auto terms = train::texture_objective(b, mc, tc.lambda, s, t, eps, t <= tc.pixel_t_threshold);
    const double lv = terms.total.value()[0];
    train::check_loss(lv, "texture_train_step (t=" + std::to_string(t) + ")", state.control_opt.steps());
    tape.backward(terms.total);
    accumulate(total, b.grads());
    rep.loss += lv;
    rep.velocity += terms.velocity.value()[0];
    if (terms.pixel) {
      pixel_sum += terms.pixel->value()[0];
      ++pixel_n;
    }
    rep.t.push_back(t);
  }
  const double n = static_cast<double>(batch.size());
  train::average(total, n);
  train::check_grads(total, "texture_train_step");
  state.control_opt.step(params, total);
  rep.loss /= n;
  rep.velocity /= n;
  if (pixel_n) rep.pixel = pixel_sum / pixel_n;
  return rep;
}

/// One LoRA update followed by one discriminator update.
inline RemovalReport removal_train_step(ParamStore& params, TrainState& state, const std::vector<TrainSample>& batch,
                                        const ModelConfig& mc, const TrainConfig& tc) {
  if (batch.empty()) throw DimensionError("removal_train_step: empty batch");
  RemovalReport rep;
  GradStore g_lora, g_disc;
  std::vector<Tensor> fakes;
  for (const auto& s : batch) {
    ag::Tape tape;
    Binder b(tape, params, [](const std::string&, const Param& p) { return p.group == ParamGroup::lora; });
    ag::Var z_dr;
    const auto terms = train::removal_objective(b, mc, tc, s, &z_dr);
    const double lv = terms.total.value()[0];
    train::check_loss(lv, "removal_train_step", state.lora_opt.steps());
    tape.backward(terms.total);
    accumulate(g_lora, b.grads());
    rep.loss += lv;
    rep.latent += terms.latent.value()[0];
    rep.pixel_mse += terms.pixel_mse.value()[0];
    rep.perceptual += terms.perceptual.value()[0];
    rep.gan += terms.gan.value()[0];
    fakes.push_back(mc.codec().decode(tape.constant(z_dr.value())).value());
  }
  const double n = static_cast<double>(batch.size());
  train::average(g_lora, n);
  train::check_grads(g_lora, "removal_train_step");
  state.lora_opt.step(params, g_lora);

  for (std::size_t i = 0; i < batch.size(); ++i) {
    ag::Tape tape;
    Binder b(tape, params, [](const std::string&, const Param& p) { return p.group == ParamGroup::discriminator; });
    ag::Var real = discriminator::forward(b, tape.constant(batch[i].gt.tensor()));
    ag::Var fake = discriminator::forward(b, tape.constant(fakes[i]));
    ag::Var l = discriminator::loss(real, fake);
    train::check_loss(l.value()[0], "discriminator step", state.disc_opt.steps());
    tape.backward(l);
    accumulate(g_disc, b.grads());
    rep.disc += l.value()[0];
  }
  train::average(g_disc, n);
  train::check_grads(g_disc, "discriminator step");
  state.disc_opt.step(params, g_disc);
  rep.loss /= n;
  rep.latent /= n;
  rep.pixel_mse /= n;
  rep.perceptual /= n;
  rep.gan /= n;
  rep.disc /= n;
  return rep;
}

// ------------------------------------------------------------------ joint schedule

enum class Branch { texture, removal };
inline const char* to_string(Branch b) { return b == Branch::texture ? "texture" : "removal"; }

/// Warmup of texture-only steps, then a seeded coin per step.
inline std::vector<Branch> branch_schedule(int warmup, int total, double texture_prob, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xB4A0C4));
  std::vector<Branch> out;
  out.reserve(static_cast<std::size_t>(std::max(total, 0)));
  for (int s = 0; s < total; ++s)
    out.push_back(s < warmup || rng.bernoulli(texture_prob) ? Branch::texture : Branch::removal);
  return out;
}

struct Corpus {
  std::vector<TrainSample> texture;
  std::vector<TrainSample> removal;
};

struct StepRecord {
  int step = 0;
  Branch branch = Branch::texture;
  double loss = 0.0;
  nlohmann::json components;
};

struct JointTrainHooks {
  std::ostream* log = nullptr;  // one JSON object per line
  std::function<void(int step, const ParamStore&)> checkpoint;
  std::function<void(const StepRecord&)> on_step;
};

inline std::vector<TrainSample> draw_batch(const std::vector<TrainSample>& pool, int n, Rng& rng) {
  std::vector<TrainSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))]);
  return out;
}

inline void joint_train(ParamStore& params, const Corpus& corpus, const ModelConfig& mc, const TrainConfig& tc,
                        std::uint64_t seed, const JointTrainHooks& hooks = {}) {
  tc.validate();
  if (corpus.texture.empty()) throw ConfigError("joint_train: corpus has no 'texture' stage pairs");
  if (corpus.removal.empty() && tc.total_steps > tc.warmup_steps && tc.branch_prob < 1.0)
    throw ConfigError("joint_train: corpus has no 'removal' stage pairs");
  TrainState state(tc);
  Rng rng(mix_seed(seed, 0x7EA1));
  const auto schedule = branch_schedule(tc.warmup_steps, tc.total_steps, tc.branch_prob, seed);
  const auto t0 = std::chrono::steady_clock::now();
  for (int step = 0; step < tc.total_steps; ++step) {
    StepRecord rec;
    rec.step = step;
    rec.branch = schedule[static_cast<std::size_t>(step)];
    const double f = lr_factor(tc.lr_schedule, step, tc.total_steps);
    state.control_opt.set_lr(f * tc.lr);
    state.lora_opt.set_lr(f * tc.lr);
    state.disc_opt.set_lr(f * tc.disc_lr);
    if (rec.branch == Branch::texture) {
      const auto r = texture_train_step(params, state, draw_batch(corpus.texture, tc.batch_size, rng), mc, tc, rng);
      rec.loss = r.loss;
      rec.components = {{"velocity", r.velocity}, {"t", r.t}};
      rec.components["pixel"] = r.pixel ? nlohmann::json(*r.pixel) : nlohmann::json(nullptr);
    } else {
      const auto r = removal_train_step(params, state, draw_batch(corpus.removal, tc.batch_size, rng), mc, tc);
      rec.loss = r.loss;
      rec.components = {{"latent", r.latent},   {"pixel_mse", r.pixel_mse}, {"perceptual", r.perceptual},
                        {"gan", r.gan},         {"disc", r.disc}};
    }
    if (hooks.log) {
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      nlohmann::json line = {{"step", step}, {"branch", to_string(rec.branch)}, {"loss", rec.loss},
                             {"components", rec.components}, {"wall_ms", ms}};
      *hooks.log << line.dump() << '\n';
    }
    if (hooks.on_step) hooks.on_step(rec);
    const bool last = step + 1 == tc.total_steps;
    if (hooks.checkpoint && (last || (tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0)))
      hooks.checkpoint(step + 1, params);
  }
}

// ------------------------------------------------------------------ gradient check

enum class CheckedLoss { velocity, pixel, lora, discriminator };

inline const char* to_string(CheckedLoss l) {
  switch (l) {
    case CheckedLoss::velocity: return "velocity";
    case CheckedLoss::pixel: return "pixel";
    case CheckedLoss::lora: return "lora";
    case CheckedLoss::discriminator: return "discriminator";
  }
  return "?";
}

struct GradcheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  CheckedLoss loss = CheckedLoss::velocity;
  std::vector<GradcheckEntry> entries;

  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.rel_error);
    return w;
  }
  double fraction_below(double tol) const {
    if (entries.empty()) return 1.0;
    std::size_t n = 0;
    for (const auto& e : entries) n += e.rel_error < tol;
    return static_cast<double>(n) / entries.size();
  }
};

struct GradcheckInput {
  TrainSample sample;
  double t = 0.1;
  LatentGrid eps;
};

namespace train {

/// Scalar objective for the gradient check with every parameter bound as trainable.
inline ag::Var checked_objective(Binder& b, const ModelConfig& mc, const TrainConfig& tc, const GradcheckInput& in,
                                 CheckedLoss which) {
  switch (which) {
    case CheckedLoss::velocity: return texture_objective(b, mc, tc.lambda, in.sample, in.t, in.eps, false).velocity;
    case CheckedLoss::pixel: return *texture_objective(b, mc, tc.lambda, in.sample, in.t, in.eps, true).pixel;
    case CheckedLoss::lora: return removal_objective(b, mc, tc, in.sample).total;
    case CheckedLoss::discriminator: {
      ag::Tape& t = b.tape();
      return discriminator::loss(discriminator::forward(b, t.constant(in.sample.gt.tensor())),
                                 discriminator::forward(b, t.constant(mc.codec().decode(in.sample.cond).tensor())));
    }
  }
  throw StateError("unknown loss");
}

}  // namespace train

/// Central differences of the chosen loss against its analytic gradient, on
/// `per_param` sampled elements of every parameter whose name matches `filter`.
inline GradcheckReport gradcheck(const ParamStore& params, const ModelConfig& mc, const TrainConfig& tc,
                                 const GradcheckInput& in, CheckedLoss which, int per_param, std::uint64_t seed,
                                 const std::function<bool(const std::string&)>& filter = nullptr, double h = 1e-5) {
  GradStore analytic;
  {
    ag::Tape tape;
    Binder b(tape, params, [](const std::string&, const Param&) { return true; });
    ag::Var l = train::checked_objective(b, mc, tc, in, which);
    tape.backward(l);
    analytic = b.grads();
  }
  ParamStore work = params;
  auto eval = [&] {
    ag::Tape tape(false);
    Binder b(tape, work);
    return train::checked_objective(b, mc, tc, in, which).value()[0];
  };
  GradcheckReport rep;
  rep.loss = which;
  Rng rng(seed);
  for (auto& [name, p] : work) {
    if (filter && !filter(name)) continue;
    const Tensor& ga = analytic.count(name) ? analytic.at(name) : Tensor(p.value.shape);
    const int n = std::min<int>(per_param, static_cast<int>(p.value.size()));
    for (int k = 0; k < n; ++k) {
      const std::size_t i = per_param >= static_cast<int>(p.value.size())
                                ? static_cast<std::size_t>(k)
                                : static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(p.value.size()) - 1));
      const double keep = p.value[i];
      p.value[i] = keep + h;
      const double up = eval();
      p.value[i] = keep - h;
      const double dn = eval();
      p.value[i] = keep;
      const double num = (up - dn) / (2 * h);
      const double an = ga[i];
      rep.entries.push_back({name, i, an, num, std::abs(an - num) / std::max(1e-6, std::abs(an) + std::abs(num))});
    }
  }
  return rep;
}

}  // namespace patchsr
