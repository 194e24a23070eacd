#pragma once

// Rectified-flow schedule: straight-line interpolation between data (t = 0)
// and noise (t = 1), constant velocity targets and Euler integration.

#include <cmath>
#include <string>
#include <vector>

#include "patchsr/rng.hpp"
#include "patchsr/tensor.hpp"

namespace patchsr {

/// channels x height x width latent (or velocity) field.
class LatentGrid {
 public:
  LatentGrid() = default;
  LatentGrid(int channels, int height, int width, double fill = 0.0)
      : t_(check({channels, height, width}), fill) {}
  explicit LatentGrid(Tensor t) : t_(std::move(t)) {
    check(t_.shape);
    if (!t_.all_finite()) throw NumericError("LatentGrid: non-finite values");
  }

  static LatentGrid normal(int channels, int height, int width, Rng& rng) {
    LatentGrid g(channels, height, width);
    for (double& v : g.t_.data) v = rng.normal();
    return g;
  }

  int channels() const { return t_.dim(0); }
  int height() const { return t_.dim(1); }
  int width() const { return t_.dim(2); }
  std::size_t size() const { return t_.size(); }
  bool empty() const { return t_.size() == 0; }

  double& operator()(int c, int i, int j) {
    return t_.data[(static_cast<std::size_t>(c) * height() + i) * width() + j];
  }
  double operator()(int c, int i, int j) const {
    return t_.data[(static_cast<std::size_t>(c) * height() + i) * width() + j];
  }
  double& operator[](std::size_t i) { return t_.data[i]; }
  double operator[](std::size_t i) const { return t_.data[i]; }

  const Tensor& tensor() const { return t_; }
  Tensor& tensor() { return t_; }
  const std::vector<double>& data() const { return t_.data; }

  bool same_shape(const LatentGrid& o) const { return t_.shape == o.t_.shape; }
  std::string shape_string() const { return shape_str(t_.shape); }

 private:
  static Shape check(Shape s) {
    if (s.size() != 3 || s[0] <= 0 || s[1] <= 0 || s[2] <= 0)
      throw DimensionError("LatentGrid: expected positive CxHxW, got " + shape_str(s));
    return s;
  }
  Tensor t_;
};

inline double max_abs_diff(const LatentGrid& a, const LatentGrid& b) {
  return max_abs_diff(a.tensor(), b.tensor());
}

/// Descending Euler time grid from t_start to 0.
struct TimeGrid {
  double t_start = 0.0;
  int n_steps = 0;
  std::vector<double> points;

  /// Index k of a grid point, inverse of t_k = t_start * (1 - k/n).
  int index_of(double t) const {
    return static_cast<int>(std::lround((1.0 - t / t_start) * n_steps));
  }
};

namespace flow {

namespace detail {
inline void require_shapes(const LatentGrid& a, const LatentGrid& b, const char* op) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}
inline void require_unit(double t, const char* op) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError(std::string(op) + ": t must lie in [0,1], got " + std::to_string(t));
}
}  // namespace detail

/// (1 - t) * z_data + t * eps.
inline LatentGrid interpolate_state(const LatentGrid& z_data, const LatentGrid& eps, double t) {
  detail::require_shapes(z_data, eps, "interpolate_state");
  detail::require_unit(t, "interpolate_state");
  LatentGrid out = z_data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * z_data[i] + t * eps[i];
  return out;
}

/// Constant velocity of the straight path from z0 (data) to z1 (noise).
inline LatentGrid velocity_target(const LatentGrid& z0, const LatentGrid& z1) {
  detail::require_shapes(z0, z1, "velocity_target");
  LatentGrid out = z1;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = z1[i] - z0[i];
  return out;
}

/// Clean-state estimate z_t - t * v.
inline LatentGrid predict_clean(const LatentGrid& z_t, const LatentGrid& v, double t) {
  detail::require_shapes(z_t, v, "predict_clean");
  detail::require_unit(t, "predict_clean");
  LatentGrid out = z_t;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = z_t[i] - t * v[i];
  return out;
}

inline LatentGrid euler_step(const LatentGrid& z_t, const LatentGrid& v, double t_cur, double t_next) {
  detail::require_shapes(z_t, v, "euler_step");
  if (!(t_next >= 0.0 && t_next < t_cur && t_cur <= 1.0))
    throw DomainError("euler_step: require 0 <= t_next < t_cur <= 1 (got " + std::to_string(t_cur) + " -> " +
                      std::to_string(t_next) + ")");
  const double dt = t_next - t_cur;
  LatentGrid out = z_t;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = z_t[i] + dt * v[i];
  return out;
}

/// Uniform grid t_k = t_start * (1 - k/n_steps), k = 0..n_steps.
inline TimeGrid make_time_grid(double t_start, int n_steps) {
  if (!(t_start > 0.0 && t_start <= 1.0)) throw DomainError("make_time_grid: t_start must lie in (0,1]");
  if (n_steps < 1) throw DomainError("make_time_grid: n_steps must be >= 1");
  TimeGrid g{t_start, n_steps, {}};
  g.points.reserve(static_cast<std::size_t>(n_steps) + 1);
  for (int k = 0; k <= n_steps; ++k)
    g.points.push_back(k == n_steps ? 0.0 : t_start * (1.0 - static_cast<double>(k) / n_steps));
  return g;
}

}  // namespace flow
}  // namespace patchsr
