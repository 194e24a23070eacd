#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchsr {

// Error taxonomy shared by every module.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

/// Dense row-major array of doubles. 2-D tensors are (rows x cols); images and
/// latents are (channels x height x width).
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(shape_numel(shape), fill) {
    for (int d : shape)
      if (d < 0) throw DimensionError("negative tensor dimension " + shape_str(shape));
  }
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape))
      throw DimensionError("tensor data length does not match shape " + shape_str(shape));
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

  std::size_t size() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  int rows() const { return shape.at(0); }
  int cols() const { return shape.size() == 1 ? 1 : shape.at(1); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

  std::span<double> row(int r) {
    return {data.data() + static_cast<std::size_t>(r) * cols(), static_cast<std::size_t>(cols())};
  }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols(), static_cast<std::size_t>(cols())};
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double sum_sq(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data) s += v * v;
  return s;
}

}  // namespace patchsr
