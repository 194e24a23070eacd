#pragma once

// RGB image buffer and the classic resampling / filtering kernels used by the
// degradation pipelines, the reference upsampler and the metrics.

#include <algorithm>
#include <cmath>
#include <vector>

#include "patchsr/tensor.hpp"

namespace patchsr {

/// 3 x height x width planar RGB image. Values are nominally in [0,1]; decoded
/// network outputs may leave that range until clamped() at export.
class ImageBuffer {
 public:
  static constexpr int kChannels = 3;

  ImageBuffer() = default;
  ImageBuffer(int height, int width, double fill = 0.0) : t_(check(height, width), fill) {}
  explicit ImageBuffer(Tensor t) : t_(std::move(t)) {
    if (t_.shape.size() != 3 || t_.dim(0) != kChannels || t_.dim(1) <= 0 || t_.dim(2) <= 0)
      throw DimensionError("ImageBuffer: expected 3xHxW, got " + shape_str(t_.shape));
  }

  int height() const { return t_.dim(1); }
  int width() const { return t_.dim(2); }
  std::size_t size() const { return t_.size(); }

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

  bool same_shape(const ImageBuffer& o) const { return t_.shape == o.t_.shape; }

  bool in_unit_range() const {
    return std::all_of(t_.data.begin(), t_.data.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
  }
  ImageBuffer clamped() const {
    ImageBuffer o = *this;
    for (double& v : o.t_.data) v = std::clamp(v, 0.0, 1.0);
    return o;
  }

 private:
  static Shape check(int h, int w) {
    if (h <= 0 || w <= 0) throw DimensionError("ImageBuffer: non-positive dimensions");
    return {kChannels, h, w};
  }
  Tensor t_;
};

inline void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
  require_same_shape(a.tensor(), b.tensor(), what);
}

namespace imaging {

namespace detail {
inline double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

// Resampling taps for one axis: for each output index, (first source index, 4 weights).
struct Taps {
  std::vector<int> base;
  std::vector<double> w;  // 4 per output
};

inline Taps cubic_taps(int in, int out) {
  Taps t;
  t.base.resize(static_cast<std::size_t>(out));
  t.w.resize(static_cast<std::size_t>(out) * 4);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double src = (o + 0.5) * scale - 0.5;
    const int i0 = static_cast<int>(std::floor(src)) - 1;
    t.base[static_cast<std::size_t>(o)] = i0;
    double s = 0.0;
    for (int k = 0; k < 4; ++k) {
      const double w = cubic_weight(src - (i0 + k));
      t.w[static_cast<std::size_t>(o) * 4 + k] = w;
      s += w;
    }
    for (int k = 0; k < 4; ++k) t.w[static_cast<std::size_t>(o) * 4 + k] /= s;
  }
  return t;
}
}  // namespace detail

/// Bicubic (Keys, a = -0.5) resampling with edge clamping.
inline ImageBuffer resize_bicubic(const ImageBuffer& img, int out_h, int out_w) {
  const int H = img.height(), W = img.width();
  const auto th = detail::cubic_taps(H, out_h);
  const auto tw = detail::cubic_taps(W, out_w);
  ImageBuffer tmp(H, out_w);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < H; ++i)
      for (int o = 0; o < out_w; ++o) {
        double s = 0.0;
        for (int k = 0; k < 4; ++k) {
          const int j = std::clamp(tw.base[static_cast<std::size_t>(o)] + k, 0, W - 1);
          s += tw.w[static_cast<std::size_t>(o) * 4 + k] * img(c, i, j);
        }
        tmp(c, i, o) = s;
      }
  ImageBuffer out(out_h, out_w);
  for (int c = 0; c < 3; ++c)
    for (int o = 0; o < out_h; ++o)
      for (int j = 0; j < out_w; ++j) {
        double s = 0.0;
        for (int k = 0; k < 4; ++k) {
          const int i = std::clamp(th.base[static_cast<std::size_t>(o)] + k, 0, H - 1);
          s += th.w[static_cast<std::size_t>(o) * 4 + k] * tmp(c, i, j);
        }
        out(c, o, j) = s;
      }
  return out;
}

/// Block-average downscale by an integer factor.
inline ImageBuffer downscale_area(const ImageBuffer& img, int factor) {
  if (factor < 1 || img.height() % factor || img.width() % factor)
    throw DimensionError("downscale_area: dimensions not divisible by factor");
  const int h = img.height() / factor, w = img.width() / factor;
  ImageBuffer out(h, w);
  const double inv = 1.0 / (factor * factor);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double s = 0.0;
        for (int a = 0; a < factor; ++a)
          for (int b = 0; b < factor; ++b) s += img(c, i * factor + a, j * factor + b);
        out(c, i, j) = s * inv;
      }
  return out;
}

/// Separable Gaussian blur, radius ceil(3 sigma), edge clamping. sigma <= 0 is identity.
inline ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= s;
  const int H = img.height(), W = img.width();
  ImageBuffer tmp(H, W), out(H, W);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        double a = 0.0;
        for (int d = -r; d <= r; ++d) a += k[static_cast<std::size_t>(d + r)] * img(c, i, std::clamp(j + d, 0, W - 1));
        tmp(c, i, j) = a;
      }
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        double a = 0.0;
        for (int d = -r; d <= r; ++d) a += k[static_cast<std::size_t>(d + r)] * tmp(c, std::clamp(i + d, 0, H - 1), j);
        out(c, i, j) = a;
      }
  return out;
}

inline ImageBuffer crop(const ImageBuffer& img, int top, int left, int h, int w) {
  if (top < 0 || left < 0 || top + h > img.height() || left + w > img.width())
    throw DimensionError("crop: window out of bounds");
  ImageBuffer out(h, w);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out(c, i, j) = img(c, top + i, left + j);
  return out;
}

/// Means over non-overlapping k x k blocks (trailing partial blocks dropped).
inline ImageBuffer box_mean(const ImageBuffer& img, int k) {
  const int h = img.height() / k, w = img.width() / k;
  if (h == 0 || w == 0) throw DimensionError("box_mean: image smaller than block");
  ImageBuffer out(h, w);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double s = 0.0;
        for (int a = 0; a < k; ++a)
          for (int b = 0; b < k; ++b) s += img(c, i * k + a, j * k + b);
        out(c, i, j) = s / (k * k);
      }
  return out;
}

/// Mean absolute 4-neighbour Laplacian over interior pixels, all channels.
inline double mean_abs_laplacian(const ImageBuffer& img) {
  const int H = img.height(), W = img.width();
  if (H < 3 || W < 3) throw DimensionError("mean_abs_laplacian: image smaller than 3x3");
  double s = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int i = 1; i < H - 1; ++i)
      for (int j = 1; j < W - 1; ++j)
        s += std::abs(img(c, i - 1, j) + img(c, i + 1, j) + img(c, i, j - 1) + img(c, i, j + 1) - 4.0 * img(c, i, j));
  return s / (3.0 * (H - 2) * (W - 2));
}

inline double mean_abs_diff(const ImageBuffer& a, const ImageBuffer& b) {
  require_same_shape(a, b, "mean_abs_diff");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace imaging
}  // namespace patchsr
