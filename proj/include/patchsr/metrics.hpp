#pragma once

// Full-reference quality metrics.

#include <array>
#include <cmath>

#include "patchsr/image.hpp"

namespace patchsr {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(1 / MSE) for peak 1.0, capped for identical inputs.
inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
  require_same_shape(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace metrics {

/// BT.601 luma.
inline Tensor luminance(const ImageBuffer& img) {
  Tensor y({img.height(), img.width()});
  for (int i = 0; i < img.height(); ++i)
    for (int j = 0; j < img.width(); ++j)
      y.at(i, j) = 0.299 * img(0, i, j) + 0.587 * img(1, i, j) + 0.114 * img(2, i, j);
  return y;
}

inline constexpr int kWindow = 11;

inline const std::array<double, kWindow>& gaussian_window() {
  static const auto w = [] {
    std::array<double, kWindow> k{};
    double s = 0.0;
    for (int i = 0; i < kWindow; ++i) s += k[static_cast<std::size_t>(i)] = std::exp(-0.5 * std::pow((i - 5) / 1.5, 2));
    for (double& v : k) v /= s;
    return k;
  }();
  return w;
}

/// Separable 11-tap Gaussian filter, valid region only.
inline Tensor filter_valid(const Tensor& x) {
  const auto& k = gaussian_window();
  const int H = x.dim(0), W = x.dim(1), oh = H - kWindow + 1, ow = W - kWindow + 1;
  Tensor tmp({H, ow}), out({oh, ow});
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < ow; ++j) {
      double s = 0.0;
      for (int d = 0; d < kWindow; ++d) s += k[static_cast<std::size_t>(d)] * x.at(i, j + d);
      tmp.at(i, j) = s;
    }
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      double s = 0.0;
      for (int d = 0; d < kWindow; ++d) s += k[static_cast<std::size_t>(d)] * tmp.at(i + d, j);
      out.at(i, j) = s;
    }
  return out;
}

}  // namespace metrics

/// Single-scale SSIM on luminance: 11-tap Gaussian window (sigma 1.5),
/// k1 = 0.01, k2 = 0.03, mean over the valid region.
inline double ssim(const ImageBuffer& a, const ImageBuffer& b) {
  require_same_shape(a, b, "ssim");
  if (a.height() < metrics::kWindow || a.width() < metrics::kWindow)
    throw DimensionError("ssim: images must be at least 11x11, got " + std::to_string(a.height()) + "x" +
                         std::to_string(a.width()));
  const Tensor x = metrics::luminance(a), y = metrics::luminance(b);
  Tensor xx = x, yy = y, xy = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const Tensor mx = metrics::filter_valid(x), my = metrics::filter_valid(y);
  const Tensor sxx = metrics::filter_valid(xx), syy = metrics::filter_valid(yy), sxy = metrics::filter_valid(xy);
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

}  // namespace patchsr
