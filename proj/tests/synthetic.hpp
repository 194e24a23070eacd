#pragma once

// Seeded synthetic images shared by the tests and the acceptance binary.

#include <cmath>
#include <cstdint>

#include "patchsr/image.hpp"
#include "patchsr/rng.hpp"

namespace synth {

using patchsr::ImageBuffer;

/// Smooth colour gradient plus a soft disc plus an oriented sinusoidal texture.
inline ImageBuffer textured(int h, int w, std::uint64_t seed, double texture_amp = 0.15) {
  patchsr::Rng rng(seed);
  double base[3], grad_i[3], grad_j[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.3, 0.7);
    grad_i[c] = rng.uniform(-0.2, 0.2);
    grad_j[c] = rng.uniform(-0.2, 0.2);
  }
  const double ci = rng.uniform(0.3, 0.7) * h, cj = rng.uniform(0.3, 0.7) * w;
  const double rad = rng.uniform(0.15, 0.3) * std::min(h, w);
  const double disc = rng.uniform(-0.2, 0.2);
  const double theta = rng.uniform(0.0, 3.14159265358979323846);
  const double freq = rng.uniform(1.2, 2.2);
  const double phase = rng.uniform(0.0, 6.283185307179586);
  ImageBuffer img(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double u = static_cast<double>(i) / h - 0.5, v = static_cast<double>(j) / w - 0.5;
      const double r = std::hypot(i - ci, j - cj);
      const double inside = 1.0 / (1.0 + std::exp((r - rad) / 1.5));
      const double tex = texture_amp * std::sin(freq * (i * std::cos(theta) + j * std::sin(theta)) + phase);
      for (int c = 0; c < 3; ++c)
        img(c, i, j) = std::clamp(base[c] + grad_i[c] * u + grad_j[c] * v + disc * inside + tex, 0.0, 1.0);
    }
  return img;
}

/// Vertical stripes of the given period.
inline ImageBuffer stripes(int h, int w, int period) {
  ImageBuffer img(h, w);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) img(c, i, j) = (j / (period / 2)) % 2 ? 0.8 : 0.2;
  return img;
}

inline ImageBuffer uniform_noise(int h, int w, std::uint64_t seed) {
  patchsr::Rng rng(seed);
  ImageBuffer img(h, w);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform();
  return img;
}

}  // namespace synth
