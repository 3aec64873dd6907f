// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dnrf/image_io.hpp"

namespace dnrf {

inline double mse(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    fail(ErrorKind::ShapeMismatch, "images differ in shape");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    acc += d * d;
  }
  return acc / double(a.data.size());
}

/// Peak signal-to-noise ratio for signals in [0, 1].
inline double psnr_from_mse(double err) { return -10.0 * std::log10(std::max(err, 1e-20)); }

inline double psnr(const Image& a, const Image& b) { return psnr_from_mse(mse(a, b)); }

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid window
/// positions, averaged over channels.
inline double ssim(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    fail(ErrorKind::ShapeMismatch, "images differ in shape");
  constexpr int kRadius = 5;
  constexpr double kSigma = 1.5;
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double kernel[2 * kRadius + 1];
  double ksum = 0.0;
  for (int i = -kRadius; i <= kRadius; ++i) ksum += kernel[i + kRadius] = std::exp(-0.5 * i * i / (kSigma * kSigma));
  for (double& k : kernel) k /= ksum;

  const int w = a.width, h = a.height;
  if (w <= 2 * kRadius || h <= 2 * kRadius) fail(ErrorKind::InvalidArgument, "image smaller than SSIM window");
  double total = 0.0;
  std::size_t count = 0;
  for (int c = 0; c < a.channels; ++c) {
    for (int y = kRadius; y < h - kRadius; ++y)
      for (int x = kRadius; x < w - kRadius; ++x) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int dy = -kRadius; dy <= kRadius; ++dy)
          for (int dx = -kRadius; dx <= kRadius; ++dx) {
            const double k = kernel[dy + kRadius] * kernel[dx + kRadius];
            const double va = a.at(x + dx, y + dy, c), vb = b.at(x + dx, y + dy, c);
            mx += k * va;
            my += k * vb;
            sxx += k * va * va;
            syy += k * vb * vb;
            sxy += k * va * vb;
          }
        const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
        total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
  }
  return total / double(count);
}

}  // namespace dnrf
