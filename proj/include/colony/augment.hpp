#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <utility>

#include "colony/mask.hpp"

namespace colony {

/// Rotates image and mask by `angle_degrees` about the canvas center. The
/// image is resampled bilinearly, the mask by nearest neighbor; samples from
/// outside the canvas take `fill` / background.
inline std::pair<RgbImage, LabelMask> rotate_augment(
    const RgbImage& image, const LabelMask& mask, double angle_degrees,
    std::array<std::uint8_t, 3> fill = {18, 18, 22}) {
  const int h = image.height(), w = image.width();
  if (mask.height() != h || mask.width() != w) {
    throw ShapeError("rotate_augment: image and mask sizes differ");
  }
  double deg = std::fmod(angle_degrees, 360.0);
  if (deg < 0) deg += 360.0;
  double c, s;
  // Snap quarter turns so they are exact permutations.
  if (deg == 0.0) {
    c = 1, s = 0;
  } else if (deg == 90.0) {
    c = 0, s = 1;
  } else if (deg == 180.0) {
    c = -1, s = 0;
  } else if (deg == 270.0) {
    c = 0, s = -1;
  } else {
    const double rad = deg * std::numbers::pi / 180.0;
    c = std::cos(rad);
    s = std::sin(rad);
  }
  const double cx = w / 2.0, cy = h / 2.0;
  RgbImage out_img(h, w);
  LabelMask out_mask(h, w);

  auto sample = [&](int y, int x, int k) -> double {
    if (y < 0 || y >= h || x < 0 || x >= w) return fill[k];
    return image.px(y, x)[k];
  };

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double u = x + 0.5 - cx, v = y + 0.5 - cy;
      // Inverse rotation maps the output pixel center to its source.
      const double sx = c * u + s * v + cx;
      const double sy = -s * u + c * v + cy;

      const int nx = static_cast<int>(std::floor(sx));
      const int ny = static_cast<int>(std::floor(sy));
      if (nx >= 0 && nx < w && ny >= 0 && ny < h) out_mask.set(y, x, mask.at(ny, nx));

      const double fx = sx - 0.5, fy = sy - 0.5;
      const int x0 = static_cast<int>(std::floor(fx));
      const int y0 = static_cast<int>(std::floor(fy));
      const double ax = fx - x0, ay = fy - y0;
      auto* p = out_img.px(y, x);
      for (int k = 0; k < 3; ++k) {
        const double top = (1 - ax) * sample(y0, x0, k) + ax * sample(y0, x0 + 1, k);
        const double bot = (1 - ax) * sample(y0 + 1, x0, k) + ax * sample(y0 + 1, x0 + 1, k);
        const double v2 = (1 - ay) * top + ay * bot;
        p[k] = static_cast<std::uint8_t>(std::clamp(std::lround(v2), 0L, 255L));
      }
    }
  }
  return {std::move(out_img), std::move(out_mask)};
}

/// Rotation by an angle drawn uniformly from [0, 360).
template <typename Rng>
std::pair<RgbImage, LabelMask> random_rotate(const RgbImage& image,
                                             const LabelMask& mask, Rng& rng) {
  std::uniform_real_distribution<double> angle(0.0, 360.0);
  return rotate_augment(image, mask, angle(rng));
}

}  // namespace colony
