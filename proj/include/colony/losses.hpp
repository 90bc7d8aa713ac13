#pragma once

// Segmentation losses over softmax probabilities. Each returns the scalar loss
// and its gradient w.r.t. the pre-softmax logits.

#include <array>
#include <cmath>
#include <vector>

#include "colony/graph.hpp"
#include "colony/mask.hpp"

namespace colony {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDiceSmooth = 1.0;

struct ClassWeights {
  double background = 0.01;
  double bvg_plus = 0.25;
  double bvg_minus = 0.34;
  double border = 0.4;

  std::array<double, 4> as_array() const {
    return {background, bvg_plus, bvg_minus, border};
  }

  void validate() const {
    const auto w = as_array();
    static constexpr const char* keys[] = {"w_background", "w_bvg_plus",
                                           "w_bvg_minus", "w_border"};
    bool any_positive = false;
    for (int i = 0; i < 4; ++i) {
      if (!(w[i] >= 0) || !std::isfinite(w[i])) {
        throw ConfigError(keys[i], "class weight must be a finite value >= 0");
      }
      any_positive = any_positive || w[i] > 0;
    }
    if (!any_positive) {
      throw ConfigError("w_background", "at least one class weight must be positive");
    }
  }

  static ClassWeights uniform(double v = 1.0) { return {v, v, v, v}; }
};

namespace detail {

template <typename T>
void check_labels(const Tensor<T>& probs, std::span<const LabelMask> labels) {
  const Shape& s = probs.shape();
  if (s.c != 4) throw ShapeError("loss expects 4 class channels, got " + s.str());
  if (labels.size() != static_cast<std::size_t>(s.n)) {
    throw ShapeError("loss: " + std::to_string(labels.size()) +
                     " label masks for batch of " + std::to_string(s.n));
  }
  for (const auto& m : labels) {
    if (m.height() != s.h || m.width() != s.w) {
      throw ShapeError("loss: label mask size does not match probabilities");
    }
    m.validate();
  }
}

template <typename A>
A clamp_prob(A p) {
  return std::clamp(p, A(kProbClamp), A(1) - A(kProbClamp));
}

}  // namespace detail

/// -(1/(n*h*w)) * sum_p w[y(p)] * log(prob[y(p)](p)).
template <typename T>
LossResult<T> weighted_ce(const Tensor<T>& probs, std::span<const LabelMask> labels,
                          const ClassWeights& weights) {
  detail::check_labels(probs, labels);
  const Shape& s = probs.shape();
  using A = accum_t<T>;
  const auto wd = weights.as_array();
  const std::array<A, 4> w{A(wd[0]), A(wd[1]), A(wd[2]), A(wd[3])};
  const A inv_count = A(1) / static_cast<A>(s.n * s.plane());
  LossResult<T> r{0, Tensor<T>(s)};
  A total = 0;
  for (int n = 0; n < s.n; ++n) {
    const std::uint8_t* lab = labels[n].data();
    for (std::size_t i = 0; i < s.plane(); ++i) {
      const int y = lab[i];
      total -= w[y] * std::log(detail::clamp_prob<A>(probs.plane(n, y)[i]));
      const A k = w[y] * inv_count;
      for (int c = 0; c < 4; ++c) {
        const A p = probs.plane(n, c)[i];
        r.grad.plane(n, c)[i] = static_cast<T>(k * (p - (c == y ? A(1) : A(0))));
      }
    }
  }
  r.loss = total * inv_count;
  return r;
}

/// alpha * unweighted CE + beta * mean_c (1 - D_c), where
/// D_c = (2 sum p_c g_c + 1) / (sum p_c + sum g_c + 1) over the whole batch.
template <typename T>
LossResult<T> ce_soft_dice(const Tensor<T>& probs, std::span<const LabelMask> labels,
                           double alpha, double beta) {
  if (!(alpha >= 0) || !(beta >= 0) || (alpha == 0 && beta == 0)) {
    throw ConfigError("alpha", "alpha and beta must be >= 0 and not both zero");
  }
  detail::check_labels(probs, labels);
  const Shape& s = probs.shape();
  using A = accum_t<T>;
  const A inv_count = A(1) / static_cast<A>(s.n * s.plane());
  const A a = alpha, b = beta, smooth = kDiceSmooth;

  std::array<A, 4> inter{}, psum{}, gsum{};
  A ce = 0;
  for (int n = 0; n < s.n; ++n) {
    const std::uint8_t* lab = labels[n].data();
    for (std::size_t i = 0; i < s.plane(); ++i) {
      const int y = lab[i];
      ce -= std::log(detail::clamp_prob<A>(probs.plane(n, y)[i]));
      for (int c = 0; c < 4; ++c) psum[c] += probs.plane(n, c)[i];
      inter[y] += probs.plane(n, y)[i];
      gsum[y] += 1.0;
    }
  }
  ce *= inv_count;

  std::array<A, 4> dice{}, denom{};
  A dice_term = 0;
  for (int c = 0; c < 4; ++c) {
    denom[c] = psum[c] + gsum[c] + smooth;
    dice[c] = (2 * inter[c] + smooth) / denom[c];
    dice_term += 1 - dice[c];
  }
  dice_term /= 4;

  LossResult<T> r{a * ce + b * dice_term, Tensor<T>(s)};
  std::array<A, 4> dp{};
  for (int n = 0; n < s.n; ++n) {
    const std::uint8_t* lab = labels[n].data();
    for (std::size_t i = 0; i < s.plane(); ++i) {
      const int y = lab[i];
      // dL/dp_c for this pixel.
      for (int c = 0; c < 4; ++c) {
        const A g = c == y ? 1 : 0;
        const A d_dice = (2 * g * denom[c] - (2 * inter[c] + smooth)) / (denom[c] * denom[c]);
        dp[c] = -b * d_dice / 4;
      }
      // Cross-entropy goes straight to logits; dice goes through the softmax
      // Jacobian.
      A dot = 0;
      for (int c = 0; c < 4; ++c) dot += probs.plane(n, c)[i] * dp[c];
      for (int c = 0; c < 4; ++c) {
        const A p = probs.plane(n, c)[i];
        const A g_ce = a * inv_count * (p - (c == y ? A(1) : A(0)));
        r.grad.plane(n, c)[i] = static_cast<T>(g_ce + p * (dp[c] - dot));
      }
    }
  }
  return r;
}

}  // namespace colony
