#pragma once

#include <cmath>
#include <vector>

#include "colony/graph.hpp"

namespace colony {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment buffers for one parameter tensor.
template <typename T>
struct AdamMoments {
  std::vector<T> m, v;
};

/// One bias-corrected Adam update of `param` given `grad`; `t` is the 1-based
/// step index.
template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamMoments<T>& state,
               const AdamOptions& opt, long t) {
  if (t < 1) throw std::invalid_argument("adam_step: t must be >= 1");
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(param.size(), T(0));
    state.v.assign(param.size(), T(0));
  }
  if (grad.size() != param.size() || state.m.size() != param.size() ||
      state.v.size() != param.size()) {
    throw ShapeError("adam_step: parameter, gradient and state sizes differ");
  }
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = opt.beta1 * state.m[i] + (1 - opt.beta1) * g;
    const double v = opt.beta2 * state.v[i] + (1 - opt.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    param[i] = static_cast<T>(param[i] - opt.lr * (m / bc1) / (std::sqrt(v / bc2) + opt.eps));
  }
}

/// Adam over every trainable parameter of a graph.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamOptions opt) : opt_(opt) {}

  void step(Graph<T>& graph) {
    auto& params = graph.parameters();
    if (state_.empty()) state_.resize(params.size());
    if (state_.size() != params.size()) {
      throw ShapeError("Adam: parameter count changed between steps");
    }
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].trainable) continue;
      adam_step<T>(params[i].value.span(), params[i].grad.span(), state_[i], opt_, t_);
    }
  }

  long steps() const { return t_; }
  const AdamOptions& options() const { return opt_; }

 private:
  AdamOptions opt_;
  std::vector<AdamMoments<T>> state_;
  long t_ = 0;
};

}  // namespace colony
