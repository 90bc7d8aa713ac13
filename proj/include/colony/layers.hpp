#pragma once

// Forward and backward kernels for the layer kinds used by the U-Net.
// Every kernel is a free function over Tensor<T>; graph.hpp wires them up.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "colony/tensor.hpp"

namespace colony {

enum class Mode { train, infer };

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Unfold one image (ci, h, w) into a (ci*9, h*w) patch matrix, zero padded.
template <typename T>
void im2col3x3(const T* img, int ci, int h, int w, T* col) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < ci; ++i) {
    const T* src = img + i * hw;
    for (int dy = 0; dy < 3; ++dy) {
      for (int dx = 0; dx < 3; ++dx) {
        T* row = col + (static_cast<std::size_t>(i) * 9 + dy * 3 + dx) * hw;
        const int ox = dx - 1;
        for (int y = 0; y < h; ++y) {
          T* dst = row + static_cast<std::size_t>(y) * w;
          const int sy = y + dy - 1;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, T(0));
            continue;
          }
          const T* s = src + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -ox);
          const int x1 = std::min(w, w - ox);
          for (int x = 0; x < x0; ++x) dst[x] = T(0);
          for (int x = x0; x < x1; ++x) dst[x] = s[x + ox];
          for (int x = std::max(x1, x0); x < w; ++x) dst[x] = T(0);
        }
      }
    }
  }
}

// Adjoint of im2col3x3: scatter-add a patch matrix back onto an image.
template <typename T>
void col2im3x3(const T* col, int ci, int h, int w, T* img) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < ci; ++i) {
    T* dst = img + i * hw;
    for (int dy = 0; dy < 3; ++dy) {
      for (int dx = 0; dx < 3; ++dx) {
        const T* row =
            col + (static_cast<std::size_t>(i) * 9 + dy * 3 + dx) * hw;
        const int ox = dx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy - 1;
          if (sy < 0 || sy >= h) continue;
          const T* s = row + static_cast<std::size_t>(y) * w;
          T* d = dst + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -ox);
          const int x1 = std::min(w, w - ox);
          for (int x = x0; x < x1; ++x) d[x + ox] += s[x];
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv3x3, stride 1, zero padding 1 ("same").

template <typename T>
void check_conv_shapes(const Shape& in, const Shape& weight, std::size_t bias) {
  if (weight.h != 3 || weight.w != 3) {
    throw ShapeError("conv3x3: weight must be (co, ci, 3, 3), got " +
                     weight.str());
  }
  if (weight.c != in.c) {
    throw ShapeError("conv3x3: weight expects " + std::to_string(weight.c) +
                     " input channels, input has " + std::to_string(in.c));
  }
  if (bias != 0 && bias != static_cast<std::size_t>(weight.n)) {
    throw ShapeError("conv3x3: bias length " + std::to_string(bias) +
                     " does not match output channels " +
                     std::to_string(weight.n));
  }
}

/// `bias` may be empty, meaning no bias term.
template <typename T>
Tensor<T> conv3x3(const Tensor<T>& input, const Tensor<T>& weight,
                  std::span<const T> bias) {
  const Shape& s = input.shape();
  check_conv_shapes<T>(s, weight.shape(), bias.size());
  const int co = weight.shape().n;
  const int k = s.c * 9;
  const auto hw = static_cast<Eigen::Index>(s.plane());
  Tensor<T> out(Shape{s.n, co, s.h, s.w});
  AlignedVector<T> col(static_cast<std::size_t>(k) * hw);
  detail::ConstMatMap<T> wmat(weight.data(), co, k);
  detail::ConstMatMap<T> cmat(col.data(), k, hw);
  for (int n = 0; n < s.n; ++n) {
    detail::im2col3x3(input.plane(n, 0), s.c, s.h, s.w, col.data());
    detail::MatMap<T> omat(out.plane(n, 0), co, hw);
    omat.noalias() = wmat * cmat;
    if (!bias.empty()) {
      for (int o = 0; o < co; ++o) omat.row(o).array() += bias[o];
    }
  }
  return out;
}

/// Accumulates into grad_weight/grad_bias; writes grad_input when non-null.
template <typename T>
void conv3x3_backward(const Tensor<T>& input, const Tensor<T>& weight,
                      const Tensor<T>& grad_out, Tensor<T>* grad_input,
                      Tensor<T>& grad_weight, std::span<T> grad_bias) {
  const Shape& s = input.shape();
  const int co = weight.shape().n;
  const int k = s.c * 9;
  const auto hw = static_cast<Eigen::Index>(s.plane());
  require_same_shape(grad_out.shape(), Shape{s.n, co, s.h, s.w},
                     "conv3x3 backward");
  AlignedVector<T> col(static_cast<std::size_t>(k) * hw);
  AlignedVector<T> dcol(grad_input ? col.size() : 0);
  detail::ConstMatMap<T> wmat(weight.data(), co, k);
  detail::MatMap<T> dwmat(grad_weight.data(), co, k);
  if (grad_input) *grad_input = Tensor<T>(s);
  for (int n = 0; n < s.n; ++n) {
    detail::ConstMatMap<T> gmat(grad_out.plane(n, 0), co, hw);
    detail::im2col3x3(input.plane(n, 0), s.c, s.h, s.w, col.data());
    detail::ConstMatMap<T> cmat(col.data(), k, hw);
    dwmat.noalias() += gmat * cmat.transpose();
    if (!grad_bias.empty()) {
      for (int o = 0; o < co; ++o) grad_bias[o] += gmat.row(o).sum();
    }
    if (grad_input) {
      detail::MatMap<T> dcmat(dcol.data(), k, hw);
      dcmat.noalias() = wmat.transpose() * gmat;
      detail::col2im3x3(dcol.data(), s.c, s.h, s.w, grad_input->plane(n, 0));
    }
  }
}

// ---------------------------------------------------------------------------
// maxpool2 / upsample2

template <typename T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

template <typename T>
PoolResult<T> maxpool2(const Tensor<T>& input) {
  const Shape& s = input.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("maxpool2: spatial size must be even, got " + s.str());
  }
  PoolResult<T> r{Tensor<T>(Shape{s.n, s.c, s.h / 2, s.w / 2}), {}};
  r.argmax.resize(r.output.size());
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h / 2; ++y) {
        for (int x = 0; x < s.w / 2; ++x, ++o) {
          std::size_t best = input.offset(n, c, 2 * y, 2 * x);
          for (int a = 0; a < 2; ++a) {
            for (int b = 0; b < 2; ++b) {
              const std::size_t i = input.offset(n, c, 2 * y + a, 2 * x + b);
              if (input[i] > input[best]) best = i;
            }
          }
          r.output[o] = input[best];
          r.argmax[o] = best;
        }
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> maxpool2_backward(const Tensor<T>& grad_out,
                            const std::vector<std::size_t>& argmax,
                            const Shape& input_shape) {
  Tensor<T> g(input_shape);
  for (std::size_t o = 0; o < grad_out.size(); ++o) g[argmax[o]] += grad_out[o];
  return g;
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& input) {
  const Shape& s = input.shape();
  Tensor<T> out(Shape{s.n, s.c, s.h * 2, s.w * 2});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < 2 * s.h; ++y) {
        const T* src = input.plane(n, c) + static_cast<std::size_t>(y / 2) * s.w;
        T* dst = out.plane(n, c) + static_cast<std::size_t>(y) * 2 * s.w;
        for (int x = 0; x < 2 * s.w; ++x) dst[x] = src[x / 2];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& grad_out) {
  const Shape& s = grad_out.shape();
  Tensor<T> g(Shape{s.n, s.c, s.h / 2, s.w / 2});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          g.at(n, c, y / 2, x / 2) += grad_out.at(n, c, y, x);
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// relu

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    out[i] = input[i] > T(0) ? input[i] : T(0);
  }
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  Tensor<T> g(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    g[i] = input[i] > T(0) ? grad_out[i] : T(0);
  }
  return g;
}

// ---------------------------------------------------------------------------
// batchnorm over (n, h, w) per channel

struct BatchNormOptions {
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-5;
};

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  Mode mode = Mode::infer;
};

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, std::span<const T> scale,
                    std::span<const T> shift, std::span<T> running_mean,
                    std::span<T> running_var, Mode mode,
                    BatchNormCache<T>& cache, BatchNormOptions opt = {}) {
  const Shape& s = input.shape();
  using A = accum_t<T>;
  const auto channels = static_cast<std::size_t>(s.c);
  if (scale.size() != channels || shift.size() != channels ||
      running_mean.size() != channels || running_var.size() != channels) {
    throw ShapeError("batchnorm: parameter length does not match channels " +
                     std::to_string(s.c));
  }
  const std::size_t plane = s.plane();
  const A m = static_cast<A>(s.n) * plane;
  cache.mode = mode;
  cache.xhat = Tensor<T>(s);
  cache.inv_std.assign(channels, T(0));
  Tensor<T> out(s);
  for (int c = 0; c < s.c; ++c) {
    A mean, var;
    if (mode == Mode::train) {
      A sum = 0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = input.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      mean = sum / m;
      A sq = 0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = input.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      var = sq / m;
      const A unbiased = m > 1 ? sq / (m - 1) : var;
      running_mean[c] = static_cast<T>(A(opt.momentum) * running_mean[c] +
                                       (1 - A(opt.momentum)) * mean);
      running_var[c] = static_cast<T>(A(opt.momentum) * running_var[c] +
                                      (1 - A(opt.momentum)) * unbiased);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const T inv = static_cast<T>(A(1) / std::sqrt(var + A(opt.eps)));
    cache.inv_std[c] = inv;
    const T mu = static_cast<T>(mean);
    for (int n = 0; n < s.n; ++n) {
      const T* p = input.plane(n, c);
      T* xh = cache.xhat.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mu) * inv;
        o[i] = scale[c] * xh[i] + shift[c];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm_backward(const Tensor<T>& grad_out,
                             std::span<const T> scale,
                             const BatchNormCache<T>& cache,
                             std::span<T> grad_scale, std::span<T> grad_shift) {
  const Shape& s = grad_out.shape();
  using A = accum_t<T>;
  const std::size_t plane = s.plane();
  const A m = static_cast<A>(s.n) * plane;
  Tensor<T> g(s);
  for (int c = 0; c < s.c; ++c) {
    A sum_dy = 0, sum_dy_xhat = 0;
    for (int n = 0; n < s.n; ++n) {
      const T* dy = grad_out.plane(n, c);
      const T* xh = cache.xhat.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += static_cast<A>(dy[i]) * xh[i];
      }
    }
    grad_scale[c] += static_cast<T>(sum_dy_xhat);
    grad_shift[c] += static_cast<T>(sum_dy);
    const A k = static_cast<A>(scale[c]) * cache.inv_std[c];
    for (int n = 0; n < s.n; ++n) {
      const T* dy = grad_out.plane(n, c);
      const T* xh = cache.xhat.plane(n, c);
      T* dx = g.plane(n, c);
      if (cache.mode == Mode::train) {
        const A a = sum_dy / m, b = sum_dy_xhat / m;
        for (std::size_t i = 0; i < plane; ++i) {
          dx[i] = static_cast<T>(k * (dy[i] - a - xh[i] * b));
        }
      } else {
        for (std::size_t i = 0; i < plane; ++i) dx[i] = static_cast<T>(k * dy[i]);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// concat along channels (a first, then b)

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat: batch/spatial mismatch " + sa.str() + " vs " +
                     sb.str());
  }
  Tensor<T> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t pa = sa.c * sa.plane(), pb = sb.c * sb.plane();
  for (int n = 0; n < sa.n; ++n) {
    std::copy_n(a.plane(n, 0), pa, out.plane(n, 0));
    std::copy_n(b.plane(n, 0), pb, out.plane(n, sa.c));
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> concat_backward(const Tensor<T>& grad_out,
                                                const Shape& a, const Shape& b) {
  Tensor<T> ga(a), gb(b);
  const std::size_t pa = a.c * a.plane(), pb = b.c * b.plane();
  for (int n = 0; n < a.n; ++n) {
    std::copy_n(grad_out.plane(n, 0), pa, ga.plane(n, 0));
    std::copy_n(grad_out.plane(n, a.c), pb, gb.plane(n, 0));
  }
  return {std::move(ga), std::move(gb)};
}

// ---------------------------------------------------------------------------
// softmax across the channel axis, per pixel

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& input) {
  const Shape& s = input.shape();
  using A = accum_t<T>;
  const std::size_t plane = s.plane();
  Tensor<T> out(s);
  std::vector<A> e(s.c);
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      A mx = -std::numeric_limits<A>::infinity();
      for (int c = 0; c < s.c; ++c) mx = std::max<A>(mx, input.plane(n, c)[i]);
      A sum = 0;
      for (int c = 0; c < s.c; ++c) {
        e[c] = std::exp(static_cast<A>(input.plane(n, c)[i]) - mx);
        sum += e[c];
      }
      for (int c = 0; c < s.c; ++c) out.plane(n, c)[i] = static_cast<T>(e[c] / sum);
    }
  }
  return out;
}

/// Gradient w.r.t. the softmax input given its output and upstream gradient.
template <typename T>
Tensor<T> softmax_channels_backward(const Tensor<T>& output,
                                    const Tensor<T>& grad_out) {
  const Shape& s = output.shape();
  using A = accum_t<T>;
  const std::size_t plane = s.plane();
  Tensor<T> g(s);
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      A dot = 0;
      for (int c = 0; c < s.c; ++c) {
        dot += static_cast<A>(output.plane(n, c)[i]) * grad_out.plane(n, c)[i];
      }
      for (int c = 0; c < s.c; ++c) {
        const A y = output.plane(n, c)[i];
        g.plane(n, c)[i] = static_cast<T>(y * (grad_out.plane(n, c)[i] - dot));
      }
    }
  }
  return g;
}

}  // namespace colony
