#ifndef CFLAB_DIFFCORE_OPS_HPP
#define CFLAB_DIFFCORE_OPS_HPP

// Differentiable primitives. Every op records its output on the tape of its
// first argument together with an exact adjoint.

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "cflab/diffcore/tape.hpp"

namespace cflab::diffcore::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename T>
void require_rank(const Var<T>& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
}

template <typename T>
void axpy(Tensor<T>& dst, const Tensor<T>& src, T alpha = T(1)) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += alpha * s[i];
}

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;
};

/// Output columns [lo, hi) whose input column ox * stride + k - pad is inside [0, size).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t k, const ConvGeometry& g,
                                                       std::size_t size, std::size_t out) {
  const long shift = static_cast<long>(k) - static_cast<long>(g.pad), st = static_cast<long>(g.stride);
  const long lo = shift >= 0 ? 0 : (-shift + st - 1) / st;
  const long hi = std::min<long>(static_cast<long>(out), (static_cast<long>(size) - shift + st - 1) / st);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

/// Columns of one image; row r of the patch matrix starts at col + r * ld.
template <typename T>
void im2col_strided(const T* x, const ConvGeometry& g, T* col, std::size_t ld) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t ky = 0; ky < g.kernel; ++ky) {
    const auto [ylo, yhi] = valid_range(ky, g, g.height, g.out_h);
    for (std::size_t kx = 0; kx < g.kernel; ++kx) {
      const auto [xlo, xhi] = valid_range(kx, g, g.width, g.out_w);
      const long dx = static_cast<long>(kx) - static_cast<long>(g.pad);
      for (std::size_t c = 0; c < g.channels; ++c) {
        T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * ld;
        const T* src = x + c * g.height * g.width;
        std::fill(row, row + ylo * g.out_w, T(0));
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          T* r = row + oy * g.out_w;
          const T* in = src + (oy * g.stride + ky - g.pad) * g.width;
          std::fill(r, r + xlo, T(0));
          if (g.stride == 1) {
            std::copy(in + xlo + dx, in + xhi + dx, r + xlo);
          } else {
            for (std::size_t ox = xlo; ox < xhi; ++ox) r[ox] = in[ox * g.stride + dx];
          }
          std::fill(r + xhi, r + g.out_w, T(0));
        }
        std::fill(row + yhi * g.out_w, row + plane, T(0));
      }
    }
  }
}

template <typename T>
void col2im_add_strided(const T* col, const ConvGeometry& g, T* x, std::size_t ld) {
  for (std::size_t ky = 0; ky < g.kernel; ++ky) {
    const auto [ylo, yhi] = valid_range(ky, g, g.height, g.out_h);
    for (std::size_t kx = 0; kx < g.kernel; ++kx) {
      const auto [xlo, xhi] = valid_range(kx, g, g.width, g.out_w);
      const long dx = static_cast<long>(kx) - static_cast<long>(g.pad);
      for (std::size_t c = 0; c < g.channels; ++c) {
        const T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * ld;
        T* dst = x + c * g.height * g.width;
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          const T* r = row + oy * g.out_w;
          T* out = dst + (oy * g.stride + ky - g.pad) * g.width + dx;
          if (g.stride == 1) {
            for (std::size_t ox = xlo; ox < xhi; ++ox) out[ox] += r[ox];
          } else {
            for (std::size_t ox = xlo; ox < xhi; ++ox) out[ox * g.stride] += r[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same(a, b, "add");
  Tensor<T> out = a.value();
  detail::axpy(out, b.value());
  return a.tape->record(std::move(out), "add", {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.requires_grad(a.id)) detail::axpy(tp.grad(a.id), g);
    if (tp.requires_grad(b.id)) detail::axpy(tp.grad(b.id), g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same(a, b, "sub");
  Tensor<T> out = a.value();
  detail::axpy(out, b.value(), T(-1));
  return a.tape->record(std::move(out), "sub", {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.requires_grad(a.id)) detail::axpy(tp.grad(a.id), g);
    if (tp.requires_grad(b.id)) detail::axpy(tp.grad(b.id), g, T(-1));
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same(a, b, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), "mul", {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.requires_grad(a.id)) {
      auto& ga = tp.grad(a.id);
      const auto& bv = tp.value(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(b.id)) {
      auto& gb = tp.grad(b.id);
      const auto& av = tp.value(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

/// s * a + c
template <typename T>
Var<T> affine(Var<T> a, T s, T c = T(0)) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = s * v + c;
  return a.tape->record(std::move(out), "affine", {a}, [a, s](Tape<T>& tp, std::size_t self) {
    detail::axpy(tp.grad(a.id), tp.grad(self), s);
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return affine(a, s, T(0));
}

/// (a + ca * b) * s, evaluated in double before rounding once.
template <typename T>
Var<T> combine(Var<T> a, Var<T> b, double ca, double s) {
  detail::require_same(a, b, "combine");
  Tensor<T> out(a.shape());
  const auto &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>((static_cast<double>(av[i]) + ca * static_cast<double>(bv[i])) * s);
  return a.tape->record(std::move(out), "combine", {a, b}, [a, b, ca, s](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.requires_grad(a.id)) detail::axpy(tp.grad(a.id), g, static_cast<T>(s));
    if (tp.requires_grad(b.id)) detail::axpy(tp.grad(b.id), g, static_cast<T>(ca * s));
  });
}

/// Multiply sample i of x (leading dimension) by factors[i].
template <typename T>
Var<T> scale_per_sample(Var<T> a, std::vector<T> factors) {
  const std::size_t n = a.dim(0), m = a.value().size() / n;
  if (factors.size() != n) throw ShapeError("scale_per_sample: factor count mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] *= factors[i];
  return a.tape->record(std::move(out), "scale_per_sample", {a},
                        [a, factors = std::move(factors), m](Tape<T>& tp, std::size_t self) {
                          const auto& g = tp.grad(self);
                          auto& ga = tp.grad(a.id);
                          for (std::size_t i = 0; i < factors.size(); ++i)
                            for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += factors[i] * g[i * m + j];
                        });
}

namespace detail {

template <typename T, typename F, typename D>
Var<T> pointwise(Var<T> a, const char* name, F f, D df) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = f(v);
  return a.tape->record(std::move(out), name, {a}, [a, df](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& x = tp.value(a.id);
    const auto& y = tp.value(self);
    auto& ga = tp.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> relu(Var<T> a) {
  return detail::pointwise(
      a, "relu", [](T x) { return x > 0 ? x : T(0); },
      [](T x, T) { return x > 0 ? T(1) : T(0); });
}

namespace detail {

template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
ConstArrMap<T> arr(const Tensor<T>& t) {
  return ConstArrMap<T>(t.ptr(), static_cast<Eigen::Index>(t.size()));
}
template <typename T>
ArrMap<T> arr(Tensor<T>& t) {
  return ArrMap<T>(t.ptr(), static_cast<Eigen::Index>(t.size()));
}

}  // namespace detail

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out(a.shape());
  detail::arr(out) = T(1) / (T(1) + (-detail::arr(a.value())).exp());
  return a.tape->record(std::move(out), "sigmoid", {a}, [a](Tape<T>& tp, std::size_t self) {
    const auto y = detail::arr(tp.value(self));
    detail::arr(tp.grad(a.id)) += detail::arr(tp.grad(self)) * y * (T(1) - y);
  });
}

template <typename T>
Var<T> silu(Var<T> a) {
  Tensor<T> out(a.shape());
  const auto x = detail::arr(a.value());
  detail::arr(out) = x / (T(1) + (-x).exp());
  return a.tape->record(std::move(out), "silu", {a}, [a](Tape<T>& tp, std::size_t self) {
    const auto x = detail::arr(tp.value(a.id));
    const Eigen::Array<T, Eigen::Dynamic, 1> s = T(1) / (T(1) + (-x).exp());
    detail::arr(tp.grad(a.id)) += detail::arr(tp.grad(self)) * s * (T(1) + x * (T(1) - s));
  });
}

template <typename T>
Var<T> exp(Var<T> a) {
  Tensor<T> out(a.shape());
  detail::arr(out) = detail::arr(a.value()).exp();
  return a.tape->record(std::move(out), "exp", {a}, [a](Tape<T>& tp, std::size_t self) {
    detail::arr(tp.grad(a.id)) += detail::arr(tp.grad(self)) * detail::arr(tp.value(self));
  });
}

template <typename T>
Var<T> log(Var<T> a) {
  return detail::pointwise(
      a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> square(Var<T> a) {
  return detail::pointwise(
      a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

/// Copy of `a` with no path back to its inputs.
template <typename T>
Var<T> stop_gradient(Var<T> a) {
  return a.tape->constant(a.value());
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape->record(std::move(out), "reshape", {a}, [a](Tape<T>& tp, std::size_t self) {
    auto& ga = tp.grad(a.id);
    const auto& g = tp.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  return a.tape->record(Tensor<T>::scalar(s), "sum", {a}, [a](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad(self)[0];
    for (auto& v : tp.grad(a.id).data()) v += g;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Sum over all but the leading dimension: (N, ...) -> (N).
template <typename T>
Var<T> sum_per_sample(Var<T> a) {
  const std::size_t n = a.dim(0), m = a.value().size() / n;
  Tensor<T> out({n});
  const T* x = a.value().ptr();
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < m; ++j) s += x[i * m + j];
    out[i] = s;
  }
  return a.tape->record(std::move(out), "sum_per_sample", {a},
                        [a, n, m](Tape<T>& tp, std::size_t self) {
                          const auto& g = tp.grad(self);
                          auto& ga = tp.grad(a.id);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[i];
                        });
}

/// Row-wise gather: x (N, K), labels (N) -> x[i, labels[i]] of shape (N).
template <typename T>
Var<T> pick(Var<T> x, const std::vector<int>& labels) {
  detail::require_rank(x, 2, "pick");
  const std::size_t n = x.dim(0), k = x.dim(1);
  if (labels.size() != n) throw ShapeError("pick: label count mismatch");
  Tensor<T> out({n});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw InvalidArgument("pick: label out of range");
    out[i] = x.value()[i * k + labels[i]];
  }
  return x.tape->record(std::move(out), "pick", {x}, [x, labels, k](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(x.id);
    for (std::size_t i = 0; i < labels.size(); ++i) gx[i * k + labels[i]] += g[i];
  });
}

/// Row-wise numerically stable log-softmax over (N, K).
template <typename T>
Var<T> log_softmax(Var<T> x) {
  detail::require_rank(x, 2, "log_softmax");
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    T* row = out.ptr() + i * k;
    const T m = *std::max_element(row, row + k);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
    const T lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) row[j] -= lse;
  }
  return x.tape->record(std::move(out), "log_softmax", {x},
                        [x, n, k](Tape<T>& tp, std::size_t self) {
                          const auto& g = tp.grad(self);
                          const auto& y = tp.value(self);
                          auto& gx = tp.grad(x.id);
                          for (std::size_t i = 0; i < n; ++i) {
                            T gs = 0;
                            for (std::size_t j = 0; j < k; ++j) gs += g[i * k + j];
                            for (std::size_t j = 0; j < k; ++j)
                              gx[i * k + j] += g[i * k + j] - std::exp(y[i * k + j]) * gs;
                          }
                        });
}

template <typename T>
Var<T> softmax(Var<T> x) {
  return exp(log_softmax(x));
}

// ---------------------------------------------------------------- affine / conv

/// x (N, in), weight (out, in), bias (out) -> x W^T + b.
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  detail::require_rank(x, 2, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in || bias.value().size() != out_dim)
    throw ShapeError("linear: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  Tensor<T> out({n, out_dim});
  detail::ConstMatMap<T> X(x.value().ptr(), n, in), W(weight.value().ptr(), out_dim, in);
  detail::MatMap<T> Y(out.ptr(), n, out_dim);
  Y.noalias() = X * W.transpose();
  const T* b = bias.value().ptr();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out_dim; ++j) Y(i, j) += b[j];
  return x.tape->record(
      std::move(out), "linear", {x, weight, bias},
      [x, weight, bias, n, in, out_dim](Tape<T>& tp, std::size_t self) {
        detail::ConstMatMap<T> G(tp.grad(self).ptr(), n, out_dim);
        if (tp.requires_grad(x.id)) {
          detail::ConstMatMap<T> W(tp.value(weight.id).ptr(), out_dim, in);
          detail::MatMap<T> GX(tp.grad(x.id).ptr(), n, in);
          GX.noalias() += G * W;
        }
        if (tp.requires_grad(weight.id)) {
          detail::ConstMatMap<T> X(tp.value(x.id).ptr(), n, in);
          detail::MatMap<T> GW(tp.grad(weight.id).ptr(), out_dim, in);
          GW.noalias() += G.transpose() * X;
        }
        if (tp.requires_grad(bias.id)) {
          auto& gb = tp.grad(bias.id);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < out_dim; ++j) gb[j] += G(i, j);
        }
      });
}

/// 2-D convolution with zero padding. x (N, C, H, W), weight (O, C, k, k), bias (O).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t pad) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(weight, 4, "conv2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c || weight.dim(3) != k || bias.value().size() != o)
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  if (stride == 0 || h + 2 * pad < k || w + 2 * pad < k) throw ShapeError("conv2d: bad geometry");
  const detail::ConvGeometry geo{c, h, w, k, stride, pad, (h + 2 * pad - k) / stride + 1,
                                 (w + 2 * pad - k) / stride + 1};
  const std::size_t plane = geo.out_h * geo.out_w, ckk = c * k * k;

  // images are processed in groups so each GEMM sees roughly 1024 columns
  const std::size_t group = std::clamp<std::size_t>(1024 / plane, 1, n);
  const std::size_t in_size = c * h * w;
  Tensor<T> out({n, o, geo.out_h, geo.out_w});
  AlignedVector<T> col(ckk * plane * group), res(o * plane * group);
  detail::ConstMatMap<T> W(weight.value().ptr(), o, ckk);
  const T* b = bias.value().ptr();
  for (std::size_t i0 = 0; i0 < n; i0 += group) {
    const std::size_t g = std::min(group, n - i0), cols = g * plane;
    for (std::size_t i = 0; i < g; ++i)
      detail::im2col_strided(x.value().ptr() + (i0 + i) * in_size, geo, col.data() + i * plane, cols);
    detail::MatMap<T> Y(res.data(), o, cols);
    Y.noalias() = W * detail::ConstMatMap<T>(col.data(), ckk, cols);
    for (std::size_t i = 0; i < g; ++i)
      for (std::size_t r = 0; r < o; ++r) {
        const T* src = res.data() + r * cols + i * plane;
        T* dst = out.ptr() + ((i0 + i) * o + r) * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + b[r];
      }
  }
  return x.tape->record(
      std::move(out), "conv2d", {x, weight, bias},
      [x, weight, bias, geo, n, o, plane, ckk, group, in_size](Tape<T>& tp, std::size_t self) {
        const bool need_x = tp.requires_grad(x.id), need_w = tp.requires_grad(weight.id);
        const auto& gout = tp.grad(self);
        if (tp.requires_grad(bias.id)) {
          auto& gb = tp.grad(bias.id);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t r = 0; r < o; ++r) {
              const T* g = gout.ptr() + (i * o + r) * plane;
              T s = 0;
              for (std::size_t p = 0; p < plane; ++p) s += g[p];
              gb[r] += s;
            }
        }
        if (!need_x && !need_w) return;
        AlignedVector<T> col(ckk * plane * group), gcat(o * plane * group);
        detail::ConstMatMap<T> W(tp.value(weight.id).ptr(), o, ckk);
        T* gx = need_x ? tp.grad(x.id).ptr() : nullptr;
        for (std::size_t i0 = 0; i0 < n; i0 += group) {
          const std::size_t g = std::min(group, n - i0), cols = g * plane;
          for (std::size_t i = 0; i < g; ++i)
            for (std::size_t r = 0; r < o; ++r)
              std::copy_n(gout.ptr() + ((i0 + i) * o + r) * plane, plane, gcat.data() + r * cols + i * plane);
          detail::ConstMatMap<T> G(gcat.data(), o, cols);
          if (need_w) {
            for (std::size_t i = 0; i < g; ++i)
              detail::im2col_strided(tp.value(x.id).ptr() + (i0 + i) * in_size, geo, col.data() + i * plane, cols);
            detail::MatMap<T> GW(tp.grad(weight.id).ptr(), o, ckk);
            GW.noalias() += G * detail::ConstMatMap<T>(col.data(), ckk, cols).transpose();
          }
          if (need_x) {
            detail::MatMap<T> DC(col.data(), ckk, cols);
            DC.noalias() = W.transpose() * G;
            for (std::size_t i = 0; i < g; ++i)
              detail::col2im_add_strided(col.data() + i * plane, geo, gx + (i0 + i) * in_size, cols);
          }
        }
      });
}

// ---------------------------------------------------------------- resampling

template <typename T>
Var<T> upsample_nearest2(Var<T> x) {
  detail::require_rank(x, 4, "upsample_nearest2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({n, c, 2 * h, 2 * w});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t z = 0; z < 2 * w; ++z) out.at(i, ch, y, z) = xv.at(i, ch, y / 2, z / 2);
  return x.tape->record(std::move(out), "upsample_nearest2", {x},
                        [x, n, c, h, w](Tape<T>& tp, std::size_t self) {
                          const auto& g = tp.grad(self);
                          auto& gx = tp.grad(x.id);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t ch = 0; ch < c; ++ch)
                              for (std::size_t y = 0; y < 2 * h; ++y)
                                for (std::size_t z = 0; z < 2 * w; ++z)
                                  gx.at(i, ch, y / 2, z / 2) += g.at(i, ch, y, z);
                        });
}

/// 2x2 average pooling; H and W must be even.
template <typename T>
Var<T> avg_pool2(Var<T> x) {
  detail::require_rank(x, 4, "avg_pool2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2: odd spatial size");
  Tensor<T> out({n, c, h / 2, w / 2});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h / 2; ++y)
        for (std::size_t z = 0; z < w / 2; ++z)
          out.at(i, ch, y, z) = T(0.25) * (xv.at(i, ch, 2 * y, 2 * z) + xv.at(i, ch, 2 * y + 1, 2 * z) +
                                           xv.at(i, ch, 2 * y, 2 * z + 1) +
                                           xv.at(i, ch, 2 * y + 1, 2 * z + 1));
  return x.tape->record(std::move(out), "avg_pool2", {x},
                        [x, n, c, h, w](Tape<T>& tp, std::size_t self) {
                          const auto& g = tp.grad(self);
                          auto& gx = tp.grad(x.id);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t ch = 0; ch < c; ++ch)
                              for (std::size_t y = 0; y < h; ++y)
                                for (std::size_t z = 0; z < w; ++z)
                                  gx.at(i, ch, y, z) += T(0.25) * g.at(i, ch, y / 2, z / 2);
                        });
}

/// (N, C, H, W) -> (N, C)
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  detail::require_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  const T* xv = x.value().ptr();
  for (std::size_t i = 0; i < n * c; ++i) {
    T s = 0;
    for (std::size_t p = 0; p < plane; ++p) s += xv[i * plane + p];
    out[i] = s / static_cast<T>(plane);
  }
  return x.tape->record(std::move(out), "global_avg_pool", {x},
                        [x, n, c, plane](Tape<T>& tp, std::size_t self) {
                          const auto& g = tp.grad(self);
                          T* gx = tp.grad(x.id).ptr();
                          for (std::size_t i = 0; i < n * c; ++i)
                            for (std::size_t p = 0; p < plane; ++p)
                              gx[i * plane + p] += g[i] / static_cast<T>(plane);
                        });
}

// ---------------------------------------------------------------- channel ops

/// x (N, C, H, W) + e (N, C) broadcast over the spatial plane.
template <typename T>
Var<T> add_channel(Var<T> x, Var<T> e) {
  detail::require_rank(x, 4, "add_channel");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (e.value().size() != n * c) throw ShapeError("add_channel: bias shape mismatch");
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < n * c; ++i)
    for (std::size_t p = 0; p < plane; ++p) out[i * plane + p] += e.value()[i];
  return x.tape->record(std::move(out), "add_channel", {x, e},
                        [x, e, n, c, plane](Tape<T>& tp, std::size_t self) {
                          const auto& g = tp.grad(self);
                          if (tp.requires_grad(x.id)) detail::axpy(tp.grad(x.id), g);
                          if (tp.requires_grad(e.id)) {
                            auto& ge = tp.grad(e.id);
                            for (std::size_t i = 0; i < n * c; ++i)
                              for (std::size_t p = 0; p < plane; ++p) ge[i] += g[i * plane + p];
                          }
                        });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  detail::require_rank(a, 4, "concat_channels");
  detail::require_rank(b, 4, "concat_channels");
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  if (b.dim(0) != n || b.dim(2) != a.dim(2) || b.dim(3) != a.dim(3))
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().ptr() + i * ca * plane, ca * plane, out.ptr() + i * (ca + cb) * plane);
    std::copy_n(b.value().ptr() + i * cb * plane, cb * plane,
                out.ptr() + (i * (ca + cb) + ca) * plane);
  }
  return a.tape->record(std::move(out), "concat_channels", {a, b},
                        [a, b, n, ca, cb, plane](Tape<T>& tp, std::size_t self) {
                          const T* g = tp.grad(self).ptr();
                          for (std::size_t i = 0; i < n; ++i) {
                            const T* gi = g + i * (ca + cb) * plane;
                            if (tp.requires_grad(a.id)) {
                              T* ga = tp.grad(a.id).ptr() + i * ca * plane;
                              for (std::size_t p = 0; p < ca * plane; ++p) ga[p] += gi[p];
                            }
                            if (tp.requires_grad(b.id)) {
                              T* gb = tp.grad(b.id).ptr() + i * cb * plane;
                              for (std::size_t p = 0; p < cb * plane; ++p) gb[p] += gi[ca * plane + p];
                            }
                          }
                        });
}

/// Channels [begin, end) of a rank-4 tensor.
template <typename T>
Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 4, "slice_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (begin >= end || end > c) throw ShapeError("slice_channels: bad range");
  const std::size_t m = end - begin;
  Tensor<T> out({n, m, x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.value().ptr() + (i * c + begin) * plane, m * plane, out.ptr() + i * m * plane);
  return x.tape->record(std::move(out), "slice_channels", {x},
                        [x, n, c, m, begin, plane](Tape<T>& tp, std::size_t self) {
                          const T* g = tp.grad(self).ptr();
                          T* gx = tp.grad(x.id).ptr();
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t p = 0; p < m * plane; ++p)
                              gx[(i * c + begin) * plane + p] += g[i * m * plane + p];
                        });
}

/// Group normalization over (C/groups, H, W) blocks with per-channel affine.
template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, std::size_t groups, T eps = T(1e-5)) {
  detail::require_rank(x, 4, "group_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma.value().size() != c || beta.value().size() != c)
    throw ShapeError("group_norm: affine size mismatch");
  const std::size_t cpg = c / groups, m = cpg * plane;
  // per (sample, group) mean and inverse deviation, accumulated in double
  std::vector<T> mean(n * groups), inv(n * groups);
  const T* xv = x.value().ptr();
  for (std::size_t k = 0; k < n * groups; ++k) {
    const auto seg = detail::ConstArrMap<T>(xv + k * m, static_cast<Eigen::Index>(m)).template cast<double>();
    const double mu = seg.mean();
    const double var = (seg - mu).square().mean();
    mean[k] = static_cast<T>(mu);
    inv[k] = static_cast<T>(1 / std::sqrt(var + eps));
  }
  Tensor<T> out(x.shape());
  const T* gm = gamma.value().ptr();
  const T* bt = beta.value().ptr();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t k = i * groups + ch / cpg, off = (i * c + ch) * plane;
      const T scale = gm[ch] * inv[k], shift = bt[ch] - mean[k] * scale;
      detail::ArrMap<T>(out.ptr() + off, plane) = detail::ConstArrMap<T>(xv + off, plane) * scale + shift;
    }
  return x.tape->record(
      std::move(out), "group_norm", {x, gamma, beta},
      [x, gamma, beta, n, c, plane, groups, cpg, m, mean = std::move(mean), inv = std::move(inv)](
          Tape<T>& tp, std::size_t self) {
        using CA = detail::ConstArrMap<T>;
        const T* xv = tp.value(x.id).ptr();
        const T* gm = tp.value(gamma.id).ptr();
        const T* g = tp.grad(self).ptr();
        T* gx = tp.requires_grad(x.id) ? tp.grad(x.id).ptr() : nullptr;
        T* ggm = tp.requires_grad(gamma.id) ? tp.grad(gamma.id).ptr() : nullptr;
        T* gbt = tp.requires_grad(beta.id) ? tp.grad(beta.id).ptr() : nullptr;
        AlignedVector<T> xhat(m);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t grp = 0; grp < groups; ++grp) {
            const std::size_t k = i * groups + grp, off = k * m;
            detail::ArrMap<T> xh(xhat.data(), m);
            xh = (CA(xv + off, m) - mean[k]) * inv[k];
            double sum_d = 0, sum_dx = 0;
            for (std::size_t q = 0; q < cpg; ++q) {
              const std::size_t ch = grp * cpg + q;
              const CA gs(g + off + q * plane, plane), xs(xhat.data() + q * plane, plane);
              const double gx_dot = (gs * xs).template cast<double>().sum(), gsum = gs.template cast<double>().sum();
              if (ggm) ggm[ch] += static_cast<T>(gx_dot);
              if (gbt) gbt[ch] += static_cast<T>(gsum);
              sum_d += gm[ch] * gsum;
              sum_dx += gm[ch] * gx_dot;
            }
            if (!gx) continue;
            const T a = static_cast<T>(sum_d / m), b = static_cast<T>(sum_dx / m);
            for (std::size_t q = 0; q < cpg; ++q) {
              const std::size_t ch = grp * cpg + q, o = off + q * plane;
              detail::ArrMap<T>(gx + o, plane) +=
                  inv[k] * (gm[ch] * CA(g + o, plane) - a - CA(xhat.data() + q * plane, plane) * b);
            }
          }
      });
}

/// Sinusoidal embedding of integer time steps: (N) -> (N, dim). Constant.
template <typename T>
Tensor<T> sinusoidal_embedding(const std::vector<int>& steps, std::size_t dim) {
  if (dim % 2) throw ShapeError("sinusoidal_embedding: odd dimension");
  Tensor<T> out({steps.size(), dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < steps.size(); ++i)
    for (std::size_t j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
      const double arg = static_cast<double>(steps[i]) * freq;
      out[i * dim + j] = static_cast<T>(std::sin(arg));
      out[i * dim + half + j] = static_cast<T>(std::cos(arg));
    }
  return out;
}

}  // namespace cflab::diffcore::ops

#endif  // CFLAB_DIFFCORE_OPS_HPP
