#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "domex/autodiff/kernels.hpp"
#include "domex/autodiff/tape.hpp"
#include "domex/autodiff/tensor.hpp"
#include "domex/error.hpp"

namespace domex {

namespace detail {

inline void add_into(Tensor& dst, std::span<const float> src) {
  float* d = dst.ptr();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += src[i];
}

enum class BinaryKind { kEqual, kLhsScalar, kRhsScalar };

inline BinaryKind binary_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return BinaryKind::kEqual;
  if (b.size() == 1) return BinaryKind::kRhsScalar;
  if (a.size() == 1) return BinaryKind::kLhsScalar;
  throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                   to_string(b.shape()) + " are neither equal nor scalar");
}

template <class F, class DA, class DB>
Var binary(const char* tag, Var a, Var b, F f, DA da, DB db) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const BinaryKind kind = binary_kind(tag, av, bv);
  const Tensor& big = kind == BinaryKind::kLhsScalar ? bv : av;
  Tensor out(big.shape());
  const std::size_t n = out.size();
  auto at_a = [&av, kind](std::size_t i) { return kind == BinaryKind::kLhsScalar ? av[0] : av[i]; };
  auto at_b = [&bv, kind](std::size_t i) { return kind == BinaryKind::kRhsScalar ? bv[0] : bv[i]; };
  for (std::size_t i = 0; i < n; ++i) out[i] = f(at_a(i), at_b(i));
  return a.tape().record(std::move(out), {a, b}, tag, [kind, da, db](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    const std::size_t ia = node.parents[0];
    const std::size_t ib = node.parents[1];
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(ib);
    const Tensor& g = node.grad;
    const std::size_t n = g.size();
    auto xa = [&](std::size_t i) { return kind == BinaryKind::kLhsScalar ? x[0] : x[i]; };
    auto yb = [&](std::size_t i) { return kind == BinaryKind::kRhsScalar ? y[0] : y[i]; };
    for (std::size_t side = 0; side < 2; ++side) {
      const std::size_t id = side == 0 ? ia : ib;
      if (!t.requires_grad(id)) continue;
      Tensor& dst = t.grad_mut(id);
      const bool reduce = dst.size() != n;
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const float d = side == 0 ? g[i] * da(xa(i), yb(i)) : g[i] * db(xa(i), yb(i));
        if (reduce) {
          s += d;
        } else {
          dst[i] += d;
        }
      }
      if (reduce) dst[0] += static_cast<float>(s);
    }
  });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary(
      "add", a, b, [](float x, float y) { return x + y; }, [](float, float) { return 1.0f; },
      [](float, float) { return 1.0f; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(
      "sub", a, b, [](float x, float y) { return x - y; }, [](float, float) { return 1.0f; },
      [](float, float) { return -1.0f; });
}

inline Var mul(Var a, Var b) {
  return detail::binary(
      "mul", a, b, [](float x, float y) { return x * y; }, [](float, float y) { return y; },
      [](float x, float) { return x; });
}

inline Var scale(Var x, float s) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= s;
  return x.tape().record(std::move(out), {x}, "scale", [s](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    Tensor& dx = t.grad_mut(node.parents[0]);
    const Tensor& g = node.grad;
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += s * g[i];
  });
}

inline Var relu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return x.tape().record(std::move(out), {x}, "relu", [](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    const Tensor& in = t.value(node.parents[0]);
    Tensor& dx = t.grad_mut(node.parents[0]);
    const Tensor& g = node.grad;
    const float* __restrict ip = in.ptr();
    const float* __restrict gp = g.ptr();
    float* __restrict dp = dx.ptr();
    for (std::size_t i = 0; i < g.size(); ++i) dp[i] += ip[i] > 0.0f ? gp[i] : 0.0f;
  });
}

/// Sum of all entries as a scalar.
inline Var sum(Var x) {
  const double s = detail::sum_lanes(x.value().ptr(), x.value().size());
  return x.tape().record(Tensor::scalar(static_cast<float>(s)), {x}, "sum",
                         [](Tape& t, std::size_t self) {
                           const auto& node = t.node(self);
                           Tensor& dx = t.grad_mut(node.parents[0]);
                           const float g = node.grad[0];
                           for (auto& v : dx.data()) v += g;
                         });
}

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(av.shape()) + " and " +
                     to_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  detail::gemm_nn(m, n, k, av.ptr(), bv.ptr(), out.ptr());
  return a.tape().record(std::move(out), {a, b}, "matmul", [m, k, n](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    const std::size_t ia = node.parents[0], ib = node.parents[1];
    const float* g = node.grad.ptr();
    if (t.requires_grad(ia)) {
      // dA[m,k] += dC[m,n] * B[k,n]^T
      detail::gemm_nt(m, k, n, g, t.value(ib).ptr(), t.grad_mut(ia).ptr());
    }
    if (t.requires_grad(ib)) {
      // dB[k,n] += A[m,k]^T * dC[m,n]
      detail::gemm_tn(k, n, m, t.value(ia).ptr(), g, t.grad_mut(ib).ptr());
    }
  });
}

/// x[n,m] + bias[m], the bias repeated over rows.
inline Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw ShapeError("add_bias: shapes " + to_string(xv.shape()) + " and " +
                     to_string(bv.shape()));
  }
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  return x.tape().record(std::move(out), {x, bias}, "add_bias",
                         [rows, cols](Tape& t, std::size_t self) {
                           const auto& node = t.node(self);
                           const Tensor& g = node.grad;
                           if (t.requires_grad(node.parents[0])) {
                             detail::add_into(t.grad_mut(node.parents[0]), g.data());
                           }
                           if (t.requires_grad(node.parents[1])) {
                             Tensor& db = t.grad_mut(node.parents[1]);
                             for (std::size_t c = 0; c < cols; ++c) {
                               double s = 0.0;
                               for (std::size_t r = 0; r < rows; ++r) s += g[r * cols + c];
                               db[c] += static_cast<float>(s);
                             }
                           }
                         });
}

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_h * out_w; }
};

/// How a strided window that does not tile the padded input is handled:
/// Exact rejects it, Floor drops the incomplete trailing window.
enum class ConvRounding { Exact, Floor };

/// Output extent of a strided, zero-padded window.
inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                      std::size_t pad, ConvRounding rounding = ConvRounding::Exact) {
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t padded = in + 2 * pad;
  if (padded < kernel) {
    throw ShapeError("conv2d: padded extent " + std::to_string(padded) + " smaller than kernel " +
                     std::to_string(kernel));
  }
  if (rounding == ConvRounding::Exact && (padded - kernel) % stride != 0) {
    throw ShapeError("conv2d: extent " + std::to_string(in) + " with kernel " +
                     std::to_string(kernel) + ", pad " + std::to_string(pad) + ", stride " +
                     std::to_string(stride) + " gives a non-integral output size");
  }
  return (padded - kernel) / stride + 1;
}

namespace detail {

inline void im2col(const ConvGeometry& g, const float* img, float* col) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        float* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * p;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                ix < static_cast<long>(g.width);
            row[oy * g.out_w + ox] =
                inside ? img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                             static_cast<std::size_t>(ix)]
                       : 0.0f;
          }
        }
      }
    }
  }
}

inline void col2im(const ConvGeometry& g, const float* col, float* img) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const float* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * p;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation with zero padding. `x` is [Cin,H,W] or [n,Cin,H,W];
/// the result has the same rank. `kernel` is [Cout,Cin,kh,kw].
inline Var conv2d(Var x, Var kernel, std::size_t stride, std::size_t pad,
                  ConvRounding rounding = ConvRounding::Exact) {
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  const bool batched = xv.rank() == 4;
  if ((xv.rank() != 3 && !batched) || kv.rank() != 4) {
    throw ShapeError("conv2d: expected input [n,C,H,W] or [C,H,W] and kernel [Cout,Cin,kh,kw], got " +
                     to_string(xv.shape()) + " and " + to_string(kv.shape()));
  }
  ConvGeometry g{};
  const std::size_t off = batched ? 1 : 0;
  g.batch = batched ? xv.dim(0) : 1;
  g.in_channels = xv.dim(off);
  g.height = xv.dim(off + 1);
  g.width = xv.dim(off + 2);
  g.out_channels = kv.dim(0);
  g.kernel_h = kv.dim(2);
  g.kernel_w = kv.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (kv.dim(1) != g.in_channels) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kv.dim(1)) +
                     " input channels, input " + to_string(xv.shape()) + " has " +
                     std::to_string(g.in_channels));
  }
  g.out_h = conv_output_extent(g.height, g.kernel_h, stride, pad, rounding);
  g.out_w = conv_output_extent(g.width, g.kernel_w, stride, pad, rounding);

  const std::size_t k = g.patch(), p = g.positions();
  const std::size_t in_stride = g.in_channels * g.height * g.width;
  const std::size_t out_stride = g.out_channels * p;
  auto cols = std::make_shared<std::vector<float>>(g.batch * k * p);
  Shape out_shape = batched ? Shape{g.batch, g.out_channels, g.out_h, g.out_w}
                            : Shape{g.out_channels, g.out_h, g.out_w};
  Tensor out(std::move(out_shape));
  for (std::size_t b = 0; b < g.batch; ++b) {
    float* col = cols->data() + b * k * p;
    detail::im2col(g, xv.ptr() + b * in_stride, col);
    detail::gemm_nn(g.out_channels, p, k, kv.ptr(), col, out.ptr() + b * out_stride);
  }
  return x.tape().record(
      std::move(out), {x, kernel}, "conv2d", [g, cols](Tape& t, std::size_t self) {
        const auto& node = t.node(self);
        const std::size_t ix = node.parents[0], ik = node.parents[1];
        const std::size_t k = g.patch(), p = g.positions();
        const std::size_t in_stride = g.in_channels * g.height * g.width;
        const std::size_t out_stride = g.out_channels * p;
        const float* dy = node.grad.ptr();
        if (t.requires_grad(ik)) {
          float* dk = t.grad_mut(ik).ptr();
          for (std::size_t b = 0; b < g.batch; ++b) {
            detail::gemm_nt(g.out_channels, k, p, dy + b * out_stride, cols->data() + b * k * p,
                            dk);
          }
        }
        if (t.requires_grad(ix)) {
          const float* w = t.value(ik).ptr();
          float* dx = t.grad_mut(ix).ptr();
          std::vector<float> dcol(k * p);
          for (std::size_t b = 0; b < g.batch; ++b) {
            std::fill(dcol.begin(), dcol.end(), 0.0f);
            detail::gemm_tn(k, p, g.out_channels, w, dy + b * out_stride, dcol.data());
            detail::col2im(g, dcol.data(), dx + b * in_stride);
          }
        }
      });
}

/// Mean over the spatial extent: [n,C,H,W] -> [n,C].
inline Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("global_avg_pool: expected [n,C,H,W], got " + to_string(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    const float* src = xv.ptr() + i * hw;
    for (std::size_t j = 0; j < hw; ++j) s += src[j];
    out[i] = static_cast<float>(s / static_cast<double>(hw));
  }
  return x.tape().record(std::move(out), {x}, "global_avg_pool", [n, c, hw](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    float* dx = t.grad_mut(node.parents[0]).ptr();
    const float inv = 1.0f / static_cast<float>(hw);
    for (std::size_t i = 0; i < n * c; ++i) {
      const float g = node.grad[i] * inv;
      for (std::size_t j = 0; j < hw; ++j) dx[i * hw + j] += g;
    }
  });
}

/// Mean over rows of -log softmax(logits)[label]. Backward: (softmax - onehot)/n.
inline Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [n,K], got " + to_string(lv.shape()));
  const std::size_t n = lv.dim(0), k = lv.dim(1);
  if (labels.size() != n) {
    throw InputError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  auto probs = std::make_shared<std::vector<float>>(n * k);
  auto onehot = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw InputError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                       std::to_string(k) + ")");
    }
    const float* row = lv.ptr() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) {
      (*probs)[r * k + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - lse));
    }
    total += lse - row[y];
  }
  const float loss = static_cast<float>(total / static_cast<double>(n));
  return logits.tape().record(
      Tensor::scalar(loss), {logits}, "softmax_cross_entropy",
      [n, k, probs, onehot](Tape& t, std::size_t self) {
        const auto& node = t.node(self);
        const float g = node.grad[0] / static_cast<float>(n);
        float* dl = t.grad_mut(node.parents[0]).ptr();
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < k; ++j) {
            const float target = static_cast<int>(j) == (*onehot)[r] ? 1.0f : 0.0f;
            dl[r * k + j] += g * ((*probs)[r * k + j] - target);
          }
        }
      });
}

}  // namespace domex
