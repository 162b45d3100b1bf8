#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "igcn/tensor.hpp"

namespace igcn {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_rank(const char* op, const char* what, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

/// Sliding-window geometry shared by convolution and its transpose. `in_*` is
/// the image the kernel slides over, `out_*` the grid of window positions.
struct ConvGeometry {
  std::size_t channels, in_h, in_w, kh, kw, stride, pad, out_h, out_w;
  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose tap at offset j lands inside the row.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t stride, std::size_t j,
                                                       std::size_t pad) {
  const auto first = j >= pad ? 0 : (pad - j + stride - 1) / stride;
  const long last = (static_cast<long>(in) - 1 + static_cast<long>(pad) - static_cast<long>(j));
  const auto hi = last < 0 ? 0 : std::min(out, static_cast<std::size_t>(last) / stride + 1);
  return {std::min(first, hi), hi};
}

// `ld` is the row stride of `col`, so several images can share one matrix.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col, std::size_t ld = 0) {
  const auto cols = ld ? ld : g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = image + c * g.in_h * g.in_w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * cols;
        const auto [lo, hi] = valid_range(g.out_w, g.in_w, g.stride, j, g.pad);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          T* dst = row + oy * g.out_w;
          if (y < 0 || y >= static_cast<long>(g.in_h)) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          std::fill(dst, dst + lo, T{0});
          std::fill(dst + hi, dst + g.out_w, T{0});
          const T* src = plane + static_cast<std::size_t>(y) * g.in_w + (lo * g.stride + j - g.pad);
          if (g.stride == 1) {
            std::copy(src, src + (hi - lo), dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox, src += g.stride) dst[ox] = *src;
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters (accumulates) columns back into the image.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* image, std::size_t ld = 0) {
  const auto cols = ld ? ld : g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = image + c * g.in_h * g.in_w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * cols;
        const auto [lo, hi] = valid_range(g.out_w, g.in_w, g.stride, j, g.pad);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (y < 0 || y >= static_cast<long>(g.in_h)) continue;
          T* dst = plane + static_cast<std::size_t>(y) * g.in_w + (lo * g.stride + j - g.pad);
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = lo; ox < hi; ++ox, dst += g.stride) *dst += src[ox];
        }
      }
    }
  }
}

// Images folded into one GEMM so that it has roughly 1024 columns.
inline std::size_t images_per_gemm(std::size_t hw) { return std::max<std::size_t>(1, 1024 / std::max<std::size_t>(1, hw)); }

// [N, C, P] -> [C, N * P] and back.
template <typename T>
void to_channel_major(const T* src, std::size_t n, std::size_t c, std::size_t p, T* dst) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) std::copy_n(src + (i * c + ch) * p, p, dst + ch * n * p + i * p);
}

template <typename T>
void from_channel_major(const T* src, std::size_t n, std::size_t c, std::size_t p, T* dst) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) std::copy_n(src + ch * n * p + i * p, p, dst + (i * c + ch) * p);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (T* g = parent_grad(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    if (T* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (T* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (T* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (T* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * factor;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [factor](Node<T>& self) {
    if (T* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] > T{0} ? x.values()[i] : T{0};
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    // subgradient at exactly 0 is 0
    const auto& xv = self.parents[0]->value;
    if (T* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (xv[i] > T{0}) g[i] += self.grad[i];
  });
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x.values()[i]);
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    if (T* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T s = self.value[i];
        g[i] += self.grad[i] * s * (T{1} - s);
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc{0};
  for (T v : x.values()) acc += v;
  return Tensor<T>::make_result(Shape{1}, {acc}, {x}, [](Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      const auto n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

/// mean((a - b)^2) as a single fused node.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mse", a.shape(), b.shape());
  const auto n = a.numel();
  if (n == 0) throw ShapeError("mse: empty operands");
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.values()[i] - b.values()[i];
    acc += d * d;
  }
  return Tensor<T>::make_result(Shape{1}, {acc / static_cast<T>(n)}, {a, b}, [n](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const T k = T{2} * self.grad[0] / static_cast<T>(n);
    T* ga = parent_grad(self, 0);
    T* gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = k * (av[i] - bv[i]);
      if (ga) ga[i] += d;
      if (gb) gb[i] -= d;
    }
  });
}

/// Mean sigmoid cross-entropy of `logits` against constant `targets`, computed
/// in the overflow-free form max(x,0) - x*t + log(1 + exp(-|x|)). Logits are
/// clamped to +-1e4 so infinite logits give finite losses.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  detail::require_same_shape("bce_with_logits", logits.shape(), targets.shape());
  const auto n = logits.numel();
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T x = std::clamp(logits.values()[i], T{-1e4}, T{1e4});
    const T t = targets.values()[i];
    acc += std::max(x, T{0}) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  std::vector<T> tv(targets.values().begin(), targets.values().end());
  return Tensor<T>::make_result(Shape{1}, {acc / static_cast<T>(n)}, {logits},
                                [n, tv = std::move(tv)](Node<T>& self) {
                                  if (T* g = parent_grad(self, 0)) {
                                    const auto& xv = self.parents[0]->value;
                                    const T k = self.grad[0] / static_cast<T>(n);
                                    for (std::size_t i = 0; i < n; ++i) g[i] += k * (sigmoid_scalar(xv[i]) - tv[i]);
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> v(x.values().begin(), x.values().end());
  return Tensor<T>::make_result(std::move(shape), std::move(v), {x}, [](Node<T>& self) {
    if (T* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

/// [N, C, H, W] -> [N, C], spatial mean per channel.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank("global_avg_pool", "input", x.shape(), 4);
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(n * c, T{0});
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc{0};
    const T* p = x.data() + i * hw;
    for (std::size_t j = 0; j < hw; ++j) acc += p[j];
    out[i] = acc / static_cast<T>(hw);
  }
  return Tensor<T>::make_result(Shape{n, c}, std::move(out), {x}, [hw](Node<T>& self) {
    if (T* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T d = self.grad[i] / static_cast<T>(hw);
        for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += d;
      }
  });
}

// ---------------------------------------------------------------------------
// Dense and convolutional layers

/// y = x W^T + b with x [N, F], W [O, F], b [O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank("linear", "input", x.shape(), 2);
  detail::require_rank("linear", "weight", w.shape(), 2);
  detail::require_rank("linear", "bias", b.shape(), 1);
  const auto n = x.dim(0), f = x.dim(1), o = w.dim(0);
  if (w.dim(1) != f || b.dim(0) != o) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()) +
                     " and bias " + shape_str(b.shape()));
  }
  std::vector<T> out(n * o);
  detail::MatMap<T> y(out.data(), n, o);
  y.noalias() = detail::ConstMatMap<T>(x.data(), n, f) * detail::ConstMatMap<T>(w.data(), o, f).transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) y(i, j) += b.values()[j];
  return Tensor<T>::make_result(Shape{n, o}, std::move(out), {x, w, b}, [n, f, o](Node<T>& self) {
    detail::ConstMatMap<T> gy(self.grad.data(), n, o);
    if (T* gx = parent_grad(self, 0))
      detail::MatMap<T>(gx, n, f).noalias() += gy * detail::ConstMatMap<T>(self.parents[1]->value.data(), o, f);
    if (T* gw = parent_grad(self, 1))
      detail::MatMap<T>(gw, o, f).noalias() +=
          gy.transpose() * detail::ConstMatMap<T>(self.parents[0]->value.data(), n, f);
    if (T* gb = parent_grad(self, 2))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < o; ++j) gb[j] += gy(i, j);
  });
}

inline std::size_t conv_output_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline std::size_t deconv_output_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in - 1) * stride + k - 2 * pad;
}

/// Cross-correlation. input [N, Cin, H, W], weight [Cout, Cin, k, k], bias [Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  detail::require_rank("conv2d", "input", input.shape(), 4);
  detail::require_rank("conv2d", "weight", weight.shape(), 4);
  detail::require_rank("conv2d", "bias", bias.shape(), 1);
  const auto n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels but weight " +
                     shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)) + " (input " +
                     shape_str(input.shape()) + ")");
  }
  if (bias.dim(0) != cout) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout) +
                     " output channels");
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel must be odd, got " + shape_str(weight.shape()));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (h == 0 || w == 0 || h + 2 * padding < kh || w + 2 * padding < kw) {
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + " too small for kernel " +
                     shape_str(weight.shape()) + " with padding " + std::to_string(padding));
  }
  const detail::ConvGeometry geo{cin,    h,       w, kh, kw, stride, padding, conv_output_size(h, kh, stride, padding),
                                 conv_output_size(w, kw, stride, padding)};
  const auto k = geo.col_rows(), hw = geo.col_cols(), group = detail::images_per_gemm(hw);

  std::vector<T> out(n * cout * hw);
  std::vector<T> col(k * group * hw);
  detail::RowMat<T> res;
  detail::ConstMatMap<T> wm(weight.data(), cout, k);
  for (std::size_t i0 = 0; i0 < n; i0 += group) {
    const auto m = std::min(group, n - i0), cols = m * hw;
    for (std::size_t i = 0; i < m; ++i)
      detail::im2col(input.data() + (i0 + i) * cin * h * w, geo, col.data() + i * hw, cols);
    res.noalias() = wm * detail::ConstMatMap<T>(col.data(), k, cols);
    for (std::size_t c = 0; c < cout; ++c) res.row(c).array() += bias.values()[c];
    detail::from_channel_major(res.data(), m, cout, hw, out.data() + i0 * cout * hw);
  }
  return Tensor<T>::make_result(
      Shape{n, cout, geo.out_h, geo.out_w}, std::move(out), {input, weight, bias}, [geo, n, cout, group](Node<T>& self) {
        const auto k = geo.col_rows(), hw = geo.col_cols();
        const auto in_size = geo.channels * geo.in_h * geo.in_w;
        T* gx = parent_grad(self, 0);
        T* gw = parent_grad(self, 1);
        T* gb = parent_grad(self, 2);
        const auto& xv = self.parents[0]->value;
        detail::ConstMatMap<T> wm(self.parents[1]->value.data(), cout, k);
        std::vector<T> col(k * group * hw);
        detail::RowMat<T> go;
        for (std::size_t i0 = 0; i0 < n; i0 += group) {
          const auto m = std::min(group, n - i0), cols = m * hw;
          go.resize(cout, cols);
          detail::to_channel_major(self.grad.data() + i0 * cout * hw, m, cout, hw, go.data());
          detail::MatMap<T> cm(col.data(), k, cols);
          if (gw) {
            for (std::size_t i = 0; i < m; ++i) detail::im2col(xv.data() + (i0 + i) * in_size, geo, col.data() + i * hw, cols);
            detail::MatMap<T>(gw, cout, k).noalias() += go * cm.transpose();
          }
          if (gx) {
            cm.noalias() = wm.transpose() * go;
            for (std::size_t i = 0; i < m; ++i) detail::col2im(col.data() + i * hw, geo, gx + (i0 + i) * in_size, cols);
          }
          if (gb)
            for (std::size_t c = 0; c < cout; ++c) gb[c] += go.row(c).sum();
        }
      });
}

/// Transposed convolution, the adjoint of conv2d in its input.
/// input [N, Cin, H, W], weight [Cin, Cout, k, k], bias [Cout];
/// output side (H - 1) * stride - 2 * padding + k.
template <typename T>
Tensor<T> deconv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                   std::size_t padding) {
  detail::require_rank("deconv2d", "input", input.shape(), 4);
  detail::require_rank("deconv2d", "weight", weight.shape(), 4);
  detail::require_rank("deconv2d", "bias", bias.shape(), 1);
  const auto n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto cout = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(0) != cin) {
    throw ShapeError("deconv2d: input has " + std::to_string(cin) + " channels but weight " +
                     shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(0)) + " (input " +
                     shape_str(input.shape()) + ")");
  }
  if (bias.dim(0) != cout) {
    throw ShapeError("deconv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout) +
                     " output channels");
  }
  if (stride < 1) throw ShapeError("deconv2d: stride must be >= 1");
  if (h == 0 || w == 0 || (h - 1) * stride + kh <= 2 * padding || (w - 1) * stride + kw <= 2 * padding) {
    throw ShapeError("deconv2d: padding " + std::to_string(padding) + " leaves no output for input " +
                     shape_str(input.shape()) + " and kernel " + shape_str(weight.shape()));
  }
  const auto oh = deconv_output_size(h, kh, stride, padding), ow = deconv_output_size(w, kw, stride, padding);
  // The output is the image a conv2d with this geometry would slide over.
  const detail::ConvGeometry geo{cout, oh, ow, kh, kw, stride, padding, h, w};
  const auto k = geo.col_rows(), hw = h * w, group = detail::images_per_gemm(hw);

  std::vector<T> out(n * cout * oh * ow, T{0});
  detail::RowMat<T> in_cm, col;
  detail::ConstMatMap<T> wm(weight.data(), cin, k);
  for (std::size_t i0 = 0; i0 < n; i0 += group) {
    const auto m = std::min(group, n - i0), cols = m * hw;
    in_cm.resize(cin, cols);
    detail::to_channel_major(input.data() + i0 * cin * hw, m, cin, hw, in_cm.data());
    col.noalias() = wm.transpose() * in_cm;
    for (std::size_t i = 0; i < m; ++i) {
      T* o = out.data() + (i0 + i) * cout * oh * ow;
      detail::col2im(col.data() + i * hw, geo, o, cols);
      for (std::size_t c = 0; c < cout; ++c)
        for (std::size_t j = 0; j < oh * ow; ++j) o[c * oh * ow + j] += bias.values()[c];
    }
  }
  return Tensor<T>::make_result(
      Shape{n, cout, oh, ow}, std::move(out), {input, weight, bias}, [geo, n, cin, group](Node<T>& self) {
        const auto k = geo.col_rows(), hw = geo.out_h * geo.out_w;
        const auto out_size = geo.channels * geo.in_h * geo.in_w;
        T* gx = parent_grad(self, 0);
        T* gw = parent_grad(self, 1);
        T* gb = parent_grad(self, 2);
        detail::ConstMatMap<T> wm(self.parents[1]->value.data(), cin, k);
        detail::RowMat<T> gc, g, in_cm;
        for (std::size_t i0 = 0; i0 < n && (gx || gw); i0 += group) {
          const auto m = std::min(group, n - i0), cols = m * hw;
          gc.resize(k, cols);
          for (std::size_t i = 0; i < m; ++i)
            detail::im2col(self.grad.data() + (i0 + i) * out_size, geo, gc.data() + i * hw, cols);
          if (gx) {
            g.noalias() = wm * gc;
            T* dst = gx + i0 * cin * hw;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t c = 0; c < cin; ++c)
                detail::MatMap<T>(dst + (i * cin + c) * hw, 1, hw) += g.block(c, i * hw, 1, hw);
          }
          if (gw) {
            in_cm.resize(cin, cols);
            detail::to_channel_major(self.parents[0]->value.data() + i0 * cin * hw, m, cin, hw, in_cm.data());
            detail::MatMap<T>(gw, cin, k).noalias() += in_cm * gc.transpose();
          }
        }
        if (gb) {
          const auto plane = geo.in_h * geo.in_w;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < geo.channels; ++c)
              for (std::size_t j = 0; j < plane; ++j) gb[c] += self.grad[i * out_size + c * plane + j];
        }
      });
}

}  // namespace igcn
