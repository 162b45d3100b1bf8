#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "igcn/tensor.hpp"

namespace igcn {

inline constexpr double kPsnrCap = 100.0;

/// PSNR in dB for images in [0, 1]; identical images give kPsnrCap.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double se = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.values()[i]) - static_cast<double>(b.values()[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.numel());
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

struct SsimOptions {
  std::size_t window = 8;
  double c1 = 1e-4;  // (0.01 * 1)^2
  double c2 = 9e-4;  // (0.03 * 1)^2
};

namespace detail {

// Summed-area table with a zero first row and column.
inline std::vector<double> integral(const std::vector<double>& v, std::size_t h, std::size_t w) {
  std::vector<double> s((h + 1) * (w + 1), 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    double row = 0;
    for (std::size_t x = 0; x < w; ++x) {
      row += v[y * w + x];
      s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
    }
  }
  return s;
}

inline double box_sum(const std::vector<double>& s, std::size_t w, std::size_t y, std::size_t x, std::size_t k) {
  const auto W = w + 1;
  return s[(y + k) * W + x + k] - s[y * W + x + k] - s[(y + k) * W + x] + s[y * W + x];
}

}  // namespace detail

/// Mean SSIM over all valid k x k uniform windows and channels of [C,H,W]
/// or [N,C,H,W] images in [0, 1].
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimOptions& o = {}) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.rank() < 2) throw ShapeError("ssim: expected at least 2 dims, got " + shape_str(a.shape()));
  const auto h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1), k = o.window;
  if (h < k || w < k)
    throw ShapeError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " smaller than window " +
                     std::to_string(k));
  const auto planes = a.numel() / (h * w);
  const double n = static_cast<double>(k * k);
  double total = 0;
  std::size_t count = 0;
  std::vector<double> x(h * w), y(h * w), xx(h * w), yy(h * w), xy(h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < h * w; ++i) {
      x[i] = static_cast<double>(a.values()[p * h * w + i]);
      y[i] = static_cast<double>(b.values()[p * h * w + i]);
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto sx = detail::integral(x, h, w), sy = detail::integral(y, h, w), sxx = detail::integral(xx, h, w),
               syy = detail::integral(yy, h, w), sxy = detail::integral(xy, h, w);
    for (std::size_t r = 0; r + k <= h; ++r)
      for (std::size_t c = 0; c + k <= w; ++c) {
        const double mx = detail::box_sum(sx, w, r, c, k) / n, my = detail::box_sum(sy, w, r, c, k) / n;
        const double vx = std::max(0.0, detail::box_sum(sxx, w, r, c, k) / n - mx * mx);
        const double vy = std::max(0.0, detail::box_sum(syy, w, r, c, k) / n - my * my);
        const double cxy = detail::box_sum(sxy, w, r, c, k) / n - mx * my;
        total += ((2 * mx * my + o.c1) * (2 * cxy + o.c2)) / ((mx * mx + my * my + o.c1) * (vx + vy + o.c2));
        ++count;
      }
  }
  return total / static_cast<double>(count);
}

struct BinaryCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::size_t total() const { return tp + fp + fn + tn; }
  /// 0 when there are no positive predictions or labels.
  double f1() const { return tp == 0 ? 0.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + fn); }
  double accuracy() const { return total() == 0 ? 0.0 : static_cast<double>(tp + tn) / static_cast<double>(total()); }
};

struct AuMetrics {
  std::vector<BinaryCounts> per_au;

  double f1(std::size_t au) const { return per_au.at(au).f1(); }
  double accuracy(std::size_t au) const { return per_au.at(au).accuracy(); }
  double macro_f1() const {
    double s = 0;
    for (const auto& c : per_au) s += c.f1();
    return per_au.empty() ? 0.0 : s / static_cast<double>(per_au.size());
  }
  double macro_accuracy() const {
    double s = 0;
    for (const auto& c : per_au) s += c.accuracy();
    return per_au.empty() ? 0.0 : s / static_cast<double>(per_au.size());
  }
};

/// Row-major [N, n_au] predictions and labels, both 0/1.
inline AuMetrics au_metrics(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth,
                            std::size_t n_au) {
  if (n_au == 0 || pred.size() != truth.size() || pred.size() % n_au != 0)
    throw std::invalid_argument("au_metrics: " + std::to_string(pred.size()) + " predictions, " +
                                std::to_string(truth.size()) + " labels, " + std::to_string(n_au) + " AUs");
  AuMetrics m{std::vector<BinaryCounts>(n_au)};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto& c = m.per_au[i % n_au];
    const bool p = pred[i] != 0, t = truth[i] != 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return m;
}

/// Positive when sigmoid(logit) >= 0.5.
template <typename T>
std::vector<std::uint8_t> predict_labels(const Tensor<T>& logits) {
  std::vector<std::uint8_t> out(logits.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = logits.values()[i] >= T{0} ? 1 : 0;
  return out;
}

}  // namespace igcn
