#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "igcn/graph_conv.hpp"
#include "igcn/image_io.hpp"
#include "igcn/tensor.hpp"

namespace igcn {

// ---------------------------------------------------------------------------
// Attributes

inline constexpr std::size_t kMaxAus = 12;

inline const std::array<const char*, kMaxAus> kAuNames{
    "eye_closed_l", "eye_closed_r", "brow_raise_l", "brow_raise_r", "mouth_open", "smile",
    "frown",        "nose_wrinkle", "cheek_raise_l", "cheek_raise_r", "dimple_l", "dimple_r"};

/// Left/right attribute pairs; "left" is the image-left side.
inline const std::vector<std::pair<std::size_t, std::size_t>> kBilateralAus{{0, 1}, {2, 3}, {8, 9}, {10, 11}};

inline std::vector<double> default_au_probabilities(std::size_t n_au) {
  static const std::array<double, kMaxAus> p{0.3, 0.3, 0.35, 0.35, 0.3, 0.4, 0.25, 0.2, 0.3, 0.3, 0.2, 0.2};
  if (n_au == 0 || n_au > kMaxAus) throw std::invalid_argument("n_au must be in [1, 12], got " + std::to_string(n_au));
  return {p.begin(), p.begin() + static_cast<std::ptrdiff_t>(n_au)};
}

/// Standard normal quantile by bisection on erfc.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("normal_quantile: p must be in (0, 1)");
  double lo = -40.0, hi = 40.0;
  for (int i = 0; i < 200 && hi - lo > 1e-15; ++i) {
    const double mid = 0.5 * (lo + hi);
    (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

/// Factor loadings of the Gaussian copula behind attribute sampling. Paired
/// sides share a strong factor; smile, cheek raise and mouth opening share a
/// mouth factor, frown and nose wrinkle a tension factor.
inline const std::array<std::array<double, 6>, kMaxAus>& au_loadings() {
  //                                              eyes brows mouth tension cheeks dimples
  static const std::array<std::array<double, 6>, kMaxAus> l{{{0.93, 0, 0, 0, 0, 0},
                                                             {0.93, 0, 0, 0, 0, 0},
                                                             {0, 0.93, 0, 0, 0, 0},
                                                             {0, 0.93, 0, 0, 0, 0},
                                                             {0, 0, 0.35, 0, 0, 0},
                                                             {0, 0, 0.7, 0, 0, 0},
                                                             {0, 0, -0.5, 0.6, 0, 0},
                                                             {0, 0, 0, 0.75, 0, 0},
                                                             {0, 0, 0.55, 0, 0.7, 0},
                                                             {0, 0, 0.55, 0, 0.7, 0},
                                                             {0, 0, 0, 0, 0, 0.93},
                                                             {0, 0, 0, 0, 0, 0.93}}};
  return l;
}

/// Correlated binary attributes whose marginals equal `probs` exactly.
inline std::vector<std::uint8_t> sample_attributes(const std::vector<double>& probs, std::mt19937_64& rng) {
  if (probs.empty() || probs.size() > kMaxAus) throw std::invalid_argument("sample_attributes: bad attribute count");
  std::normal_distribution<double> n01;
  std::array<double, 6> factor{};
  for (auto& f : factor) f = n01(rng);
  std::vector<std::uint8_t> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto& l = au_loadings()[i];
    double z = 0, used = 0;
    for (std::size_t j = 0; j < 6; ++j) {
      z += l[j] * factor[j];
      used += l[j] * l[j];
    }
    z += std::sqrt(1.0 - used) * n01(rng);
    out[i] = z > normal_quantile(1.0 - probs[i]) ? 1 : 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

/// Nuisance appearance of a subject. dx shifts the face horizontally and is
/// the only asymmetric parameter.
struct FaceStyle {
  double face_rx = 0.38;
  double face_ry = 0.45;
  double dx = 0.0;
  double feature_scale = 1.0;
  std::array<double, 3> skin{0.85, 0.66, 0.55};
  std::array<double, 3> background{0.3, 0.35, 0.4};

  FaceStyle mirrored() const {
    FaceStyle s = *this;
    s.dx = -dx;
    return s;
  }

  static FaceStyle sample(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    FaceStyle s;
    s.face_rx = 0.34 + 0.08 * u(rng);
    s.face_ry = 0.42 + 0.06 * u(rng);
    s.dx = -0.03 + 0.06 * u(rng);
    s.feature_scale = 0.92 + 0.16 * u(rng);
    const double t = u(rng);
    const std::array<double, 3> light{0.96, 0.82, 0.72}, dark{0.52, 0.36, 0.27};
    for (std::size_t c = 0; c < 3; ++c) s.skin[c] = light[c] + t * (dark[c] - light[c]);
    const double g = 0.12 + 0.4 * u(rng);
    for (auto& b : s.background) b = std::clamp(g + 0.16 * (u(rng) - 0.5), 0.0, 1.0);
    return s;
  }
};

struct SyntheticFaceParams {
  std::vector<std::uint8_t> attributes;
  FaceStyle style;
  std::uint64_t seed = 0;

  /// Swaps every left/right attribute pair and mirrors the style.
  SyntheticFaceParams mirrored() const {
    SyntheticFaceParams m = *this;
    for (auto [l, r] : kBilateralAus)
      if (r < attributes.size()) std::swap(m.attributes[l], m.attributes[r]);
    m.style = style.mirrored();
    return m;
  }
};

/// Axis-aligned box in face units (fractions of the side, origin at the
/// face centre, y down).
struct RegionBox {
  double x0, x1, y0, y1;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline double coverage(double d) { return std::clamp(0.5 - d, 0.0, 1.0); }

// Approximate signed distance to an axis-aligned ellipse, in pixels.
inline double ellipse_sd(double x, double y, double a, double b) {
  const double k = std::sqrt((x * x) / (a * a) + (y * y) / (b * b));
  if (k < 1e-12) return -std::min(a, b);
  const double gx = x / (a * a * k), gy = y / (b * b * k);
  return (k - 1.0) / std::max(std::sqrt(gx * gx + gy * gy), 1e-12);
}

inline double segment_dist(double x, double y, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double t = std::clamp(((x - ax) * vx + (y - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
  const double dx = x - (ax + t * vx), dy = y - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

struct Canvas {
  std::size_t side;
  std::vector<double> rgb;  // [3, side, side]

  void blend(std::size_t idx, const std::array<double, 3>& color, double alpha) {
    if (alpha <= 0.0) return;
    const auto plane = side * side;
    for (std::size_t c = 0; c < 3; ++c) rgb[c * plane + idx] += alpha * (color[c] - rgb[c * plane + idx]);
  }
};

struct Layout {
  double eye_x = 0.16, eye_y = -0.07, eye_rx = 0.085, eye_ry = 0.058, pupil_r = 0.036;
  double brow_y = -0.19, brow_raise = 0.08, brow_inner = 0.06, brow_outer = 0.26, brow_t = 0.036;
  double nose_top = -0.03, nose_bottom = 0.1;
  double mouth_y = 0.24, mouth_hw = 0.16, mouth_curve = 0.1, mouth_t = 0.045;
  double open_rx = 0.115, open_ry = 0.08;
  double cheek_x = 0.21, cheek_y = 0.09, cheek_r = 0.075;
  double dimple_x = 0.19, dimple_y = 0.3, dimple_r = 0.024;
};

}  // namespace detail

/// Region of an attribute in face units at feature scale 1, on the image
/// side it belongs to. Mouth-related attributes share the mouth box.
inline RegionBox au_region(std::size_t au) {
  const detail::Layout L;
  auto side = [](std::size_t a) { return a % 2 == 0 ? -1.0 : 1.0; };
  switch (au) {
    case 0:
    case 1: {
      const double s = side(au);
      return {s * L.eye_x - L.eye_rx, s * L.eye_x + L.eye_rx, L.eye_y - L.eye_ry, L.eye_y + L.eye_ry};
    }
    case 2:
    case 3: {
      const double s = side(au);
      const double a = s * L.brow_inner, b = s * L.brow_outer;
      return {std::min(a, b), std::max(a, b), L.brow_y - L.brow_raise - L.brow_t, L.brow_y + L.brow_t};
    }
    case 4:
    case 5:
    case 6:
      return {-L.mouth_hw - L.mouth_t, L.mouth_hw + L.mouth_t, L.mouth_y - L.mouth_curve - L.open_ry,
              L.mouth_y + L.mouth_curve + L.open_ry};
    case 7:
      return {-0.13, 0.13, -0.055, L.nose_bottom};
    case 8:
    case 9: {
      const double s = side(au);
      return {s * L.cheek_x - L.cheek_r, s * L.cheek_x + L.cheek_r, L.cheek_y - L.cheek_r, L.cheek_y + L.cheek_r};
    }
    case 10:
    case 11: {
      const double s = side(au);
      return {s * L.dimple_x - L.dimple_r, s * L.dimple_x + L.dimple_r, L.dimple_y - L.dimple_r,
              L.dimple_y + L.dimple_r};
    }
    default:
      throw std::out_of_range("au_region: no attribute " + std::to_string(au));
  }
}

/// Anti-aliased face drawing; a pure function of the parameters. Bilateral
/// features are evaluated on |x| about the face centre and the texture noise
/// is mirror-symmetric, so mirrored parameters give the mirrored image.
template <typename T = float>
Tensor<T> render_face(const SyntheticFaceParams& params, std::size_t side) {
  if (side < 32 || side % 8 != 0) throw std::invalid_argument("render_face: side must be >= 32 and divisible by 8");
  const auto& a = params.attributes;
  if (a.empty() || a.size() > kMaxAus)
    throw std::invalid_argument("render_face: attribute vector has length " + std::to_string(a.size()) +
                                ", expected 1..12");
  auto on = [&](std::size_t i) { return i < a.size() && a[i] != 0; };
  const auto& st = params.style;
  const detail::Layout L;
  const double S = static_cast<double>(side), fs = st.feature_scale;
  const double cx = st.dx * S;

  std::mt19937_64 jitter_rng(params.seed);
  std::uniform_real_distribution<double> ju(-1.0, 1.0);
  const double eye_shift = 0.008 * ju(jitter_rng) * S;
  const double tone = 1.0 + 0.04 * ju(jitter_rng);

  detail::Canvas cv{side, std::vector<double>(3 * side * side)};
  const std::array<double, 3> hair{0.2, 0.12, 0.08}, ink{0.08, 0.05, 0.05}, white{0.97, 0.97, 0.95},
      lip{0.62, 0.16, 0.2}, mouth_in{0.24, 0.02, 0.05}, blush{0.93, 0.42, 0.48}, wrinkle{0.78, 0.12, 0.12};
  std::array<double, 3> skin, nose_col;
  for (std::size_t c = 0; c < 3; ++c) {
    skin[c] = std::clamp(st.skin[c] * tone, 0.0, 1.0);
    nose_col[c] = skin[c] * 0.62;
  }

  const double mouth_c = L.mouth_curve * ((on(6) ? 1.0 : 0.0) - (on(5) ? 1.0 : 0.0)) * S * fs;

  for (std::size_t i = 0; i < side; ++i) {
    const double py = static_cast<double>(i) + 0.5 - S / 2;
    for (std::size_t j = 0; j < side; ++j) {
      const double px = static_cast<double>(j) + 0.5 - S / 2;
      const double sx = px - cx;
      const double ax = std::abs(sx);
      const bool left = sx < 0;
      const std::size_t idx = i * side + j;
      auto side_on = [&](std::size_t l_au) { return on(left ? l_au : l_au + 1); };

      // background with mirror-symmetric texture noise
      const std::uint64_t h = detail::splitmix64(params.seed ^ (std::min(j, side - 1 - j) * 0x10001ULL + i * 0x9e37ULL));
      const double noise = 0.03 * (static_cast<double>(h >> 11) * 0x1.0p-53 - 0.5);
      for (std::size_t c = 0; c < 3; ++c) cv.rgb[c * side * side + idx] = std::clamp(st.background[c] + noise, 0.0, 1.0);

      cv.blend(idx, skin, detail::coverage(detail::ellipse_sd(sx, py, st.face_rx * S, st.face_ry * S)));

      if (a.size() > 8 && side_on(8))
        cv.blend(idx, blush, 0.75 * detail::coverage(detail::ellipse_sd(ax - L.cheek_x * S * fs, py - L.cheek_y * S * fs,
                                                                         L.cheek_r * S * fs, L.cheek_r * S * fs)));

      // nose
      cv.blend(idx, nose_col,
               detail::coverage(detail::segment_dist(ax, py, 0, L.nose_top * S * fs, 0, L.nose_bottom * S * fs) -
                                0.012 * S * fs));
      if (on(7)) {
        cv.blend(idx, wrinkle, 0.9 * detail::coverage(detail::ellipse_sd(ax, py - 0.02 * S * fs, 0.13 * S * fs, 0.075 * S * fs)));
        for (double wy : {-0.015, 0.025})
          cv.blend(idx, ink,
                   detail::coverage(detail::segment_dist(ax, py, 0, wy * S * fs, 0.075 * S * fs, (wy - 0.02) * S * fs) -
                                    0.01 * S * fs));
      }

      // eyes
      const double ex = ax - L.eye_x * S * fs, ey = py - L.eye_y * S * fs - eye_shift;
      if (side_on(0)) {
        cv.blend(idx, ink,
                 detail::coverage(detail::segment_dist(ex, ey, -L.eye_rx * S * fs, 0, L.eye_rx * S * fs, 0) -
                                  0.014 * S * fs));
      } else {
        cv.blend(idx, white, detail::coverage(detail::ellipse_sd(ex, ey, L.eye_rx * S * fs, L.eye_ry * S * fs)));
        cv.blend(idx, ink, detail::coverage(detail::ellipse_sd(ex, ey, L.pupil_r * S * fs, L.pupil_r * S * fs)));
      }

      // brows: flat bar, or arched and lifted
      {
        const double lift = side_on(2) ? L.brow_raise : 0.0;
        const double y0 = (L.brow_y - lift) * S * fs, arch = (side_on(2) ? 0.03 : 0.0) * S * fs;
        const double xi = L.brow_inner * S * fs, xo = L.brow_outer * S * fs, xm = 0.5 * (xi + xo);
        const double d = std::min(detail::segment_dist(ax, py, xi, y0, xm, y0 - arch),
                                  detail::segment_dist(ax, py, xm, y0 - arch, xo, y0));
        cv.blend(idx, hair, detail::coverage(d - 0.5 * L.brow_t * S * fs));
      }

      // mouth: optional opening under a curved lip line
      {
        const double my = L.mouth_y * S * fs, hw = L.mouth_hw * S * fs;
        if (on(4))
          cv.blend(idx, mouth_in,
                   detail::coverage(detail::ellipse_sd(ax, py - my - 0.5 * mouth_c, L.open_rx * S * fs, L.open_ry * S * fs)));
        double d = 1e9;
        constexpr int kSegments = 12;
        for (int s = 0; s < kSegments; ++s) {
          const double t0 = static_cast<double>(s) / kSegments, t1 = static_cast<double>(s + 1) / kSegments;
          d = std::min(d, detail::segment_dist(ax, py, t0 * hw, my + mouth_c * t0 * t0, t1 * hw, my + mouth_c * t1 * t1));
        }
        cv.blend(idx, lip, detail::coverage(d - 0.5 * L.mouth_t * S * fs));
      }

      if (a.size() > 10 && side_on(10))
        cv.blend(idx, ink, detail::coverage(detail::ellipse_sd(ax - L.dimple_x * S * fs, py - L.dimple_y * S * fs,
                                                               L.dimple_r * S * fs, L.dimple_r * S * fs)));
    }
  }
  std::vector<T> v(cv.rgb.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(std::clamp(cv.rgb[i], 0.0, 1.0));
  return Tensor<T>(Shape{3, side, side}, std::move(v));
}

// ---------------------------------------------------------------------------
// Degradation

/// Catmull-Rom cubic (a = -0.5).
inline double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

namespace detail {

struct ResampleTaps {
  std::vector<std::size_t> first;  // per output index
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<std::size_t>> index;
};

// Half-pixel aligned taps; when shrinking, the kernel is widened by the
// scale factor so it also low-passes. Edge samples are clamped.
inline ResampleTaps resample_taps(std::size_t in, std::size_t out) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double stretch = std::max(scale, 1.0);
  const double support = 2.0 * stretch;
  ResampleTaps taps;
  taps.weights.resize(out);
  taps.index.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double center = (static_cast<double>(o) + 0.5) * scale - 0.5;
    const auto lo = static_cast<long>(std::floor(center - support));
    const auto hi = static_cast<long>(std::ceil(center + support));
    double total = 0;
    for (long i = lo; i <= hi; ++i) {
      const double w = cubic_kernel((static_cast<double>(i) - center) / stretch);
      if (w == 0.0) continue;
      taps.weights[o].push_back(w);
      taps.index[o].push_back(static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(in) - 1)));
      total += w;
    }
    for (auto& w : taps.weights[o]) w /= total;
  }
  return taps;
}

}  // namespace detail

/// Separable bicubic resize of a [C, H, W] image to [C, target, target].
template <typename T>
Tensor<T> bicubic_resize(const Tensor<T>& image, std::size_t target_side) {
  detail::require_rank("bicubic_resize", "image", image.shape(), 3);
  if (target_side < 1) throw std::invalid_argument("bicubic_resize: target side must be >= 1");
  const auto ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto ty = detail::resample_taps(h, target_side), tx = detail::resample_taps(w, target_side);
  std::vector<double> rows(ch * h * target_side);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t o = 0; o < target_side; ++o) {
        double acc = 0;
        for (std::size_t t = 0; t < tx.weights[o].size(); ++t)
          acc += tx.weights[o][t] * static_cast<double>(image.values()[(c * h + y) * w + tx.index[o][t]]);
        rows[(c * h + y) * target_side + o] = acc;
      }
  std::vector<T> out(ch * target_side * target_side);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t o = 0; o < target_side; ++o)
      for (std::size_t x = 0; x < target_side; ++x) {
        double acc = 0;
        for (std::size_t t = 0; t < ty.weights[o].size(); ++t)
          acc += ty.weights[o][t] * rows[(c * h + ty.index[o][t]) * target_side + x];
        out[(c * target_side + o) * target_side + x] = static_cast<T>(acc);
      }
  return Tensor<T>(Shape{ch, target_side, target_side}, std::move(out));
}

struct DegradationSpec {
  std::size_t target_side = 16;
  std::uint64_t seed = 0;

  /// Square mask covering a quarter of the input area.
  std::size_t mask_side() const { return target_side / 2; }
};

struct MaskResult {
  Tensor<float> image;
  std::vector<std::uint8_t> mask;  // [s, s], 1 where occluded
  std::size_t top = 0;
  std::size_t left = 0;
};

/// Zeroes a uniformly placed square of side s/2.
template <typename T>
MaskResult apply_mask(const Tensor<T>& image, std::mt19937_64& rng) {
  detail::require_rank("apply_mask", "image", image.shape(), 3);
  const auto s = image.dim(1);
  if (s < 2 || s != image.dim(2) || s % 2 != 0)
    throw std::invalid_argument("apply_mask: image must be square with an even side >= 2, got " + shape_str(image.shape()));
  const auto m = s / 2;
  std::uniform_int_distribution<std::size_t> pos(0, s - m);
  MaskResult r;
  r.top = pos(rng);
  r.left = pos(rng);
  r.mask.assign(s * s, 0);
  std::vector<float> v(image.values().begin(), image.values().end());
  for (std::size_t y = r.top; y < r.top + m; ++y)
    for (std::size_t x = r.left; x < r.left + m; ++x) {
      r.mask[y * s + x] = 1;
      for (std::size_t c = 0; c < image.dim(0); ++c) v[(c * s + y) * s + x] = 0.0f;
    }
  r.image = Tensor<float>(image.shape(), std::move(v));
  return r;
}

struct DegradedImage {
  ImageU8 image;
  std::vector<std::uint8_t> mask;
  std::size_t top = 0;
  std::size_t left = 0;
};

/// 8-bit ground truth -> bicubic downsample -> quarter-area mask -> 8-bit.
inline DegradedImage degrade(const ImageU8& gt, const DegradationSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  auto small = bicubic_resize(dequantize<float>(gt), spec.target_side);
  auto masked = apply_mask(small, rng);
  return {quantize(masked.image), std::move(masked.mask), masked.top, masked.left};
}

// ---------------------------------------------------------------------------
// Corpus

struct DatasetConfig {
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  std::size_t side = 64;
  std::size_t input_side = 8;
  std::size_t n_au = 8;
  std::uint64_t seed = 0;
  std::size_t train_subjects = 40;
  std::size_t test_subjects = 10;
  std::vector<double> probabilities;  // default_au_probabilities(n_au) when empty

  void validate() const {
    if (side < 32 || side % 8 != 0) throw std::invalid_argument("dataset: side must be >= 32 and divisible by 8");
    if (input_side < 2 || input_side % 2 != 0 || input_side > side)
      throw std::invalid_argument("dataset: input side must be even and no larger than the side");
    if (train_subjects == 0 || (n_test > 0 && test_subjects == 0))
      throw std::invalid_argument("dataset: subject pools must be non-empty");
    if (!probabilities.empty() && probabilities.size() != n_au)
      throw std::invalid_argument("dataset: " + std::to_string(probabilities.size()) + " probabilities for " +
                                  std::to_string(n_au) + " attributes");
    for (double p : probabilities)
      if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("dataset: probabilities must lie in (0, 1)");
    default_au_probabilities(n_au);
  }

  std::vector<double> resolved_probabilities() const {
    return probabilities.empty() ? default_au_probabilities(n_au) : probabilities;
  }
};

struct SampleRecord {
  std::string id;
  std::string split;
  std::size_t subject = 0;
  std::vector<std::uint8_t> labels;
  std::uint64_t subject_seed = 0;
  std::uint64_t label_seed = 0;
  std::uint64_t render_seed = 0;
  std::uint64_t mask_seed = 0;
  std::size_t mask_top = 0;
  std::size_t mask_left = 0;
  std::string gt_path;        // relative to the dataset root
  std::string degraded_path;  // relative to the dataset root
};

inline nlohmann::json to_json(const SampleRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["split"] = r.split;
  j["subject"] = r.subject;
  j["labels"] = r.labels;
  j["seeds"] = {{"subject", r.subject_seed}, {"labels", r.label_seed}, {"render", r.render_seed}, {"mask", r.mask_seed}};
  j["mask_offset"] = {r.mask_top, r.mask_left};
  j["gt"] = r.gt_path;
  j["degraded"] = r.degraded_path;
  return j;
}

inline SampleRecord record_from_json(const nlohmann::json& j) {
  SampleRecord r;
  r.id = j.at("id");
  r.split = j.at("split");
  r.subject = j.at("subject");
  r.labels = j.at("labels").get<std::vector<std::uint8_t>>();
  r.subject_seed = j.at("seeds").at("subject");
  r.label_seed = j.at("seeds").at("labels");
  r.render_seed = j.at("seeds").at("render");
  r.mask_seed = j.at("seeds").at("mask");
  r.mask_top = j.at("mask_offset").at(0);
  r.mask_left = j.at("mask_offset").at(1);
  r.gt_path = j.at("gt");
  r.degraded_path = j.at("degraded");
  return r;
}

/// Deterministic seed of item `index` in stream `stream`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return detail::splitmix64(detail::splitmix64(seed ^ (stream * 0xd1b54a32d192ed03ULL)) + index);
}

/// Subject ids [0, train_subjects) are train-only, the rest test-only.
inline FaceStyle subject_style(std::uint64_t dataset_seed, std::size_t subject) {
  std::mt19937_64 rng(derive_seed(dataset_seed, 1, subject));
  return FaceStyle::sample(rng);
}

/// Everything needed to rebuild one sample, without touching disk.
inline SampleRecord plan_sample(const DatasetConfig& cfg, const std::string& split, std::size_t index) {
  const bool train = split == "train";
  const std::uint64_t stream = train ? 10 : 20;
  SampleRecord r;
  char name[32];
  std::snprintf(name, sizeof(name), "%06zu", index);
  r.id = split + "_" + name;
  r.split = split;
  const auto pool = train ? cfg.train_subjects : cfg.test_subjects;
  r.subject = (train ? 0 : cfg.train_subjects) + derive_seed(cfg.seed, stream, 4 * index) % pool;
  r.subject_seed = derive_seed(cfg.seed, 1, r.subject);
  r.label_seed = derive_seed(cfg.seed, stream, 4 * index + 1);
  r.render_seed = derive_seed(cfg.seed, stream, 4 * index + 2);
  r.mask_seed = derive_seed(cfg.seed, stream, 4 * index + 3);
  std::mt19937_64 label_rng(r.label_seed);
  r.labels = sample_attributes(cfg.resolved_probabilities(), label_rng);
  r.gt_path = split + "/gt/" + name + ".png";
  r.degraded_path = split + "/degraded/" + name + ".png";
  return r;
}

struct RenderedSample {
  ImageU8 gt;
  DegradedImage degraded;
};

inline RenderedSample render_sample(const DatasetConfig& cfg, SampleRecord& r) {
  SyntheticFaceParams params{r.labels, subject_style(cfg.seed, r.subject), r.render_seed};
  RenderedSample s;
  s.gt = quantize(render_face<float>(params, cfg.side));
  s.degraded = degrade(s.gt, DegradationSpec{cfg.input_side, r.mask_seed});
  r.mask_top = s.degraded.top;
  r.mask_left = s.degraded.left;
  return s;
}

inline nlohmann::json dataset_info(const DatasetConfig& cfg) {
  nlohmann::json info;
  info["n_train"] = cfg.n_train;
  info["n_test"] = cfg.n_test;
  info["side"] = cfg.side;
  info["input_side"] = cfg.input_side;
  info["n_au"] = cfg.n_au;
  info["seed"] = cfg.seed;
  info["train_subjects"] = cfg.train_subjects;
  info["test_subjects"] = cfg.test_subjects;
  info["probabilities"] = cfg.resolved_probabilities();
  info["au_names"] = std::vector<std::string>(kAuNames.begin(), kAuNames.begin() + static_cast<std::ptrdiff_t>(cfg.n_au));
  return info;
}

/// Writes train/ and test/ PNG trees, manifest.jsonl and info.json.
inline void generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw ImageIoError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());
  const auto manifest_path = out_dir / "manifest.jsonl";
  std::ofstream manifest(manifest_path, std::ios::trunc);
  if (!manifest) throw ImageIoError("cannot write " + manifest_path.string());
  for (const auto& [split, count] : {std::pair<std::string, std::size_t>{"train", cfg.n_train}, {"test", cfg.n_test}}) {
    for (std::size_t i = 0; i < count; ++i) {
      auto r = plan_sample(cfg, split, i);
      auto s = render_sample(cfg, r);
      write_png(out_dir / r.gt_path, s.gt);
      write_png(out_dir / r.degraded_path, s.degraded.image);
      manifest << to_json(r).dump() << '\n';
    }
  }
  manifest.close();
  if (!manifest) throw ImageIoError("write failed for " + manifest_path.string());
  std::ofstream info(out_dir / "info.json", std::ios::trunc);
  info << dataset_info(cfg).dump(2) << '\n';
  if (!info) throw ImageIoError("cannot write " + (out_dir / "info.json").string());
}

struct Sample {
  SampleRecord record;
  ImageU8 gt;
  ImageU8 degraded;
};

struct Dataset {
  nlohmann::json info;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t n_au() const { return info.at("n_au"); }
  std::size_t side() const { return info.at("side"); }
  std::size_t input_side() const { return info.at("input_side"); }
};

/// Loads one split as listed in the manifest.
inline Dataset load_dataset(const std::filesystem::path& dir, const std::string& split) {
  const auto info_path = dir / "info.json", manifest_path = dir / "manifest.jsonl";
  std::ifstream info_file(info_path);
  if (!info_file) throw ImageIoError("dataset: cannot read " + info_path.string());
  Dataset ds;
  try {
    ds.info = nlohmann::json::parse(info_file);
  } catch (const nlohmann::json::exception& e) {
    throw ImageIoError("dataset: " + info_path.string() + ": " + e.what());
  }
  std::ifstream manifest(manifest_path);
  if (!manifest) throw ImageIoError("dataset: cannot read " + manifest_path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    SampleRecord r;
    try {
      r = record_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ImageIoError("dataset: " + manifest_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (r.split != split) continue;
    Sample s{r, read_png(dir / r.gt_path), read_png(dir / r.degraded_path)};
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

/// Per-channel mean of the ground-truth images, [3, S, S].
inline Tensor<float> mean_image(const Dataset& ds) {
  if (ds.samples.empty()) throw std::invalid_argument("mean_image: empty dataset");
  const auto& first = ds.samples.front().gt;
  std::vector<double> acc(first.planes.size(), 0.0);
  for (const auto& s : ds.samples)
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += s.gt.planes[i] / 255.0;
  std::vector<float> v(acc.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(acc[i] / static_cast<double>(ds.size()));
  return Tensor<float>(Shape{3, first.height, first.width}, std::move(v));
}

/// Static co-activation links on a k x k grid: every patch under a brow
/// with every patch under the eye below it, nose with mouth, and each cheek
/// with the mouth. Regions are placed on a centred face at feature scale 1.
inline std::vector<std::pair<std::size_t, std::size_t>> au_region_pairs(std::size_t k, std::size_t n_au = 8) {
  auto patches_of = [k](const RegionBox& b) {
    auto cell = [k](double u) {
      return std::min<std::size_t>(k - 1, static_cast<std::size_t>(std::max(0.0, (0.5 + u) * static_cast<double>(k))));
    };
    std::vector<std::size_t> out;
    for (auto r = cell(b.y0); r <= cell(b.y1); ++r)
      for (auto c = cell(b.x0); c <= cell(b.x1); ++c) out.push_back(r * k + c);
    return out;
  };
  std::vector<std::pair<std::size_t, std::size_t>> groups{{2, 0}, {3, 1}, {7, 4}};
  if (n_au > 8) {
    groups.emplace_back(8, 4);
    groups.emplace_back(9, 4);
  }
  std::set<std::pair<std::size_t, std::size_t>> out;
  for (auto [a, b] : groups)
    for (auto p : patches_of(au_region(a)))
      for (auto q : patches_of(au_region(b)))
        if (p != q) out.emplace(std::min(p, q), std::max(p, q));
  return {out.begin(), out.end()};
}

}  // namespace igcn
