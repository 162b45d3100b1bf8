#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "igcn/ops.hpp"
#include "igcn/params.hpp"
#include "igcn/tensor.hpp"

namespace igcn {

/// k x k grid over a feature map of height x width; P = k^2 patches numbered
/// row-major.
struct PatchSplitSpec {
  std::size_t k = 1;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t patches() const { return k * k; }
  std::size_t patch_height() const { return height / k; }
  std::size_t patch_width() const { return width / k; }

  void validate() const {
    if (k == 0) throw ShapeError("patch split: k must be positive");
    if (height == 0 || width == 0 || height % k != 0 || width % k != 0) {
      throw ShapeError("patch split: feature " + std::to_string(height) + "x" + std::to_string(width) +
                       " is not divisible into a " + std::to_string(k) + "x" + std::to_string(k) + " grid");
    }
  }
};

/// [N, C, H, W] -> [P, N, C, H/k, W/k]; patch p = (r, c) with p = r * k + c.
template <typename T>
Tensor<T> split_patches(const Tensor<T>& feature, const PatchSplitSpec& spec) {
  detail::require_rank("split_patches", "feature", feature.shape(), 4);
  spec.validate();
  const auto n = feature.dim(0), ch = feature.dim(1), h = feature.dim(2), w = feature.dim(3);
  if (h != spec.height || w != spec.width) {
    throw ShapeError("split_patches: feature " + shape_str(feature.shape()) + " does not match split spec " +
                     std::to_string(spec.height) + "x" + std::to_string(spec.width));
  }
  const auto k = spec.k, ph = h / k, pw = w / k;
  // index map: output flat index -> input flat index
  std::vector<std::size_t> src(feature.numel());
  std::size_t o = 0;
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t i = 0; i < n * ch; ++i)
        for (std::size_t y = 0; y < ph; ++y)
          for (std::size_t x = 0; x < pw; ++x) src[o++] = (i * h + r * ph + y) * w + c * pw + x;
  std::vector<T> out(src.size());
  for (std::size_t j = 0; j < src.size(); ++j) out[j] = feature.values()[src[j]];
  return Tensor<T>::make_result(Shape{k * k, n, ch, ph, pw}, std::move(out), {feature},
                                [src = std::move(src)](Node<T>& self) {
                                  if (T* g = parent_grad(self, 0))
                                    for (std::size_t j = 0; j < src.size(); ++j) g[src[j]] += self.grad[j];
                                });
}

/// Inverse of split_patches: [P, N, C, ph, pw] -> [N, C, k*ph, k*pw].
template <typename T>
Tensor<T> merge_patches(const Tensor<T>& patches, std::size_t k) {
  detail::require_rank("merge_patches", "patches", patches.shape(), 5);
  if (k == 0 || patches.dim(0) != k * k) {
    throw ShapeError("merge_patches: expected " + std::to_string(k * k) + " patches, got " +
                     shape_str(patches.shape()));
  }
  const auto n = patches.dim(1), ch = patches.dim(2), ph = patches.dim(3), pw = patches.dim(4);
  const auto h = ph * k, w = pw * k;
  std::vector<std::size_t> dst(patches.numel());
  std::size_t o = 0;
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t i = 0; i < n * ch; ++i)
        for (std::size_t y = 0; y < ph; ++y)
          for (std::size_t x = 0; x < pw; ++x) dst[o++] = (i * h + r * ph + y) * w + c * pw + x;
  std::vector<T> out(dst.size());
  for (std::size_t j = 0; j < dst.size(); ++j) out[dst[j]] = patches.values()[j];
  return Tensor<T>::make_result(Shape{n, ch, h, w}, std::move(out), {patches}, [dst = std::move(dst)](Node<T>& self) {
    if (T* g = parent_grad(self, 0))
      for (std::size_t j = 0; j < dst.size(); ++j) g[j] += self.grad[dst[j]];
  });
}

template <typename T>
Tensor<T> merge_patches(const Tensor<T>& patches, const PatchSplitSpec& spec) {
  return merge_patches(patches, spec.k);
}

// ---------------------------------------------------------------------------
// Adjacency

/// Square matrix stored row-major.
struct SquareMatrix {
  std::size_t size = 0;
  std::vector<double> values;

  SquareMatrix() = default;
  explicit SquareMatrix(std::size_t n, double fill = 0.0) : size(n), values(n * n, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return values[i * size + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * size + j]; }

  bool symmetric(double tol = 0.0) const {
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = i + 1; j < size; ++j)
        if (std::abs((*this)(i, j) - (*this)(j, i)) > tol) return false;
    return true;
  }

  static SquareMatrix identity(std::size_t n) {
    SquareMatrix m(n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
};

/// Symmetric normalisation with self-loops: D^-1/2 (raw + I) D^-1/2, D the
/// degree matrix of raw + I.
inline SquareMatrix normalize_adjacency(const SquareMatrix& raw) {
  if (!raw.symmetric()) throw std::invalid_argument("normalize_adjacency: raw adjacency is not symmetric");
  for (std::size_t i = 0; i < raw.size; ++i) {
    if (raw(i, i) != 0.0) throw std::invalid_argument("normalize_adjacency: raw adjacency has a self-loop at " + std::to_string(i));
    for (std::size_t j = 0; j < raw.size; ++j)
      if (raw(i, j) != 0.0 && raw(i, j) != 1.0)
        throw std::invalid_argument("normalize_adjacency: raw adjacency must be binary");
  }
  const auto n = raw.size;
  std::vector<double> inv_sqrt_deg(n);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 1.0;
    for (std::size_t j = 0; j < n; ++j) d += raw(i, j);
    inv_sqrt_deg[i] = 1.0 / std::sqrt(d);
  }
  SquareMatrix out(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double a = raw(i, j) + (i == j ? 1.0 : 0.0);
      out(i, j) = a * inv_sqrt_deg[i] * inv_sqrt_deg[j];
    }
  return out;
}

/// Largest |eigenvalue| by power iteration.
inline double spectral_radius(const SquareMatrix& m, std::size_t iterations = 500) {
  const auto n = m.size;
  if (n == 0) return 0.0;
  std::vector<double> v(n), next(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
  double estimate = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += m(i, j) * v[j];
      next[i] = acc;
      norm += acc * acc;
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) return 0.0;
    double vnorm = 0.0;
    for (double x : v) vnorm += x * x;
    estimate = norm / std::sqrt(vnorm);
    for (std::size_t i = 0; i < n; ++i) v[i] = next[i] / norm;
  }
  return estimate;
}

struct AdjacencyMatrix {
  SquareMatrix raw;
  SquareMatrix normalized;

  std::size_t size() const { return raw.size; }

  static AdjacencyMatrix from_raw(SquareMatrix raw) {
    AdjacencyMatrix a;
    a.normalized = normalize_adjacency(raw);
    a.raw = std::move(raw);
    return a;
  }

  /// No links: the normalised form is the identity.
  static AdjacencyMatrix unlinked(std::size_t patches) { return from_raw(SquareMatrix(patches)); }
};

/// Link rules for build_adjacency. Every enabled rule that fires sets a link.
struct AdjacencyRules {
  bool use_symmetry = true;
  // Cosine-similarity rule, enabled when set; requires a mean image.
  std::optional<double> sim_threshold;
  std::vector<std::pair<std::size_t, std::size_t>> au_pairs;
};

/// Cosine similarity of two patches after removing each channel's global mean
/// from the image, so that uniformly bright regions do not all look alike.
inline double centered_patch_cosine(const std::vector<double>& centered, std::size_t channels, std::size_t h,
                                    std::size_t w, std::size_t k, std::size_t p, std::size_t q) {
  const auto ph = h / k, pw = w / k;
  const auto pr = p / k, pc = p % k, qr = q / k, qc = q % k;
  double dot = 0, np = 0, nq = 0;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x) {
        const double a = centered[(c * h + pr * ph + y) * w + pc * pw + x];
        const double b = centered[(c * h + qr * ph + y) * w + qc * pw + x];
        dot += a * b;
        np += a * a;
        nq += b * b;
      }
  if (np == 0.0 && nq == 0.0) return 1.0;  // identical (flat) patches
  if (np == 0.0 || nq == 0.0) return 0.0;
  return dot / std::sqrt(np * nq);
}

/// Builds the raw patch-relation graph and its normalised form.
///   (a) mirror symmetry links (r, c) with (r, k-1-c);
///   (b) cosine similarity of mean-image patches >= threshold;
///   (c) explicit pairs from `rules.au_pairs`.
/// `mean_image` is [C, H, W] with H and W divisible by k.
template <typename T = float>
AdjacencyMatrix build_adjacency(const PatchSplitSpec& spec, const std::optional<Tensor<T>>& mean_image,
                                const AdjacencyRules& rules) {
  spec.validate();
  const auto k = spec.k, p_count = spec.patches();
  SquareMatrix raw(p_count);
  auto link = [&](std::size_t i, std::size_t j) {
    if (i >= p_count || j >= p_count) {
      throw std::out_of_range("build_adjacency: pair (" + std::to_string(i) + "," + std::to_string(j) +
                              ") outside " + std::to_string(p_count) + " patches");
    }
    if (i == j) return;
    raw(i, j) = raw(j, i) = 1.0;
  };

  if (rules.use_symmetry)
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t c = 0; c < k; ++c) link(r * k + c, r * k + (k - 1 - c));

  if (rules.sim_threshold) {
    const double thr = *rules.sim_threshold;
    if (!(thr >= -1.0 && thr <= 1.0)) throw std::invalid_argument("build_adjacency: sim_threshold outside [-1, 1]");
    if (!mean_image) throw std::invalid_argument("build_adjacency: similarity rule needs a mean image");
    const auto& img = *mean_image;
    detail::require_rank("build_adjacency", "mean image", img.shape(), 3);
    const auto ch = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (h % k != 0 || w % k != 0) {
      throw ShapeError("build_adjacency: mean image " + shape_str(img.shape()) + " not divisible by k=" +
                       std::to_string(k));
    }
    std::vector<double> centered(img.numel());
    for (std::size_t c = 0; c < ch; ++c) {
      double mu = 0;
      for (std::size_t i = 0; i < h * w; ++i) mu += img.values()[c * h * w + i];
      mu /= static_cast<double>(h * w);
      for (std::size_t i = 0; i < h * w; ++i) centered[c * h * w + i] = img.values()[c * h * w + i] - mu;
    }
    for (std::size_t i = 0; i < p_count; ++i)
      for (std::size_t j = i + 1; j < p_count; ++j)
        if (centered_patch_cosine(centered, ch, h, w, k, i, j) >= thr) link(i, j);
  }

  for (const auto& [i, j] : rules.au_pairs) link(i, j);
  return AdjacencyMatrix::from_raw(std::move(raw));
}

/// Plain-text matrix: one row per line, space separated.
inline void write_matrix_text(const std::filesystem::path& path, const SquareMatrix& m) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write matrix file " + path.string());
  f << std::setprecision(17);
  for (std::size_t i = 0; i < m.size; ++i) {
    for (std::size_t j = 0; j < m.size; ++j) f << (j ? " " : "") << m(i, j);
    f << '\n';
  }
}

inline SquareMatrix read_matrix_text(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read matrix file " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::istringstream ls(line);
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    if (!ls.eof()) throw std::runtime_error("matrix file " + path.string() + ": unparsable entry in row " + std::to_string(rows.size()));
    if (!row.empty()) rows.push_back(std::move(row));
  }
  SquareMatrix m(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) {
      throw std::runtime_error("matrix file " + path.string() + ": row " + std::to_string(i) + " has " +
                               std::to_string(rows[i].size()) + " entries, expected " + std::to_string(rows.size()));
    }
    for (std::size_t j = 0; j < rows.size(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

// ---------------------------------------------------------------------------
// IGCN

/// out[i] = sum_j A[i][j] * h[j] over the leading patch axis of h [P, ...].
/// A is a constant.
template <typename T>
Tensor<T> patch_mix(const Tensor<T>& h, const SquareMatrix& a) {
  if (h.rank() < 1 || h.dim(0) != a.size) {
    throw ShapeError("patch_mix: adjacency is " + std::to_string(a.size) + "x" + std::to_string(a.size) +
                     " but features have shape " + shape_str(h.shape()));
  }
  const auto p = a.size, m = h.numel() / std::max<std::size_t>(p, 1);
  detail::RowMat<T> am(p, p);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) am(i, j) = static_cast<T>(a(i, j));
  std::vector<T> out(h.numel());
  detail::MatMap<T>(out.data(), p, m).noalias() = am * detail::ConstMatMap<T>(h.data(), p, m);
  return Tensor<T>::make_result(h.shape(), std::move(out), {h}, [am = std::move(am), p, m](Node<T>& self) {
    if (T* g = parent_grad(self, 0))
      detail::MatMap<T>(g, p, m).noalias() += am.transpose() * detail::ConstMatMap<T>(self.grad.data(), p, m);
  });
}

enum class IgcnMode { conv, deconv };

/// One IGCN layer: a convolution (or transposed convolution) with a single
/// shared (W, b) applied to every patch, ReLU, then mixing of the activated
/// patches through the normalised adjacency, and re-assembly of the map.
template <typename T>
class IgcnLayer {
 public:
  IgcnLayer() = default;

  IgcnLayer(PatchSplitSpec split, AdjacencyMatrix adjacency, Tensor<T> weight, Tensor<T> bias, IgcnMode mode,
            std::size_t stride, std::size_t padding)
      : split_(split),
        adjacency_(std::move(adjacency)),
        weight_(std::move(weight)),
        bias_(std::move(bias)),
        mode_(mode),
        stride_(stride),
        padding_(padding) {
    split_.validate();
    if (adjacency_.size() != split_.patches()) {
      throw ShapeError("igcn: adjacency has " + std::to_string(adjacency_.size()) + " nodes but the split has " +
                       std::to_string(split_.patches()) + " patches");
    }
    detail::require_rank("igcn", "weight", weight_.shape(), 4);
    if (bias_.rank() != 1 || bias_.dim(0) != out_channels()) {
      throw ShapeError("igcn: bias " + shape_str(bias_.shape()) + " does not match weight " + shape_str(weight_.shape()));
    }
  }

  /// He-uniform initialised layer. Conv weights are [out, in, k, k],
  /// deconv weights [in, out, k, k].
  static IgcnLayer create(PatchSplitSpec split, AdjacencyMatrix adjacency, std::size_t in_ch, std::size_t out_ch,
                          std::size_t kernel, IgcnMode mode, std::size_t stride, std::size_t padding,
                          std::mt19937_64& rng) {
    Tensor<T> w;
    if (mode == IgcnMode::conv) {
      w = he_uniform<T>({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng);
    } else {
      w = he_uniform<T>({in_ch, out_ch, kernel, kernel}, in_ch * kernel * kernel / (stride * stride), rng);
    }
    return IgcnLayer(split, std::move(adjacency), std::move(w), Tensor<T>::zeros({out_ch}, true), mode, stride,
                     padding);
  }

  std::size_t in_channels() const { return mode_ == IgcnMode::conv ? weight_.dim(1) : weight_.dim(0); }
  std::size_t out_channels() const { return mode_ == IgcnMode::conv ? weight_.dim(0) : weight_.dim(1); }

  Shape output_shape(const Shape& input) const {
    const auto kh = weight_.dim(2);
    const auto ph = split_.patch_height(), pw = split_.patch_width();
    const auto oh = mode_ == IgcnMode::conv ? conv_output_size(ph, kh, stride_, padding_)
                                            : deconv_output_size(ph, kh, stride_, padding_);
    const auto ow = mode_ == IgcnMode::conv ? conv_output_size(pw, kh, stride_, padding_)
                                            : deconv_output_size(pw, kh, stride_, padding_);
    return Shape{input.at(0), out_channels(), oh * split_.k, ow * split_.k};
  }

  Tensor<T> forward(const Tensor<T>& feature) const {
    detail::require_rank("igcn", "feature", feature.shape(), 4);
    if (feature.dim(1) != in_channels()) {
      throw ShapeError("igcn: feature " + shape_str(feature.shape()) + " has " + std::to_string(feature.dim(1)) +
                       " channels, layer expects " + std::to_string(in_channels()));
    }
    const auto n = feature.dim(0), c = feature.dim(1), p = split_.patches();
    auto patches = split_patches(feature, split_);
    auto flat = reshape(patches, Shape{p * n, c, split_.patch_height(), split_.patch_width()});
    auto h = relu(mode_ == IgcnMode::conv ? conv2d(flat, weight_, bias_, stride_, padding_)
                                          : deconv2d(flat, weight_, bias_, stride_, padding_));
    const Shape hs = h.shape();
    auto mixed = patch_mix(reshape(h, Shape{p, n, hs[1], hs[2], hs[3]}), adjacency_.normalized);
    return merge_patches(mixed, split_.k);
  }

  NamedParams<T> parameters() const { return {{"weight", weight_}, {"bias", bias_}}; }

  const PatchSplitSpec& split() const { return split_; }
  const AdjacencyMatrix& adjacency() const { return adjacency_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  IgcnMode mode() const { return mode_; }
  std::size_t stride() const { return stride_; }
  std::size_t padding() const { return padding_; }

 private:
  PatchSplitSpec split_;
  AdjacencyMatrix adjacency_;
  Tensor<T> weight_;
  Tensor<T> bias_;
  IgcnMode mode_ = IgcnMode::conv;
  std::size_t stride_ = 1;
  std::size_t padding_ = 1;
};

/// Split factors of the three RRMB branches.
inline constexpr std::array<std::size_t, 3> kRrmbSplits{1, 2, 8};

/// Region relation modelling block: image-, object- and patch-level IGCN
/// branches summed pixel-wise.
template <typename T>
class RrmbBlock {
 public:
  RrmbBlock() = default;

  RrmbBlock(IgcnLayer<T> branch_1x1, IgcnLayer<T> branch_2x2, IgcnLayer<T> branch_8x8)
      : branches_{std::move(branch_1x1), std::move(branch_2x2), std::move(branch_8x8)} {
    const Shape probe{1, branches_[0].in_channels(), branches_[0].split().height, branches_[0].split().width};
    const Shape expected = branches_[0].output_shape(probe);
    for (std::size_t i = 1; i < 3; ++i) {
      const auto& b = branches_[i];
      const Shape in{1, b.in_channels(), b.split().height, b.split().width};
      if (in != probe || b.output_shape(in) != expected) {
        throw ShapeError("rrmb: branch " + std::to_string(i) + " maps " + shape_str(in) + " to " +
                         shape_str(b.output_shape(in)) + ", branch 0 maps " + shape_str(probe) + " to " +
                         shape_str(expected));
      }
    }
  }

  /// Same-size block (stride 1, padding kernel/2) over a height x width map.
  /// `adjacency_for(k)` supplies the graph for each split factor.
  template <typename AdjacencyFn>
  static RrmbBlock create(std::size_t channels, std::size_t height, std::size_t width, std::size_t kernel,
                          AdjacencyFn&& adjacency_for, std::mt19937_64& rng) {
    std::array<IgcnLayer<T>, 3> layers;
    for (std::size_t i = 0; i < 3; ++i) {
      const PatchSplitSpec split{kRrmbSplits[i], height, width};
      layers[i] = IgcnLayer<T>::create(split, adjacency_for(split), channels, channels, kernel, IgcnMode::conv, 1,
                                       kernel / 2, rng);
    }
    return RrmbBlock(std::move(layers[0]), std::move(layers[1]), std::move(layers[2]));
  }

  Tensor<T> forward(const Tensor<T>& feature) const {
    if (feature.rank() != 4 || feature.dim(2) % 8 != 0 || feature.dim(3) % 8 != 0) {
      throw ShapeError("rrmb: feature " + shape_str(feature.shape()) + " must be [N,C,H,W] with H, W divisible by 8");
    }
    auto out = add(branches_[0].forward(feature), branches_[1].forward(feature));
    return add(out, branches_[2].forward(feature));
  }

  NamedParams<T> parameters() const {
    NamedParams<T> out;
    for (std::size_t i = 0; i < 3; ++i)
      append_params(out, "split" + std::to_string(branches_[i].split().k) + ".", branches_[i].parameters());
    return out;
  }

  const IgcnLayer<T>& branch(std::size_t i) const { return branches_.at(i); }
  IgcnLayer<T>& branch(std::size_t i) { return branches_.at(i); }

 private:
  std::array<IgcnLayer<T>, 3> branches_;
};

}  // namespace igcn
