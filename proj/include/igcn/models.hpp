#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "igcn/checkpoint.hpp"
#include "igcn/graph_conv.hpp"
#include "igcn/ops.hpp"
#include "igcn/params.hpp"

namespace igcn {

/// Plain convolution with its own parameters.
template <typename T>
struct ConvLayer {
  Tensor<T> weight;
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 1;

  static ConvLayer create(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
                          std::mt19937_64& rng) {
    return {he_uniform<T>({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng),
            Tensor<T>::zeros({out_ch}, true), stride, kernel / 2};
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }
  NamedParams<T> parameters() const { return {{"weight", weight}, {"bias", bias}}; }
  std::size_t out_channels() const { return weight.dim(0); }
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;

  static LinearLayer create(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    // Glorot-uniform keeps initial logits small.
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<T> w(in * out);
    for (auto& v : w) v = static_cast<T>(u(rng));
    return {Tensor<T>({out, in}, std::move(w), true), Tensor<T>::zeros({out}, true)};
  }

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight, bias); }
  NamedParams<T> parameters() const { return {{"weight", weight}, {"bias", bias}}; }
};

/// Raw patch graphs keyed by split factor. Every IGCN layer with split k uses
/// graph k; the same set is saved with the model so restoring needs no data.
struct PatchGraphs {
  std::map<std::size_t, SquareMatrix> raw;

  AdjacencyMatrix adjacency(const PatchSplitSpec& split) const {
    auto it = raw.find(split.k);
    if (it == raw.end()) throw std::out_of_range("patch graphs: no graph for split " + std::to_string(split.k));
    return AdjacencyMatrix::from_raw(it->second);
  }

  static PatchGraphs unlinked(std::initializer_list<std::size_t> ks = {1, 2, 4, 8}) {
    PatchGraphs g;
    for (auto k : ks) g.raw[k] = SquareMatrix(k * k);
    return g;
  }

  /// Builds graph k for each k from `rules_for(k)`. The mean image is only
  /// read when a rule asks for it.
  template <typename T>
  static PatchGraphs build(const std::vector<std::size_t>& ks, const std::optional<Tensor<T>>& mean_image,
                           const std::function<AdjacencyRules(std::size_t)>& rules_for) {
    PatchGraphs g;
    for (auto k : ks) {
      const std::size_t side = mean_image ? mean_image->dim(1) : 8 * k;
      g.raw[k] = build_adjacency<T>({k, side, side}, mean_image, rules_for(k)).raw;
    }
    return g;
  }

  void store(Checkpoint& ck, const std::string& prefix) const {
    for (const auto& [k, m] : raw) ck.put<double>(prefix + std::to_string(k), Shape{m.size, m.size}, m.values);
  }

  static PatchGraphs load(const Checkpoint& ck, const std::string& prefix) {
    PatchGraphs g;
    for (const auto& [name, st] : ck.tensors) {
      if (name.rfind(prefix, 0) != 0) continue;
      const auto k = std::stoul(name.substr(prefix.size()));
      if (st.shape.size() != 2 || st.shape[0] != k * k || st.shape[1] != k * k)
        throw CheckpointError("checkpoint: graph '" + name + "' has shape " + shape_str(st.shape));
      SquareMatrix m(k * k);
      m.values = st.values;
      g.raw[k] = std::move(m);
    }
    return g;
  }
};

struct GeneratorConfig {
  std::size_t input_side = 16;
  std::size_t base_channels = 32;
  std::size_t n_rrmb = 3;
  std::size_t upsample_stages = 3;
  std::size_t kernel_size = 3;
  // Patch split of the IGCN deconvolution in each upsample stage.
  std::size_t decoder_split = 1;
  // Decoder width halves per stage down to this floor.
  std::size_t min_channels = 8;

  std::size_t output_side() const { return input_side << upsample_stages; }

  std::size_t stage_channels(std::size_t stage) const {
    std::size_t c = base_channels;
    for (std::size_t i = 0; i <= stage; ++i) c = std::max(min_channels, c / 2);
    return std::min(c, base_channels);
  }

  void validate() const {
    if (input_side == 0 || input_side % 8 != 0)
      throw std::invalid_argument("generator: input side " + std::to_string(input_side) + " must be a multiple of 8");
    if (kernel_size % 2 == 0) throw std::invalid_argument("generator: kernel_size must be odd");
    if (base_channels == 0 || min_channels == 0) throw std::invalid_argument("generator: channel counts must be positive");
    if (decoder_split == 0) throw std::invalid_argument("generator: decoder_split must be positive");
  }
};

namespace detail {

template <typename T>
void require_input(const char* who, const Tensor<T>& x, std::size_t side) {
  require_rank(who, "input", x.shape(), 4);
  if (x.dim(1) != 3) throw ShapeError(std::string(who) + ": expected 3 channels, got " + shape_str(x.shape()));
  if (x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0)
    throw ShapeError(std::string(who) + ": input " + shape_str(x.shape()) + " spatial dims must be divisible by 8");
  if (x.dim(2) != side || x.dim(3) != side)
    throw ShapeError(std::string(who) + ": input " + shape_str(x.shape()) + " does not match configured side " +
                     std::to_string(side));
}

}  // namespace detail

/// Upsample stage: IGCN deconvolution (x2) then conv + ReLU.
template <typename T>
struct UpsampleStage {
  IgcnLayer<T> up;
  ConvLayer<T> conv;

  Tensor<T> forward(const Tensor<T>& x) const { return relu(conv.forward(up.forward(x))); }

  NamedParams<T> parameters() const {
    NamedParams<T> out;
    append_params(out, "deconv.", up.parameters());
    append_params(out, "conv.", conv.parameters());
    return out;
  }
};

/// Shared decoder and head of both generators; `Body` is the block type.
template <typename T, typename Body>
class GeneratorBase {
 public:
  const GeneratorConfig& config() const { return cfg_; }

  Tensor<T> forward(const Tensor<T>& degraded) const {
    detail::require_input("generator", degraded, cfg_.input_side);
    auto x = relu(head_.forward(degraded));
    for (const auto& b : blocks_) x = add(x, b.forward(x));
    for (const auto& s : stages_) x = s.forward(x);
    return sigmoid(out_.forward(x));
  }

  NamedParams<T> parameters() const {
    NamedParams<T> out;
    append_params(out, "head.", head_.parameters());
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      append_params(out, "block" + std::to_string(i) + ".", blocks_[i].parameters());
    for (std::size_t i = 0; i < stages_.size(); ++i)
      append_params(out, "up" + std::to_string(i) + ".", stages_[i].parameters());
    append_params(out, "out.", out_.parameters());
    return out;
  }

  ConvLayer<T>& head() { return head_; }
  ConvLayer<T>& output() { return out_; }
  std::vector<Body>& blocks() { return blocks_; }
  std::vector<UpsampleStage<T>>& stages() { return stages_; }

 protected:
  template <typename MakeBody>
  void build(const GeneratorConfig& cfg, const PatchGraphs& graphs, MakeBody&& make_body, std::mt19937_64& rng) {
    cfg.validate();
    cfg_ = cfg;
    const auto c = cfg.base_channels, k = cfg.kernel_size;
    head_ = ConvLayer<T>::create(3, c, k, 1, rng);
    for (std::size_t i = 0; i < cfg.n_rrmb; ++i) blocks_.push_back(make_body(rng));
    std::size_t side = cfg.input_side, ch = c;
    for (std::size_t s = 0; s < cfg.upsample_stages; ++s) {
      const auto next = cfg.stage_channels(s);
      const PatchSplitSpec split{cfg.decoder_split, side, side};
      auto up = IgcnLayer<T>::create(split, graphs.adjacency(split), ch, next, 4, IgcnMode::deconv, 2, 1, rng);
      stages_.push_back({std::move(up), ConvLayer<T>::create(next, next, k, 1, rng)});
      side *= 2;
      ch = next;
    }
    out_ = ConvLayer<T>::create(ch, 3, k, 1, rng);
  }

  GeneratorConfig cfg_;
  ConvLayer<T> head_;
  std::vector<Body> blocks_;
  std::vector<UpsampleStage<T>> stages_;
  ConvLayer<T> out_;
};

/// Head conv, RRMB blocks with additive skips, upsampling, sigmoid output.
template <typename T>
class Generator : public GeneratorBase<T, RrmbBlock<T>> {
 public:
  Generator() = default;
  Generator(const GeneratorConfig& cfg, const PatchGraphs& graphs, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto side = cfg.input_side;
    this->build(
        cfg, graphs,
        [&](std::mt19937_64& r) {
          return RrmbBlock<T>::create(cfg.base_channels, side, side, cfg.kernel_size,
                                      [&](const PatchSplitSpec& s) { return graphs.adjacency(s); }, r);
        },
        rng);
  }
};

/// x + relu(conv(x)): the RRMB with only its image-level branch.
template <typename T>
struct ResidualConvBlock {
  ConvLayer<T> conv;
  Tensor<T> forward(const Tensor<T>& x) const { return relu(conv.forward(x)); }
  NamedParams<T> parameters() const { return conv.parameters(); }
};

template <typename T>
class BaselineGenerator : public GeneratorBase<T, ResidualConvBlock<T>> {
 public:
  BaselineGenerator() = default;
  BaselineGenerator(const GeneratorConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    GeneratorConfig plain = cfg;
    plain.decoder_split = 1;
    this->build(
        plain, PatchGraphs::unlinked({1}),
        [&](std::mt19937_64& r) {
          return ResidualConvBlock<T>{ConvLayer<T>::create(cfg.base_channels, cfg.base_channels, cfg.kernel_size, 1, r)};
        },
        rng);
  }
};

struct DiscriminatorConfig {
  std::size_t image_side = 128;
  std::size_t base_channels = 16;
  std::size_t max_channels = 64;
  std::size_t kernel_size = 3;
};

/// Stride-2 conv stack down to 4x4, then a linear logit.
template <typename T>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.image_side < 8 || (cfg.image_side & (cfg.image_side - 1)) != 0)
      throw std::invalid_argument("discriminator: image side must be a power of two >= 8");
    std::mt19937_64 rng(seed);
    std::size_t in = 3, ch = cfg.base_channels;
    for (std::size_t side = cfg.image_side; side > 4; side /= 2) {
      convs_.push_back(ConvLayer<T>::create(in, ch, cfg.kernel_size, 2, rng));
      in = ch;
      ch = std::min(cfg.max_channels, ch * 2);
    }
    fc_ = LinearLayer<T>::create(in * 16, 1, rng);
  }

  Tensor<T> forward(const Tensor<T>& image) const {
    detail::require_input("discriminator", image, cfg_.image_side);
    auto x = image;
    for (const auto& c : convs_) x = relu(c.forward(x));
    return fc_.forward(reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)}));
  }

  NamedParams<T> parameters() const {
    NamedParams<T> out;
    for (std::size_t i = 0; i < convs_.size(); ++i)
      append_params(out, "conv" + std::to_string(i) + ".", convs_[i].parameters());
    append_params(out, "fc.", fc_.parameters());
    return out;
  }

  const DiscriminatorConfig& config() const { return cfg_; }

 private:
  DiscriminatorConfig cfg_;
  std::vector<ConvLayer<T>> convs_;
  LinearLayer<T> fc_;
};

struct ClassifierConfig {
  std::size_t image_side = 128;
  std::size_t n_au = 8;
  std::size_t base_channels = 16;
  std::size_t max_channels = 32;
  std::size_t kernel_size = 3;
};

template <typename T>
struct ClassifierOutput {
  Tensor<T> logits;   // [N, n_au], pre-activation
  Tensor<T> shallow;  // first conv stage
  Tensor<T> deep;     // RRMB output
};

/// Stride-2 conv trunk down to 8x8, one RRMB, global average pool, linear
/// head with one logit per attribute.
template <typename T>
class AuClassifier {
 public:
  AuClassifier() = default;
  AuClassifier(const ClassifierConfig& cfg, const PatchGraphs& graphs, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.image_side < 16 || (cfg.image_side & (cfg.image_side - 1)) != 0)
      throw std::invalid_argument("classifier: image side must be a power of two >= 16");
    if (cfg.n_au == 0) throw std::invalid_argument("classifier: n_au must be positive");
    std::mt19937_64 rng(seed);
    std::size_t in = 3, ch = cfg.base_channels;
    for (std::size_t side = cfg.image_side; side > 8; side /= 2) {
      trunk_.push_back(ConvLayer<T>::create(in, ch, cfg.kernel_size, 2, rng));
      in = ch;
      ch = std::min(cfg.max_channels, ch * 2);
    }
    rrmb_ = RrmbBlock<T>::create(in, 8, 8, cfg.kernel_size,
                                 [&](const PatchSplitSpec& s) { return graphs.adjacency(s); }, rng);
    fc_ = LinearLayer<T>::create(in, cfg.n_au, rng);
  }

  ClassifierOutput<T> forward_all(const Tensor<T>& image) const {
    detail::require_input("classifier", image, cfg_.image_side);
    ClassifierOutput<T> out;
    auto x = image;
    for (std::size_t i = 0; i < trunk_.size(); ++i) {
      x = relu(trunk_[i].forward(x));
      if (i == 0) out.shallow = x;
    }
    auto deep = rrmb_.forward(x);
    out.logits = fc_.forward(global_avg_pool(deep));
    out.deep = tap_scale_[1] == 1.0 ? deep : scale(deep, static_cast<T>(tap_scale_[1]));
    if (tap_scale_[0] != 1.0) out.shallow = scale(out.shallow, static_cast<T>(tap_scale_[0]));
    return out;
  }

  Tensor<T> forward(const Tensor<T>& image) const { return forward_all(image).logits; }

  NamedParams<T> parameters() const {
    NamedParams<T> out;
    for (std::size_t i = 0; i < trunk_.size(); ++i)
      append_params(out, "trunk" + std::to_string(i) + ".", trunk_[i].parameters());
    append_params(out, "rrmb.", rrmb_.parameters());
    append_params(out, "fc.", fc_.parameters());
    return out;
  }

  void freeze() {
    auto p = parameters();
    set_requires_grad(p, false);
    frozen_ = true;
  }
  bool is_frozen() const { return frozen_; }

  /// Fixed multipliers on the exposed shallow and deep taps; logits are unaffected.
  const std::array<double, 2>& tap_scale() const { return tap_scale_; }
  void set_tap_scale(const std::array<double, 2>& s) {
    if (!(s[0] > 0 && s[1] > 0)) throw std::invalid_argument("classifier: tap scales must be positive");
    tap_scale_ = s;
  }

  const ClassifierConfig& config() const { return cfg_; }

 private:
  ClassifierConfig cfg_;
  std::vector<ConvLayer<T>> trunk_;
  RrmbBlock<T> rrmb_;
  LinearLayer<T> fc_;
  std::array<double, 2> tap_scale_{1.0, 1.0};
  bool frozen_ = false;
};

/// Writes every parameter under `prefix`.
template <typename T>
void store_params(Checkpoint& ck, const std::string& prefix, const NamedParams<T>& params) {
  for (const auto& [name, t] : params) ck.put(prefix + name, t);
}

template <typename T>
void load_params(const Checkpoint& ck, const std::string& prefix, const NamedParams<T>& params) {
  for (auto [name, t] : params) ck.load_into(prefix + name, t);
}

}  // namespace igcn
