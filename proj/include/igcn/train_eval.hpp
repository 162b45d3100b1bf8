#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "igcn/adam.hpp"
#include "igcn/checkpoint.hpp"
#include "igcn/losses.hpp"
#include "igcn/metrics.hpp"
#include "igcn/models.hpp"
#include "igcn/synthdata.hpp"

namespace igcn {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch_size = 8;
  std::size_t kernel_size = 3;
  std::size_t g_steps_per_d_step = 3;
  double lambda1 = 0.001;
  double lambda2 = 0.001;
  double lambda3 = 0.5;
  std::size_t epochs = 14;
  std::uint64_t seed = 0;
  std::string data_dir = "data";
  std::string out_dir = "runs";
  std::size_t n_au = 8;
  std::size_t base_channels = 32;
  std::size_t n_rrmb = 3;
  double sim_threshold = 0.9;

  std::string generator = "igcn";  // or "baseline"
  std::string run_name;             // checkpoint stem; defaults to the generator kind
  std::size_t d_base_channels = 16;
  std::size_t cls_base_channels = 16;
  std::size_t cls_epochs = 12;
  double cls_lr = 1e-3;
  double cls_blur_prob = 0.8;       // chance a pretraining image is bicubic-blurred
  std::size_t warmup_epochs = 10;   // leading epochs with a pixel-only generator loss
  std::size_t eval_samples = 64;

  LossWeights weights() const { return {lambda1, lambda2, lambda3}; }
  std::string stem() const { return run_name.empty() ? generator : run_name; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("config: " + m); };
    if (!(lr > 0) || !std::isfinite(lr)) fail("lr must be a positive number");
    if (!(cls_lr > 0) || !std::isfinite(cls_lr)) fail("cls_lr must be a positive number");
    if (batch_size == 0) fail("batch_size must be positive");
    if (kernel_size % 2 == 0) fail("kernel_size must be odd");
    if (g_steps_per_d_step == 0) fail("g_steps_per_d_step must be positive");
    if (n_au == 0 || n_au > kMaxAus) fail("n_au must be in [1, 12]");
    if (base_channels == 0 || d_base_channels == 0 || cls_base_channels == 0) fail("channel counts must be positive");
    if (!(cls_blur_prob >= 0.0 && cls_blur_prob <= 1.0)) fail("cls_blur_prob must lie in [0, 1]");
    if (!(sim_threshold >= -1.0 && sim_threshold <= 1.0)) fail("sim_threshold must lie in [-1, 1]");
    if (generator != "igcn" && generator != "baseline") fail("generator must be 'igcn' or 'baseline', got '" + generator + "'");
    weights().validate();
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"kernel_size", c.kernel_size},
          {"g_steps_per_d_step", c.g_steps_per_d_step},
          {"lambda1", c.lambda1},
          {"lambda2", c.lambda2},
          {"lambda3", c.lambda3},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"data_dir", c.data_dir},
          {"out_dir", c.out_dir},
          {"n_au", c.n_au},
          {"base_channels", c.base_channels},
          {"n_rrmb", c.n_rrmb},
          {"sim_threshold", c.sim_threshold},
          {"generator", c.generator},
          {"run_name", c.run_name},
          {"d_base_channels", c.d_base_channels},
          {"cls_base_channels", c.cls_base_channels},
          {"cls_epochs", c.cls_epochs},
          {"cls_lr", c.cls_lr},
          {"cls_blur_prob", c.cls_blur_prob},
          {"warmup_epochs", c.warmup_epochs},
          {"eval_samples", c.eval_samples}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  TrainConfig c;
  const auto known = to_json(c);
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw std::invalid_argument("config: unknown key '" + k + "'");
  auto get = [&](const char* k, auto& field) {
    if (!j.contains(k)) return;
    try {
      j.at(k).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument(std::string("config: bad value for '") + k + "': " + j.at(k).dump());
    }
  };
  get("lr", c.lr);
  get("batch_size", c.batch_size);
  get("kernel_size", c.kernel_size);
  get("g_steps_per_d_step", c.g_steps_per_d_step);
  get("lambda1", c.lambda1);
  get("lambda2", c.lambda2);
  get("lambda3", c.lambda3);
  get("epochs", c.epochs);
  get("seed", c.seed);
  get("data_dir", c.data_dir);
  get("out_dir", c.out_dir);
  get("n_au", c.n_au);
  get("base_channels", c.base_channels);
  get("n_rrmb", c.n_rrmb);
  get("sim_threshold", c.sim_threshold);
  get("generator", c.generator);
  get("run_name", c.run_name);
  get("d_base_channels", c.d_base_channels);
  get("cls_base_channels", c.cls_base_channels);
  get("cls_epochs", c.cls_epochs);
  get("cls_lr", c.cls_lr);
  get("cls_blur_prob", c.cls_blur_prob);
  get("warmup_epochs", c.warmup_epochs);
  get("eval_samples", c.eval_samples);
  c.validate();
  return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot read " + path.string());
  try {
    return train_config_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config: " + path.string() + ": " + e.what());
  }
}

/// Sets one key from its command-line spelling, parsed by the key's type.
inline void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value) {
  auto j = to_json(cfg);
  if (!j.contains(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
  if (j[key].is_string()) {
    j[key] = value;
  } else {
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::parse_error&) {
      throw std::invalid_argument("config: '" + key + "' expects a number, got '" + value + "'");
    }
    if (!parsed.is_number()) throw std::invalid_argument("config: '" + key + "' expects a number, got '" + value + "'");
    if (j[key].is_number_unsigned() && !parsed.is_number_unsigned())
      throw std::invalid_argument("config: '" + key + "' expects a non-negative integer, got '" + value + "'");
    j[key] = parsed;
  }
  cfg = train_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Batching

inline Tensor<float> image_batch(const std::vector<const ImageU8*>& images) {
  if (images.empty()) throw std::invalid_argument("image_batch: empty batch");
  const auto h = images[0]->height, w = images[0]->width, per = 3 * h * w;
  std::vector<float> v(images.size() * per);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->height != h || images[i]->width != w) throw ShapeError("image_batch: mixed image sizes");
    for (std::size_t j = 0; j < per; ++j) v[i * per + j] = images[i]->planes[j] / 255.0f;
  }
  return Tensor<float>(Shape{images.size(), 3, h, w}, std::move(v));
}

struct Batch {
  Tensor<float> gt;
  Tensor<float> degraded;
  Tensor<float> labels;
};

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<const ImageU8*> gt, deg;
  std::vector<float> labels;
  for (auto i : idx) {
    const auto& s = ds.samples.at(i);
    gt.push_back(&s.gt);
    deg.push_back(&s.degraded);
    for (auto l : s.record.labels) labels.push_back(static_cast<float>(l));
  }
  const auto n_au = ds.samples.at(idx[0]).record.labels.size();
  return {image_batch(gt), image_batch(deg), Tensor<float>(Shape{idx.size(), n_au}, std::move(labels))};
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// Item i of a batch, keeping a leading dimension of 1.
inline Tensor<float> slice_sample(const Tensor<float>& batch, std::size_t i) {
  const auto per = batch.numel() / batch.dim(0);
  Shape s = batch.shape();
  s[0] = 1;
  return Tensor<float>(s, std::vector<float>(batch.values().begin() + i * per, batch.values().begin() + (i + 1) * per));
}

// ---------------------------------------------------------------------------
// Model construction

inline PatchGraphs build_patch_graphs(const TrainConfig& cfg, const Tensor<float>& mean, std::size_t n_au) {
  std::optional<Tensor<float>> m(mean);
  return PatchGraphs::build<float>({1, 2, 8}, m, [&](std::size_t k) {
    AdjacencyRules r;
    r.use_symmetry = true;
    r.sim_threshold = cfg.sim_threshold;
    r.au_pairs = au_region_pairs(k, n_au);
    return r;
  });
}

inline std::size_t upsample_stages_for(std::size_t side, std::size_t input_side) {
  std::size_t stages = 0;
  for (auto s = input_side; s < side; s *= 2) ++stages;
  if ((input_side << stages) != side)
    throw std::invalid_argument("ground-truth side " + std::to_string(side) + " is not input side " +
                                std::to_string(input_side) + " times a power of two");
  return stages;
}

inline GeneratorConfig generator_config(const TrainConfig& cfg, std::size_t side, std::size_t input_side) {
  GeneratorConfig g;
  g.input_side = input_side;
  g.base_channels = cfg.base_channels;
  g.n_rrmb = cfg.n_rrmb;
  g.upsample_stages = upsample_stages_for(side, input_side);
  g.kernel_size = cfg.kernel_size;
  g.validate();
  return g;
}

inline ClassifierConfig classifier_config(const TrainConfig& cfg, std::size_t side) {
  return {side, cfg.n_au, cfg.cls_base_channels, 2 * cfg.cls_base_channels, cfg.kernel_size};
}

inline nlohmann::json to_json(const GeneratorConfig& g) {
  return {{"input_side", g.input_side},         {"base_channels", g.base_channels},
          {"n_rrmb", g.n_rrmb},                 {"upsample_stages", g.upsample_stages},
          {"kernel_size", g.kernel_size},       {"decoder_split", g.decoder_split},
          {"min_channels", g.min_channels}};
}

inline GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig g;
  g.input_side = j.at("input_side");
  g.base_channels = j.at("base_channels");
  g.n_rrmb = j.at("n_rrmb");
  g.upsample_stages = j.at("upsample_stages");
  g.kernel_size = j.at("kernel_size");
  g.decoder_split = j.at("decoder_split");
  g.min_channels = j.at("min_channels");
  g.validate();
  return g;
}

inline nlohmann::json to_json(const ClassifierConfig& c) {
  return {{"image_side", c.image_side},
          {"n_au", c.n_au},
          {"base_channels", c.base_channels},
          {"max_channels", c.max_channels},
          {"kernel_size", c.kernel_size}};
}

inline ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
  return {j.at("image_side"), j.at("n_au"), j.at("base_channels"), j.at("max_channels"), j.at("kernel_size")};
}

// ---------------------------------------------------------------------------
// Classifier pretraining

struct ClassifierEvaluation {
  AuMetrics metrics;
  std::vector<std::uint8_t> predictions;
};

inline ClassifierEvaluation evaluate_classifier(const AuClassifier<float>& c, const std::vector<Tensor<float>>& images,
                                                const std::vector<std::uint8_t>& labels, std::size_t n_au) {
  NoGradGuard guard;
  ClassifierEvaluation out;
  for (const auto& x : images) {
    auto p = predict_labels(c.forward(x));
    out.predictions.insert(out.predictions.end(), p.begin(), p.end());
  }
  out.metrics = au_metrics(out.predictions, labels, n_au);
  return out;
}

inline std::vector<std::uint8_t> flat_labels(const Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<std::uint8_t> out;
  for (auto i : idx) out.insert(out.end(), ds.samples[i].record.labels.begin(), ds.samples[i].record.labels.end());
  return out;
}

inline std::vector<Tensor<float>> gt_batches(const Dataset& ds, std::span<const std::size_t> idx, std::size_t bs) {
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i < idx.size(); i += bs) out.push_back(make_batch(ds, idx.subspan(i, std::min(bs, idx.size() - i))).gt);
  return out;
}

/// Every tenth sample is held out for model selection.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> validation_split(std::size_t n) {
  std::vector<std::size_t> train, val;
  for (std::size_t i = 0; i < n; ++i) (i % 10 == 9 ? val : train).push_back(i);
  if (val.empty()) val.push_back(train.back());
  return {train, val};
}

/// Replaces each image, with probability p, by a bicubic round trip through
/// a side drawn from {S/8, S/4, S/2}.
inline void blur_augment(Tensor<float>& batch, double p, std::mt19937_64& rng) {
  if (p <= 0) return;
  const auto n = batch.dim(0), side = batch.dim(2), per = batch.numel() / n;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> pick(1, 3);
  auto v = batch.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    if (u(rng) >= p) continue;
    const auto small = std::max<std::size_t>(1, side >> pick(rng));
    Tensor<float> x(Shape{3, side, side}, std::vector<float>(v.begin() + i * per, v.begin() + (i + 1) * per));
    auto y = bicubic_resize(bicubic_resize(x, small), side);
    for (std::size_t j = 0; j < per; ++j) v[i * per + j] = std::clamp(y.values()[j], 0.0f, 1.0f);
  }
}

struct PretrainResult {
  double best_val_f1 = 0;
  std::size_t best_epoch = 0;
  std::vector<double> epoch_losses;
  std::filesystem::path checkpoint;
};

inline Checkpoint classifier_checkpoint(const AuClassifier<float>& c, const PatchGraphs& graphs) {
  Checkpoint ck;
  ck.attrs["kind"] = "classifier";
  ck.attrs["classifier_config"] = to_json(c.config()).dump();
  graphs.store(ck, "graph/");
  store_params(ck, "cls.", c.parameters());
  ck.attrs["tap_scale"] = nlohmann::json(c.tap_scale()).dump();
  return ck;
}

/// Loads a classifier and freezes it.
inline AuClassifier<float> load_classifier(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.attr("kind") != "classifier")
    throw CheckpointError("checkpoint: " + path.string() + " holds a '" + ck.attr("kind") + "', not a classifier");
  AuClassifier<float> c(classifier_config_from_json(nlohmann::json::parse(ck.attr("classifier_config"))),
                        PatchGraphs::load(ck, "graph/"), 0);
  load_params(ck, "cls.", c.parameters());
  if (ck.attrs.count("tap_scale")) c.set_tap_scale(nlohmann::json::parse(ck.attr("tap_scale")).get<std::array<double, 2>>());
  c.freeze();
  return c;
}

inline std::filesystem::path classifier_path(const TrainConfig& cfg) {
  return std::filesystem::path(cfg.out_dir) / "classifier.ckpt";
}

/// Tap scales that give the shallow and deep features unit mean square
/// activation over the given images.
inline std::array<double, 2> calibrate_tap_scale(const AuClassifier<float>& c, std::span<const Tensor<float>> batches) {
  NoGradGuard guard;
  double es = 0, ed = 0;
  std::size_t ns = 0, nd = 0;
  for (const auto& b : batches) {
    auto out = c.forward_all(b);
    for (float v : out.shallow.values()) es += static_cast<double>(v) * v;
    for (float v : out.deep.values()) ed += static_cast<double>(v) * v;
    ns += out.shallow.numel();
    nd += out.deep.numel();
  }
  const auto& cur = c.tap_scale();
  auto unit = [](double scale, double energy, std::size_t n) {
    const double rms = n == 0 ? 0.0 : std::sqrt(energy / static_cast<double>(n)) / scale;
    return rms > 1e-12 ? 1.0 / rms : 1.0;
  };
  return {unit(cur[0], es, ns), unit(cur[1], ed, nd)};
}

/// Minimizes the attribute cross-entropy on ground-truth images and keeps
/// the epoch with the best validation macro F1.
inline PretrainResult pretrain_classifier(const TrainConfig& cfg, const Dataset& train,
                                          std::ostream* log = nullptr) {
  cfg.validate();
  if (train.size() < 2) throw std::invalid_argument("pretrain: training split has fewer than 2 samples");
  if (train.n_au() != cfg.n_au)
    throw std::invalid_argument("pretrain: dataset has " + std::to_string(train.n_au()) + " attributes, config says " +
                                std::to_string(cfg.n_au));
  auto graphs = build_patch_graphs(cfg, mean_image(train), cfg.n_au);
  AuClassifier<float> c(classifier_config(cfg, train.side()), graphs, cfg.seed ^ 0xc1a55ULL);
  auto params = c.parameters();
  auto tensors = param_tensors(params);
  AdamState<float> adam;
  const AdamConfig adam_cfg{cfg.cls_lr};

  auto [tr, val] = validation_split(train.size());
  const auto val_images = gt_batches(train, val, 32);
  const auto val_labels = flat_labels(train, val);

  PretrainResult result;
  result.checkpoint = classifier_path(cfg);
  result.best_val_f1 = -1;
  for (std::size_t epoch = 0; epoch < cfg.cls_epochs; ++epoch) {
    auto order = shuffled(tr.size(), cfg.seed * 7919 + epoch);
    std::mt19937_64 aug_rng(cfg.seed * 104729 + epoch);
    double loss_sum = 0;
    std::size_t n_batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<std::size_t> idx;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) idx.push_back(tr[order[i]]);
      auto batch = make_batch(train, idx);
      blur_augment(batch.gt, cfg.cls_blur_prob, aug_rng);
      zero_grads(std::span(tensors));
      auto loss = classifier_pretrain_loss(c.forward(batch.gt), batch.labels);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw std::runtime_error("pretrain: non-finite loss at epoch " + std::to_string(epoch));
      loss.backward();
      adam_step(std::span(tensors), adam, adam_cfg);
      loss_sum += lv;
      ++n_batches;
    }
    result.epoch_losses.push_back(loss_sum / static_cast<double>(n_batches));
    const double f1 = evaluate_classifier(c, val_images, val_labels, cfg.n_au).metrics.macro_f1();
    if (log)
      *log << "pretrain epoch " << epoch + 1 << "/" << cfg.cls_epochs << " loss " << result.epoch_losses.back()
           << " val_f1 " << f1 << std::endl;
    if (f1 > result.best_val_f1) {
      result.best_val_f1 = f1;
      result.best_epoch = epoch;
      save_checkpoint(classifier_checkpoint(c, graphs), result.checkpoint);
    }
  }
  auto best = load_classifier(result.checkpoint);
  std::vector<std::size_t> calib(tr.begin(), tr.begin() + std::min<std::size_t>(tr.size(), 256));
  best.set_tap_scale(calibrate_tap_scale(best, gt_batches(train, calib, 32)));
  save_checkpoint(classifier_checkpoint(best, graphs), result.checkpoint);
  return result;
}

/// Validation macro F1 of a stored classifier on the split used during pretraining.
inline double classifier_validation_f1(const AuClassifier<float>& c, const Dataset& train) {
  auto [tr, val] = validation_split(train.size());
  return evaluate_classifier(c, gt_batches(train, val, 32), flat_labels(train, val), c.config().n_au).metrics.macro_f1();
}

// ---------------------------------------------------------------------------
// Adversarial training

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepLosses {
  double pixel = 0, adversarial = 0, au = 0, perceptual = 0, total = 0, d_loss = 0;
};

struct TrainHooks {
  // Sees every generator loss before the divergence check; may replace it.
  std::function<void(std::int64_t g_step, double& loss)> inspect_loss;
  // Stops after this many iterations in total; 0 means run all epochs.
  std::int64_t stop_after_iterations = 0;
};

struct TrainResult {
  std::int64_t g_steps = 0;
  std::int64_t d_steps = 0;
  std::int64_t epochs_done = 0;
  std::uint64_t classifier_hash_before = 0;
  std::uint64_t classifier_hash_after = 0;
  std::vector<StepLosses> losses;  // this invocation only
  std::filesystem::path checkpoint;
  std::filesystem::path log;
};

inline std::filesystem::path generator_path(const TrainConfig& cfg) {
  return std::filesystem::path(cfg.out_dir) / (cfg.stem() + ".ckpt");
}

namespace detail {

template <typename Gen>
Gen make_generator(const GeneratorConfig& g, const PatchGraphs& graphs, std::uint64_t seed);

template <>
inline Generator<float> make_generator(const GeneratorConfig& g, const PatchGraphs& graphs, std::uint64_t seed) {
  return Generator<float>(g, graphs, seed);
}

template <>
inline BaselineGenerator<float> make_generator(const GeneratorConfig& g, const PatchGraphs&, std::uint64_t seed) {
  return BaselineGenerator<float>(g, seed);
}

inline nlohmann::json losses_json(const StepLosses& l) {
  return {{"pixel", l.pixel}, {"adversarial", l.adversarial}, {"au", l.au},
          {"perceptual", l.perceptual}, {"total", l.total}, {"d_loss", l.d_loss}};
}

template <typename Gen>
TrainResult train_gan_impl(const TrainConfig& cfg, const Dataset& train, const AuClassifier<float>& classifier,
                           const Dataset* held_out, bool resume, const TrainHooks& hooks) {
  if (!classifier.is_frozen()) throw std::logic_error("train: the classifier must be frozen");
  if (train.n_au() != cfg.n_au || classifier.config().n_au != cfg.n_au)
    throw std::invalid_argument("train: attribute count mismatch between config, dataset and classifier");
  const auto B = cfg.batch_size, ratio = cfg.g_steps_per_d_step;
  const std::size_t iters_per_epoch = train.size() / B / ratio;
  if (iters_per_epoch == 0)
    throw std::invalid_argument("train: " + std::to_string(train.size()) + " samples cannot fill " +
                                std::to_string(ratio) + " batches of " + std::to_string(B));

  TrainResult result;
  result.checkpoint = generator_path(cfg);
  result.log = std::filesystem::path(cfg.out_dir) / (cfg.stem() + "_metrics.jsonl");
  std::filesystem::create_directories(cfg.out_dir);

  const auto gcfg = generator_config(cfg, train.side(), train.input_side());
  const DiscriminatorConfig dcfg{train.side(), cfg.d_base_channels, 64, cfg.kernel_size};
  PatchGraphs graphs;
  std::optional<Checkpoint> prior;
  if (resume && std::filesystem::exists(result.checkpoint)) {
    prior = load_checkpoint(result.checkpoint);
    graphs = PatchGraphs::load(*prior, "graph/");
  } else {
    graphs = build_patch_graphs(cfg, mean_image(train), cfg.n_au);
  }
  Gen G = make_generator<Gen>(gcfg, graphs, cfg.seed * 2 + 1);
  Discriminator<float> D(dcfg, cfg.seed * 2 + 2);
  auto g_params = G.parameters(), d_params = D.parameters();
  auto g_tensors = param_tensors(g_params), d_tensors = param_tensors(d_params);
  AdamState<float> g_adam, d_adam;
  std::int64_t epoch0 = 0;
  if (prior) {
    if (prior->attr("generator_kind") != cfg.generator)
      throw CheckpointError("train: " + result.checkpoint.string() + " holds a '" + prior->attr("generator_kind") +
                            "' generator");
    load_params(*prior, "g.", g_params);
    load_params(*prior, "d.", d_params);
    g_adam = restore_adam<float>(*prior, "adam_g", param_names(g_params));
    d_adam = restore_adam<float>(*prior, "adam_d", param_names(d_params));
    result.g_steps = prior->counter("g_steps");
    result.d_steps = prior->counter("d_steps");
    epoch0 = prior->counter("epoch");
  }
  const AdamConfig adam_cfg{cfg.lr};

  std::ofstream log(result.log, prior ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("train: cannot write " + result.log.string());

  auto cls_params = classifier.parameters();
  result.classifier_hash_before = param_hash(cls_params);

  std::optional<Batch> eval_batch;
  if (held_out && held_out->size() > 0) {
    std::vector<std::size_t> idx(std::min(cfg.eval_samples, held_out->size()));
    std::iota(idx.begin(), idx.end(), 0);
    eval_batch = make_batch(*held_out, idx);
  }

  auto save = [&](std::int64_t epoch) {
    Checkpoint ck;
    ck.attrs["kind"] = "generator";
    ck.attrs["generator_kind"] = cfg.generator;
    ck.attrs["generator_config"] = to_json(gcfg).dump();
    ck.attrs["train_config"] = to_json(cfg).dump();
    ck.counters["g_steps"] = result.g_steps;
    ck.counters["d_steps"] = result.d_steps;
    ck.counters["epoch"] = epoch;
    graphs.store(ck, "graph/");
    store_params(ck, "g.", g_params);
    store_params(ck, "d.", d_params);
    store_adam(ck, "adam_g", g_adam, param_names(g_params));
    store_adam(ck, "adam_d", d_adam, param_names(d_params));
    save_checkpoint(ck, result.checkpoint);
  };

  std::int64_t iterations = 0;
  for (auto epoch = epoch0; epoch < static_cast<std::int64_t>(cfg.epochs); ++epoch) {
    const auto w = epoch < static_cast<std::int64_t>(cfg.warmup_epochs) ? LossWeights{0, 0, 0} : cfg.weights();
    const bool need_cls = w.lambda2 > 0 || w.lambda3 > 0;
    const auto order = shuffled(train.size(), cfg.seed * 1000003 + static_cast<std::uint64_t>(epoch));
    for (std::size_t it = 0; it < iters_per_epoch; ++it) {
      StepLosses sl;
      Tensor<float> last_restored, last_gt;
      for (std::size_t g = 0; g < ratio; ++g) {
        const auto off = (it * ratio + g) * B;
        std::vector<std::size_t> idx(order.begin() + off, order.begin() + off + B);
        auto batch = make_batch(train, idx);
        zero_grads(std::span(g_tensors));
        zero_grads(std::span(d_tensors));
        auto restored = G.forward(batch.degraded);
        GeneratorLossParts<float> parts;
        parts.pixel = pixel_loss(restored, batch.gt);
        parts.adversarial = w.lambda1 > 0 ? generator_adversarial_loss(D, restored) : Tensor<float>::scalar(0);
        if (need_cls) {
          auto out = classifier.forward_all(restored);
          auto target = frozen_targets(classifier, batch.gt);
          parts.au = au_consistency_loss(out, target);
          parts.perceptual = perceptual_loss(out, target);
        } else {
          parts.au = parts.perceptual = Tensor<float>::scalar(0);
        }
        auto total = total_generator_loss(parts, w);
        double tv = total.item();
        if (hooks.inspect_loss) hooks.inspect_loss(result.g_steps + 1, tv);
        if (!std::isfinite(tv))
          throw TrainingDiverged("train: non-finite generator loss at step " + std::to_string(result.g_steps + 1) +
                                 "; last good checkpoint kept at " + result.checkpoint.string());
        total.backward();
        adam_step(std::span(g_tensors), g_adam, adam_cfg);
        ++result.g_steps;
        sl.pixel += parts.pixel.item() / ratio;
        sl.adversarial += parts.adversarial.item() / ratio;
        sl.au += parts.au.item() / ratio;
        sl.perceptual += parts.perceptual.item() / ratio;
        sl.total += tv / ratio;
        last_restored = restored.detach();
        last_gt = batch.gt;
      }
      zero_grads(std::span(d_tensors));
      auto d_loss = discriminator_loss(D, last_restored, last_gt);
      sl.d_loss = d_loss.item();
      if (!std::isfinite(sl.d_loss))
        throw TrainingDiverged("train: non-finite discriminator loss at step " + std::to_string(result.d_steps + 1) +
                               "; last good checkpoint kept at " + result.checkpoint.string());
      d_loss.backward();
      adam_step(std::span(d_tensors), d_adam, adam_cfg);
      ++result.d_steps;
      result.losses.push_back(sl);
      auto rec = losses_json(sl);
      rec["event"] = "step";
      rec["epoch"] = epoch;
      rec["iteration"] = it;
      rec["g_steps"] = result.g_steps;
      rec["d_steps"] = result.d_steps;
      log << rec.dump() << '\n';
      ++iterations;
      if (hooks.stop_after_iterations > 0 && iterations >= hooks.stop_after_iterations) break;
    }
    const bool stopped = hooks.stop_after_iterations > 0 && iterations >= hooks.stop_after_iterations;
    if (stopped) break;
    result.epochs_done = epoch + 1;
    save(epoch + 1);
    nlohmann::json rec{{"event", "epoch"}, {"epoch", epoch + 1}, {"g_steps", result.g_steps}, {"d_steps", result.d_steps}};
    if (eval_batch) {
      NoGradGuard guard;
      auto restored = G.forward(eval_batch->degraded);
      rec["psnr"] = psnr(restored, eval_batch->gt);
      rec["ssim"] = ssim(restored, eval_batch->gt);
    }
    log << rec.dump() << std::endl;
  }
  result.classifier_hash_after = param_hash(cls_params);
  return result;
}

}  // namespace detail

/// Alternates g_steps_per_d_step generator updates, each on a fresh batch,
/// with one discriminator update. Checkpoints at every epoch end; with
/// `resume` an existing checkpoint is continued from its epoch counter.
inline TrainResult train_gan(const TrainConfig& cfg, const Dataset& train, const AuClassifier<float>& classifier,
                             const Dataset* held_out = nullptr, bool resume = false, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (cfg.generator == "baseline")
    return detail::train_gan_impl<BaselineGenerator<float>>(cfg, train, classifier, held_out, resume, hooks);
  return detail::train_gan_impl<Generator<float>>(cfg, train, classifier, held_out, resume, hooks);
}

// ---------------------------------------------------------------------------
// Inference

/// A trained generator of either kind behind one call.
struct RestorationModel {
  std::string kind;
  GeneratorConfig config;
  std::function<Tensor<float>(const Tensor<float>&)> forward;

  Tensor<float> restore(const Tensor<float>& degraded, std::size_t batch = 16) const {
    detail::require_rank("restore", "input", degraded.shape(), 4);
    if (degraded.dim(1) != 3 || degraded.dim(2) != config.input_side || degraded.dim(3) != config.input_side)
      throw ShapeError("restore: model expects [N,3," + std::to_string(config.input_side) + "," +
                       std::to_string(config.input_side) + "], got " + shape_str(degraded.shape()));
    NoGradGuard guard;
    const auto n = degraded.dim(0), per_in = degraded.numel() / n;
    const auto side = config.output_side(), per_out = 3 * side * side;
    std::vector<float> out(n * per_out);
    for (std::size_t i = 0; i < n; i += batch) {
      const auto m = std::min(batch, n - i);
      Tensor<float> x(Shape{m, 3, config.input_side, config.input_side},
                      std::vector<float>(degraded.values().begin() + i * per_in, degraded.values().begin() + (i + m) * per_in));
      auto y = forward(x);
      std::copy(y.values().begin(), y.values().end(), out.begin() + i * per_out);
    }
    return Tensor<float>(Shape{n, 3, side, side}, std::move(out));
  }
};

inline RestorationModel load_generator(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.attr("kind") != "generator")
    throw CheckpointError("checkpoint: " + path.string() + " holds a '" + ck.attr("kind") + "', not a generator");
  RestorationModel m;
  m.kind = ck.attr("generator_kind");
  m.config = generator_config_from_json(nlohmann::json::parse(ck.attr("generator_config")));
  if (m.kind == "baseline") {
    auto g = std::make_shared<BaselineGenerator<float>>(m.config, 0);
    load_params(ck, "g.", g->parameters());
    m.forward = [g](const Tensor<float>& x) { return g->forward(x); };
  } else if (m.kind == "igcn") {
    auto g = std::make_shared<Generator<float>>(m.config, PatchGraphs::load(ck, "graph/"), 0);
    load_params(ck, "g.", g->parameters());
    m.forward = [g](const Tensor<float>& x) { return g->forward(x); };
  } else {
    throw CheckpointError("checkpoint: unknown generator kind '" + m.kind + "' in " + path.string());
  }
  return m;
}

/// Restores every PNG in `in_dir` into `out_dir` under the same file name.
inline std::size_t restore_directory(const RestorationModel& model, const std::filesystem::path& in_dir,
                                     const std::filesystem::path& out_dir) {
  if (!std::filesystem::is_directory(in_dir)) throw ImageIoError("restore: no input directory " + in_dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(in_dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ImageIoError("restore: no PNG files in " + in_dir.string());
  std::vector<ImageU8> images;
  std::vector<const ImageU8*> ptrs;
  for (const auto& f : files) images.push_back(read_png(f));
  for (const auto& im : images) ptrs.push_back(&im);
  auto restored = model.restore(image_batch(ptrs));
  for (std::size_t i = 0; i < files.size(); ++i) {
    auto one = slice_sample(restored, i);
    write_png(out_dir / files[i].filename(), quantize(reshape(one, Shape{3, one.dim(2), one.dim(3)})));
  }
  return files.size();
}

/// Upsamples each degraded input with the bicubic kernel; the masked square
/// stays as upsampled zeros.
inline Tensor<float> bicubic_restore(const Tensor<float>& degraded, std::size_t side) {
  const auto n = degraded.dim(0), per_in = degraded.numel() / n;
  std::vector<float> out;
  out.reserve(n * 3 * side * side);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<float> x(Shape{3, degraded.dim(2), degraded.dim(3)},
                    std::vector<float>(degraded.values().begin() + i * per_in, degraded.values().begin() + (i + 1) * per_in));
    auto y = bicubic_resize(x, side);
    for (float v : y.values()) out.push_back(std::clamp(v, 0.0f, 1.0f));
  }
  return Tensor<float>(Shape{n, 3, side, side}, std::move(out));
}

// ---------------------------------------------------------------------------
// Evaluation

struct MethodReport {
  std::string method;
  std::vector<double> f1;
  std::vector<double> accuracy;
  double macro_f1 = 0;
  double macro_accuracy = 0;
  double psnr = 0;
  double ssim = 0;

  bool operator==(const MethodReport&) const = default;
};

struct MetricsReport {
  std::vector<MethodReport> rows;

  const MethodReport* find(const std::string& method) const {
    for (const auto& r : rows)
      if (r.method == method) return &r;
    return nullptr;
  }
  bool operator==(const MetricsReport&) const = default;
};

/// Scores restored images (or the ground truth itself) against the test set.
inline MethodReport score_method(const std::string& name, const Tensor<float>& restored, const Tensor<float>& gt,
                                 const AuClassifier<float>& classifier, const std::vector<std::uint8_t>& labels) {
  MethodReport r;
  r.method = name;
  const auto n = gt.dim(0);
  double p = 0, s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto a = slice_sample(restored, i), b = slice_sample(gt, i);
    p += psnr(a, b);
    s += ssim(a, b);
  }
  r.psnr = p / static_cast<double>(n);
  r.ssim = s / static_cast<double>(n);
  std::vector<Tensor<float>> chunks;
  const auto per = restored.numel() / n;
  for (std::size_t i = 0; i < n; i += 32) {
    const auto m = std::min<std::size_t>(32, n - i);
    Shape sh = restored.shape();
    sh[0] = m;
    chunks.emplace_back(sh, std::vector<float>(restored.values().begin() + i * per, restored.values().begin() + (i + m) * per));
  }
  const auto n_au = classifier.config().n_au;
  auto m = evaluate_classifier(classifier, chunks, labels, n_au).metrics;
  for (std::size_t a = 0; a < n_au; ++a) {
    r.f1.push_back(m.f1(a));
    r.accuracy.push_back(m.accuracy(a));
  }
  r.macro_f1 = m.macro_f1();
  r.macro_accuracy = m.macro_accuracy();
  return r;
}

struct PipelineInputs {
  std::optional<std::filesystem::path> generator;
  std::optional<std::filesystem::path> baseline;
};

/// Rows: ground_truth, bicubic, baseline, full. A generator row whose
/// checkpoint is missing is skipped with a warning on `warn`.
inline MetricsReport evaluate_pipeline(const Dataset& test, const AuClassifier<float>& classifier,
                                       const PipelineInputs& in, std::ostream& warn = std::cerr) {
  if (test.size() == 0) throw std::invalid_argument("eval: empty test split");
  std::vector<std::size_t> idx(test.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto batch = make_batch(test, idx);
  const auto labels = flat_labels(test, idx);
  MetricsReport report;
  report.rows.push_back(score_method("ground_truth", batch.gt, batch.gt, classifier, labels));
  report.rows.push_back(score_method("bicubic", bicubic_restore(batch.degraded, test.side()), batch.gt, classifier, labels));
  for (const auto& [name, path] : {std::pair{std::string("baseline"), in.baseline}, {std::string("full"), in.generator}}) {
    if (!path) continue;
    if (!std::filesystem::exists(*path)) {
      warn << "warning: skipping '" << name << "': checkpoint " << path->string() << " not found\n";
      continue;
    }
    auto model = load_generator(*path);
    report.rows.push_back(score_method(name, model.restore(batch.degraded), batch.gt, classifier, labels));
  }
  return report;
}

inline void write_report_csv(const MetricsReport& r, std::ostream& out) {
  out << "method,au_id,f1,accuracy,psnr,ssim\n";
  out << std::setprecision(17);
  for (const auto& row : r.rows) {
    for (std::size_t a = 0; a < row.f1.size(); ++a)
      out << row.method << ',' << a << ',' << row.f1[a] << ',' << row.accuracy[a] << ',' << row.psnr << ',' << row.ssim
          << '\n';
    out << row.method << ",overall," << row.macro_f1 << ',' << row.macro_accuracy << ',' << row.psnr << ',' << row.ssim
        << '\n';
  }
}

inline void write_report_csv(const MetricsReport& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write report " + path.string());
  write_report_csv(r, f);
}

inline MetricsReport read_report_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "method,au_id,f1,accuracy,psnr,ssim")
    throw std::invalid_argument("report: unexpected header '" + line + "'");
  MetricsReport r;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 6) throw std::invalid_argument("report: malformed row '" + line + "'");
    if (r.rows.empty() || r.rows.back().method != f[0] || r.rows.back().psnr != std::stod(f[4])) {
      if (!r.rows.empty() && r.rows.back().method == f[0]) throw std::invalid_argument("report: inconsistent row '" + line + "'");
      r.rows.emplace_back();
      r.rows.back().method = f[0];
      r.rows.back().psnr = std::stod(f[4]);
      r.rows.back().ssim = std::stod(f[5]);
    }
    auto& row = r.rows.back();
    if (f[1] == "overall") {
      row.macro_f1 = std::stod(f[2]);
      row.macro_accuracy = std::stod(f[3]);
    } else {
      if (std::stoul(f[1]) != row.f1.size()) throw std::invalid_argument("report: AU rows out of order at '" + line + "'");
      row.f1.push_back(std::stod(f[2]));
      row.accuracy.push_back(std::stod(f[3]));
    }
  }
  return r;
}

}  // namespace igcn
