#pragma once

#include <functional>
#include <string>
#include <vector>

#include "igcn/gradcheck.hpp"
#include "igcn/graph_conv.hpp"
#include "igcn/losses.hpp"
#include "igcn/models.hpp"

namespace igcn {

/// Finite-difference checks of every differentiable operation and network,
/// one aggregated report per operation (worst case over all seeds).
struct GradientSuiteOptions {
  std::size_t seeds = 5;
  double rtol = 1e-3;
  double atol = 1e-4;
  double step = 1e-6;
};

namespace detail {

inline Tensor<double> suite_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi, bool rg = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>(std::move(shape), std::move(v), rg);
}

inline PatchGraphs suite_graphs(std::uint64_t seed) {
  return PatchGraphs::build<double>({1, 2, 8}, std::nullopt, [seed](std::size_t k) {
    AdjacencyRules r;
    if (k == 2) r.au_pairs = {{0, 2}};
    if (k == 8) r.au_pairs = {{seed % 64, (seed * 7 + 3) % 64}};
    return r;
  });
}

template <typename Net>
std::vector<Tensor<double>> leaves_of(const Net& net, std::vector<Tensor<double>> extra = {}) {
  for (auto& p : net.parameters()) extra.push_back(p.second);
  return extra;
}

/// Nudges biases off zero so no ReLU sits exactly on its kink.
template <typename Net>
void jitter_biases(Net& net, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.3);
  for (auto [name, t] : net.parameters())
    if (name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0)
      for (auto& v : t.mutable_values()) v = u(rng);
}

}  // namespace detail

inline std::vector<GradCheckReport> run_gradient_suite(const GradientSuiteOptions& so = {}) {
  using detail::suite_tensor;
  using Case = std::function<GradCheckReport(const GradCheckOptions&)>;
  std::vector<std::pair<std::string, Case>> cases;

  cases.emplace_back("conv2d", [](const GradCheckOptions& o) {
    return grad_check("conv2d", [](const auto& in) { return conv2d(in[0], in[1], in[2], 1, 1); },
                      {{2, 3, 5, 5}, {4, 3, 3, 3}, {4}}, o);
  });
  cases.emplace_back("conv2d_stride2", [](const GradCheckOptions& o) {
    return grad_check("conv2d_stride2", [](const auto& in) { return conv2d(in[0], in[1], in[2], 2, 1); },
                      {{2, 2, 6, 6}, {3, 2, 3, 3}, {3}}, o);
  });
  cases.emplace_back("deconv2d", [](const GradCheckOptions& o) {
    return grad_check("deconv2d", [](const auto& in) { return deconv2d(in[0], in[1], in[2], 2, 1); },
                      {{2, 3, 4, 4}, {3, 2, 4, 4}, {2}}, o);
  });
  cases.emplace_back("relu", [](GradCheckOptions o) {
    // keep samples away from the kink
    o.sampler = [](std::mt19937_64& r) {
      std::uniform_real_distribution<double> u(0.1, 1.0);
      return (r() & 1) ? u(r) : -u(r);
    };
    return grad_check("relu", [](const auto& in) { return relu(in[0]); }, {{4, 5}}, o);
  });
  cases.emplace_back("sigmoid", [](const GradCheckOptions& o) {
    return grad_check("sigmoid", [](const auto& in) { return sigmoid(in[0]); }, {{4, 5}}, o);
  });
  cases.emplace_back("mse", [](const GradCheckOptions& o) {
    return grad_check("mse", [](const auto& in) { return mse(in[0], in[1]); }, {{3, 7}, {3, 7}}, o);
  });
  cases.emplace_back("igcn_forward", [](const GradCheckOptions& o) {
    std::mt19937_64 rng(o.seed);
    auto graphs = detail::suite_graphs(o.seed);
    const PatchSplitSpec split{2, 8, 8};
    auto layer = IgcnLayer<double>::create(split, graphs.adjacency(split), 2, 3, 3, IgcnMode::conv, 1, 1, rng);
    detail::jitter_biases(layer, rng);
    auto x = suite_tensor({2, 2, 8, 8}, rng, -1, 1);
    return grad_check_leaves("igcn_forward", [&] { return layer.forward(x); }, detail::leaves_of(layer, {x}), o);
  });
  cases.emplace_back("igcn_forward_deconv", [](const GradCheckOptions& o) {
    std::mt19937_64 rng(o.seed);
    auto graphs = detail::suite_graphs(o.seed);
    const PatchSplitSpec split{2, 8, 8};
    auto layer = IgcnLayer<double>::create(split, graphs.adjacency(split), 2, 2, 4, IgcnMode::deconv, 2, 1, rng);
    detail::jitter_biases(layer, rng);
    auto x = suite_tensor({1, 2, 8, 8}, rng, -1, 1);
    return grad_check_leaves("igcn_forward_deconv", [&] { return layer.forward(x); }, detail::leaves_of(layer, {x}), o);
  });
  cases.emplace_back("rrmb_forward", [](const GradCheckOptions& o) {
    std::mt19937_64 rng(o.seed);
    auto graphs = detail::suite_graphs(o.seed);
    auto block = RrmbBlock<double>::create(2, 8, 8, 3, [&](const PatchSplitSpec& s) { return graphs.adjacency(s); }, rng);
    detail::jitter_biases(block, rng);
    auto x = suite_tensor({2, 2, 8, 8}, rng, -1, 1);
    return grad_check_leaves("rrmb_forward", [&] { return block.forward(x); }, detail::leaves_of(block, {x}), o);
  });

  // Losses are checked with respect to the restored image, and the
  // discriminator term also with respect to the discriminator weights.
  struct Critics {
    Discriminator<double> d;
    AuClassifier<double> c;
  };
  auto critics = [](std::uint64_t seed) {
    std::mt19937_64 rng(seed + 99);
    Critics k{Discriminator<double>(DiscriminatorConfig{16, 2, 4, 3}, seed),
              AuClassifier<double>(ClassifierConfig{16, 3, 2, 4, 3}, detail::suite_graphs(seed), seed + 1)};
    detail::jitter_biases(k.d, rng);
    detail::jitter_biases(k.c, rng);
    k.c.freeze();
    return k;
  };
  cases.emplace_back("pixel_loss", [](const GradCheckOptions& o) {
    return grad_check("pixel_loss", [](const auto& in) { return pixel_loss(in[0], in[1]); },
                      {{2, 3, 4, 4}, {2, 3, 4, 4}}, o);
  });
  cases.emplace_back("perceptual_loss", [critics](const GradCheckOptions& o) {
    auto k = critics(o.seed);
    std::mt19937_64 rng(o.seed);
    auto out = suite_tensor({2, 3, 16, 16}, rng, 0, 1), gt = suite_tensor({2, 3, 16, 16}, rng, 0, 1, false);
    return grad_check_leaves("perceptual_loss", [&] { return perceptual_loss(k.c, out, gt); }, {out}, o);
  });
  cases.emplace_back("adversarial_loss_g", [critics](const GradCheckOptions& o) {
    auto k = critics(o.seed);
    std::mt19937_64 rng(o.seed);
    auto out = suite_tensor({2, 3, 16, 16}, rng, 0, 1);
    return grad_check_leaves("adversarial_loss_g", [&] { return generator_adversarial_loss(k.d, out); },
                             detail::leaves_of(k.d, {out}), o);
  });
  cases.emplace_back("adversarial_loss_d", [critics](const GradCheckOptions& o) {
    auto k = critics(o.seed);
    std::mt19937_64 rng(o.seed);
    auto out = suite_tensor({2, 3, 16, 16}, rng, 0, 1, false), gt = suite_tensor({2, 3, 16, 16}, rng, 0, 1, false);
    return grad_check_leaves("adversarial_loss_d", [&] { return discriminator_loss(k.d, out, gt); },
                             detail::leaves_of(k.d), o);
  });
  cases.emplace_back("au_consistency_loss", [critics](const GradCheckOptions& o) {
    auto k = critics(o.seed);
    std::mt19937_64 rng(o.seed);
    auto out = suite_tensor({2, 3, 16, 16}, rng, 0, 1), gt = suite_tensor({2, 3, 16, 16}, rng, 0, 1, false);
    return grad_check_leaves("au_consistency_loss", [&] { return au_consistency_loss(k.c, out, gt); }, {out}, o);
  });
  cases.emplace_back("classifier_pretrain_loss", [](const GradCheckOptions& o) {
    std::mt19937_64 rng(o.seed);
    auto logits = suite_tensor({4, 5}, rng, -3, 3);
    std::vector<double> lab(20);
    for (auto& v : lab) v = static_cast<double>(rng() % 2);
    Tensor<double> labels({4, 5}, lab);
    return grad_check_leaves("classifier_pretrain_loss", [&] { return classifier_pretrain_loss(logits, labels); },
                             {logits}, o);
  });
  cases.emplace_back("total_generator_loss", [critics](const GradCheckOptions& o) {
    auto k = critics(o.seed);
    std::mt19937_64 rng(o.seed);
    auto out = suite_tensor({2, 3, 16, 16}, rng, 0, 1), gt = suite_tensor({2, 3, 16, 16}, rng, 0, 1, false);
    LossWeights w{0.3, 0.7, 0.5};  // large enough that every term registers
    return grad_check_leaves(
        "total_generator_loss",
        [&] {
          auto taps = k.c.forward_all(out);
          auto target = frozen_targets(k.c, gt);
          return total_generator_loss<double>({pixel_loss(out, gt), generator_adversarial_loss(k.d, out),
                                               au_consistency_loss(taps, target), perceptual_loss(taps, target)},
                                              w);
        },
        {out}, o);
  });

  // Whole networks with respect to their input and every parameter.
  const GeneratorConfig tiny{8, 4, 1, 1, 3, 2, 2};
  cases.emplace_back("generator", [tiny](const GradCheckOptions& o) {
    Generator<double> g(tiny, detail::suite_graphs(o.seed), o.seed);
    std::mt19937_64 rng(o.seed);
    detail::jitter_biases(g, rng);
    auto x = suite_tensor({1, 3, 8, 8}, rng, 0, 1);
    return grad_check_leaves("generator", [&] { return g.forward(x); }, detail::leaves_of(g, {x}), o);
  });
  cases.emplace_back("baseline_generator", [tiny](const GradCheckOptions& o) {
    BaselineGenerator<double> g(tiny, o.seed);
    std::mt19937_64 rng(o.seed);
    detail::jitter_biases(g, rng);
    auto x = suite_tensor({1, 3, 8, 8}, rng, 0, 1);
    return grad_check_leaves("baseline_generator", [&] { return g.forward(x); }, detail::leaves_of(g, {x}), o);
  });
  cases.emplace_back("discriminator", [](const GradCheckOptions& o) {
    Discriminator<double> d(DiscriminatorConfig{16, 2, 4, 3}, o.seed);
    std::mt19937_64 rng(o.seed);
    detail::jitter_biases(d, rng);
    auto x = suite_tensor({2, 3, 16, 16}, rng, 0, 1);
    return grad_check_leaves("discriminator", [&] { return d.forward(x); }, detail::leaves_of(d, {x}), o);
  });
  cases.emplace_back("classifier", [](const GradCheckOptions& o) {
    AuClassifier<double> c(ClassifierConfig{16, 3, 2, 4, 3}, detail::suite_graphs(o.seed), o.seed);
    std::mt19937_64 rng(o.seed);
    detail::jitter_biases(c, rng);
    auto x = suite_tensor({2, 3, 16, 16}, rng, 0, 1);
    return grad_check_leaves("classifier", [&] { return c.forward(x); }, detail::leaves_of(c, {x}), o);
  });

  std::vector<GradCheckReport> reports;
  for (const auto& [name, run] : cases) {
    GradCheckReport agg;
    agg.op_name = name;
    agg.passed = true;
    for (std::size_t s = 0; s < so.seeds; ++s) {
      GradCheckOptions o;
      o.rtol = so.rtol;
      o.atol = so.atol;
      o.step = so.step;
      o.seed = s;
      auto r = run(o);
      agg.max_abs_err = std::max(agg.max_abs_err, r.max_abs_err);
      agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
      if (!r.passed) {
        agg.passed = false;
        if (agg.error.empty()) agg.error = "seed " + std::to_string(s) + (r.error.empty() ? "" : ": " + r.error);
      }
    }
    reports.push_back(std::move(agg));
  }
  return reports;
}

}  // namespace igcn
