#pragma once

#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "igcn/ops.hpp"
#include "igcn/tensor.hpp"

namespace igcn {

struct GradCheckSlot {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
};

struct GradCheckReport {
  std::string op_name;
  double max_abs_err = 0.0;
  // Max abs error divided by the largest gradient magnitude seen.
  double max_rel_err = 0.0;
  bool passed = false;
  std::vector<GradCheckSlot> slots;  // one per checked input / parameter
  std::string error;                 // set when evaluation itself failed
};

struct GradCheckOptions {
  double rtol = 1e-3;
  double atol = 1e-4;
  double step = 1e-5;
  std::uint64_t seed = 0;
  // Input sampler; uniform(-1, 1) when empty.
  std::function<double(std::mt19937_64&)> sampler;
};

inline bool grad_check_passes(double max_abs_err, double max_rel_err, const GradCheckOptions& opt) {
  return max_rel_err <= opt.rtol || max_abs_err <= opt.atol;
}

/// Compares reverse-mode gradients of `fn` with respect to every tensor in
/// `leaves` against central differences. `fn` must read the leaves afresh on
/// each call; the leaves are perturbed in place and restored afterwards.
///
/// The scalar probed is a fixed random projection sum_i r_i * out_i with r
/// drawn from the seed, so permutation mistakes in a backward pass cannot
/// cancel out the way they would under a plain sum.
inline GradCheckReport grad_check_leaves(std::string name, const std::function<Tensor<double>()>& fn,
                                         std::vector<Tensor<double>> leaves, const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  report.op_name = std::move(name);
  report.slots.resize(leaves.size());
  std::vector<bool> saved_flags;
  for (auto& leaf : leaves) {
    saved_flags.push_back(leaf.requires_grad());
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  auto restore_flags = [&] {
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      leaves[i].zero_grad();
      leaves[i].set_requires_grad(saved_flags[i]);
    }
  };

  try {
    std::vector<double> projection;
    auto objective = [&](const Tensor<double>& out) {
      if (projection.empty()) {
        std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
        std::uniform_real_distribution<double> u(0.5, 1.5);
        projection.resize(out.numel());
        for (auto& r : projection) r = u(rng);
      }
      if (projection.size() != out.numel()) throw ShapeError("grad_check: output size changed between calls");
      double acc = 0.0;
      for (std::size_t i = 0; i < out.numel(); ++i) acc += projection[i] * out.values()[i];
      return acc;
    };

    Tensor<double> out = fn();
    objective(out);  // fixes the projection
    if (!all_finite(out)) throw std::domain_error("non-finite forward output");
    Tensor<double> weights(out.shape(), projection);
    sum(mul(out, weights)).backward();

    std::vector<std::vector<double>> analytic;
    for (auto& leaf : leaves) {
      if (leaf.has_grad())
        analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
      else
        analytic.emplace_back(leaf.numel(), 0.0);
    }

    double worst_abs = 0.0, scale_max = 0.0;
    NoGradGuard no_grad;
    for (std::size_t s = 0; s < leaves.size(); ++s) {
      auto values = leaves[s].mutable_values();
      auto& slot = report.slots[s];
      double slot_scale = 0.0;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double original = values[i];
        values[i] = original + opt.step;
        const double plus = objective(fn());
        values[i] = original - opt.step;
        const double minus = objective(fn());
        values[i] = original;
        const double numeric = (plus - minus) / (2.0 * opt.step);
        const double a = analytic[s][i];
        if (!std::isfinite(numeric) || !std::isfinite(a)) throw std::domain_error("non-finite gradient");
        const double err = std::abs(a - numeric);
        if (err > slot.max_abs_err) {
          slot.max_abs_err = err;
          slot.worst_index = i;
        }
        slot_scale = std::max({slot_scale, std::abs(a), std::abs(numeric)});
      }
      slot.max_rel_err = slot.max_abs_err / std::max(slot_scale, 1e-12);
      worst_abs = std::max(worst_abs, slot.max_abs_err);
      scale_max = std::max(scale_max, slot_scale);
    }
    report.max_abs_err = worst_abs;
    report.max_rel_err = worst_abs / std::max(scale_max, 1e-12);
    report.passed = grad_check_passes(report.max_abs_err, report.max_rel_err, opt);
  } catch (const std::exception& e) {
    report.error = e.what();
    report.passed = false;
    report.max_abs_err = report.max_rel_err = std::numeric_limits<double>::infinity();
  }
  restore_flags();
  return report;
}

/// Samples inputs of the given shapes from the seeded sampler and checks the
/// gradient of `op` with respect to each of them.
inline GradCheckReport grad_check(std::string name,
                                  const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& op,
                                  const std::vector<Shape>& input_shapes, const GradCheckOptions& opt = {}) {
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Tensor<double>> inputs;
  for (const auto& shape : input_shapes) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = opt.sampler ? opt.sampler(rng) : u(rng);
    inputs.emplace_back(shape, std::move(v), true);
  }
  return grad_check_leaves(
      std::move(name), [&] { return op(inputs); }, inputs, opt);
}

}  // namespace igcn
