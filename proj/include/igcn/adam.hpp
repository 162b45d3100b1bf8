#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "igcn/tensor.hpp"

namespace igcn {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter first/second moments plus the shared step counter.
template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  void ensure(std::span<const Tensor<T>> params) {
    if (m.empty()) {
      for (const auto& p : params) {
        m.emplace_back(p.numel(), T{0});
        v.emplace_back(p.numel(), T{0});
      }
    }
    if (m.size() != params.size()) throw ShapeError("adam: state tracks a different number of parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (m[i].size() != params[i].numel() || v[i].size() != params[i].numel()) {
        throw ShapeError("adam: state size mismatch for parameter " + std::to_string(i) + " of shape " +
                         shape_str(params[i].shape()));
      }
    }
  }
};

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// Parameters without a grad are treated as having a zero gradient.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, const AdamConfig& cfg) {
  state.ensure(std::span<const Tensor<T>>(params.data(), params.size()));
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto values = params[p].mutable_values();
    auto grad = params[p].grad();
    auto& m = state.m[p];
    auto& v = state.v[p];
    const bool has_grad = !grad.empty();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has_grad ? static_cast<double>(grad[i]) : 0.0;
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
      values[i] = static_cast<T>(values[i] - update);
    }
  }
}

template <typename T>
void zero_grads(std::span<Tensor<T>> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace igcn
