#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "igcn/tensor.hpp"

namespace igcn {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
void append_params(NamedParams<T>& into, const std::string& prefix, const NamedParams<T>& from) {
  for (const auto& [name, t] : from) into.emplace_back(prefix + name, t);
}

template <typename T>
std::vector<Tensor<T>> param_tensors(const NamedParams<T>& params) {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.second);
  return out;
}

template <typename T>
std::vector<std::string> param_names(const NamedParams<T>& params) {
  std::vector<std::string> out;
  for (const auto& p : params) out.push_back(p.first);
  return out;
}

template <typename T>
std::size_t param_count(const NamedParams<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.second.numel();
  return n;
}

template <typename T>
void set_requires_grad(NamedParams<T>& params, bool flag) {
  for (auto& p : params) p.second.set_requires_grad(flag);
}

/// FNV-1a over names, shapes and raw value bytes.
template <typename T>
std::uint64_t param_hash(const NamedParams<T>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : params) {
    mix(name.data(), name.size());
    for (auto d : t.shape()) mix(&d, sizeof(d));
    mix(t.data(), t.numel() * sizeof(T));
  }
  return h;
}

/// He-uniform: U(-b, b) with b = sqrt(6 / fan_in).
template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

}  // namespace igcn
