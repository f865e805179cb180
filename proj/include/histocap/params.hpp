#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "histocap/archive.hpp"
#include "histocap/rng.hpp"

namespace histocap {

// A named handle onto a module's parameter storage.
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
void save_params(TensorMap& out, const ParamList<T>& params) {
  for (const auto& p : params) put_tensor(out, p.name, p.tensor);
}

// Copies archived values into existing parameter storage, validating shapes.
template <typename T>
void load_params(const TensorMap& in, const ParamList<T>& params) {
  for (const auto& p : params) {
    const auto& src = archive::require(in, p.name, p.tensor.shape());
    auto target = p.tensor;
    auto dst = target.data();
    const auto s = src.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(s[i]);
  }
}

template <typename T>
void set_trainable(const ParamList<T>& params, bool on) {
  for (const auto& p : params) {
    auto t = p.tensor;
    t.set_requires_grad(on);
  }
}

template <typename T>
std::vector<Tensor<T>> tensors_of(const ParamList<T>& params) {
  std::vector<Tensor<T>> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

// Uniform in ±sqrt(6 / fan_in).
template <typename T>
Tensor<T> fan_in_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(v));
}

// Uniform in ±1/sqrt(fan_in), the usual linear-layer default.
template <typename T>
Tensor<T> linear_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace histocap
