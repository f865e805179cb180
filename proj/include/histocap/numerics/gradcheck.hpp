#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "histocap/numerics/tensor.hpp"

namespace histocap {

// |analytic − numeric| / max(1e-8, |analytic| + |numeric|)
inline double gradient_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares the taped gradient of `loss_fn()` with respect to every tensor
// in `params` against central differences with step h. loss_fn must be
// deterministic and return a scalar; it is evaluated with the tape disabled
// for the finite-difference probes. `stride` > 1 samples every stride-th
// coordinate of each parameter. `five_point` switches from the 3-point
// central difference to the O(h⁴) five-point stencil.
template <typename T>
GradCheckReport check_parameter_gradients(const std::function<Tensor<T>()>& loss_fn,
                                std::vector<Tensor<T>> params, double h,
                                std::size_t stride = 1, bool five_point = false) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.clear_grad();
  }
  {
    GradTape<T> tape;
    TapeScope<T> scope(&tape);
    tape.backward(loss_fn());
  }
  GradCheckReport report;
  NoGradScope<T> no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const std::vector<T> analytic = p.has_grad()
                                        ? std::vector<T>(p.grad().begin(), p.grad().end())
                                        : std::vector<T>(p.numel(), T(0));
    auto values = p.data();
    for (std::size_t i = 0; i < values.size(); i += std::max<std::size_t>(stride, 1)) {
      const T saved = values[i];
      const auto at = [&](double offset) {
        values[i] = saved + static_cast<T>(offset);
        return static_cast<double>(loss_fn().item());
      };
      const double numeric = five_point
                                 ? (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12.0 * h)
                                 : (at(h) - at(-h)) / (2.0 * h);
      values[i] = saved;
      const double err = gradient_relative_error(static_cast<double>(analytic[i]), numeric);
      ++report.coordinates;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_param = pi;
        report.worst_index = i;
        report.worst_analytic = static_cast<double>(analytic[i]);
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

// Single-input form: max relative error of d f(x) / dx.
template <typename T, typename F>
double check_gradients(F&& f, const Tensor<T>& x, double h) {
  Tensor<T> leaf = x.detach();
  const std::function<Tensor<T>()> loss = [&]() { return f(leaf); };
  return check_parameter_gradients<T>(loss, {leaf}, h).max_relative_error;
}

}  // namespace histocap
