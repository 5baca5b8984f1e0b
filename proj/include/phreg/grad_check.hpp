#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "phreg/tensor.hpp"

namespace phreg {

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central difference of f at x along coordinate i.
inline double central_difference(const ScalarFn& f, std::span<const double> x, std::size_t i,
                                 double h) {
  std::vector<double> probe(x.begin(), x.end());
  probe[i] = x[i] + h;
  const double up = f(probe);
  probe[i] = x[i] - h;
  const double down = f(probe);
  return (up - down) / (2.0 * h);
}

/// |analytic - fd| / max(1, |fd|), the error measure used by every check below.
inline double gradient_relative_error(double analytic, double fd) {
  return std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
}

/// Max relative error between a supplied gradient and central differences of f,
/// over the listed coordinates (all coordinates when `coords` is empty).
inline double compare_with_central_differences(const ScalarFn& f, std::span<const double> x,
                                               std::span<const double> analytic, double h = 1e-3,
                                               std::span<const std::size_t> coords = {}) {
  double worst = 0.0;
  auto check = [&](std::size_t i) {
    worst = std::max(worst, gradient_relative_error(analytic[i], central_difference(f, x, i, h)));
  };
  if (coords.empty()) {
    for (std::size_t i = 0; i < x.size(); ++i) check(i);
  } else {
    for (auto i : coords) check(i);
  }
  return worst;
}

/// Directional variant: compares <grad, u> with (f(x + h u) - f(x - h u)) / 2h.
inline double directional_check(const ScalarFn& f, std::span<const double> x,
                                std::span<const double> analytic,
                                const std::vector<std::vector<double>>& directions,
                                double h = 1e-3) {
  double worst = 0.0;
  std::vector<double> probe(x.size());
  for (const auto& u : directions) {
    double projected = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) projected += analytic[i] * u[i];
    for (std::size_t i = 0; i < x.size(); ++i) probe[i] = x[i] + h * u[i];
    const double up = f(probe);
    for (std::size_t i = 0; i < x.size(); ++i) probe[i] = x[i] - h * u[i];
    const double down = f(probe);
    worst = std::max(worst, gradient_relative_error(projected, (up - down) / (2.0 * h)));
  }
  return worst;
}

/// Runs f under autodiff at x (in 64-bit) and returns the max over coordinates of
/// |autodiff - central difference| / max(1, |central difference|).
template <typename Fn>
double grad_check(Fn&& f, const Tensor64& x, double h = 1e-3) {
  Tensor64 leaf = x.detach();
  leaf.set_requires_grad(true);
  Tensor64 loss = f(leaf);
  backward(loss);
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

  const Shape shape = x.shape();
  ScalarFn eval = [&](std::span<const double> values) {
    Tensor64 t(shape, std::vector<double>(values.begin(), values.end()));
    return f(t).item();
  };
  return compare_with_central_differences(eval, x.data(), analytic, h);
}

}  // namespace phreg
