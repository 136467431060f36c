// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "promptalign/tensor.hpp"

namespace promptalign {

template <typename T>
T scalar_value(const BasicTensor<T>& t) {
  return t.item();
}
template <typename T>
  requires std::is_arithmetic_v<T>
T scalar_value(T v) {
  return v;
}

/// Central-difference gradient of a scalar function:
/// (f(x + h e_i) - f(x - h e_i)) / 2h for every element i of x.
///
/// `f` receives a fresh perturbed copy of x and returns a scalar tensor (or
/// anything convertible to T). `x` itself is left untouched.
template <typename T, typename F>
BasicTensor<T> finite_difference_grad(F&& f, const BasicTensor<T>& x,
                                      T step = T(1e-3)) {
  if (!(step > T(0)))
    throw std::invalid_argument("finite_difference_grad: step must be > 0");
  auto evaluate = [&](const std::vector<T>& values) -> double {
    BasicTensor<T> probe(x.shape(), values);
    const double v = static_cast<double>(scalar_value(f(probe)));
    if (!std::isfinite(v))
      throw std::domain_error("finite_difference_grad: f returned non-finite value");
    return v;
  };
  std::vector<T> values(x.values().begin(), x.values().end());
  std::vector<T> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T original = values[i];
    values[i] = original + step;
    const double plus = evaluate(values);
    values[i] = original - step;
    const double minus = evaluate(values);
    values[i] = original;
    grad[i] = static_cast<T>((plus - minus) / (2.0 * static_cast<double>(step)));
  }
  return BasicTensor<T>(x.shape(), std::move(grad));
}

struct GradientAgreement {
  bool ok = true;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Elementwise comparison with tolerance |a - n| <= abs_floor + rel_tol * max(|a|, |n|).
/// The reported relative error is |a - n| / max(|a|, |n|, abs_floor / rel_tol).
template <typename T>
GradientAgreement compare_gradients(std::span<const T> analytic,
                                    std::span<const T> numeric,
                                    double rel_tol = 1e-3,
                                    double abs_floor = 1e-5) {
  if (analytic.size() != numeric.size())
    throw std::invalid_argument("compare_gradients: size mismatch " +
                                std::to_string(analytic.size()) + " vs " +
                                std::to_string(numeric.size()));
  GradientAgreement report;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    const double diff = std::abs(a - n);
    const double scale = std::max({std::abs(a), std::abs(n), abs_floor / rel_tol});
    const double rel = diff / scale;
    if (diff > abs_floor + rel_tol * std::max(std::abs(a), std::abs(n))) report.ok = false;
    if (i == 0 || rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = n;
    }
  }
  return report;
}

}  // namespace promptalign
