#pragma once

// Shared helpers for the test suites: random tensors from keyed streams and a
// central finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mixmatch/mixmatch.hpp"

namespace testing_support {

using mixmatch::Shape;
using mixmatch::Stream;
using mixmatch::Tensor;

inline std::vector<double> random_values(std::size_t n, Stream& s, double lo = -1, double hi = 1) {
  std::vector<double> v(n);
  for (auto& x : v) x = lo + (hi - lo) * s.uniform();
  return v;
}

template <typename T = double>
Tensor<T> random_tensor(Shape shape, Stream& s, bool requires_grad = false, double lo = -1,
                        double hi = 1) {
  const auto v = random_values(mixmatch::numel(shape), s, lo, hi);
  std::vector<T> tv(v.begin(), v.end());
  return requires_grad ? Tensor<T>::parameter(std::move(shape), std::move(tv))
                       : Tensor<T>::constant(std::move(shape), std::move(tv));
}

/// Random probability rows [rows, classes], each strictly positive.
inline Tensor<double> random_simplex(std::size_t rows, std::size_t classes, Stream& s) {
  std::vector<double> v(rows * classes);
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0;
    for (std::size_t j = 0; j < classes; ++j) total += (v[r * classes + j] = 0.01 + s.uniform());
    for (std::size_t j = 0; j < classes; ++j) v[r * classes + j] /= total;
  }
  return Tensor<double>::constant({rows, classes}, std::move(v));
}

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Largest relative error between autodiff gradients and central finite
/// differences (step h) of `loss` over every element of `leaves`.
inline double max_gradient_error(std::vector<Tensor<double>> leaves,
                                 const std::function<Tensor<double>()>& loss, double h = 1e-4) {
  for (auto& l : leaves) l.zero_grad();
  mixmatch::backward(loss());
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    if (l.has_grad()) analytic.emplace_back(l.grad().begin(), l.grad().end());
    else analytic.emplace_back(l.size(), 0.0);
  }
  double worst = 0;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    auto values = leaves[t].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss().item();
      values[i] = saved - h;
      const double down = loss().item();
      values[i] = saved;
      worst = std::max(worst, relative_error(analytic[t][i], (up - down) / (2 * h)));
    }
  }
  return worst;
}

}  // namespace testing_support
