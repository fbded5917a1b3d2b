#pragma once

#include <cmath>
#include <vector>

#include "tensor.hpp"

namespace testutil {

using cellsearch::Rng;
using cellsearch::Shape;
using cellsearch::Tensor;

// Values drawn away from zero so ReLU/max kinks stay at least `gap` from
// every probe point.
inline Tensor kink_free(Shape s, Rng& rng, double gap = 0.05) {
  Tensor t(s);
  for (size_t i = 0; i < t.numel(); ++i) {
    const double v = rng.uniform(gap, 1.0);
    t[i] = rng.uniform() < 0.5 ? -v : v;
  }
  return t;
}

// Target a small random step away from `y`. Keeps the loss near unit scale so
// central differences are not dominated by rounding in the loss value.
inline Tensor target_near(const Tensor& y, Rng& rng, double scale = 0.1) {
  Tensor t = y.clone();
  for (size_t i = 0; i < t.numel(); ++i) t[i] += scale * rng.normal();
  return t;
}

// L2 loss against a fixed target.
inline Tensor l2_to(const Tensor& y, const Tensor& target) { return cellsearch::sum_squares(cellsearch::sub(y, target)); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (size_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

}  // namespace testutil
