#pragma once

// Central finite-difference oracle for reverse-mode gradients (64-bit).

#include <cmath>
#include <functional>
#include <vector>

#include "cnc/core/autograd.hpp"

namespace cnc::testing {

struct GradCheckResult {
  double relative_error = 0;
  double analytic_norm = 0;
  double numeric_norm = 0;
};

/// Compares d(loss)/d(inputs) from `backward` against central differences with step h.
/// `loss` rebuilds the scalar objective from the current input values. At most `max_coords`
/// coordinates per input are probed (evenly strided).
inline GradCheckResult grad_check(std::vector<Var<double>>& inputs, const std::function<Var<double>()>& loss,
                                  double h = 1e-6, std::size_t max_coords = 64) {
  for (auto& in : inputs) in.zero_grad();
  Var<double> out = loss();
  backward(out);
  std::vector<double> analytic, numeric;
  for (auto& in : inputs) {
    auto& value = in.mutable_value();
    const std::size_t n = value.size();
    const std::size_t stride = std::max<std::size_t>(1, n / max_coords);
    const auto grad = in.grad();
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = value[i];
      double fp, fm;
      {
        NoGradGuard guard;
        value[i] = orig + h;
        fp = loss().value()[0];
        value[i] = orig - h;
        fm = loss().value()[0];
      }
      value[i] = orig;
      analytic.push_back(grad[i]);
      numeric.push_back((fp - fm) / (2 * h));
    }
  }
  GradCheckResult r;
  double diff = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    r.analytic_norm += analytic[i] * analytic[i];
    r.numeric_norm += numeric[i] * numeric[i];
  }
  r.analytic_norm = std::sqrt(r.analytic_norm);
  r.numeric_norm = std::sqrt(r.numeric_norm);
  r.relative_error = std::sqrt(diff) / std::max({r.analytic_norm, r.numeric_norm, 1e-12});
  return r;
}

/// Fixed random projection so vector-valued outputs reduce to a scalar with generic weights.
inline Tensor<double> probe_weights(const Shape& shape, unsigned seed) {
  std::mt19937_64 rng(seed);
  return randn<double>(shape, rng);
}

inline Var<double> weighted_sum(const Var<double>& x, const Tensor<double>& w) {
  return ops::mean_all(ops::mul_const(x, w));
}

}  // namespace cnc::testing
