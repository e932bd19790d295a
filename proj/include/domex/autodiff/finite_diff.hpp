#pragma once

#include <functional>
#include <vector>

#include "domex/autodiff/tensor.hpp"
#include "domex/error.hpp"

namespace domex {

/// Central-difference gradient of `f` at `theta`. The evaluator sees a
/// perturbed copy; differences are formed in double precision.
inline std::vector<double> finite_diff_gradient(const std::function<double(const Tensor&)>& f,
                                                const Tensor& theta, double h) {
  if (!(h > 0.0)) throw InputError("finite_diff_gradient: step must be positive");
  std::vector<double> out(theta.size());
  Tensor probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const float orig = theta[i];
    probe[i] = static_cast<float>(static_cast<double>(orig) + h);
    const double hi = f(probe);
    const double step_hi = static_cast<double>(probe[i]) - orig;
    probe[i] = static_cast<float>(static_cast<double>(orig) - h);
    const double lo = f(probe);
    const double step_lo = orig - static_cast<double>(probe[i]);
    probe[i] = orig;
    // The realised float step can differ from h; divide by what was applied.
    out[i] = (hi - lo) / (step_hi + step_lo);
  }
  return out;
}

}  // namespace domex
