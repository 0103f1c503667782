#ifndef MABN_GRADCHECK_HPP_
#define MABN_GRADCHECK_HPP_

#include <cmath>
#include <functional>
#include <stdexcept>

#include "mabn/tensor.hpp"

namespace mabn {

// Central-difference gradient check, double precision.
// Returns the max per-element relative error between the analytic gradient
// and (f(x+h) - f(x-h)) / 2h, with a 1e-8 absolute floor in the denominator.
inline double gradcheck(const std::function<double(const TensorD&)>& f,
                        const TensorD& x, const TensorD& analytic_grad,
                        double h = 1e-5) {
  if (!x.same_shape(analytic_grad))
    throw std::invalid_argument("gradcheck: gradient shape mismatch");
  double max_rel = 0.0;
  TensorD probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("gradcheck: non-finite value while probing");
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom =
        std::max(std::abs(numeric), std::abs(analytic_grad[i])) + 1e-8;
    max_rel = std::max(max_rel, std::abs(numeric - analytic_grad[i]) / denom);
  }
  return max_rel;
}

}  // namespace mabn

#endif  // MABN_GRADCHECK_HPP_
