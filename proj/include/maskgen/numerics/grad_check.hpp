// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>

#include "maskgen/numerics/autodiff.hpp"

namespace maskgen {

/// Raised when a finite-difference probe hits a non-finite value.
class GradCheckError : public std::runtime_error {
 public:
  GradCheckError(const std::string& what, std::size_t coordinate)
      : std::runtime_error(what + " (coordinate " + std::to_string(coordinate) + ")"), coordinate_(coordinate) {}
  std::size_t coordinate() const { return coordinate_; }

 private:
  std::size_t coordinate_;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;

  bool passed(double tol) const { return max_rel_error <= tol; }
};

using ScalarFn = std::function<Var<double>(const Var<double>&)>;

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// Error per coordinate is |analytic - numeric| / max(1, |numeric|); the
/// maximum over coordinates is reported.
inline GradCheckResult grad_check(const ScalarFn& f, const Tensor<double>& x, double eps = 1e-5) {
  Tensor<double> analytic;
  {
    Tape<double> tape;
    const Var<double> in = tape.leaf(x);
    Var<double> out;
    try {
      out = f(in);
    } catch (const NumericError& e) {
      throw GradCheckError(std::string("analytic pass: ") + e.what(), 0);
    }
    if (out.size() != 1) throw DimensionError("grad_check needs a scalar-valued function");
    if (!out.tracked()) {
      analytic = Tensor<double>(x.shape(), 0.0);
    } else {
      tape.backward(out);
      analytic = tape.grad(in);
    }
  }

  GradCheckResult res;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    double fp = 0.0;
    double fm = 0.0;
    try {
      probe[i] = orig + eps;
      fp = f(Var<double>::constant(probe)).item();
      probe[i] = orig - eps;
      fm = f(Var<double>::constant(probe)).item();
    } catch (const NumericError& e) {
      throw GradCheckError(e.what(), i);
    }
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw GradCheckError("non-finite function value", i);
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    if (i == 0 || err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_coordinate = i;
      res.analytic_at_worst = analytic[i];
      res.numeric_at_worst = numeric;
    }
  }
  return res;
}

}  // namespace maskgen
