#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>

#include "mkgc/error.hpp"
#include "mkgc/numerics/matrix.hpp"
#include "mkgc/numerics/tape.hpp"

namespace mkgc {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Denominator floor for the relative error, so exact zeros compare cleanly.
  double abs_floor = 1e-8;
};

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  Vector analytic;
  Vector numeric;
  std::string diagnostic;
};

using ScalarFunction = std::function<double(const Vector&)>;
using TapeFunction = std::function<ad::Var(ad::Tape&, ad::Var)>;

/// Central-difference check of a supplied analytic gradient.
inline GradCheckReport grad_check(const ScalarFunction& f, const Vector& analytic,
                                  const Vector& point, const GradCheckOptions& opts = {}) {
  require(opts.eps > 0.0 && opts.eps <= 1e-2, ErrorKind::kInvalidArgument,
          "grad_check: eps must lie in (0, 1e-2]");
  require(analytic.dim() == point.dim(), ErrorKind::kInvalidArgument,
          "grad_check: gradient and point dimensions differ");

  GradCheckReport report;
  report.analytic = analytic;
  report.numeric = Vector(point.dim());
  Vector probe = point;
  for (std::size_t i = 0; i < point.dim(); ++i) {
    probe[i] = point[i] + opts.eps;
    const double up = f(probe);
    probe[i] = point[i] - opts.eps;
    const double down = f(probe);
    probe[i] = point[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      report.passed = false;
      report.worst_coordinate = i;
      report.max_rel_error = std::numeric_limits<double>::infinity();
      report.diagnostic = "non-finite function value when probing coordinate " + std::to_string(i);
      return report;
    }
    report.numeric[i] = (up - down) / (2.0 * opts.eps);
    const double a = analytic[i];
    const double n = report.numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), opts.abs_floor});
    const double rel = std::abs(a - n) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_coordinate = i;
    }
  }
  report.passed = report.max_rel_error <= opts.tol;
  if (!report.passed) {
    report.diagnostic = "coordinate " + std::to_string(report.worst_coordinate) +
                        ": analytic " + std::to_string(analytic[report.worst_coordinate]) +
                        " vs numeric " + std::to_string(report.numeric[report.worst_coordinate]);
  }
  return report;
}

/// Checks a function built on a Tape: the analytic gradient comes from
/// reverse mode, the numeric one from re-evaluating on fresh tapes.
inline GradCheckReport grad_check(const TapeFunction& f, const Vector& point,
                                  const GradCheckOptions& opts = {}) {
  Vector analytic;
  {
    ad::Tape tape;
    ad::Var x = tape.parameter(Matrix::column(point));
    ad::Var y = f(tape, x);
    tape.backward(y);
    analytic = tape.grad(x).as_vector();
  }
  ScalarFunction value = [&f](const Vector& p) {
    ad::Tape tape;
    ad::Var x = tape.constant(Matrix(p.dim(), 1, p.raw()));
    return f(tape, x).scalar();
  };
  return grad_check(value, analytic, point, opts);
}

}  // namespace mkgc
