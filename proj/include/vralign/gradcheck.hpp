#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "vralign/autodiff.hpp"
#include "vralign/params.hpp"

namespace vralign {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

/// Central-difference check of analytic gradients.
///
/// `build_loss` must be a pure function of the store's current values: it
/// receives a fresh tape plus bound parameters and returns the scalar loss.
/// Any stochastic choices (dropout masks, sampled negatives) must be frozen
/// inside the builder, otherwise the difference quotient measures the noise,
/// not the gradient. Relative error uses max(1, |analytic|) as denominator so
/// near-zero gradients are compared absolutely. Parameter values are restored
/// on exit.
inline GradCheckReport finite_diff_check(
    const std::function<Var(Tape&, const BoundParams&)>& build_loss, ParamStore& params,
    double eps = 1e-5) {
  GradCheckReport report;

  Tape tape;
  BoundParams bound = bind_params(tape, params);
  Var loss = build_loss(tape, bound);
  tape.backward(loss);

  auto eval = [&]() {
    Tape t;
    BoundParams b = bind_params(t, params);
    return build_loss(t, b).value().data[0];
  };

  for (auto& [name, p] : params) {
    if (!p.trainable) continue;
    const NdArray& analytic = bound.at(name).grad();
    for (std::size_t i = 0; i < p.value.data.size(); ++i) {
      const double saved = p.value.data[i];
      p.value.data[i] = saved + eps;
      const double f_plus = eval();
      p.value.data[i] = saved - eps;
      const double f_minus = eval();
      p.value.data[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double denom = std::max(1.0, std::abs(analytic.data[i]));
      const double rel = std::abs(analytic.data[i] - numeric) / denom;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace vralign
