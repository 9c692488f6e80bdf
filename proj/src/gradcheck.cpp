#include "ddrn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ddrn {

namespace {

double evaluate(const ScalarFn& f, const Tensor<double>& x) {
  Tape<double> tape;
  Tensor<double> copy = x;
  copy.set_requires_grad(false);
  Var<double> out = f(tape, tape.constant(copy));
  return out.item();
}

}  // namespace

double gradcheck_rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport finite_diff_check(const ScalarFn& f, const Tensor<double>& leaf, double h, double tol) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  GradCheckReport report;
  report.tol = tol;

  {
    Tape<double> tape;
    Var<double> x = tape.variable(leaf);
    Var<double> out = f(tape, x);
    if (out.numel() != 1) throw ShapeError("finite_diff_check: function must return a scalar");
    tape.backward(out);
    auto g = x.grad();
    report.analytic.assign(leaf.numel(), 0.0);
    std::copy(g.begin(), g.end(), report.analytic.begin());
  }

  const double base0 = evaluate(f, leaf);
  const double base1 = evaluate(f, leaf);
  if (base0 != base1) {
    throw std::runtime_error("finite_diff_check: function is not deterministic at the base point");
  }

  Tensor<double> probe = leaf;
  report.numeric.resize(leaf.numel());
  report.rel_error.resize(leaf.numel());
  for (std::size_t i = 0; i < leaf.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = evaluate(f, probe);
    probe[i] = orig - h;
    const double fm = evaluate(f, probe);
    probe[i] = orig;
    report.numeric[i] = (fp - fm) / (2.0 * h);
    report.rel_error[i] = gradcheck_rel_error(report.analytic[i], report.numeric[i]);
    if (report.rel_error[i] > report.max_rel_error) {
      report.max_rel_error = report.rel_error[i];
      report.worst_index = i;
    }
  }
  report.pass = report.max_rel_error <= tol;
  return report;
}

}  // namespace ddrn
