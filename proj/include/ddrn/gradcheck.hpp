#ifndef DDRN_GRADCHECK_HPP_
#define DDRN_GRADCHECK_HPP_

#include <cstddef>
#include <functional>
#include <vector>

#include "ddrn/tape.hpp"
#include "ddrn/tensor.hpp"

namespace ddrn {

/// Scalar-valued computation of one leaf. Must be deterministic: any
/// stochastic node has to be fed frozen noise.
using ScalarFn = std::function<Var<double>(Tape<double>&, const Var<double>&)>;

struct GradCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> rel_error;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double tol = 0.0;
  bool pass = false;
};

/// Relative error of one element: |a - n| / max(|a|, |n|, floor). The floor
/// keeps elements whose true derivative is ~0 from dividing rounding noise
/// by rounding noise.
inline constexpr double kGradCheckFloor = 1e-3;

double gradcheck_rel_error(double analytic, double numeric);

/// Central differences (f(x+h) - f(x-h)) / 2h against the tape gradient.
/// Throws std::runtime_error when two evaluations at the same point differ.
GradCheckReport finite_diff_check(const ScalarFn& f, const Tensor<double>& leaf, double h = 1e-5,
                                  double tol = 1e-6);

}  // namespace ddrn

#endif  // DDRN_GRADCHECK_HPP_
