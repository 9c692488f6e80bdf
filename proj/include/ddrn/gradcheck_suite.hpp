#ifndef DDRN_GRADCHECK_SUITE_HPP_
#define DDRN_GRADCHECK_SUITE_HPP_

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ddrn/gradcheck.hpp"

namespace ddrn {

inline constexpr double kSmoothTol = 1e-6;
inline constexpr double kPiecewiseTol = 1e-5;  // ops containing max/argmax

struct GradCheckCase {
  std::string name;
  Tensor<double> point;
  ScalarFn fn;
  double tol = kSmoothTol;
};

struct GradCheckRow {
  std::string name;
  double max_rel_error = 0.0;
  double tol = 0.0;
  bool pass = false;
};

/// Every registered op and loss, sorted by name. Stochastic and routed paths
/// are evaluated with frozen noise / frozen routing.
std::vector<GradCheckCase> gradcheck_registry(std::uint64_t seed = 42);

std::vector<GradCheckRow> run_gradcheck_suite(const std::vector<GradCheckCase>& cases);

/// "name max_rel_error tol PASS|FAIL" rows.
void print_gradcheck_table(const std::vector<GradCheckRow>& rows, std::ostream& out);

}  // namespace ddrn

#endif  // DDRN_GRADCHECK_SUITE_HPP_
