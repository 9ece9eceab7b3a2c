#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "upm/tensor.hpp"

namespace upm {

/// Compares the analytic gradient of scalar-valued `f` at `x` against central
/// differences with step `h`. Returns max |analytic − numeric| / max(1, |analytic|).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h = 1e-5);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t coordinates_checked = 0;
};

/// Gradient check over parameters that `f` reads through shared tensor handles.
/// `fraction` < 1 checks a seeded random subset of coordinates (at least one per parameter).
GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                  const std::vector<NamedTensor>& params, double h = 1e-5,
                                  double fraction = 1.0, std::uint64_t seed = 0);

}  // namespace upm
