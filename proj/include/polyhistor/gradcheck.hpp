#pragma once

#include <functional>
#include <vector>

#include "polyhistor/tensor.hpp"

namespace polyhistor {

/// Scalar objective evaluated from the current values of the parameters it closes over.
using Objective = std::function<Tensor()>;

struct FdReport {
  double max_relative_error = 0.0;
  /// One entry per parameter, same order as the input list.
  std::vector<double> per_parameter;
};

/// Central-difference check of reverse-mode gradients.
///
/// Each coordinate of each parameter is perturbed by +-eps in place and restored;
/// the error for a coordinate is |fd - ad| / max(|fd|, |ad|, 1e-8). Parameter
/// gradients are reset before and after the check. Throws NumericalError when the
/// objective is non-finite and ConfigError when eps <= 0.
FdReport fd_check_report(const Objective& f, std::vector<Tensor> params, double eps = 1e-5);

double fd_check(const Objective& f, std::vector<Tensor> params, double eps = 1e-5);

}  // namespace polyhistor
