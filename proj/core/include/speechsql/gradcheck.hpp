#pragma once

#include "speechsql/autograd.hpp"

#include <functional>
#include <string>
#include <vector>

namespace speechsql {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Compares analytic gradients of `loss` against central finite differences
/// for every entry of every listed parameter. `loss` is rebuilt from a fresh
/// Context for each evaluation, so it must be deterministic.
GradCheckResult check_gradients(const std::vector<ag::Parameter*>& params,
                                const std::function<ag::Var(ag::Context&)>& loss,
                                bool training = false, double eps = 1e-5);

}  // namespace speechsql
