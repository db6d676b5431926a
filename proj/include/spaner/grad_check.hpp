#ifndef SPANER_GRAD_CHECK_HPP
#define SPANER_GRAD_CHECK_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "spaner/errors.hpp"
#include "spaner/tensor.hpp"

namespace spaner {

struct NamedParameter {
  std::string name;
  Parameter* param;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;  // empty when nothing was compared
  std::size_t worst_index = 0;
  std::size_t compared = 0;     // coordinates compared
  std::size_t skipped_frozen = 0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares analytic gradients against central finite differences.
///
/// `loss` evaluates the scalar at the current parameter values. `gradients`
/// must zero and then fill every Parameter::grad. Frozen parameters are
/// required to report an all-zero gradient and are not perturbed.
inline GradCheckResult grad_check(const std::function<double()>& loss,
                                  const std::function<void()>& gradients,
                                  const std::vector<NamedParameter>& params, double h) {
  if (!(h > 0.0)) throw ArgumentError("grad_check: step must be positive");
  if (!std::isfinite(loss())) throw NumericError("grad_check: non-finite loss");
  gradients();
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const auto& np : params) analytic.push_back(np.param->grad);

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Parameter& param = *params[p].param;
    if (param.frozen) {
      for (double g : analytic[p].data()) {
        if (g != 0.0) {
          throw NumericError("grad_check: frozen parameter '" + params[p].name +
                             "' has a nonzero gradient");
        }
      }
      ++result.skipped_frozen;
      continue;
    }
    auto values = param.value.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + h;
      const double plus = loss();
      values[i] = original - h;
      const double minus = loss();
      values[i] = original;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("grad_check: non-finite loss while perturbing '" + params[p].name + "'");
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double err = relative_error(analytic[p][i], numeric);
      ++result.compared;
      if (result.worst_parameter.empty() || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_parameter = params[p].name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace spaner

#endif  // SPANER_GRAD_CHECK_HPP
