#include "gaitcaps/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace gaitcaps {

double finite_diff_check(const ScalarFn& f, const GradFn& analytic_grad,
                         std::vector<Tensor> point, double epsilon) {
  const std::vector<Tensor> analytic = analytic_grad(point);
  if (analytic.size() != point.size())
    throw std::invalid_argument("finite_diff_check: gradient arity mismatch");

  double max_err = 0.0;
  for (std::size_t t = 0; t < point.size(); ++t) {
    if (!analytic[t].same_shape(point[t]))
      throw std::invalid_argument("finite_diff_check: gradient shape mismatch");
    for (std::size_t i = 0; i < point[t].size(); ++i) {
      const double saved = point[t][i];
      point[t][i] = saved + epsilon;
      const double fp = f(point);
      point[t][i] = saved - epsilon;
      const double fm = f(point);
      point[t][i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("finite_diff_check: non-finite function value");
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double a = analytic[t][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace gaitcaps
