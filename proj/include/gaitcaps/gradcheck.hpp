#pragma once

#include <functional>
#include <vector>

#include "gaitcaps/tensor.hpp"

namespace gaitcaps {

using ScalarFn = std::function<double(const std::vector<Tensor>&)>;
using GradFn = std::function<std::vector<Tensor>(const std::vector<Tensor>&)>;

/// Central-difference check of an analytic gradient at `point`.
/// Returns max over all coordinates of |analytic - numeric| /
/// max(|analytic|, |numeric|, 1e-8). Throws if `f` goes non-finite.
double finite_diff_check(const ScalarFn& f, const GradFn& analytic_grad,
                         std::vector<Tensor> point, double epsilon = 1e-5);

}  // namespace gaitcaps
