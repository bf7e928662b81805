#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "gaitcaps/rng.hpp"
#include "gaitcaps/tensor.hpp"

namespace gaitcaps {

/// A trainable tensor and its gradient accumulator (always the same shape).
struct Param {
  Tensor value;
  Tensor grad;

  Param() = default;
  explicit Param(Tensor v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

using ParamVisitor = std::function<void(const std::string& path, Param& p)>;

inline std::string join_path(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases start at zero.
inline Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                             std::size_t fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-a, a);
  return t;
}

}  // namespace gaitcaps
