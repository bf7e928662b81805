#pragma once

#include <vector>

#include "gaitcaps/ops.hpp"
#include "gaitcaps/params.hpp"
#include "gaitcaps/tensor.hpp"

namespace gaitcaps {

/// v = (|s|^2 / (1+|s|^2)) * s/|s| with |s| guarded by sqrt(|s|^2 + 1e-12),
/// so a zero vector maps to a zero vector. Applied per row for rank-2 input.
Tensor squash(const Tensor& s);
Tensor squash_backward(const Tensor& s, const Tensor& d_v);

/// u [C,D1], w [C,J,D1,D2] -> u_hat [C,J,D2] with u_hat[i][j] = u[i] * w[i][j].
Tensor predictions(const Tensor& u, const Tensor& w);

struct PredictionGrads {
  Tensor d_u, d_w;
};
PredictionGrads predictions_backward(const Tensor& u, const Tensor& w, const Tensor& d_u_hat);

/// Coupling logits and coefficients after routing (c = softmax_j b).
struct RoutingState {
  Tensor logits;     // [C,J]
  Tensor couplings;  // [C,J]
  int iterations = 0;
};

struct RoutingCache {
  Tensor u_hat;
  std::vector<Tensor> c;  // per iteration [C,J]
  std::vector<Tensor> s;  // per iteration [J,D2]
  std::vector<Tensor> v;  // per iteration [J,D2]
};

/// Dynamic routing: b starts at zero; each iteration takes c = softmax_j(b),
/// s_j = sum_i c_ij u_hat_ij, v_j = squash(s_j), b_ij += u_hat_ij . v_j.
/// Returns the final v [J,D2].
Tensor dynamic_routing(const Tensor& u_hat, int iterations, RoutingState* state = nullptr,
                       RoutingCache* cache = nullptr);

/// Backward through the unrolled routing loop. Returns d_u_hat.
Tensor dynamic_routing_backward(const RoutingCache& cache, const Tensor& d_v);

struct CapsCache {
  Tensor ctx_flat;       // [1, in]
  Conv2dCache conv;      // conv-primary variant only
  Tensor conv_pre_act;
  Tensor proj_in;        // [1, proj_in_dim]
  Tensor primary_pre;    // [C,D1] before squash
  Tensor primary;        // [C,D1]
  Tensor u_hat;          // [C,J,D2]
  RoutingCache routing;
};

/// f_CAP: projection of the recurrent outputs into primary capsules,
/// prediction transforms, and dynamic routing into digit capsules.
class CapsuleBlock {
 public:
  struct Config {
    std::size_t ctx_rows = 31;      // bins
    std::size_t ctx_cols = 256;     // per-bin context dimension
    std::size_t num_primary = 6;    // C
    std::size_t primary_dim = 128;  // D1
    std::size_t num_digit = 8;      // J
    std::size_t digit_dim = 16;     // D2
    int routing_iters = 3;
    bool conv_primary = false;  // 16x16 reshape + conv ablation variant
    std::size_t conv_kernels = 32;
    int conv_kernel_size = 3;
    double leaky_slope = 0.01;
  };

  CapsuleBlock(Config cfg, Rng& rng);

  /// ctx [rows, cols] -> digit capsules [J, D2].
  Tensor forward(const Tensor& ctx, CapsCache* cache = nullptr,
                 RoutingState* state = nullptr) const;

  /// Returns d_ctx and accumulates parameter gradients.
  Tensor backward(const CapsCache& cache, const Tensor& d_v);

  void visit_params(const std::string& prefix, const ParamVisitor& visit);

  const Config& config() const { return cfg_; }
  std::size_t out_dim() const { return cfg_.num_digit * cfg_.digit_dim; }

 private:
  Config cfg_;
  std::size_t proj_in_dim_ = 0;
  Param conv_kernel_;  // conv-primary variant only
  Param proj_w_, proj_b_;
  Param pred_w_;  // [C,J,D1,D2]
};

}  // namespace gaitcaps
