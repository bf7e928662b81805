#include "gaitcaps/capsule.hpp"

#include <cmath>
#include <stdexcept>

namespace gaitcaps {

namespace {

constexpr double kSquashEps = 1e-12;

void squash_line(const double* s, double* v, std::size_t d) {
  double ssq = 0.0;
  for (std::size_t i = 0; i < d; ++i) ssq += s[i] * s[i];
  const double norm = std::sqrt(ssq + kSquashEps);
  const double g = norm / (1.0 + ssq + kSquashEps);  // |s|^2/(1+|s|^2) / |s|
  for (std::size_t i = 0; i < d; ++i) v[i] = g * s[i];
}

void squash_line_backward(const double* s, const double* d_v, double* d_s, std::size_t d) {
  double ssq = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    ssq += s[i] * s[i];
    dot += d_v[i] * s[i];
  }
  const double n2 = ssq + kSquashEps;
  const double norm = std::sqrt(n2);
  const double g = norm / (1.0 + n2);
  // dg/dn = (1 - n^2) / (1 + n^2)^2, applied through n = sqrt(|s|^2 + eps)
  const double dg_dn = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
  const double coef = dg_dn / norm * dot;
  for (std::size_t i = 0; i < d; ++i) d_s[i] = g * d_v[i] + coef * s[i];
}

}  // namespace

Tensor squash(const Tensor& s) {
  Tensor v(s.shape());
  if (s.rank() == 1) {
    squash_line(s.data(), v.data(), s.size());
  } else if (s.rank() == 2) {
    const std::size_t rows = s.dim(0), d = s.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      squash_line(s.data() + r * d, v.data() + r * d, d);
  } else {
    throw std::invalid_argument("squash: expected rank 1 or 2");
  }
  return v;
}

Tensor squash_backward(const Tensor& s, const Tensor& d_v) {
  Tensor d_s(s.shape());
  if (s.rank() == 1) {
    squash_line_backward(s.data(), d_v.data(), d_s.data(), s.size());
  } else {
    const std::size_t rows = s.dim(0), d = s.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      squash_line_backward(s.data() + r * d, d_v.data() + r * d, d_s.data() + r * d, d);
  }
  return d_s;
}

Tensor predictions(const Tensor& u, const Tensor& w) {
  if (u.rank() != 2 || w.rank() != 4 || u.dim(0) != w.dim(0) || u.dim(1) != w.dim(2))
    throw std::invalid_argument("predictions: shape mismatch " + shape_str(u.shape()) + " vs " +
                                shape_str(w.shape()));
  const std::size_t C = w.dim(0), J = w.dim(1), D1 = w.dim(2), D2 = w.dim(3);
  Tensor u_hat({C, J, D2});
  for (std::size_t i = 0; i < C; ++i) {
    ConstVecMap ui(u.data() + i * D1, static_cast<Eigen::Index>(D1));
    for (std::size_t j = 0; j < J; ++j) {
      ConstMatMap wij(w.data() + (i * J + j) * D1 * D2, static_cast<Eigen::Index>(D1),
                      static_cast<Eigen::Index>(D2));
      VecMap out(u_hat.data() + (i * J + j) * D2, static_cast<Eigen::Index>(D2));
      out.noalias() = wij.transpose() * ui;
    }
  }
  return u_hat;
}

PredictionGrads predictions_backward(const Tensor& u, const Tensor& w, const Tensor& d_u_hat) {
  const std::size_t C = w.dim(0), J = w.dim(1), D1 = w.dim(2), D2 = w.dim(3);
  PredictionGrads g;
  g.d_u = Tensor(u.shape());
  g.d_w = Tensor(w.shape());
  for (std::size_t i = 0; i < C; ++i) {
    ConstVecMap ui(u.data() + i * D1, static_cast<Eigen::Index>(D1));
    VecMap d_ui(g.d_u.data() + i * D1, static_cast<Eigen::Index>(D1));
    for (std::size_t j = 0; j < J; ++j) {
      ConstMatMap wij(w.data() + (i * J + j) * D1 * D2, static_cast<Eigen::Index>(D1),
                      static_cast<Eigen::Index>(D2));
      MatMap d_wij(g.d_w.data() + (i * J + j) * D1 * D2, static_cast<Eigen::Index>(D1),
                   static_cast<Eigen::Index>(D2));
      ConstVecMap d_out(d_u_hat.data() + (i * J + j) * D2, static_cast<Eigen::Index>(D2));
      d_wij.noalias() += ui * d_out.transpose();
      d_ui.noalias() += wij * d_out;
    }
  }
  return g;
}

Tensor dynamic_routing(const Tensor& u_hat, int iterations, RoutingState* state,
                       RoutingCache* cache) {
  if (u_hat.rank() != 3) throw std::invalid_argument("dynamic_routing: expected [C,J,D2]");
  if (iterations < 1) throw std::invalid_argument("dynamic_routing: iterations must be >= 1");
  const std::size_t C = u_hat.dim(0), J = u_hat.dim(1), D2 = u_hat.dim(2);

  Tensor b({C, J});
  Tensor v({J, D2});
  if (cache) {
    cache->u_hat = u_hat;
    cache->c.clear();
    cache->s.clear();
    cache->v.clear();
  }

  for (int it = 0; it < iterations; ++it) {
    Tensor c = softmax(b, 1);
    Tensor s({J, D2});
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < J; ++j) {
        const double cij = c.at2(i, j);
        for (std::size_t k = 0; k < D2; ++k) s.at2(j, k) += cij * u_hat.at3(i, j, k);
      }
    v = squash(s);
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < J; ++j) {
        double agree = 0.0;
        for (std::size_t k = 0; k < D2; ++k) agree += u_hat.at3(i, j, k) * v.at2(j, k);
        b.at2(i, j) += agree;
      }
    if (cache) {
      cache->c.push_back(c);
      cache->s.push_back(s);
      cache->v.push_back(v);
    }
  }

  if (state) {
    state->logits = b;
    state->couplings = softmax(b, 1);
    state->iterations = iterations;
  }
  return v;
}

Tensor dynamic_routing_backward(const RoutingCache& cache, const Tensor& d_v_out) {
  const Tensor& u_hat = cache.u_hat;
  const std::size_t C = u_hat.dim(0), J = u_hat.dim(1), D2 = u_hat.dim(2);
  const int T = static_cast<int>(cache.c.size());

  Tensor d_u_hat(u_hat.shape());
  Tensor g_next({C, J});  // dL/db_{t+1}; zero at the last iteration
  Tensor d_v = d_v_out;

  for (int t = T - 1; t >= 0; --t) {
    if (t < T - 1) {
      // v_t also feeds the agreement update b_{t+1} = b_t + u_hat . v_t
      d_v = Tensor({J, D2});
      for (std::size_t i = 0; i < C; ++i)
        for (std::size_t j = 0; j < J; ++j) {
          const double gb = g_next.at2(i, j);
          for (std::size_t k = 0; k < D2; ++k) {
            d_v.at2(j, k) += gb * u_hat.at3(i, j, k);
            d_u_hat.at3(i, j, k) += gb * cache.v[t].at2(j, k);
          }
        }
    }
    Tensor d_s = squash_backward(cache.s[t], d_v);
    Tensor d_c({C, J});
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < J; ++j) {
        double acc = 0.0;
        const double cij = cache.c[t].at2(i, j);
        for (std::size_t k = 0; k < D2; ++k) {
          acc += d_s.at2(j, k) * u_hat.at3(i, j, k);
          d_u_hat.at3(i, j, k) += cij * d_s.at2(j, k);
        }
        d_c.at2(i, j) = acc;
      }
    Tensor g_t = softmax_backward(cache.c[t], d_c, 1);
    g_t.vec() += g_next.vec();
    g_next = std::move(g_t);
  }
  return d_u_hat;
}

CapsuleBlock::CapsuleBlock(Config cfg, Rng& rng) : cfg_(cfg) {
  if (cfg_.conv_primary) {
    const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(double(cfg_.ctx_cols))));
    if (side * side != cfg_.ctx_cols)
      throw std::invalid_argument("capsule conv variant: ctx columns must be a square");
    const std::size_t k = static_cast<std::size_t>(cfg_.conv_kernel_size);
    const std::size_t out_side = side - k + 1;
    conv_kernel_ = Param(glorot_uniform({cfg_.conv_kernels, cfg_.ctx_rows, k, k},
                                        cfg_.ctx_rows * k * k, cfg_.conv_kernels * k * k, rng));
    proj_in_dim_ = cfg_.conv_kernels * out_side * out_side;
  } else {
    proj_in_dim_ = cfg_.ctx_rows * cfg_.ctx_cols;
  }
  const std::size_t out = cfg_.num_primary * cfg_.primary_dim;
  proj_w_ = Param(glorot_uniform({proj_in_dim_, out}, proj_in_dim_, out, rng));
  proj_b_ = Param(Tensor({out}));
  pred_w_ = Param(glorot_uniform({cfg_.num_primary, cfg_.num_digit, cfg_.primary_dim,
                                  cfg_.digit_dim},
                                 cfg_.primary_dim, cfg_.digit_dim, rng));
}

Tensor CapsuleBlock::forward(const Tensor& ctx, CapsCache* cache, RoutingState* state) const {
  if (ctx.rank() != 2 || ctx.dim(0) != cfg_.ctx_rows || ctx.dim(1) != cfg_.ctx_cols)
    throw std::invalid_argument("capsule forward: expected ctx [" +
                                std::to_string(cfg_.ctx_rows) + "," +
                                std::to_string(cfg_.ctx_cols) + "], got " +
                                shape_str(ctx.shape()));
  CapsCache local;
  CapsCache& c = cache ? *cache : local;

  Tensor proj_in;
  if (cfg_.conv_primary) {
    // each 256-wide context row becomes a 16x16 map; rows stack as channels
    const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(double(cfg_.ctx_cols))));
    Tensor maps = ctx.reshaped({1, cfg_.ctx_rows, side, side});
    Tensor a = conv2d_forward(maps, conv_kernel_.value, 1, 0, cache ? &c.conv : nullptr);
    if (cache) c.conv_pre_act = a;
    Tensor act = leaky_relu_forward(a, cfg_.leaky_slope);
    proj_in = act.reshaped({1, proj_in_dim_});
  } else {
    proj_in = ctx.reshaped({1, proj_in_dim_});
  }
  if (cache) {
    c.ctx_flat = ctx.reshaped({1, cfg_.ctx_rows * cfg_.ctx_cols});
    c.proj_in = proj_in;
  }

  Tensor pre = linear_forward(proj_in, proj_w_.value, proj_b_.value)
                   .reshaped({cfg_.num_primary, cfg_.primary_dim});
  Tensor u = squash(pre);
  Tensor u_hat = predictions(u, pred_w_.value);
  if (cache) {
    c.primary_pre = pre;
    c.primary = u;
    c.u_hat = u_hat;
  }
  return dynamic_routing(u_hat, cfg_.routing_iters, state, cache ? &c.routing : nullptr);
}

Tensor CapsuleBlock::backward(const CapsCache& cache, const Tensor& d_v) {
  Tensor d_u_hat = dynamic_routing_backward(cache.routing, d_v);
  PredictionGrads pg = predictions_backward(cache.primary, pred_w_.value, d_u_hat);
  pred_w_.grad.vec() += pg.d_w.vec();

  Tensor d_pre = squash_backward(cache.primary_pre, pg.d_u);
  LinearGrads lg = linear_backward(cache.proj_in, proj_w_.value,
                                   d_pre.reshaped({1, cfg_.num_primary * cfg_.primary_dim}));
  proj_w_.grad.vec() += lg.d_w.vec();
  proj_b_.grad.vec() += lg.d_b.vec();

  if (!cfg_.conv_primary) return lg.d_x.reshaped({cfg_.ctx_rows, cfg_.ctx_cols});

  const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(double(cfg_.ctx_cols))));
  const std::size_t k = static_cast<std::size_t>(cfg_.conv_kernel_size);
  const std::size_t out_side = side - k + 1;
  Tensor d_act = lg.d_x.reshaped({1, cfg_.conv_kernels, out_side, out_side});
  Tensor d_a = leaky_relu_backward(cache.conv_pre_act, d_act, cfg_.leaky_slope);
  Conv2dGrads cg = conv2d_backward(cache.conv, d_a);
  conv_kernel_.grad.vec() += cg.d_kernel.vec();
  return cg.d_input.reshaped({cfg_.ctx_rows, cfg_.ctx_cols});
}

void CapsuleBlock::visit_params(const std::string& prefix, const ParamVisitor& visit) {
  if (cfg_.conv_primary) visit(join_path(prefix, "conv.kernel"), conv_kernel_);
  visit(join_path(prefix, "proj.w"), proj_w_);
  visit(join_path(prefix, "proj.b"), proj_b_);
  visit(join_path(prefix, "pred.w"), pred_w_);
}

}  // namespace gaitcaps
