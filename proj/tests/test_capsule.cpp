#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "gaitcaps/capsule.hpp"
#include "gaitcaps/gradcheck.hpp"
#include "gaitcaps/rng.hpp"

using namespace gaitcaps;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

double norm(const Tensor& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * t[i];
  return std::sqrt(s);
}

// Step-by-step transcription of the routing loop, independent of the
// implementation path.
Tensor routing_oracle(const Tensor& u_hat, int iters) {
  const std::size_t C = u_hat.dim(0), J = u_hat.dim(1), D2 = u_hat.dim(2);
  std::vector<double> b(C * J, 0.0);
  Tensor v({J, D2});
  for (int it = 0; it < iters; ++it) {
    std::vector<double> c(C * J);
    for (std::size_t i = 0; i < C; ++i) {
      double mx = b[i * J];
      for (std::size_t j = 0; j < J; ++j) mx = std::max(mx, b[i * J + j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < J; ++j) sum += std::exp(b[i * J + j] - mx);
      for (std::size_t j = 0; j < J; ++j) c[i * J + j] = std::exp(b[i * J + j] - mx) / sum;
    }
    for (std::size_t j = 0; j < J; ++j) {
      std::vector<double> s(D2, 0.0);
      for (std::size_t i = 0; i < C; ++i)
        for (std::size_t k = 0; k < D2; ++k) s[k] += c[i * J + j] * u_hat.at3(i, j, k);
      double ssq = 0.0;
      for (double x : s) ssq += x * x;
      const double nrm = std::sqrt(ssq + 1e-12);
      const double g = nrm / (1.0 + ssq + 1e-12);
      for (std::size_t k = 0; k < D2; ++k) v.at2(j, k) = g * s[k];
      for (std::size_t i = 0; i < C; ++i) {
        double agree = 0.0;
        for (std::size_t k = 0; k < D2; ++k) agree += u_hat.at3(i, j, k) * v.at2(j, k);
        b[i * J + j] += agree;
      }
    }
  }
  return v;
}

}  // namespace

TEST_CASE("squash of zero vector is zero") {
  Tensor z({5});
  Tensor v = squash(z);
  for (std::size_t i = 0; i < 5; ++i) CHECK(v[i] == 0.0);
}

TEST_CASE("squash of unit vector halves it") {
  Tensor u({4});
  u[2] = 1.0;
  Tensor v = squash(u);
  CHECK(v[2] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(v[0] == 0.0);
}

TEST_CASE("squash norm and direction follow the formula") {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor s = random_tensor({8}, rng);
    Tensor v = squash(s);
    const double ns = norm(s);
    const double expect = ns * ns / (1.0 + ns * ns);
    CHECK(std::abs(norm(v) - expect) < 1e-12);
    // parallel: v x s == 0 componentwise via ratio test
    for (std::size_t i = 0; i < 8; ++i)
      CHECK(std::abs(v[i] - expect / ns * s[i]) < 1e-12);
    CHECK(norm(v) < 1.0);
  }
}

TEST_CASE("squash norm is monotone in the input norm") {
  Rng rng(2);
  Tensor dir = random_tensor({6}, rng);
  double prev = -1.0;
  for (double scale : {0.1, 0.5, 1.0, 2.0, 5.0, 20.0}) {
    Tensor s = dir;
    for (std::size_t i = 0; i < 6; ++i) s[i] *= scale;
    const double n = norm(squash(s));
    CHECK(n > prev);
    prev = n;
  }
}

TEST_CASE("squash backward matches finite differences") {
  Rng rng(3);
  Tensor s = random_tensor({6}, rng);
  Tensor proj = random_tensor({6}, rng);
  auto f = [&](const std::vector<Tensor>& p) {
    Tensor v = squash(p[0]);
    double acc = 0.0;
    for (std::size_t i = 0; i < 6; ++i) acc += v[i] * proj[i];
    return acc;
  };
  auto grad = [&](const std::vector<Tensor>& p) {
    return std::vector<Tensor>{squash_backward(p[0], proj)};
  };
  CHECK(finite_diff_check(f, grad, {s}) < 1e-8);
}

TEST_CASE("predictions with identity weight matrices copy the capsule") {
  const std::size_t C = 3, J = 2, D = 4;
  Rng rng(4);
  Tensor u = random_tensor({C, D}, rng);
  Tensor w({C, J, D, D});
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t k = 0; k < D; ++k) w[((i * J + j) * D + k) * D + k] = 1.0;
  Tensor u_hat = predictions(u, w);
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t k = 0; k < D; ++k) CHECK(u_hat.at3(i, j, k) == u.at2(i, k));
}

TEST_CASE("predictions of zero capsules are zero") {
  Rng rng(5);
  Tensor u({2, 3});
  Tensor w = random_tensor({2, 2, 3, 4}, rng);
  Tensor u_hat = predictions(u, w);
  for (std::size_t i = 0; i < u_hat.size(); ++i) CHECK(u_hat[i] == 0.0);
}

TEST_CASE("predictions match per-pair matvec oracle") {
  Rng rng(6);
  const std::size_t C = 2, J = 3, D1 = 4, D2 = 2;
  Tensor u = random_tensor({C, D1}, rng);
  Tensor w = random_tensor({C, J, D1, D2}, rng);
  Tensor u_hat = predictions(u, w);
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t k = 0; k < D2; ++k) {
        double acc = 0.0;
        for (std::size_t m = 0; m < D1; ++m) acc += u.at2(i, m) * w[((i * J + j) * D1 + m) * D2 + k];
        CHECK(u_hat.at3(i, j, k) == doctest::Approx(acc).epsilon(1e-13));
      }
}

TEST_CASE("routing with one digit capsule ignores iteration count") {
  Rng rng(7);
  Tensor u_hat = random_tensor({3, 1, 4}, rng);
  for (int iters : {1, 3, 7}) {
    RoutingState state;
    Tensor v = dynamic_routing(u_hat, iters, &state);
    // c must be exactly 1 and v = squash(sum_i u_hat)
    Tensor s({4});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 4; ++k) s[k] += u_hat.at3(i, 0, k);
    Tensor expect = squash(s);
    for (std::size_t k = 0; k < 4; ++k) CHECK(v.at2(0, k) == doctest::Approx(expect[k]).epsilon(1e-14));
    for (std::size_t i = 0; i < 3; ++i) CHECK(state.couplings.at2(i, 0) == 1.0);
  }
}

TEST_CASE("identical predictions keep couplings uniform") {
  Rng rng(8);
  const std::size_t C = 3, J = 4, D2 = 2;
  Tensor u_hat({C, J, D2});
  for (std::size_t i = 0; i < C; ++i) {
    const double a = rng.normal(), b = rng.normal();
    for (std::size_t j = 0; j < J; ++j) {
      u_hat.at3(i, j, 0) = a;
      u_hat.at3(i, j, 1) = b;
    }
  }
  RoutingState state;
  dynamic_routing(u_hat, 3, &state);
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = 0; j < J; ++j)
      CHECK(state.couplings.at2(i, j) == doctest::Approx(1.0 / J).epsilon(1e-12));
}

TEST_CASE("routing matches step-by-step transcription oracle") {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t C = 2 + rng.below(3), J = 2 + rng.below(3), D2 = 2 + rng.below(3);
    Tensor u_hat = random_tensor({C, J, D2}, rng);
    RoutingState state;
    Tensor v = dynamic_routing(u_hat, 3, &state);
    Tensor ref = routing_oracle(u_hat, 3);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(v[i] - ref[i]) < 1e-12);
    for (std::size_t i = 0; i < C; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < J; ++j) {
        sum += state.couplings.at2(i, j);
        CHECK(state.couplings.at2(i, j) > 0.0);
        CHECK(state.couplings.at2(i, j) < 1.0);
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("one routing iteration equals uniform-coupling aggregation") {
  Rng rng(10);
  Tensor u_hat = random_tensor({4, 3, 5}, rng);
  Tensor v = dynamic_routing(u_hat, 1);
  for (std::size_t j = 0; j < 3; ++j) {
    Tensor s({5});
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t k = 0; k < 5; ++k) s[k] += u_hat.at3(i, j, k) / 3.0;
    Tensor expect = squash(s);
    for (std::size_t k = 0; k < 5; ++k) CHECK(std::abs(v.at2(j, k) - expect[k]) < 1e-12);
  }
}

TEST_CASE("routing backward matches finite differences") {
  Rng rng(11);
  Tensor u_hat = random_tensor({3, 2, 3}, rng);
  Tensor proj = random_tensor({6}, rng);
  auto f = [&](const std::vector<Tensor>& p) {
    Tensor v = dynamic_routing(p[0], 3);
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * proj[i];
    return s;
  };
  auto grad = [&](const std::vector<Tensor>& p) {
    RoutingCache cache;
    Tensor v = dynamic_routing(p[0], 3, nullptr, &cache);
    Tensor d_v(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) d_v[i] = proj[i];
    return std::vector<Tensor>{dynamic_routing_backward(cache, d_v)};
  };
  CHECK(finite_diff_check(f, grad, {u_hat}) < 1e-7);
}

namespace {

CapsuleBlock::Config small_caps(bool conv_variant = false) {
  CapsuleBlock::Config cfg;
  cfg.ctx_rows = 5;
  cfg.ctx_cols = conv_variant ? 16 : 6;  // conv variant reshapes rows to 4x4
  cfg.num_primary = 2;
  cfg.primary_dim = 4;
  cfg.num_digit = 2;
  cfg.digit_dim = 3;
  cfg.routing_iters = 3;
  cfg.conv_primary = conv_variant;
  cfg.conv_kernels = 3;
  cfg.conv_kernel_size = 3;
  return cfg;
}

}  // namespace

TEST_CASE("primary capsule projection: zero weights give zero capsules") {
  Rng rng(12);
  CapsuleBlock::Config cfg;
  cfg.ctx_rows = 31;
  cfg.ctx_cols = 16;
  CapsuleBlock caps(cfg, rng);
  std::vector<Param*> params;
  caps.visit_params("caps", [&](const std::string& path, Param& p) {
    if (path.find("proj") != std::string::npos) p.value.fill(0.0);
  });
  Tensor ctx = random_tensor({31, 16}, rng);
  CapsCache cache;
  caps.forward(ctx, &cache);
  for (std::size_t i = 0; i < cache.primary.size(); ++i) CHECK(cache.primary[i] == 0.0);
}

TEST_CASE("capsule block output shape is [J,D2] with 6x128 defaults") {
  Rng rng(13);
  CapsuleBlock::Config cfg;  // defaults: 31x256 in, 6 primary capsules of 128
  CapsuleBlock caps(cfg, rng);
  Tensor ctx = random_tensor({31, 256}, rng, 0.1);
  CapsCache cache;
  Tensor v = caps.forward(ctx, &cache);
  CHECK(v.shape() == std::vector<std::size_t>{8, 16});
  CHECK(cache.primary.shape() == std::vector<std::size_t>{6, 128});
  for (std::size_t r = 0; r < 6; ++r) {
    double ssq = 0.0;
    for (std::size_t k = 0; k < 128; ++k) ssq += cache.primary.at2(r, k) * cache.primary.at2(r, k);
    CHECK(std::sqrt(ssq) < 1.0);
  }
}

TEST_CASE("primary capsules match composed projection+squash oracle") {
  Rng rng(14);
  CapsuleBlock caps(small_caps(), rng);
  Tensor ctx = random_tensor({5, 6}, rng);

  Tensor proj_w, proj_b;
  caps.visit_params("caps", [&](const std::string& path, Param& p) {
    if (path == "caps.proj.w") proj_w = p.value;
    if (path == "caps.proj.b") proj_b = p.value;
  });
  CapsCache cache;
  caps.forward(ctx, &cache);

  // oracle: flatten, matmul, add bias, squash rows
  const std::size_t in = 30, out = 8;
  for (std::size_t o = 0; o < out; ++o) {
    double acc = proj_b[o];
    for (std::size_t i = 0; i < in; ++i) acc += ctx[i] * proj_w.at2(i, o);
    CHECK(cache.primary_pre[o] == doctest::Approx(acc).epsilon(1e-12));
  }
  Tensor sq = squash(cache.primary_pre);
  for (std::size_t i = 0; i < sq.size(); ++i) CHECK(cache.primary[i] == sq[i]);
}

TEST_CASE("conv-primary variant: zero kernels zero the projection input") {
  Rng rng(15);
  CapsuleBlock caps(small_caps(true), rng);
  Tensor proj_b;
  caps.visit_params("caps", [&](const std::string& path, Param& p) {
    if (path == "caps.conv.kernel") p.value.fill(0.0);
    if (path == "caps.proj.b") proj_b = p.value;
  });
  Tensor ctx = random_tensor({5, 16}, rng);
  CapsCache cache;
  caps.forward(ctx, &cache);
  // conv output is all zero, so pre-squash capsules equal the bias (zero here)
  for (std::size_t i = 0; i < cache.primary_pre.size(); ++i)
    CHECK(cache.primary_pre[i] == proj_b[i]);
}

TEST_CASE("conv-primary variant keeps the [J,D2] contract") {
  Rng rng(16);
  CapsuleBlock::Config cfg;  // 31 x 256 context, 16x16 reshape
  cfg.conv_primary = true;
  CapsuleBlock caps(cfg, rng);
  Tensor ctx = random_tensor({31, 256}, rng, 0.1);
  Tensor v = caps.forward(ctx);
  CHECK(v.shape() == std::vector<std::size_t>{8, 16});
}

TEST_CASE("capsule block gradient check (predictions + routing + squash)") {
  Rng rng(17);
  for (bool conv_variant : {false, true}) {
    CapsuleBlock caps(small_caps(conv_variant), rng);
    Tensor ctx = random_tensor({5, small_caps(conv_variant).ctx_cols}, rng);
    Tensor proj = random_tensor({6}, rng);

    std::vector<Param*> params;
    caps.visit_params("caps", [&](const std::string&, Param& p) { params.push_back(&p); });
    std::vector<Tensor> point = {ctx};
    for (Param* q : params) point.push_back(q->value);

    auto load = [&](const std::vector<Tensor>& pt) {
      for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = pt[i + 1];
    };
    auto f = [&](const std::vector<Tensor>& pt) {
      load(pt);
      Tensor v = caps.forward(pt[0]);
      double s = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * proj[i];
      return s;
    };
    auto grad = [&](const std::vector<Tensor>& pt) {
      load(pt);
      for (Param* q : params) q->zero_grad();
      CapsCache cache;
      Tensor v = caps.forward(pt[0], &cache);
      Tensor d_v(v.shape());
      for (std::size_t i = 0; i < v.size(); ++i) d_v[i] = proj[i];
      Tensor d_ctx = caps.backward(cache, d_v);
      std::vector<Tensor> out = {d_ctx};
      for (Param* q : params) out.push_back(q->grad);
      return out;
    };
    CHECK(finite_diff_check(f, grad, point) < 1e-4);
  }
}
