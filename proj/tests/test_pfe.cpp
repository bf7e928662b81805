#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <numeric>

#include "gaitcaps/gradcheck.hpp"
#include "gaitcaps/pfe.hpp"
#include "gaitcaps/rng.hpp"

using namespace gaitcaps;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Small config that keeps the gradient checks fast.
PfeConfig tiny_pfe() {
  PfeConfig cfg;
  cfg.conv = {{.out_channels = 2, .pool_after = true}, {.out_channels = 2, .pool_after = true}};
  cfg.bin_dim = 3;
  return cfg;
}

}  // namespace

TEST_CASE("set_pool single frame is identity") {
  Rng rng(1);
  Tensor maps = random_tensor({1, 2, 4, 4}, rng);
  Tensor out = set_pool(maps);
  CHECK(out.shape() == std::vector<std::size_t>{2, 4, 4});
  CHECK(std::memcmp(out.data(), maps.data(), out.size() * sizeof(double)) == 0);
}

TEST_CASE("set_pool invariant to duplication") {
  Rng rng(2);
  Tensor maps = random_tensor({3, 2, 4, 4}, rng);
  Tensor dup({6, 2, 4, 4});
  std::memcpy(dup.data(), maps.data(), maps.size() * sizeof(double));
  std::memcpy(dup.data() + maps.size(), maps.data(), maps.size() * sizeof(double));
  CHECK(bit_equal(set_pool(maps), set_pool(dup)));
}

TEST_CASE("set_pool matches elementwise max oracle") {
  Rng rng(3);
  Tensor maps = random_tensor({5, 2, 3, 3}, rng);
  Tensor out = set_pool(maps);
  const std::size_t per = 2 * 3 * 3;
  for (std::size_t i = 0; i < per; ++i) {
    double mx = maps[i];
    for (std::size_t t = 1; t < 5; ++t) mx = std::max(mx, maps[t * per + i]);
    CHECK(out[i] == mx);
  }
}

TEST_CASE("set_pool backward routes to first max frame") {
  // Two frames with an exact tie: gradient goes to frame 0.
  Tensor maps({2, 1, 1, 2}, {1.0, 5.0, 1.0, 5.0});
  SetPoolCache cache;
  set_pool(maps, &cache);
  Tensor d_out({1, 1, 2}, {1.0, 1.0});
  Tensor d_maps = set_pool_backward(cache, d_out);
  CHECK(d_maps[0] == 1.0);
  CHECK(d_maps[1] == 1.0);
  CHECK(d_maps[2] == 0.0);
  CHECK(d_maps[3] == 0.0);
}

TEST_CASE("hpm_split constant map gives constant bins") {
  Tensor map = Tensor::full({3, 16, 4}, 2.5);
  Tensor bins = hpm_split(map);
  REQUIRE(bins.shape() == std::vector<std::size_t>{31, 6});
  for (std::size_t i = 0; i < bins.size(); ++i) CHECK(bins[i] == doctest::Approx(2.5));
}

TEST_CASE("hpm_split scale structure is 1+2+4+8+16") {
  std::size_t total = 0;
  for (std::size_t s : kHpmScales) total += s;
  CHECK(total == kNumBins);
}

TEST_CASE("hpm_split matches strip loop oracle") {
  Rng rng(5);
  Tensor map = random_tensor({2, 16, 4}, rng);
  Tensor bins = hpm_split(map);
  const std::size_t C = 2, W = 4;
  std::size_t bin = 0;
  for (std::size_t scale : {1, 2, 4, 8, 16}) {
    const std::size_t sh = 16 / scale;
    for (std::size_t s = 0; s < scale; ++s, ++bin) {
      for (std::size_t c = 0; c < C; ++c) {
        double mx = map.at3(c, s * sh, 0);
        double sum = 0.0;
        for (std::size_t r = s * sh; r < (s + 1) * sh; ++r)
          for (std::size_t x = 0; x < W; ++x) {
            mx = std::max(mx, map.at3(c, r, x));
            sum += map.at3(c, r, x);
          }
        CHECK(bins.at2(bin, c) == mx);
        CHECK(bins.at2(bin, C + c) == doctest::Approx(sum / double(sh * W)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("hpm_split pads heights not divisible by 16") {
  Rng rng(6);
  Tensor map = random_tensor({1, 10, 3}, rng);
  Tensor bins = hpm_split(map);
  CHECK(bins.dim(0) == kNumBins);
  // bottom scale-16 strips fall entirely in the zero padding
  CHECK(bins.at2(30, 0) == 0.0);  // max of padded rows
  CHECK(bins.at2(30, 1) == 0.0);  // mean of padded rows
}

TEST_CASE("hpm scale-1 bin aggregates the union of scale-16 strips") {
  Rng rng(7);
  Tensor map = random_tensor({2, 16, 4}, rng);
  Tensor bins = hpm_split(map);
  for (std::size_t c = 0; c < 2; ++c) {
    double mx = bins.at2(15, c);
    double mean = 0.0;
    for (std::size_t b = 15; b < 31; ++b) {
      mx = std::max(mx, bins.at2(b, c));
      mean += bins.at2(b, 2 + c);
    }
    CHECK(bins.at2(0, c) == mx);
    CHECK(bins.at2(0, 2 + c) == doctest::Approx(mean / 16.0).epsilon(1e-12));
  }
}

TEST_CASE("hpm backward matches finite differences") {
  Rng rng(8);
  Tensor map = random_tensor({2, 16, 3}, rng);
  Tensor proj = random_tensor({31 * 4}, rng);
  auto f = [&](const std::vector<Tensor>& p) {
    Tensor bins = hpm_split(p[0]);
    double s = 0.0;
    for (std::size_t i = 0; i < bins.size(); ++i) s += bins[i] * proj[i];
    return s;
  };
  auto grad = [&](const std::vector<Tensor>& p) {
    HpmCache cache;
    Tensor bins = hpm_split(p[0], &cache);
    Tensor d_bins(bins.shape());
    for (std::size_t i = 0; i < bins.size(); ++i) d_bins[i] = proj[i];
    return std::vector<Tensor>{hpm_split_backward(cache, d_bins)};
  };
  CHECK(finite_diff_check(f, grad, {map}) < 1e-8);
}

TEST_CASE("pfe_forward emits exactly 31 bins of width d") {
  Rng rng(9);
  PfeBlock pfe(PfeConfig::desk(), rng);
  for (std::size_t T : {1, 3}) {
    Tensor frames = random_tensor({T, 1, 64, 64}, rng, 0.5);
    Tensor bins = pfe.forward(frames);
    CHECK(bins.shape() == std::vector<std::size_t>{31, 64});
  }
}

TEST_CASE("pfe_forward invariant to frame permutation and duplication") {
  Rng rng(10);
  PfeBlock pfe(tiny_pfe(), rng);
  Tensor frames = random_tensor({4, 1, 32, 32}, rng);
  Tensor base = pfe.forward(frames);

  Tensor perm({4, 1, 32, 32});
  const std::size_t per = 32 * 32;
  const std::size_t order[4] = {2, 0, 3, 1};
  for (std::size_t t = 0; t < 4; ++t)
    std::memcpy(perm.data() + t * per, frames.data() + order[t] * per, per * sizeof(double));
  CHECK(bit_equal(base, pfe.forward(perm)));

  Tensor dup({8, 1, 32, 32});
  std::memcpy(dup.data(), frames.data(), frames.size() * sizeof(double));
  std::memcpy(dup.data() + frames.size(), frames.data(), frames.size() * sizeof(double));
  CHECK(bit_equal(base, pfe.forward(dup)));
}

TEST_CASE("pfe backward matches finite differences") {
  Rng rng(11);
  PfeBlock pfe(tiny_pfe(), rng);
  Tensor frames = random_tensor({2, 1, 32, 32}, rng, 0.3);
  Tensor proj = random_tensor({31 * 3}, rng);

  std::vector<Param*> params;
  pfe.visit_params("pfe", [&](const std::string&, Param& p) { params.push_back(&p); });
  std::vector<Tensor> point;
  for (Param* p : params) point.push_back(p->value);

  auto load = [&](const std::vector<Tensor>& pt) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = pt[i];
  };
  auto f = [&](const std::vector<Tensor>& pt) {
    load(pt);
    Tensor bins = pfe.forward(frames);
    double s = 0.0;
    for (std::size_t i = 0; i < bins.size(); ++i) s += bins[i] * proj[i];
    return s;
  };
  auto grad = [&](const std::vector<Tensor>& pt) {
    load(pt);
    for (Param* p : params) p->zero_grad();
    PfeCache cache;
    Tensor bins = pfe.forward(frames, &cache);
    Tensor d_bins(bins.shape());
    for (std::size_t i = 0; i < bins.size(); ++i) d_bins[i] = proj[i];
    pfe.backward(cache, d_bins);
    std::vector<Tensor> out;
    for (Param* p : params) out.push_back(p->grad);
    return out;
  };
  CHECK(finite_diff_check(f, grad, point) < 1e-4);
}

namespace {

// Exhaustive enumeration over ordered (a,p,n) triplets and bins.
double triplet_oracle(const std::vector<Tensor>& emb, const std::vector<int>& labels,
                      double margin) {
  const std::size_t B = emb.size(), bins = emb[0].dim(0), d = emb[0].dim(1);
  auto dist = [&](std::size_t x, std::size_t y, std::size_t k) {
    double ssq = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double diff = emb[x].at2(k, i) - emb[y].at2(k, i);
      ssq += diff * diff;
    }
    return std::sqrt(ssq);
  };
  double sum = 0.0;
  std::size_t active = 0;
  for (std::size_t a = 0; a < B; ++a)
    for (std::size_t p = 0; p < B; ++p)
      for (std::size_t n = 0; n < B; ++n) {
        if (p == a || labels[p] != labels[a] || labels[n] == labels[a]) continue;
        for (std::size_t k = 0; k < bins; ++k) {
          const double t = margin + dist(a, p, k) - dist(a, n, k);
          if (t > 0.0) {
            sum += t;
            ++active;
          }
        }
      }
  return active ? sum / double(active) : 0.0;
}

}  // namespace

TEST_CASE("triplet loss zero for well-separated clusters") {
  std::vector<Tensor> emb;
  for (int i = 0; i < 4; ++i) {
    Tensor e({31, 2});
    const double base = i < 2 ? 0.0 : 100.0;
    for (std::size_t k = 0; k < 31; ++k) {
      e.at2(k, 0) = base;
      e.at2(k, 1) = base;
    }
    emb.push_back(e);
  }
  CHECK(triplet_loss_ba(emb, {0, 0, 1, 1}, 0.2) == 0.0);
}

TEST_CASE("triplet loss equals margin for identical embeddings") {
  std::vector<Tensor> emb(4, Tensor::full({31, 3}, 1.5));
  CHECK(triplet_loss_ba(emb, {0, 0, 1, 1}, 0.2) == 0.2);
}

TEST_CASE("triplet loss matches exhaustive oracle on random batches") {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tensor> emb;
    for (int i = 0; i < 4; ++i) emb.push_back(random_tensor({31, 4}, rng));
    std::vector<int> labels = {0, 0, 1, 1};
    const double loss = triplet_loss_ba(emb, labels, 0.2);
    const double ref = triplet_oracle(emb, labels, 0.2);
    CHECK(loss == doctest::Approx(ref).epsilon(1e-10));
    CHECK(loss >= 0.0);
  }
}

TEST_CASE("triplet loss rejects batches without a valid triplet") {
  std::vector<Tensor> emb(3, Tensor::full({31, 2}, 0.0));
  CHECK_THROWS(triplet_loss_ba(emb, {0, 1, 2}, 0.2));  // no positives
}

TEST_CASE("triplet loss gradient matches finite differences") {
  Rng rng(13);
  std::vector<Tensor> emb;
  for (int i = 0; i < 4; ++i) emb.push_back(random_tensor({5, 3}, rng));
  std::vector<int> labels = {0, 0, 1, 1};
  auto f = [&](const std::vector<Tensor>& p) { return triplet_loss_ba(p, labels, 0.2); };
  auto grad = [&](const std::vector<Tensor>& p) {
    std::vector<Tensor> d;
    triplet_loss_ba(p, labels, 0.2, &d);
    return d;
  };
  CHECK(finite_diff_check(f, grad, emb) < 1e-6);
}
