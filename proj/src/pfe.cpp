#include "gaitcaps/pfe.hpp"

#include <cmath>
#include <stdexcept>

namespace gaitcaps {

Tensor set_pool(const Tensor& maps, SetPoolCache* cache) {
  if (maps.rank() != 4) throw std::invalid_argument("set_pool: expected [T,C,H,W]");
  const std::size_t T = maps.dim(0), per = maps.size() / T;
  if (T < 1) throw std::invalid_argument("set_pool: empty sequence");
  Tensor out({maps.dim(1), maps.dim(2), maps.dim(3)});
  std::vector<std::size_t> argmax(per, 0);
  for (std::size_t i = 0; i < per; ++i) out[i] = maps[i];
  for (std::size_t t = 1; t < T; ++t) {
    const double* frame = maps.data() + t * per;
    for (std::size_t i = 0; i < per; ++i) {
      if (frame[i] > out[i]) {
        out[i] = frame[i];
        argmax[i] = t;
      }
    }
  }
  if (cache) {
    cache->in_shape = maps.shape();
    cache->argmax = std::move(argmax);
  }
  return out;
}

Tensor set_pool_backward(const SetPoolCache& cache, const Tensor& d_out) {
  Tensor d_maps(cache.in_shape);
  const std::size_t per = d_out.size();
  for (std::size_t i = 0; i < per; ++i) d_maps[cache.argmax[i] * per + i] += d_out[i];
  return d_maps;
}

Tensor hpm_split(const Tensor& map, HpmCache* cache) {
  if (map.rank() != 3) throw std::invalid_argument("hpm_split: expected [C,H,W]");
  const std::size_t C = map.dim(0), H = map.dim(1), W = map.dim(2);
  const std::size_t Hp = (H + 15) / 16 * 16;

  Tensor bins({kNumBins, 2 * C});
  std::vector<std::size_t> argmax(kNumBins * C, 0);
  std::vector<std::size_t> begin(kNumBins), end(kNumBins);

  std::size_t bin = 0;
  for (std::size_t scale : kHpmScales) {
    const std::size_t strip_h = Hp / scale;
    for (std::size_t s = 0; s < scale; ++s, ++bin) {
      const std::size_t r0 = s * strip_h, r1 = (s + 1) * strip_h;
      begin[bin] = r0;
      end[bin] = r1;
      for (std::size_t c = 0; c < C; ++c) {
        double mx = -std::numeric_limits<double>::infinity();
        std::size_t mx_idx = 0;
        double sum = 0.0;
        for (std::size_t r = r0; r < r1; ++r) {
          for (std::size_t x = 0; x < W; ++x) {
            const double v = r < H ? map.at3(c, r, x) : 0.0;  // bottom zero padding
            sum += v;
            if (v > mx) {
              mx = v;
              mx_idx = (c * Hp + r) * W + x;
            }
          }
        }
        bins.at2(bin, c) = mx;
        bins.at2(bin, C + c) = sum / static_cast<double>(strip_h * W);
        argmax[bin * C + c] = mx_idx;
      }
    }
  }
  if (cache) {
    cache->map_shape = map.shape();
    cache->padded_h = Hp;
    cache->argmax = std::move(argmax);
    cache->strip_begin = std::move(begin);
    cache->strip_end = std::move(end);
  }
  return bins;
}

Tensor hpm_split_backward(const HpmCache& cache, const Tensor& d_bins) {
  const std::size_t C = cache.map_shape[0], H = cache.map_shape[1], W = cache.map_shape[2];
  const std::size_t Hp = cache.padded_h;
  Tensor d_map(cache.map_shape);
  for (std::size_t bin = 0; bin < kNumBins; ++bin) {
    const std::size_t r0 = cache.strip_begin[bin], r1 = cache.strip_end[bin];
    const double inv = 1.0 / static_cast<double>((r1 - r0) * W);
    for (std::size_t c = 0; c < C; ++c) {
      // max path: skip if the winner was a padded row
      const std::size_t idx = cache.argmax[bin * C + c];
      const std::size_t r = (idx / W) % Hp;
      if (r < H) {
        const std::size_t x = idx % W;
        d_map.at3(c, r, x) += d_bins.at2(bin, c);
      }
      // mean path over real rows only; padded rows carry no gradient
      const double g = d_bins.at2(bin, C + c) * inv;
      for (std::size_t rr = r0; rr < std::min(r1, H); ++rr)
        for (std::size_t x = 0; x < W; ++x) d_map.at3(c, rr, x) += g;
    }
  }
  return d_map;
}

PfeConfig PfeConfig::desk() {
  PfeConfig cfg;
  cfg.conv = {
      {.out_channels = 16, .pool_after = true},
      {.out_channels = 16},
      {.out_channels = 32, .pool_after = true},
      {.out_channels = 32},
  };
  cfg.bin_dim = 64;
  return cfg;
}

PfeConfig PfeConfig::full() {
  PfeConfig cfg;
  cfg.conv = {
      {.out_channels = 32}, {.out_channels = 32, .pool_after = true},
      {.out_channels = 64}, {.out_channels = 64, .pool_after = true},
      {.out_channels = 128}, {.out_channels = 128},
  };
  cfg.bin_dim = 256;
  return cfg;
}

PfeBlock::PfeBlock(PfeConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  std::size_t in_ch = 1;
  for (const ConvLayerSpec& layer : cfg_.conv) {
    const std::size_t k = static_cast<std::size_t>(layer.kernel);
    const std::size_t fan_in = in_ch * k * k;
    const std::size_t fan_out = layer.out_channels * k * k;
    kernels_.emplace_back(glorot_uniform({layer.out_channels, in_ch, k, k}, fan_in, fan_out, rng));
    in_ch = layer.out_channels;
  }
  const std::size_t raw_dim = 2 * in_ch;
  for (std::size_t b = 0; b < kNumBins; ++b) {
    bin_w_.emplace_back(glorot_uniform({raw_dim, cfg_.bin_dim}, raw_dim, cfg_.bin_dim, rng));
    bin_b_.emplace_back(Tensor({cfg_.bin_dim}));
  }
}

Tensor PfeBlock::forward(const Tensor& frames, PfeCache* cache) const {
  if (frames.rank() != 4 || frames.dim(1) != 1)
    throw std::invalid_argument("pfe_forward: expected frames [T,1,H,W]");
  if (frames.dim(0) < 1) throw std::invalid_argument("pfe_forward: empty sequence");

  PfeCache local;
  PfeCache& c = cache ? *cache : local;
  c.conv.resize(cfg_.conv.size());
  c.pre_act.resize(cfg_.conv.size());
  c.pool.resize(cfg_.conv.size());
  c.pooled.assign(cfg_.conv.size(), false);

  Tensor x = frames;
  for (std::size_t l = 0; l < cfg_.conv.size(); ++l) {
    const ConvLayerSpec& spec = cfg_.conv[l];
    Tensor a = conv2d_forward(x, kernels_[l].value, spec.stride, spec.padding,
                              cache ? &c.conv[l] : nullptr);
    if (cache) c.pre_act[l] = a;
    x = leaky_relu_forward(a, cfg_.leaky_slope);
    if (spec.pool_after) {
      x = maxpool2d_forward(x, spec.pool_window, spec.pool_stride, cache ? &c.pool[l] : nullptr);
      c.pooled[l] = true;
    }
  }

  Tensor pooled = set_pool(x, cache ? &c.set_pool : nullptr);
  Tensor raw = hpm_split(pooled, cache ? &c.hpm : nullptr);
  if (cache) c.raw_bins = raw;

  const std::size_t raw_dim = raw.dim(1);
  Tensor bins({kNumBins, cfg_.bin_dim});
  for (std::size_t b = 0; b < kNumBins; ++b) {
    Tensor row({1, raw_dim});
    for (std::size_t i = 0; i < raw_dim; ++i) row[i] = raw.at2(b, i);
    Tensor y = linear_forward(row, bin_w_[b].value, bin_b_[b].value);
    for (std::size_t i = 0; i < cfg_.bin_dim; ++i) bins.at2(b, i) = y[i];
  }
  return bins;
}

void PfeBlock::backward(const PfeCache& cache, const Tensor& d_bins) {
  const std::size_t raw_dim = cache.raw_bins.dim(1);
  Tensor d_raw({kNumBins, 2 * map_channels()});
  for (std::size_t b = 0; b < kNumBins; ++b) {
    Tensor row({1, raw_dim});
    for (std::size_t i = 0; i < raw_dim; ++i) row[i] = cache.raw_bins.at2(b, i);
    Tensor d_y({1, cfg_.bin_dim});
    for (std::size_t i = 0; i < cfg_.bin_dim; ++i) d_y[i] = d_bins.at2(b, i);
    LinearGrads g = linear_backward(row, bin_w_[b].value, d_y);
    bin_w_[b].grad.vec() += g.d_w.vec();
    bin_b_[b].grad.vec() += g.d_b.vec();
    for (std::size_t i = 0; i < raw_dim; ++i) d_raw.at2(b, i) = g.d_x[i];
  }

  Tensor d_pooled = hpm_split_backward(cache.hpm, d_raw);
  Tensor d_x = set_pool_backward(cache.set_pool, d_pooled);

  for (std::size_t l = cfg_.conv.size(); l-- > 0;) {
    if (cache.pooled[l]) d_x = maxpool2d_backward(cache.pool[l], d_x);
    d_x = leaky_relu_backward(cache.pre_act[l], d_x, cfg_.leaky_slope);
    Conv2dGrads g = conv2d_backward(cache.conv[l], d_x, /*need_d_input=*/l > 0);
    kernels_[l].grad.vec() += g.d_kernel.vec();
    if (l > 0) d_x = std::move(g.d_input);
  }
}

void PfeBlock::visit_params(const std::string& prefix, const ParamVisitor& visit) {
  for (std::size_t l = 0; l < kernels_.size(); ++l)
    visit(join_path(prefix, "conv" + std::to_string(l) + ".kernel"), kernels_[l]);
  for (std::size_t b = 0; b < kNumBins; ++b) {
    visit(join_path(prefix, "bin" + std::to_string(b) + ".w"), bin_w_[b]);
    visit(join_path(prefix, "bin" + std::to_string(b) + ".b"), bin_b_[b]);
  }
}

double triplet_loss_ba(const std::vector<Tensor>& embeddings, const std::vector<int>& labels,
                       double margin, std::vector<Tensor>* d_embeddings) {
  const std::size_t B = embeddings.size();
  if (labels.size() != B) throw std::invalid_argument("triplet_loss_ba: labels/batch mismatch");
  if (B < 3) throw std::invalid_argument("triplet_loss_ba: degenerate batch");
  const std::size_t bins = embeddings[0].dim(0), d = embeddings[0].dim(1);

  // Pairwise per-bin distances. Unguarded sqrt: zero distance stays exactly
  // zero, and its subgradient is taken as zero below.
  std::vector<double> dist(B * B * bins, 0.0);
  for (std::size_t a = 0; a < B; ++a)
    for (std::size_t b = 0; b < B; ++b) {
      if (a == b) continue;
      for (std::size_t k = 0; k < bins; ++k) {
        double ssq = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          const double diff = embeddings[a].at2(k, i) - embeddings[b].at2(k, i);
          ssq += diff * diff;
        }
        dist[(a * B + b) * bins + k] = std::sqrt(ssq);
      }
    }

  if (d_embeddings) {
    d_embeddings->assign(B, Tensor({bins, d}));
  }

  // Summing margin-relative deviations keeps the all-identical case exactly
  // equal to the margin.
  double dev_sum = 0.0;
  std::size_t active = 0, triplets = 0;
  for (std::size_t a = 0; a < B; ++a)
    for (std::size_t p = 0; p < B; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t n = 0; n < B; ++n) {
        if (labels[n] == labels[a]) continue;
        ++triplets;
        for (std::size_t k = 0; k < bins; ++k) {
          const double dev = dist[(a * B + p) * bins + k] - dist[(a * B + n) * bins + k];
          if (margin + dev > 0.0) {
            dev_sum += dev;
            ++active;
          }
        }
      }
    }
  if (triplets == 0) throw std::invalid_argument("triplet_loss_ba: degenerate batch");
  if (active == 0) return 0.0;
  const double loss = margin + dev_sum / static_cast<double>(active);

  if (d_embeddings) {
    const double w = 1.0 / static_cast<double>(active);
    auto add_pair = [&](std::size_t a, std::size_t b, std::size_t k, double scale) {
      // d dist(a,b,k) applied to both endpoints
      const double dd = dist[(a * B + b) * bins + k];
      if (dd <= 0.0) return;
      for (std::size_t i = 0; i < d; ++i) {
        const double diff = embeddings[a].at2(k, i) - embeddings[b].at2(k, i);
        const double g = scale * diff / dd;
        (*d_embeddings)[a].at2(k, i) += g;
        (*d_embeddings)[b].at2(k, i) -= g;
      }
    };
    for (std::size_t a = 0; a < B; ++a)
      for (std::size_t p = 0; p < B; ++p) {
        if (p == a || labels[p] != labels[a]) continue;
        for (std::size_t n = 0; n < B; ++n) {
          if (labels[n] == labels[a]) continue;
          for (std::size_t k = 0; k < bins; ++k) {
            const double dev =
                dist[(a * B + p) * bins + k] - dist[(a * B + n) * bins + k];
            if (margin + dev > 0.0) {
              add_pair(a, p, k, w);
              add_pair(a, n, k, -w);
            }
          }
        }
      }
  }
  return loss;
}

}  // namespace gaitcaps
