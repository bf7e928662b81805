#include "gaitcaps/gru.hpp"

#include <cmath>
#include <stdexcept>

namespace gaitcaps {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// y = x*W + h*U + b for row vectors
Eigen::VectorXd gate_pre(const Tensor& x, const Tensor& h, const Param& w, const Param& u,
                         const Param& b) {
  const std::size_t in = w.value.dim(0), hid = w.value.dim(1);
  Eigen::VectorXd y = b.value.vec();
  y.noalias() += w.value.mat(in, hid).transpose() * x.vec();
  y.noalias() += u.value.mat(hid, hid).transpose() * h.vec();
  return y;
}

}  // namespace

GruCellParams::GruCellParams(std::size_t in_dim, std::size_t hidden, Rng& rng) {
  auto w = [&] { return Param(glorot_uniform({in_dim, hidden}, in_dim, hidden, rng)); };
  auto u = [&] { return Param(glorot_uniform({hidden, hidden}, hidden, hidden, rng)); };
  wz = w(); uz = u(); bz = Param(Tensor({hidden}));
  wr = w(); ur = u(); br = Param(Tensor({hidden}));
  wn = w(); un = u(); bn = Param(Tensor({hidden}));
}

void GruCellParams::visit(const std::string& prefix, const ParamVisitor& v) {
  v(join_path(prefix, "wz"), wz); v(join_path(prefix, "uz"), uz); v(join_path(prefix, "bz"), bz);
  v(join_path(prefix, "wr"), wr); v(join_path(prefix, "ur"), ur); v(join_path(prefix, "br"), br);
  v(join_path(prefix, "wn"), wn); v(join_path(prefix, "un"), un); v(join_path(prefix, "bn"), bn);
}

Tensor gru_cell_forward(const Tensor& x, const Tensor& h_prev, const GruCellParams& p,
                        GruCellCache* cache) {
  const std::size_t hid = p.wz.value.dim(1);
  if (x.dim(0) != p.wz.value.dim(0) || h_prev.dim(0) != hid)
    throw std::invalid_argument("gru_cell: dimension mismatch");

  Eigen::VectorXd az = gate_pre(x, h_prev, p.wz, p.uz, p.bz);
  Eigen::VectorXd ar = gate_pre(x, h_prev, p.wr, p.ur, p.br);

  Tensor z({hid}), r({hid});
  for (std::size_t i = 0; i < hid; ++i) z[i] = sigmoid(az[i]);
  for (std::size_t i = 0; i < hid; ++i) r[i] = sigmoid(ar[i]);

  Tensor rh({hid});
  for (std::size_t i = 0; i < hid; ++i) rh[i] = r[i] * h_prev[i];
  Eigen::VectorXd an = gate_pre(x, rh, p.wn, p.un, p.bn);

  Tensor n({hid}), h({hid});
  for (std::size_t i = 0; i < hid; ++i) n[i] = std::tanh(an[i]);
  for (std::size_t i = 0; i < hid; ++i) h[i] = (1.0 - z[i]) * n[i] + z[i] * h_prev[i];

  if (cache) {
    cache->x = x;
    cache->h_prev = h_prev;
    cache->z = z;
    cache->r = r;
    cache->n = n;
  }
  return h;
}

GruCellGrads gru_cell_backward(GruCellParams& p, const GruCellCache& c, const Tensor& d_h) {
  const std::size_t in = p.wz.value.dim(0), hid = p.wz.value.dim(1);
  const Tensor& z = c.z;
  const Tensor& r = c.r;
  const Tensor& n = c.n;

  Tensor d_z({hid}), d_n({hid}), d_hp({hid});
  for (std::size_t i = 0; i < hid; ++i) {
    d_z[i] = d_h[i] * (c.h_prev[i] - n[i]);
    d_n[i] = d_h[i] * (1.0 - z[i]);
    d_hp[i] = d_h[i] * z[i];
  }

  // candidate gate
  Tensor d_an({hid});
  for (std::size_t i = 0; i < hid; ++i) d_an[i] = d_n[i] * (1.0 - n[i] * n[i]);
  Tensor rh({hid});
  for (std::size_t i = 0; i < hid; ++i) rh[i] = r[i] * c.h_prev[i];

  p.bn.grad.vec() += d_an.vec();
  p.wn.grad.mat(in, hid).noalias() += c.x.vec() * d_an.vec().transpose();
  p.un.grad.mat(hid, hid).noalias() += rh.vec() * d_an.vec().transpose();
  Eigen::VectorXd d_rh = p.un.value.mat(hid, hid) * d_an.vec();
  Tensor d_r({hid});
  for (std::size_t i = 0; i < hid; ++i) {
    d_r[i] = d_rh[i] * c.h_prev[i];
    d_hp[i] += d_rh[i] * r[i];
  }

  // update and reset gates
  Tensor d_az({hid}), d_ar({hid});
  for (std::size_t i = 0; i < hid; ++i) {
    d_az[i] = d_z[i] * z[i] * (1.0 - z[i]);
    d_ar[i] = d_r[i] * r[i] * (1.0 - r[i]);
  }
  p.bz.grad.vec() += d_az.vec();
  p.wz.grad.mat(in, hid).noalias() += c.x.vec() * d_az.vec().transpose();
  p.uz.grad.mat(hid, hid).noalias() += c.h_prev.vec() * d_az.vec().transpose();
  p.br.grad.vec() += d_ar.vec();
  p.wr.grad.mat(in, hid).noalias() += c.x.vec() * d_ar.vec().transpose();
  p.ur.grad.mat(hid, hid).noalias() += c.h_prev.vec() * d_ar.vec().transpose();

  GruCellGrads g;
  g.d_x = Tensor({in});
  g.d_h_prev = d_hp;
  g.d_x.vec().noalias() = p.wz.value.mat(in, hid) * d_az.vec();
  g.d_x.vec().noalias() += p.wr.value.mat(in, hid) * d_ar.vec();
  g.d_x.vec().noalias() += p.wn.value.mat(in, hid) * d_an.vec();
  g.d_h_prev.vec().noalias() += p.uz.value.mat(hid, hid) * d_az.vec();
  g.d_h_prev.vec().noalias() += p.ur.value.mat(hid, hid) * d_ar.vec();
  return g;
}

BgruBlock::BgruBlock(std::size_t in_dim, std::size_t hidden, Rng& rng)
    : in_dim_(in_dim), hidden_(hidden), fwd_(in_dim, hidden, rng), bwd_(in_dim, hidden, rng) {}

Tensor BgruBlock::forward(const Tensor& bins, double dropout_rate, bool training, Rng* rng,
                          BgruCache* cache) const {
  if (bins.rank() != 2 || bins.dim(1) != in_dim_)
    throw std::invalid_argument("bgru_forward: expected [T," + std::to_string(in_dim_) + "]");
  const std::size_t T = bins.dim(0);
  if (cache) {
    cache->fwd.resize(T);
    cache->bwd.resize(T);
    cache->uni = false;
  }

  Tensor ctx({T, 2 * hidden_});
  auto row = [&](std::size_t t) {
    Tensor x({in_dim_});
    for (std::size_t i = 0; i < in_dim_; ++i) x[i] = bins.at2(t, i);
    return x;
  };

  Tensor h({hidden_});
  for (std::size_t t = 0; t < T; ++t) {
    h = gru_cell_forward(row(t), h, fwd_, cache ? &cache->fwd[t] : nullptr);
    for (std::size_t i = 0; i < hidden_; ++i) ctx.at2(t, i) = h[i];
  }
  h.fill(0.0);
  for (std::size_t t = T; t-- > 0;) {
    h = gru_cell_forward(row(t), h, bwd_, cache ? &cache->bwd[t] : nullptr);
    for (std::size_t i = 0; i < hidden_; ++i) ctx.at2(t, hidden_ + i) = h[i];
  }

  if (training && dropout_rate > 0.0) {
    if (!rng) throw std::invalid_argument("bgru_forward: dropout requires an rng");
    Tensor mask(ctx.shape());
    const double keep = 1.0 - dropout_rate;
    for (std::size_t i = 0; i < mask.size(); ++i)
      mask[i] = rng->uniform01() < dropout_rate ? 0.0 : 1.0 / keep;
    for (std::size_t i = 0; i < ctx.size(); ++i) ctx[i] *= mask[i];
    if (cache) cache->dropout_mask = std::move(mask);
  }
  return ctx;
}

Tensor BgruBlock::backward(const BgruCache& cache, const Tensor& d_ctx_in) {
  const std::size_t T = cache.fwd.size();
  Tensor d_ctx = d_ctx_in;
  if (!cache.dropout_mask.empty())
    for (std::size_t i = 0; i < d_ctx.size(); ++i) d_ctx[i] *= cache.dropout_mask[i];

  Tensor d_bins({T, in_dim_});
  // forward direction: BPTT from the last bin down
  Tensor carry({hidden_});
  for (std::size_t t = T; t-- > 0;) {
    Tensor d_h({hidden_});
    for (std::size_t i = 0; i < hidden_; ++i) d_h[i] = d_ctx.at2(t, i) + carry[i];
    GruCellGrads g = gru_cell_backward(fwd_, cache.fwd[t], d_h);
    for (std::size_t i = 0; i < in_dim_; ++i) d_bins.at2(t, i) += g.d_x[i];
    carry = std::move(g.d_h_prev);
  }
  // backward direction: its recurrence runs from the last bin to the first,
  // so gradient flows in increasing t
  carry.fill(0.0);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor d_h({hidden_});
    for (std::size_t i = 0; i < hidden_; ++i) d_h[i] = d_ctx.at2(t, hidden_ + i) + carry[i];
    GruCellGrads g = gru_cell_backward(bwd_, cache.bwd[t], d_h);
    for (std::size_t i = 0; i < in_dim_; ++i) d_bins.at2(t, i) += g.d_x[i];
    carry = std::move(g.d_h_prev);
  }
  return d_bins;
}

Tensor BgruBlock::forward_uni(const Tensor& bins, BgruCache* cache) const {
  const std::size_t T = bins.dim(0);
  if (cache) {
    cache->fwd.resize(T);
    cache->bwd.clear();
    cache->uni = true;
  }
  Tensor out({T, hidden_});
  Tensor h({hidden_});
  for (std::size_t t = 0; t < T; ++t) {
    Tensor x({in_dim_});
    for (std::size_t i = 0; i < in_dim_; ++i) x[i] = bins.at2(t, i);
    h = gru_cell_forward(x, h, fwd_, cache ? &cache->fwd[t] : nullptr);
    for (std::size_t i = 0; i < hidden_; ++i) out.at2(t, i) = h[i];
  }
  return out;
}

Tensor BgruBlock::backward_uni(const BgruCache& cache, const Tensor& d_out) {
  const std::size_t T = cache.fwd.size();
  Tensor d_bins({T, in_dim_});
  Tensor carry({hidden_});
  for (std::size_t t = T; t-- > 0;) {
    Tensor d_h({hidden_});
    for (std::size_t i = 0; i < hidden_; ++i) d_h[i] = d_out.at2(t, i) + carry[i];
    GruCellGrads g = gru_cell_backward(fwd_, cache.fwd[t], d_h);
    for (std::size_t i = 0; i < in_dim_; ++i) d_bins.at2(t, i) += g.d_x[i];
    carry = std::move(g.d_h_prev);
  }
  return d_bins;
}

void BgruBlock::visit_params(const std::string& prefix, const ParamVisitor& visit) {
  fwd_.visit(join_path(prefix, "fwd"), visit);
  bwd_.visit(join_path(prefix, "bwd"), visit);
}

void BgruBlock::visit_params_uni(const std::string& prefix, const ParamVisitor& visit) {
  fwd_.visit(join_path(prefix, "fwd"), visit);
}

}  // namespace gaitcaps
