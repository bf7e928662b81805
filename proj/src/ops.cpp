#include "gaitcaps/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace gaitcaps {

namespace {

void im2col(const double* in, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, int stride, int padding, std::size_t oH, std::size_t oW,
            MatrixRM& col) {
  // col row index r = (c*kh + ki)*kw + kj, column p = oy*oW + ox
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const std::size_t r = (c * kh + ki) * kw + kj;
        double* dst = col.data() + r * col.cols();
        for (std::size_t oy = 0; oy < oH; ++oy) {
          const long iy = static_cast<long>(oy) * stride - padding + static_cast<long>(ki);
          double* row = dst + oy * oW;
          if (iy < 0 || iy >= static_cast<long>(H)) {
            std::fill(row, row + oW, 0.0);
            continue;
          }
          const double* src = in + (c * H + iy) * W;
          if (stride == 1) {
            // valid ox range is a contiguous span; edges are padding zeros
            const long shift = static_cast<long>(kj) - padding;  // ix = ox + shift
            const long lo = std::max<long>(0, -shift);
            const long hi = std::min<long>(oW, static_cast<long>(W) - shift);
            if (lo > 0) std::fill(row, row + lo, 0.0);
            if (hi > lo) std::copy(src + lo + shift, src + hi + shift, row + lo);
            if (hi < static_cast<long>(oW)) std::fill(row + std::max<long>(lo, hi), row + oW, 0.0);
          } else {
            for (std::size_t ox = 0; ox < oW; ++ox) {
              const long ix = static_cast<long>(ox) * stride - padding + static_cast<long>(kj);
              row[ox] = (ix >= 0 && ix < static_cast<long>(W)) ? src[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const MatrixRM& col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                std::size_t kw, int stride, int padding, std::size_t oH, std::size_t oW,
                double* out) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const std::size_t r = (c * kh + ki) * kw + kj;
        const double* src = col.data() + r * col.cols();
        for (std::size_t oy = 0; oy < oH; ++oy) {
          const long iy = static_cast<long>(oy) * stride - padding + static_cast<long>(ki);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          const double* row = src + oy * oW;
          double* dst = out + (c * H + iy) * W;
          if (stride == 1) {
            const long shift = static_cast<long>(kj) - padding;
            const long lo = std::max<long>(0, -shift);
            const long hi = std::min<long>(oW, static_cast<long>(W) - shift);
            for (long ox = lo; ox < hi; ++ox) dst[ox + shift] += row[ox];
          } else {
            for (std::size_t ox = 0; ox < oW; ++ox) {
              const long ix = static_cast<long>(ox) * stride - padding + static_cast<long>(kj);
              if (ix >= 0 && ix < static_cast<long>(W)) dst[ix] += row[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, int stride, int padding,
                      Conv2dCache* cache) {
  if (input.rank() != 4 || kernel.rank() != 4)
    throw std::invalid_argument("conv2d: input and kernel must be rank 4");
  if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: bad stride/padding");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t K = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != C)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(C) +
                                " vs kernel channels " + std::to_string(kernel.dim(1)));
  const long oh = (static_cast<long>(H) + 2 * padding - static_cast<long>(kh)) / stride + 1;
  const long ow = (static_cast<long>(W) + 2 * padding - static_cast<long>(kw)) / stride + 1;
  if (oh < 1 || ow < 1) throw std::invalid_argument("conv2d: no valid output position");
  const std::size_t oH = static_cast<std::size_t>(oh), oW = static_cast<std::size_t>(ow);
  const std::size_t P = oH * oW, Ckk = C * kh * kw;

  Tensor out({N, K, oH, oW});
  ConstMatMap wmat(kernel.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(Ckk));

  std::vector<MatrixRM> cols(cache ? N : 1);

#pragma omp parallel for schedule(static)
  for (long n = 0; n < static_cast<long>(N); ++n) {
    MatrixRM local;
    MatrixRM& use = cache ? cols[n] : local;
    use.resize(static_cast<Eigen::Index>(Ckk), static_cast<Eigen::Index>(P));
    im2col(input.data() + n * C * H * W, C, H, W, kh, kw, stride, padding, oH, oW, use);
    MatMap omat(out.data() + n * K * P, static_cast<Eigen::Index>(K),
                static_cast<Eigen::Index>(P));
    omat.noalias() = wmat * use;
  }

  if (cache) {
    cache->cols = std::move(cols);
    cache->kernel = kernel;
    cache->in_shape = input.shape();
    cache->stride = stride;
    cache->padding = padding;
  }
  return out;
}

Conv2dGrads conv2d_backward(const Conv2dCache& cache, const Tensor& d_out, bool need_d_input) {
  const std::size_t N = cache.in_shape[0], C = cache.in_shape[1], H = cache.in_shape[2],
                    W = cache.in_shape[3];
  const std::size_t K = cache.kernel.dim(0), kh = cache.kernel.dim(2), kw = cache.kernel.dim(3);
  const std::size_t oH = d_out.dim(2), oW = d_out.dim(3), P = oH * oW, Ckk = C * kh * kw;

  Conv2dGrads g;
  g.d_kernel = Tensor(cache.kernel.shape());
  MatMap dwmat(g.d_kernel.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(Ckk));
  // Sample order is fixed so the kernel-gradient accumulation is deterministic.
  for (std::size_t n = 0; n < N; ++n) {
    ConstMatMap dmat(d_out.data() + n * K * P, static_cast<Eigen::Index>(K),
                     static_cast<Eigen::Index>(P));
    dwmat.noalias() += dmat * cache.cols[n].transpose();
  }

  if (need_d_input) {
    g.d_input = Tensor(cache.in_shape);
    ConstMatMap wmat(cache.kernel.data(), static_cast<Eigen::Index>(K),
                     static_cast<Eigen::Index>(Ckk));
#pragma omp parallel for schedule(static)
    for (long n = 0; n < static_cast<long>(N); ++n) {
      ConstMatMap dmat(d_out.data() + n * K * P, static_cast<Eigen::Index>(K),
                       static_cast<Eigen::Index>(P));
      MatrixRM dcol = wmat.transpose() * dmat;
      col2im_add(dcol, C, H, W, kh, kw, cache.stride, cache.padding, oH, oW,
                 g.d_input.data() + n * C * H * W);
    }
  }
  return g;
}

Tensor maxpool2d_forward(const Tensor& input, int window, int stride, MaxPool2dCache* cache) {
  if (input.rank() != 4) throw std::invalid_argument("max_pool2d: input must be rank 4");
  if (window < 1 || stride < 1) throw std::invalid_argument("max_pool2d: bad window/stride");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (static_cast<std::size_t>(window) > H || static_cast<std::size_t>(window) > W)
    throw std::invalid_argument("max_pool2d: window larger than spatial extent");
  const std::size_t oH = (H - window) / stride + 1, oW = (W - window) / stride + 1;

  Tensor out({N, C, oH, oW});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* plane = input.data() + (n * C + c) * H * W;
      for (std::size_t oy = 0; oy < oH; ++oy) {
        for (std::size_t ox = 0; ox < oW; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (int ki = 0; ki < window; ++ki) {
            for (int kj = 0; kj < window; ++kj) {
              const std::size_t iy = oy * stride + ki, ix = ox * stride + kj;
              const double v = plane[iy * W + ix];
              if (v > best) {
                best = v;
                best_idx = (n * C + c) * H * W + iy * W + ix;
              }
            }
          }
          const std::size_t o = ((n * C + c) * oH + oy) * oW + ox;
          out[o] = best;
          argmax[o] = best_idx;
        }
      }
    }
  }
  if (cache) {
    cache->in_shape = input.shape();
    cache->argmax = std::move(argmax);
  }
  return out;
}

Tensor maxpool2d_backward(const MaxPool2dCache& cache, const Tensor& d_out) {
  Tensor d_in(cache.in_shape);
  for (std::size_t o = 0; o < d_out.size(); ++o) d_in[cache.argmax[o]] += d_out[o];
  return d_in;
}

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
    throw std::invalid_argument("linear: expected x[B,Din], w[Din,Dout], b[Dout]");
  const std::size_t B = x.dim(0), din = x.dim(1), dout = w.dim(1);
  if (w.dim(0) != din || b.dim(0) != dout)
    throw std::invalid_argument("linear: dimension mismatch " + shape_str(x.shape()) + " x " +
                                shape_str(w.shape()) + " + " + shape_str(b.shape()));
  Tensor y({B, dout});
  y.mat(B, dout).noalias() = x.mat(B, din) * w.mat(din, dout);
  y.mat(B, dout).rowwise() += b.vec().transpose();
  return y;
}

LinearGrads linear_backward(const Tensor& x, const Tensor& w, const Tensor& d_out) {
  const std::size_t B = x.dim(0), din = x.dim(1), dout = w.dim(1);
  LinearGrads g;
  g.d_x = Tensor({B, din});
  g.d_w = Tensor({din, dout});
  g.d_b = Tensor({dout});
  g.d_x.mat(B, din).noalias() = d_out.mat(B, dout) * w.mat(din, dout).transpose();
  g.d_w.mat(din, dout).noalias() = x.mat(B, din).transpose() * d_out.mat(B, dout);
  g.d_b.vec() = d_out.mat(B, dout).colwise().sum();
  return g;
}

Tensor leaky_relu_forward(const Tensor& x, double slope) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
  return y;
}

Tensor leaky_relu_backward(const Tensor& x, const Tensor& d_y, double slope) {
  Tensor d_x(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) d_x[i] = x[i] >= 0.0 ? d_y[i] : slope * d_y[i];
  return d_x;
}

namespace {

// Applies fn(line, stride, count) to every 1-D line along `axis`.
template <typename Fn>
void for_each_line(const std::vector<std::size_t>& shape, int axis, Fn&& fn) {
  const std::size_t rank = shape.size();
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < rank; ++i) inner *= shape[i];
  std::size_t outer = 1;
  for (std::size_t i = 0; i < static_cast<std::size_t>(axis); ++i) outer *= shape[i];
  const std::size_t K = shape[axis];
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) fn(o * K * inner + in, inner, K);
}

int resolve_axis(const Tensor& t, int axis) {
  int a = axis < 0 ? static_cast<int>(t.rank()) + axis : axis;
  if (a < 0 || a >= static_cast<int>(t.rank())) throw std::invalid_argument("softmax: bad axis");
  return a;
}

}  // namespace

Tensor softmax(const Tensor& logits, int axis) {
  const int a = resolve_axis(logits, axis);
  Tensor y(logits.shape());
  for_each_line(logits.shape(), a, [&](std::size_t base, std::size_t stride, std::size_t K) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, logits[base + k * stride]);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double e = std::exp(logits[base + k * stride] - mx);
      y[base + k * stride] = e;
      sum += e;
    }
    for (std::size_t k = 0; k < K; ++k) y[base + k * stride] /= sum;
  });
  return y;
}

Tensor softmax_backward(const Tensor& y, const Tensor& d_y, int axis) {
  const int a = resolve_axis(y, axis);
  Tensor d_x(y.shape());
  for_each_line(y.shape(), a, [&](std::size_t base, std::size_t stride, std::size_t K) {
    double dot = 0.0;
    for (std::size_t k = 0; k < K; ++k) dot += d_y[base + k * stride] * y[base + k * stride];
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t i = base + k * stride;
      d_x[i] = y[i] * (d_y[i] - dot);
    }
  });
  return d_x;
}

double cross_entropy(const Tensor& probs, const std::vector<int>& labels) {
  if (probs.rank() != 2) throw std::invalid_argument("cross_entropy: probs must be [B,K]");
  const std::size_t B = probs.dim(0), K = probs.dim(1);
  if (labels.size() != B) throw std::invalid_argument("cross_entropy: labels/batch mismatch");
  for (std::size_t b = 0; b < B; ++b) {
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += probs.at2(b, k);
    if (std::abs(sum - 1.0) > 1e-9)
      throw std::invalid_argument("cross_entropy: probs row " + std::to_string(b) +
                                  " sums to " + std::to_string(sum));
    if (labels[b] < 0 || labels[b] >= static_cast<int>(K))
      throw std::out_of_range("cross_entropy: label index out of range");
  }
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    loss -= std::log(std::max(probs.at2(b, labels[b]), 1e-12));
  return loss / static_cast<double>(B);
}

Tensor cross_entropy_backward(const Tensor& probs, const std::vector<int>& labels) {
  const std::size_t B = probs.dim(0);
  Tensor d(probs.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const double p = probs.at2(b, labels[b]);
    if (p >= 1e-12) d.at2(b, labels[b]) = -1.0 / (p * static_cast<double>(B));
  }
  return d;
}

void adam_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, long t,
               const AdamConfig& cfg) {
  if (!param.same_shape(grad) || !param.same_shape(m) || !param.same_shape(v))
    throw std::invalid_argument("adam_step: shape mismatch");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

}  // namespace gaitcaps
