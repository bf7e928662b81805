#pragma once

#include <vector>

#include "gaitcaps/tensor.hpp"

namespace gaitcaps {

// ---------------------------------------------------------------------------
// conv2d (cross-correlation, no kernel flip)

struct Conv2dCache {
  std::vector<MatrixRM> cols;  // per sample: (C*kh*kw) x (oH*oW)
  Tensor kernel;
  std::vector<std::size_t> in_shape;
  int stride = 1;
  int padding = 0;
};

struct Conv2dGrads {
  Tensor d_input;
  Tensor d_kernel;
};

/// input [N,C,H,W], kernel [K,C,kh,kw] -> [N,K,oH,oW].
/// Each sample runs through its own GEMM so a frame's output bits do not
/// depend on how many other frames share the batch.
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, int stride, int padding,
                      Conv2dCache* cache = nullptr);

Conv2dGrads conv2d_backward(const Conv2dCache& cache, const Tensor& d_out,
                            bool need_d_input = true);

// ---------------------------------------------------------------------------
// max_pool2d

struct MaxPool2dCache {
  std::vector<std::size_t> in_shape;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

/// Per-window maxima; ties resolve to the first element in row-major scan.
Tensor maxpool2d_forward(const Tensor& input, int window, int stride,
                         MaxPool2dCache* cache = nullptr);

Tensor maxpool2d_backward(const MaxPool2dCache& cache, const Tensor& d_out);

// ---------------------------------------------------------------------------
// linear

struct LinearGrads {
  Tensor d_x;
  Tensor d_w;
  Tensor d_b;
};

/// x [B,Din], w [Din,Dout], b [Dout] -> x*w + b.
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b);

LinearGrads linear_backward(const Tensor& x, const Tensor& w, const Tensor& d_out);

// ---------------------------------------------------------------------------
// activations

Tensor leaky_relu_forward(const Tensor& x, double slope);
Tensor leaky_relu_backward(const Tensor& x, const Tensor& d_y, double slope);

/// Max-subtracted softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& logits, int axis = -1);

/// d_logits from the softmax output y and upstream d_y.
Tensor softmax_backward(const Tensor& y, const Tensor& d_y, int axis = -1);

// ---------------------------------------------------------------------------
// cross entropy

/// probs [B,K] with rows summing to 1 within 1e-9; mean negative
/// log-likelihood with the log argument clamped at 1e-12.
double cross_entropy(const Tensor& probs, const std::vector<int>& labels);

Tensor cross_entropy_backward(const Tensor& probs, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 0.0001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update. `t` is the 1-based step count.
void adam_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, long t,
               const AdamConfig& cfg);

}  // namespace gaitcaps
