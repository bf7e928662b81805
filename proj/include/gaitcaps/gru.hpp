#pragma once

#include <vector>

#include "gaitcaps/params.hpp"
#include "gaitcaps/rng.hpp"
#include "gaitcaps/tensor.hpp"

namespace gaitcaps {

/// One direction's cell parameters. Input weights are [in,hid], recurrent
/// weights [hid,hid], biases [hid].
struct GruCellParams {
  Param wz, uz, bz;
  Param wr, ur, br;
  Param wn, un, bn;

  GruCellParams() = default;
  GruCellParams(std::size_t in_dim, std::size_t hidden, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& visit);
};

struct GruCellCache {
  Tensor x, h_prev, z, r, n;
};

/// z = sigm(Wz x + Uz h + bz), r = sigm(Wr x + Ur h + br),
/// n = tanh(Wn x + Un (r*h) + bn), h' = (1-z)*n + z*h.
Tensor gru_cell_forward(const Tensor& x, const Tensor& h_prev, const GruCellParams& p,
                        GruCellCache* cache = nullptr);

struct GruCellGrads {
  Tensor d_x, d_h_prev;
};

/// Accumulates parameter gradients into `p`.
GruCellGrads gru_cell_backward(GruCellParams& p, const GruCellCache& cache, const Tensor& d_h);

struct BgruCache {
  std::vector<GruCellCache> fwd, bwd;
  Tensor dropout_mask;  // empty when dropout was not applied
  bool uni = false;
};

/// Bi-directional GRU over the 31-bin sequence; output is the per-bin
/// concatenation [31, 2*hidden]. Dropout (inverted scaling) applies to the
/// concatenated outputs only while training.
class BgruBlock {
 public:
  BgruBlock(std::size_t in_dim, std::size_t hidden, Rng& rng);

  Tensor forward(const Tensor& bins, double dropout_rate, bool training, Rng* rng,
                 BgruCache* cache = nullptr) const;

  /// Returns d_bins and accumulates parameter gradients.
  Tensor backward(const BgruCache& cache, const Tensor& d_ctx);

  /// Forward-only variant for the ablation harness: [31, hidden].
  Tensor forward_uni(const Tensor& bins, BgruCache* cache = nullptr) const;
  Tensor backward_uni(const BgruCache& cache, const Tensor& d_out);

  void visit_params(const std::string& prefix, const ParamVisitor& visit);
  void visit_params_uni(const std::string& prefix, const ParamVisitor& visit);

  std::size_t hidden() const { return hidden_; }
  std::size_t in_dim() const { return in_dim_; }
  const GruCellParams& forward_params() const { return fwd_; }
  GruCellParams& forward_params() { return fwd_; }
  GruCellParams& backward_params() { return bwd_; }

 private:
  std::size_t in_dim_ = 0, hidden_ = 0;
  GruCellParams fwd_, bwd_;
};

}  // namespace gaitcaps
