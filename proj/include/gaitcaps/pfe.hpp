#pragma once

#include <array>
#include <vector>

#include "gaitcaps/ops.hpp"
#include "gaitcaps/params.hpp"
#include "gaitcaps/tensor.hpp"

namespace gaitcaps {

// Horizontal pyramid: 1+2+4+8+16 strips, scale-major, top-to-bottom.
inline constexpr std::array<std::size_t, 5> kHpmScales = {1, 2, 4, 8, 16};
inline constexpr std::size_t kNumBins = 31;

// ---------------------------------------------------------------------------
// set pooling: elementwise max over the frame axis

struct SetPoolCache {
  std::vector<std::size_t> in_shape;
  std::vector<std::size_t> argmax;  // winning frame per output element
};

/// maps [T,C,H,W] -> [C,H,W]; invariant to frame order and multiplicity.
Tensor set_pool(const Tensor& maps, SetPoolCache* cache = nullptr);
Tensor set_pool_backward(const SetPoolCache& cache, const Tensor& d_out);

// ---------------------------------------------------------------------------
// multi-scale horizontal bins

struct HpmCache {
  std::vector<std::size_t> map_shape;
  std::size_t padded_h = 0;
  std::vector<std::size_t> argmax;       // [31*C] flat index into the padded map
  std::vector<std::size_t> strip_begin;  // per bin, row range in the padded map
  std::vector<std::size_t> strip_end;
};

/// map [C,H',W'] -> [31, 2C]; each strip reduces to per-channel spatial max
/// followed by per-channel spatial mean. Heights not divisible by 16 are
/// zero-padded at the bottom.
Tensor hpm_split(const Tensor& map, HpmCache* cache = nullptr);
Tensor hpm_split_backward(const HpmCache& cache, const Tensor& d_bins);

// ---------------------------------------------------------------------------
// partial feature extractor

struct ConvLayerSpec {
  std::size_t out_channels = 16;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  bool pool_after = false;
  int pool_window = 2;
  int pool_stride = 2;
};

struct PfeConfig {
  std::vector<ConvLayerSpec> conv;
  double leaky_slope = 0.01;
  std::size_t bin_dim = 64;  // d

  /// 4 conv layers (1->16->16->32->32) with 2 max-pools; trains on a CPU.
  static PfeConfig desk();
  /// GaitSet-sized arrangement: 6 conv layers with 2 max-pools, d = 256.
  static PfeConfig full();
};

struct PfeCache {
  std::vector<Conv2dCache> conv;
  std::vector<Tensor> pre_act;  // conv output before the leaky relu
  std::vector<MaxPool2dCache> pool;
  std::vector<bool> pooled;
  SetPoolCache set_pool;
  HpmCache hpm;
  Tensor raw_bins;  // [31, 2C]
};

/// f_PFE: per-frame conv stack, set pooling, horizontal pyramid, and an
/// independent linear map per bin.
class PfeBlock {
 public:
  PfeBlock(PfeConfig cfg, Rng& rng);

  /// frames [T,1,H,W] -> bin features [31, d].
  Tensor forward(const Tensor& frames, PfeCache* cache = nullptr) const;

  /// Accumulates parameter gradients; input gradients are not needed.
  void backward(const PfeCache& cache, const Tensor& d_bins);

  void visit_params(const std::string& prefix, const ParamVisitor& visit);

  const PfeConfig& config() const { return cfg_; }
  std::size_t map_channels() const { return cfg_.conv.back().out_channels; }

 private:
  PfeConfig cfg_;
  std::vector<Param> kernels_;
  std::vector<Param> bin_w_;  // 31 maps [2C, d]
  std::vector<Param> bin_b_;  // 31 biases [d]
};

// ---------------------------------------------------------------------------
// batch-all triplet loss

/// embeddings: one [31,d] tensor per sample. Mean hinge over all valid
/// (anchor, positive, negative) triplets and all bins, averaged over the
/// nonzero-loss terms only. Throws on a batch with no valid triplet.
double triplet_loss_ba(const std::vector<Tensor>& embeddings, const std::vector<int>& labels,
                       double margin, std::vector<Tensor>* d_embeddings = nullptr);

}  // namespace gaitcaps
