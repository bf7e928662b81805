#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gaitcaps/capsule.hpp"
#include "gaitcaps/gru.hpp"
#include "gaitcaps/pfe.hpp"

namespace gaitcaps {

/// Model variants exercised by the ablation harness.
enum class Variant { kFull, kUniGru, kNoRnn, kNoCaps, kConvPrimary };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct ModelConfig {
  PfeConfig pfe;
  std::size_t gru_hidden = 128;
  std::size_t num_primary = 6;
  std::size_t primary_dim = 128;
  std::size_t num_digit = 8;
  std::size_t digit_dim = 16;
  int routing_iters = 3;
  double dropout = 0.25;
  std::size_t n_classes = 2;
  Variant variant = Variant::kFull;
};

struct SeqCache {
  PfeCache pfe;
  BgruCache gru;
  CapsCache caps;
  Tensor bins;  // [31,d]
  Tensor ctx;   // recurrent output, variant-dependent width
};

/// The four-block composition: partial feature extraction, recurrent
/// learning, capsule learning, classification.
class GaitCapsModel {
 public:
  GaitCapsModel(ModelConfig cfg, Rng& rng);

  // deep copies; used for per-worker gradient accumulation
  GaitCapsModel(const GaitCapsModel& other);
  GaitCapsModel& operator=(const GaitCapsModel& other);
  GaitCapsModel(GaitCapsModel&&) = default;
  GaitCapsModel& operator=(GaitCapsModel&&) = default;

  /// Embedding for one sequence [T,1,H,W]: the classifier input features.
  /// For capsule variants this is the flattened digit capsules (J*D2).
  Tensor features(const Tensor& frames, bool training, Rng* rng,
                  SeqCache* cache = nullptr) const;

  /// Accumulates gradients for one sequence given d(features).
  void backward_features(const SeqCache& cache, const Tensor& d_feat);

  /// Class probabilities for a batch of feature rows [B, feat_dim].
  Tensor classify(const Tensor& feats) const;

  /// d_feats for the batch given d(probs path); accumulates head gradients.
  Tensor classifier_backward(const Tensor& feats, const Tensor& d_logits);

  /// Embedding with dropout off; deterministic.
  Tensor embed(const Tensor& frames) const { return features(frames, false, nullptr); }

  std::size_t feature_dim() const;
  const ModelConfig& config() const { return cfg_; }

  void visit_params(const ParamVisitor& visit);
  void visit_pfe_params(const ParamVisitor& visit);

  PfeBlock& pfe() { return pfe_; }
  const PfeBlock& pfe() const { return pfe_; }

 private:
  ModelConfig cfg_;
  PfeBlock pfe_;
  std::unique_ptr<BgruBlock> gru_;
  std::unique_ptr<CapsuleBlock> caps_;
  Param head_w_, head_b_;
};

}  // namespace gaitcaps
