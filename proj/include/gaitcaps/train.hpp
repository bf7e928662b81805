#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gaitcaps/dataset.hpp"
#include "gaitcaps/model.hpp"
#include "gaitcaps/ops.hpp"

namespace gaitcaps {

/// All training knobs, serializable as flat key=value text.
struct TrainConfig {
  std::string scale = "desk";  // desk | full
  Variant variant = Variant::kFull;
  std::uint64_t seed = 42;

  std::size_t phase1_steps = 150;
  std::size_t phase2_steps = 450;
  double lr = 0.0001;
  double margin = 0.2;
  double dropout = 0.25;
  std::size_t batch_p = 4;
  std::size_t batch_k = 4;
  std::size_t frames_per_sample = 16;
  int routing_iters = 3;
  bool freeze_pfe = false;
  std::size_t train_identities = 0;  // 0 = every identity in the index
  std::size_t log_every = 50;

  // architecture; filled by the scale presets, overridable per key
  std::string conv_channels;  // e.g. "16,p,16,32,p,32" ('p' = max-pool)
  std::size_t bin_dim = 64;
  std::size_t gru_hidden = 128;
  std::size_t num_primary = 6;
  std::size_t primary_dim = 128;
  std::size_t num_digit = 8;
  std::size_t digit_dim = 16;

  static TrainConfig desk();
  static TrainConfig full();

  ModelConfig model_config(std::size_t n_classes) const;
};

/// Parses flat key=value lines ('#' starts a comment). Unknown keys are an
/// error. A `scale=` line switches presets before other keys apply.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::string& path);
std::string serialize_train_config(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// optimizer over a parameter tree

class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig cfg) : cfg_(cfg) {}

  /// One update over every parameter the visitor exposes; grads are zeroed.
  void step(const std::function<void(const ParamVisitor&)>& visit);

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> state_;  // m, v per path
};

// ---------------------------------------------------------------------------
// training

using StepHook = std::function<void(std::size_t step, double loss)>;

/// Phase 1: Adam on the batch-all triplet loss over the PFE block only.
std::vector<double> pretrain_pfe(GaitCapsModel& model, const DatasetIndex& train,
                                 const TrainConfig& cfg, Rng& rng, const StepHook& hook = {});

/// Phase 2: end-to-end Adam on cross-entropy. Aborts on a non-finite loss.
std::vector<double> train_classifier(GaitCapsModel& model, const DatasetIndex& train,
                                     const TrainConfig& cfg, Rng& rng,
                                     const StepHook& hook = {});

struct TrainedModel {
  std::unique_ptr<GaitCapsModel> model;
  TrainConfig cfg;
  std::vector<std::string> train_identities;
  std::vector<double> phase1_loss;
  std::vector<double> phase2_loss;
};

/// Splits off the training identities, builds the model, and runs both
/// phases. Deterministic: all randomness derives from cfg.seed.
TrainedModel run_training(const DatasetIndex& index, const TrainConfig& cfg,
                          const StepHook& hook = {});

/// Fraction of sequences classified as their own identity (dropout off).
double train_accuracy(const GaitCapsModel& model, const DatasetIndex& index);

// ---------------------------------------------------------------------------
// checkpoints: "GCAP", u32 version, config blob, then fp32 parameter entries

struct Checkpoint {
  TrainConfig cfg;
  std::vector<std::string> train_identities;
  std::map<std::string, Tensor> params;  // fp32-quantized values
};

void save_checkpoint(GaitCapsModel& model, const TrainConfig& cfg,
                     const std::vector<std::string>& train_identities, const std::string& path);

Checkpoint load_checkpoint(const std::string& path);

/// Rebuilds the model a checkpoint describes and loads its parameters.
/// Throws on unknown paths, missing parameters, or shape mismatches.
std::unique_ptr<GaitCapsModel> model_from_checkpoint(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// ablation harness

struct AblationRow {
  std::string variant;
  bool complete = false;
  std::string checkpoint_path;
  std::map<std::string, double> condition_means;  // per probe condition
  double overall_mean = 0.0;
};

struct AblationReport {
  std::string config_echo;
  std::vector<AblationRow> rows;
  bool complete = false;
};

/// Trains and evaluates the five variants (full, uni-gru, no-rnn,
/// no-capsule, conv-primary) with identical data and seed.
AblationReport ablate(const DatasetIndex& index, const TrainConfig& cfg,
                      const std::string& checkpoint_dir, const StepHook& hook = {});

void write_ablation_csv(const AblationReport& report, const std::string& path);

}  // namespace gaitcaps
