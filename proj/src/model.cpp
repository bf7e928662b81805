#include "gaitcaps/model.hpp"

#include <stdexcept>

namespace gaitcaps {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kUniGru: return "uni-gru";
    case Variant::kNoRnn: return "no-rnn";
    case Variant::kNoCaps: return "no-capsule";
    case Variant::kConvPrimary: return "conv-primary";
  }
  return "full";
}

Variant variant_from_name(const std::string& name) {
  if (name == "full") return Variant::kFull;
  if (name == "uni-gru") return Variant::kUniGru;
  if (name == "no-rnn") return Variant::kNoRnn;
  if (name == "no-capsule") return Variant::kNoCaps;
  if (name == "conv-primary") return Variant::kConvPrimary;
  throw std::invalid_argument("unknown model variant: " + name);
}

namespace {

bool uses_rnn(Variant v) { return v != Variant::kNoRnn; }
bool uses_caps(Variant v) { return v != Variant::kNoCaps; }

}  // namespace

GaitCapsModel::GaitCapsModel(ModelConfig cfg, Rng& rng) : cfg_(cfg), pfe_(cfg.pfe, rng) {
  const std::size_t d = cfg_.pfe.bin_dim;
  std::size_t ctx_cols = d;
  if (uses_rnn(cfg_.variant)) {
    gru_ = std::make_unique<BgruBlock>(d, cfg_.gru_hidden, rng);
    ctx_cols = cfg_.variant == Variant::kUniGru ? cfg_.gru_hidden : 2 * cfg_.gru_hidden;
  }
  if (uses_caps(cfg_.variant)) {
    CapsuleBlock::Config cc;
    cc.ctx_rows = kNumBins;
    cc.ctx_cols = ctx_cols;
    cc.num_primary = cfg_.num_primary;
    cc.primary_dim = cfg_.primary_dim;
    cc.num_digit = cfg_.num_digit;
    cc.digit_dim = cfg_.digit_dim;
    cc.routing_iters = cfg_.routing_iters;
    cc.conv_primary = cfg_.variant == Variant::kConvPrimary;
    caps_ = std::make_unique<CapsuleBlock>(cc, rng);
  }
  const std::size_t feat = uses_caps(cfg_.variant) ? caps_->out_dim() : kNumBins * ctx_cols;
  head_w_ = Param(glorot_uniform({feat, cfg_.n_classes}, feat, cfg_.n_classes, rng));
  head_b_ = Param(Tensor({cfg_.n_classes}));
}

GaitCapsModel::GaitCapsModel(const GaitCapsModel& other)
    : cfg_(other.cfg_),
      pfe_(other.pfe_),
      gru_(other.gru_ ? std::make_unique<BgruBlock>(*other.gru_) : nullptr),
      caps_(other.caps_ ? std::make_unique<CapsuleBlock>(*other.caps_) : nullptr),
      head_w_(other.head_w_),
      head_b_(other.head_b_) {}

GaitCapsModel& GaitCapsModel::operator=(const GaitCapsModel& other) {
  if (this == &other) return *this;
  cfg_ = other.cfg_;
  pfe_ = other.pfe_;
  gru_ = other.gru_ ? std::make_unique<BgruBlock>(*other.gru_) : nullptr;
  caps_ = other.caps_ ? std::make_unique<CapsuleBlock>(*other.caps_) : nullptr;
  head_w_ = other.head_w_;
  head_b_ = other.head_b_;
  return *this;
}

std::size_t GaitCapsModel::feature_dim() const { return head_w_.value.dim(0); }

Tensor GaitCapsModel::features(const Tensor& frames, bool training, Rng* rng,
                               SeqCache* cache) const {
  SeqCache local;
  SeqCache& c = cache ? *cache : local;
  c.bins = pfe_.forward(frames, cache ? &c.pfe : nullptr);

  Tensor ctx;
  switch (cfg_.variant) {
    case Variant::kUniGru: {
      ctx = gru_->forward_uni(c.bins, cache ? &c.gru : nullptr);
      if (training && cfg_.dropout > 0.0) {
        // same output-dropout policy as the bi-directional path
        if (!rng) throw std::invalid_argument("features: dropout requires an rng");
        Tensor mask(ctx.shape());
        const double keep = 1.0 - cfg_.dropout;
        for (std::size_t i = 0; i < mask.size(); ++i)
          mask[i] = rng->uniform01() < cfg_.dropout ? 0.0 : 1.0 / keep;
        for (std::size_t i = 0; i < ctx.size(); ++i) ctx[i] *= mask[i];
        if (cache) c.gru.dropout_mask = std::move(mask);
      }
      break;
    }
    case Variant::kNoRnn:
      ctx = c.bins;
      break;
    default:
      ctx = gru_->forward(c.bins, cfg_.dropout, training, rng, cache ? &c.gru : nullptr);
  }
  if (cache) c.ctx = ctx;

  if (!uses_caps(cfg_.variant)) return ctx.reshaped({ctx.size()});
  Tensor v = caps_->forward(ctx, cache ? &c.caps : nullptr);
  return v.reshaped({v.size()});
}

void GaitCapsModel::backward_features(const SeqCache& cache, const Tensor& d_feat) {
  Tensor d_ctx;
  if (uses_caps(cfg_.variant)) {
    Tensor d_v = d_feat.reshaped({cfg_.num_digit, cfg_.digit_dim});
    d_ctx = caps_->backward(cache.caps, d_v);
  } else {
    d_ctx = d_feat.reshaped(cache.ctx.shape());
  }

  Tensor d_bins;
  switch (cfg_.variant) {
    case Variant::kUniGru: {
      Tensor d = d_ctx;
      if (!cache.gru.dropout_mask.empty())
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= cache.gru.dropout_mask[i];
      d_bins = gru_->backward_uni(cache.gru, d);
      break;
    }
    case Variant::kNoRnn:
      d_bins = d_ctx;
      break;
    default:
      d_bins = gru_->backward(cache.gru, d_ctx);
  }
  pfe_.backward(cache.pfe, d_bins);
}

Tensor GaitCapsModel::classify(const Tensor& feats) const {
  return softmax(linear_forward(feats, head_w_.value, head_b_.value));
}

Tensor GaitCapsModel::classifier_backward(const Tensor& feats, const Tensor& d_logits) {
  LinearGrads g = linear_backward(feats, head_w_.value, d_logits);
  head_w_.grad.vec() += g.d_w.vec();
  head_b_.grad.vec() += g.d_b.vec();
  return g.d_x;
}

void GaitCapsModel::visit_params(const ParamVisitor& visit) {
  pfe_.visit_params("pfe", visit);
  if (gru_) {
    if (cfg_.variant == Variant::kUniGru)
      gru_->visit_params_uni("gru", visit);
    else
      gru_->visit_params("gru", visit);
  }
  if (caps_) caps_->visit_params("caps", visit);
  visit("head.w", head_w_);
  visit("head.b", head_b_);
}

void GaitCapsModel::visit_pfe_params(const ParamVisitor& visit) {
  pfe_.visit_params("pfe", visit);
}

}  // namespace gaitcaps
