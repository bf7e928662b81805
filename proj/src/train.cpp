#include "gaitcaps/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "gaitcaps/eval.hpp"

namespace fs = std::filesystem;

namespace gaitcaps {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

std::vector<ConvLayerSpec> parse_conv_channels(const std::string& spec) {
  std::vector<ConvLayerSpec> layers;
  for (const std::string& tok : split(spec, ',')) {
    const std::string t = trim(tok);
    if (t == "p" || t == "P") {
      if (layers.empty()) throw std::invalid_argument("conv_channels: pool before any conv");
      layers.back().pool_after = true;
    } else {
      ConvLayerSpec layer;
      layer.out_channels = static_cast<std::size_t>(std::stoul(t));
      layers.push_back(layer);
    }
  }
  if (layers.empty()) throw std::invalid_argument("conv_channels: no conv layers");
  return layers;
}

}  // namespace

TrainConfig TrainConfig::desk() {
  TrainConfig cfg;
  cfg.scale = "desk";
  cfg.conv_channels = "16,p,16,32,p,32";
  cfg.bin_dim = 64;
  return cfg;
}

TrainConfig TrainConfig::full() {
  TrainConfig cfg;
  cfg.scale = "full";
  cfg.conv_channels = "32,32,p,64,64,p,128,128";
  cfg.bin_dim = 256;
  cfg.phase1_steps = 500;
  cfg.phase2_steps = 1500;
  cfg.batch_p = 10;
  cfg.batch_k = 5;
  return cfg;
}

ModelConfig TrainConfig::model_config(std::size_t n_classes) const {
  ModelConfig mc;
  mc.pfe.conv = parse_conv_channels(conv_channels);
  mc.pfe.bin_dim = bin_dim;
  mc.gru_hidden = gru_hidden;
  mc.num_primary = num_primary;
  mc.primary_dim = primary_dim;
  mc.num_digit = num_digit;
  mc.digit_dim = digit_dim;
  mc.routing_iters = routing_iters;
  mc.dropout = dropout;
  mc.n_classes = n_classes;
  mc.variant = variant;
  return mc;
}

TrainConfig parse_train_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> kvs;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line is not key=value: " + t);
    kvs.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }

  TrainConfig cfg = TrainConfig::desk();
  for (const auto& [k, v] : kvs)
    if (k == "scale") {
      if (v == "desk")
        cfg = TrainConfig::desk();
      else if (v == "full")
        cfg = TrainConfig::full();
      else
        throw std::invalid_argument("unknown scale: " + v);
    }

  for (const auto& [k, v] : kvs) {
    if (k == "scale") continue;
    if (k == "variant") cfg.variant = variant_from_name(v);
    else if (k == "seed") cfg.seed = std::stoull(v);
    else if (k == "phase1_steps") cfg.phase1_steps = std::stoul(v);
    else if (k == "phase2_steps") cfg.phase2_steps = std::stoul(v);
    else if (k == "lr") cfg.lr = std::stod(v);
    else if (k == "margin") cfg.margin = std::stod(v);
    else if (k == "dropout") cfg.dropout = std::stod(v);
    else if (k == "batch_p") cfg.batch_p = std::stoul(v);
    else if (k == "batch_k") cfg.batch_k = std::stoul(v);
    else if (k == "frames_per_sample") cfg.frames_per_sample = std::stoul(v);
    else if (k == "routing_iters") cfg.routing_iters = std::stoi(v);
    else if (k == "freeze_pfe") cfg.freeze_pfe = v == "1" || v == "true";
    else if (k == "train_identities") cfg.train_identities = std::stoul(v);
    else if (k == "log_every") cfg.log_every = std::stoul(v);
    else if (k == "conv_channels") cfg.conv_channels = v;
    else if (k == "bin_dim") cfg.bin_dim = std::stoul(v);
    else if (k == "gru_hidden") cfg.gru_hidden = std::stoul(v);
    else if (k == "num_primary") cfg.num_primary = std::stoul(v);
    else if (k == "primary_dim") cfg.primary_dim = std::stoul(v);
    else if (k == "num_digit") cfg.num_digit = std::stoul(v);
    else if (k == "digit_dim") cfg.digit_dim = std::stoul(v);
    else throw std::invalid_argument("unknown config key: " + k);
  }
  if (cfg.lr <= 0.0 || cfg.batch_p < 1 || cfg.batch_k < 1 || cfg.frames_per_sample < 1 ||
      cfg.routing_iters < 1)
    throw std::invalid_argument("config: counts must be positive and lr > 0");
  return cfg;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

std::string serialize_train_config(const TrainConfig& cfg) {
  std::ostringstream out;
  out << "scale=" << cfg.scale << "\n";
  out << "variant=" << variant_name(cfg.variant) << "\n";
  out << "seed=" << cfg.seed << "\n";
  out << "phase1_steps=" << cfg.phase1_steps << "\n";
  out << "phase2_steps=" << cfg.phase2_steps << "\n";
  out << "lr=" << cfg.lr << "\n";
  out << "margin=" << cfg.margin << "\n";
  out << "dropout=" << cfg.dropout << "\n";
  out << "batch_p=" << cfg.batch_p << "\n";
  out << "batch_k=" << cfg.batch_k << "\n";
  out << "frames_per_sample=" << cfg.frames_per_sample << "\n";
  out << "routing_iters=" << cfg.routing_iters << "\n";
  out << "freeze_pfe=" << (cfg.freeze_pfe ? 1 : 0) << "\n";
  out << "train_identities=" << cfg.train_identities << "\n";
  out << "log_every=" << cfg.log_every << "\n";
  out << "conv_channels=" << cfg.conv_channels << "\n";
  out << "bin_dim=" << cfg.bin_dim << "\n";
  out << "gru_hidden=" << cfg.gru_hidden << "\n";
  out << "num_primary=" << cfg.num_primary << "\n";
  out << "primary_dim=" << cfg.primary_dim << "\n";
  out << "num_digit=" << cfg.num_digit << "\n";
  out << "digit_dim=" << cfg.digit_dim << "\n";
  return out.str();
}

void AdamOptimizer::step(const std::function<void(const ParamVisitor&)>& visit) {
  ++t_;
  visit([this](const std::string& path, Param& p) {
    auto [it, inserted] = state_.try_emplace(path, std::make_pair(Tensor(), Tensor()));
    if (inserted) {
      it->second.first = Tensor(p.value.shape());
      it->second.second = Tensor(p.value.shape());
    }
    adam_step(p.value, p.grad, it->second.first, it->second.second, t_, cfg_);
  });
}

namespace {

void zero_all_grads(GaitCapsModel& model) {
  model.visit_params([](const std::string&, Param& p) { p.zero_grad(); });
}

double windowed_mean(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += v[i];
  return s / static_cast<double>(end - begin);
}

}  // namespace

std::vector<double> pretrain_pfe(GaitCapsModel& model, const DatasetIndex& train,
                                 const TrainConfig& cfg, Rng& rng, const StepHook& hook) {
  std::vector<double> log;
  AdamOptimizer adam(AdamConfig{.lr = cfg.lr});
  for (std::size_t step = 0; step < cfg.phase1_steps; ++step) {
    TrainingBatch batch = sample_batch(train, cfg.batch_p, cfg.batch_k, cfg.frames_per_sample, rng);
    const std::size_t B = batch.frames.size();
    std::vector<PfeCache> caches(B);
    std::vector<Tensor> embeddings(B);
    for (std::size_t b = 0; b < B; ++b)
      embeddings[b] = model.pfe().forward(batch.frames[b], &caches[b]);

    std::vector<Tensor> d_emb;
    const double loss = triplet_loss_ba(embeddings, batch.labels, cfg.margin, &d_emb);
    if (!std::isfinite(loss))
      throw std::runtime_error("pretrain_pfe: non-finite loss at step " + std::to_string(step));

    zero_all_grads(model);
    for (std::size_t b = 0; b < B; ++b) model.pfe().backward(caches[b], d_emb[b]);
    adam.step([&](const ParamVisitor& v) { model.visit_pfe_params(v); });

    log.push_back(loss);
    if (hook && (step + 1) % std::max<std::size_t>(cfg.log_every, 1) == 0)
      hook(step + 1, loss);
  }
  return log;
}

std::vector<double> train_classifier(GaitCapsModel& model, const DatasetIndex& train,
                                     const TrainConfig& cfg, Rng& rng, const StepHook& hook) {
  std::vector<double> log;
  AdamOptimizer adam(AdamConfig{.lr = cfg.lr});
  const std::size_t feat_dim = model.feature_dim();

  for (std::size_t step = 0; step < cfg.phase2_steps; ++step) {
    TrainingBatch batch = sample_batch(train, cfg.batch_p, cfg.batch_k, cfg.frames_per_sample, rng);
    const std::size_t B = batch.frames.size();
    std::vector<SeqCache> caches(B);
    Tensor feats({B, feat_dim});
    for (std::size_t b = 0; b < B; ++b) {
      Tensor f = model.features(batch.frames[b], true, &rng, &caches[b]);
      for (std::size_t i = 0; i < feat_dim; ++i) feats.at2(b, i) = f[i];
    }
    Tensor probs = model.classify(feats);
    const double loss = cross_entropy(probs, batch.labels);
    if (!std::isfinite(loss))
      throw std::runtime_error("train_full: non-finite loss at step " + std::to_string(step) +
                               "; aborting");

    zero_all_grads(model);
    Tensor d_probs = cross_entropy_backward(probs, batch.labels);
    Tensor d_logits = softmax_backward(probs, d_probs);
    Tensor d_feats = model.classifier_backward(feats, d_logits);
    for (std::size_t b = 0; b < B; ++b) {
      Tensor d_f({feat_dim});
      for (std::size_t i = 0; i < feat_dim; ++i) d_f[i] = d_feats.at2(b, i);
      model.backward_features(caches[b], d_f);
    }

    if (cfg.freeze_pfe) {
      adam.step([&](const ParamVisitor& v) {
        model.visit_params([&](const std::string& path, Param& p) {
          if (path.rfind("pfe.", 0) != 0) v(path, p);
        });
      });
    } else {
      adam.step([&](const ParamVisitor& v) { model.visit_params(v); });
    }

    log.push_back(loss);
    if (hook && (step + 1) % std::max<std::size_t>(cfg.log_every, 1) == 0)
      hook(step + 1, loss);
  }
  return log;
}

TrainedModel run_training(const DatasetIndex& index, const TrainConfig& cfg,
                          const StepHook& hook) {
  if (index.identities.size() < 2) throw std::runtime_error("run_training: need >= 2 identities");

  TrainedModel out;
  out.cfg = cfg;
  out.train_identities = index.identities;
  if (cfg.train_identities > 0 && cfg.train_identities < index.identities.size())
    out.train_identities.resize(cfg.train_identities);
  const DatasetIndex train = filter_identities(index, out.train_identities);

  Rng init_rng = Rng(cfg.seed).fork(0x696e6974ULL);
  out.model = std::make_unique<GaitCapsModel>(cfg.model_config(out.train_identities.size()),
                                              init_rng);
  Rng phase1_rng = Rng(cfg.seed).fork(0x70686173ULL ^ 1);
  Rng phase2_rng = Rng(cfg.seed).fork(0x70686173ULL ^ 2);
  out.phase1_loss = pretrain_pfe(*out.model, train, cfg, phase1_rng, hook);
  out.phase2_loss = train_classifier(*out.model, train, cfg, phase2_rng, hook);
  return out;
}

double train_accuracy(const GaitCapsModel& model, const DatasetIndex& index) {
  std::size_t correct = 0;
  const std::size_t feat_dim = model.feature_dim();
  for (const GaitSequence& seq : index.sequences) {
    Tensor f = model.embed(frames_to_tensor(seq.frames));
    Tensor row({1, feat_dim});
    for (std::size_t i = 0; i < feat_dim; ++i) row[i] = f[i];
    Tensor probs = model.classify(row);
    std::size_t best = 0;
    for (std::size_t k = 1; k < probs.size(); ++k)
      if (probs[k] > probs[best]) best = k;
    if (static_cast<int>(best) == index.identity_class(seq.identity)) ++correct;
  }
  return index.sequences.empty()
             ? 0.0
             : static_cast<double>(correct) / static_cast<double>(index.sequences.size());
}

// ---------------------------------------------------------------------------
// checkpoint container

namespace {

constexpr char kMagic[4] = {'G', 'C', 'A', 'P'};
constexpr std::uint32_t kVersion = 1;

void wu32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void wu64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t ru32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("truncated checkpoint");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t ru64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void wf32(std::ostream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  wu32(out, bits);
}

float rf32(std::istream& in) {
  const std::uint32_t bits = ru32(in);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

std::string join_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ",";
    out += ids[i];
  }
  return out;
}

}  // namespace

void save_checkpoint(GaitCapsModel& model, const TrainConfig& cfg,
                     const std::vector<std::string>& train_identities, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);

  const std::string blob =
      serialize_train_config(cfg) + "train_ids=" + join_ids(train_identities) + "\n";

  out.write(kMagic, 4);
  wu32(out, kVersion);
  wu32(out, static_cast<std::uint32_t>(blob.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));

  std::vector<std::pair<std::string, const Tensor*>> entries;
  model.visit_params([&](const std::string& p, Param& param) {
    entries.emplace_back(p, &param.value);
  });
  wu32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [p, value] : entries) {
    wu32(out, static_cast<std::uint32_t>(p.size()));
    out.write(p.data(), static_cast<std::streamsize>(p.size()));
    out.put(static_cast<char>(value->rank()));
    for (std::size_t d : value->shape()) wu64(out, d);
    for (std::size_t i = 0; i < value->size(); ++i)
      wf32(out, static_cast<float>((*value)[i]));
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a checkpoint: " + path);
  const std::uint32_t version = ru32(in);
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

  const std::uint32_t blob_len = ru32(in);
  std::string blob(blob_len, '\0');
  if (!in.read(blob.data(), blob_len)) throw std::runtime_error("truncated checkpoint");

  Checkpoint ckpt;
  std::string cfg_lines;
  std::istringstream bs(blob);
  std::string line;
  while (std::getline(bs, line)) {
    if (line.rfind("train_ids=", 0) == 0) {
      const std::string ids = line.substr(10);
      if (!ids.empty()) ckpt.train_identities = split(ids, ',');
    } else {
      cfg_lines += line + "\n";
    }
  }
  ckpt.cfg = parse_train_config(cfg_lines);

  const std::uint32_t count = ru32(in);
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t plen = ru32(in);
    std::string p(plen, '\0');
    if (!in.read(p.data(), plen)) throw std::runtime_error("truncated checkpoint");
    const int rank = in.get();
    if (rank < 0) throw std::runtime_error("truncated checkpoint");
    std::vector<std::size_t> shape(static_cast<std::size_t>(rank));
    for (auto& d : shape) d = static_cast<std::size_t>(ru64(in));
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(rf32(in));
    ckpt.params.emplace(std::move(p), std::move(t));
  }
  return ckpt;
}

std::unique_ptr<GaitCapsModel> model_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.train_identities.empty())
    throw std::runtime_error("checkpoint carries no training identities");
  Rng rng = Rng(ckpt.cfg.seed).fork(0x696e6974ULL);
  auto model = std::make_unique<GaitCapsModel>(
      ckpt.cfg.model_config(ckpt.train_identities.size()), rng);

  std::set<std::string> used;
  model->visit_params([&](const std::string& path, Param& p) {
    const auto it = ckpt.params.find(path);
    if (it == ckpt.params.end())
      throw std::runtime_error("checkpoint missing parameter: " + path);
    if (it->second.shape() != p.value.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + path + ": file " +
                               shape_str(it->second.shape()) + " vs model " +
                               shape_str(p.value.shape()));
    p.value = it->second;
    used.insert(path);
  });
  for (const auto& [path, t] : ckpt.params)
    if (!used.count(path)) throw std::runtime_error("unknown parameter path: " + path);
  return model;
}

// ---------------------------------------------------------------------------
// ablation harness

AblationReport ablate(const DatasetIndex& index, const TrainConfig& cfg,
                      const std::string& checkpoint_dir, const StepHook& hook) {
  static const Variant kVariants[] = {Variant::kFull, Variant::kUniGru, Variant::kNoRnn,
                                      Variant::kNoCaps, Variant::kConvPrimary};
  AblationReport report;
  report.config_echo = serialize_train_config(cfg);
  fs::create_directories(checkpoint_dir);

  report.complete = true;
  for (Variant v : kVariants) {
    AblationRow row;
    row.variant = variant_name(v);
    TrainConfig cfg_v = cfg;
    cfg_v.variant = v;
    try {
      TrainedModel tm = run_training(index, cfg_v, hook);

      // evaluate on the held-out identities when a split is configured
      std::vector<std::string> eval_ids;
      for (const std::string& id : index.identities)
        if (std::find(tm.train_identities.begin(), tm.train_identities.end(), id) ==
            tm.train_identities.end())
          eval_ids.push_back(id);
      const DatasetIndex eval_index =
          eval_ids.empty() ? index : filter_identities(index, eval_ids);

      const EvalReport eval_report = evaluate(*tm.model, eval_index, ProtocolKind::kSynthetic);
      for (const auto& [cond, matrix] : eval_report.conditions)
        row.condition_means[cond] = aggregate(matrix).mean;
      row.overall_mean = eval_report.overall_mean();

      row.checkpoint_path =
          (fs::path(checkpoint_dir) / (variant_name(v) + ".gcap")).string();
      save_checkpoint(*tm.model, cfg_v, tm.train_identities, row.checkpoint_path);
      row.complete = true;
    } catch (const std::exception& e) {
      row.complete = false;
      row.checkpoint_path = std::string("failed: ") + e.what();
      report.complete = false;
    }
    report.rows.push_back(std::move(row));
    if (!report.complete) break;  // partial report, flagged incomplete
  }
  return report;
}

void write_ablation_csv(const AblationReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);

  std::set<std::string> conds;
  for (const AblationRow& row : report.rows)
    for (const auto& [cond, mean] : row.condition_means) conds.insert(cond);

  std::string echo = report.config_echo;
  std::replace(echo.begin(), echo.end(), '\n', ';');
  out << "# gaitcaps ablation report\n";
  out << "# config: " << echo << "\n";
  out << "variant,complete,checkpoint";
  for (const std::string& c : conds) out << "," << c;
  out << ",overall_mean\n";

  char buf[32];
  for (const AblationRow& row : report.rows) {
    out << row.variant << "," << (row.complete ? "yes" : "no") << "," << row.checkpoint_path;
    for (const std::string& c : conds) {
      const auto it = row.condition_means.find(c);
      if (it == row.condition_means.end())
        out << ",-";
      else {
        std::snprintf(buf, sizeof(buf), ",%.2f", it->second);
        out << buf;
      }
    }
    if (row.complete) {
      std::snprintf(buf, sizeof(buf), ",%.2f", row.overall_mean);
      out << buf << "\n";
    } else {
      out << ",-\n";
    }
  }
  out << "status," << (report.complete ? "complete" : "incomplete") << "\n";
}

}  // namespace gaitcaps
