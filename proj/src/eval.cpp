#include "gaitcaps/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace gaitcaps {

ProtocolKind protocol_from_name(const std::string& name) {
  if (name == "casia-b") return ProtocolKind::kCasiaB;
  if (name == "ou-mvlp" || name == "ou-mvlp-like") return ProtocolKind::kOuMvlp;
  if (name == "synthetic") return ProtocolKind::kSynthetic;
  throw std::invalid_argument("unknown protocol: " + name);
}

std::string protocol_name(ProtocolKind kind) {
  switch (kind) {
    case ProtocolKind::kCasiaB: return "casia-b";
    case ProtocolKind::kOuMvlp: return "ou-mvlp";
    case ProtocolKind::kSynthetic: return "synthetic";
  }
  return "casia-b";
}

namespace {

ProtocolEntry entry_of(const DatasetIndex& index, std::size_t pos) {
  const GaitSequence& s = index.sequences[pos];
  return ProtocolEntry{pos, s.identity, s.view};
}

ProtocolSplit build_casia(const DatasetIndex& index) {
  ProtocolSplit split;
  std::vector<std::string> missing;
  for (const std::string& id : index.identities) {
    for (int view : index.views) {
      bool have_nm[7] = {};
      for (std::size_t pos = 0; pos < index.sequences.size(); ++pos) {
        const GaitSequence& s = index.sequences[pos];
        if (s.identity != id || s.view != view) continue;
        if (s.condition == "NM" && s.seq_index >= 1 && s.seq_index <= 6)
          have_nm[s.seq_index] = true;
        if (s.condition == "NM" && s.seq_index <= 4)
          split.gallery.push_back(entry_of(index, pos));
        else if (s.condition == "NM")
          split.probes["NM"].push_back(entry_of(index, pos));
        else
          split.probes[s.condition].push_back(entry_of(index, pos));
      }
      for (int k = 1; k <= 4; ++k)
        if (!have_nm[k]) {
          char buf[32];
          std::snprintf(buf, sizeof(buf), "nm-%02d/%03d", k, view);
          missing.push_back(id + "/" + buf);
        }
    }
  }
  if (!missing.empty()) {
    std::string msg = "protocol requires missing sequences:";
    for (const std::string& m : missing) msg += " " + m;
    throw std::runtime_error(msg);
  }
  return split;
}

ProtocolSplit build_oumvlp(const DatasetIndex& index) {
  ProtocolSplit split;
  std::vector<std::string> missing;
  for (std::size_t pos = 0; pos < index.sequences.size(); ++pos) {
    const GaitSequence& s = index.sequences[pos];
    if (s.seq_index == 0)
      split.probes["00"].push_back(entry_of(index, pos));
    else if (s.seq_index == 1)
      split.gallery.push_back(entry_of(index, pos));
  }
  if (split.gallery.empty()) missing.push_back("session 01 (gallery)");
  if (split.probes["00"].empty()) missing.push_back("session 00 (probe)");
  if (!missing.empty()) {
    std::string msg = "protocol requires missing sequences:";
    for (const std::string& m : missing) msg += " " + m;
    throw std::runtime_error(msg);
  }
  return split;
}

ProtocolSplit build_synthetic(const DatasetIndex& index) {
  ProtocolSplit split;
  std::vector<std::string> missing;
  for (const std::string& id : index.identities) {
    for (int view : index.views) {
      std::vector<std::size_t> nm;
      for (std::size_t pos = 0; pos < index.sequences.size(); ++pos) {
        const GaitSequence& s = index.sequences[pos];
        if (s.identity == id && s.view == view && s.condition == "NM") nm.push_back(pos);
      }
      if (nm.size() < 2) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "/nm-*/%03d", view);
        missing.push_back(id + buf + " (need >= 2 NM sequences)");
        continue;
      }
      const std::size_t gallery_count = nm.size() / 2;
      for (std::size_t i = 0; i < nm.size(); ++i) {
        if (i < gallery_count)
          split.gallery.push_back(entry_of(index, nm[i]));
        else
          split.probes["NM"].push_back(entry_of(index, nm[i]));
      }
      for (std::size_t pos = 0; pos < index.sequences.size(); ++pos) {
        const GaitSequence& s = index.sequences[pos];
        if (s.identity == id && s.view == view && s.condition != "NM")
          split.probes[s.condition].push_back(entry_of(index, pos));
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = "protocol requires missing sequences:";
    for (const std::string& m : missing) msg += " " + m;
    throw std::runtime_error(msg);
  }
  return split;
}

}  // namespace

ProtocolSplit build_protocol(const DatasetIndex& index, ProtocolKind kind) {
  switch (kind) {
    case ProtocolKind::kCasiaB: return build_casia(index);
    case ProtocolKind::kOuMvlp: return build_oumvlp(index);
    case ProtocolKind::kSynthetic: return build_synthetic(index);
  }
  throw std::invalid_argument("unknown protocol kind");
}

ConditionMatrix rank1_matrix(const std::vector<Tensor>& gallery_emb,
                             const std::vector<ProtocolEntry>& gallery,
                             const std::vector<Tensor>& probe_emb,
                             const std::vector<ProtocolEntry>& probes,
                             const std::vector<int>& views) {
  ConditionMatrix m;
  m.views = views;
  const std::size_t V = views.size();
  m.cells.assign(V * V, EvalCell{});
  auto view_pos = [&](int view) {
    const auto it = std::find(views.begin(), views.end(), view);
    if (it == views.end()) throw std::invalid_argument("rank1_matrix: view not in roster");
    return static_cast<std::size_t>(it - views.begin());
  };

  for (std::size_t pi = 0; pi < probes.size(); ++pi) {
    const std::size_t p = view_pos(probes[pi].view);
    for (std::size_t g = 0; g < V; ++g) {
      if (g == p) continue;  // identical views are excluded everywhere
      double best = std::numeric_limits<double>::infinity();
      long best_idx = -1;
      for (std::size_t gi = 0; gi < gallery.size(); ++gi) {
        if (gallery[gi].view != views[g]) continue;
        const double dist = (probe_emb[pi].vec() - gallery_emb[gi].vec()).squaredNorm();
        if (dist < best) {  // strict: ties keep the lowest gallery index
          best = dist;
          best_idx = static_cast<long>(gi);
        }
      }
      if (best_idx < 0) continue;  // no gallery entries of that view
      EvalCell& cell = m.at(p, g);
      cell.total += 1;
      if (gallery[best_idx].identity == probes[pi].identity) cell.correct += 1;
    }
  }
  for (std::size_t p = 0; p < V; ++p)
    for (std::size_t g = 0; g < V; ++g) {
      EvalCell& cell = m.at(p, g);
      if (p != g && cell.total > 0) {
        cell.included = true;
        cell.percent = 100.0 * static_cast<double>(cell.correct) /
                       static_cast<double>(cell.total);
      }
    }
  return m;
}

ConditionMeans aggregate(const ConditionMatrix& matrix) {
  const std::size_t V = matrix.views.size();
  ConditionMeans means;
  means.per_view.assign(V, 0.0);
  means.view_present.assign(V, false);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < V; ++p) {
    double row = 0.0;
    std::size_t row_count = 0;
    for (std::size_t g = 0; g < V; ++g) {
      const EvalCell& cell = matrix.at(p, g);
      if (!cell.included) continue;
      row += cell.percent;
      ++row_count;
      total += cell.percent;
      ++count;
    }
    if (row_count > 0) {
      means.per_view[p] = row / static_cast<double>(row_count);
      means.view_present[p] = true;
    }
  }
  means.mean = count > 0 ? total / static_cast<double>(count) : 0.0;
  return means;
}

double EvalReport::overall_mean() const {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& [cond, matrix] : conditions)
    for (const EvalCell& cell : matrix.cells)
      if (cell.included) {
        total += cell.percent;
        ++count;
      }
  return count > 0 ? total / static_cast<double>(count) : 0.0;
}

Tensor embed_sequence(const GaitCapsModel& model, const GaitSequence& seq) {
  return model.embed(frames_to_tensor(seq.frames));
}

EvalReport evaluate(const GaitCapsModel& model, const DatasetIndex& index, ProtocolKind kind) {
  const ProtocolSplit split = build_protocol(index, kind);

  std::vector<Tensor> gallery_emb(split.gallery.size());
  for (std::size_t i = 0; i < split.gallery.size(); ++i)
    gallery_emb[i] = embed_sequence(model, index.sequences[split.gallery[i].seq_pos]);

  EvalReport report;
  for (const auto& [cond, probes] : split.probes) {
    std::vector<Tensor> probe_emb(probes.size());
    for (std::size_t i = 0; i < probes.size(); ++i)
      probe_emb[i] = embed_sequence(model, index.sequences[probes[i].seq_pos]);
    report.conditions[cond] =
        rank1_matrix(gallery_emb, split.gallery, probe_emb, probes, index.views);
  }
  return report;
}

void write_report_csv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  char buf[64];
  for (const auto& [cond, matrix] : report.conditions) {
    const ConditionMeans means = aggregate(matrix);
    out << "condition," << cond << "\n";
    out << "probe_view\\gallery_view";
    for (int v : matrix.views) out << "," << v;
    out << ",mean\n";
    for (std::size_t p = 0; p < matrix.views.size(); ++p) {
      out << matrix.views[p];
      for (std::size_t g = 0; g < matrix.views.size(); ++g) {
        const EvalCell& cell = matrix.at(p, g);
        if (!cell.included)
          out << ",-";
        else {
          std::snprintf(buf, sizeof(buf), ",%.2f", cell.percent);
          out << buf;
        }
      }
      if (means.view_present[p]) {
        std::snprintf(buf, sizeof(buf), ",%.2f", means.per_view[p]);
        out << buf;
      } else {
        out << ",-";
      }
      out << "\n";
    }
    std::snprintf(buf, sizeof(buf), "mean,%.2f", means.mean);
    out << buf << "\n\n";
  }
  std::snprintf(buf, sizeof(buf), "overall_mean,%.2f", report.overall_mean());
  out << buf << "\n";
}

std::string report_summary_text(const EvalReport& report) {
  std::ostringstream out;
  char buf[96];
  for (const auto& [cond, matrix] : report.conditions) {
    const ConditionMeans means = aggregate(matrix);
    std::string key = cond;
    for (char& c : key) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    std::snprintf(buf, sizeof(buf), "%s.mean=%.6f\n", key.c_str(), means.mean);
    out << buf;
    for (std::size_t p = 0; p < matrix.views.size(); ++p)
      if (means.view_present[p]) {
        std::snprintf(buf, sizeof(buf), "%s.view.%d.mean=%.6f\n", key.c_str(), matrix.views[p],
                      means.per_view[p]);
        out << buf;
      }
  }
  std::snprintf(buf, sizeof(buf), "overall_mean=%.6f\n", report.overall_mean());
  out << buf;
  return out.str();
}

void write_report_summary(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << report_summary_text(report);
}

void export_embeddings(const GaitCapsModel& model, const DatasetIndex& index,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  const std::size_t dim = model.feature_dim();
  out << "id,view,condition";
  for (std::size_t i = 0; i < dim; ++i) out << ",e" << i;
  out << "\n";
  char buf[32];
  for (const GaitSequence& seq : index.sequences) {
    Tensor e = embed_sequence(model, seq);
    out << seq.identity << "," << seq.view << "," << seq.condition;
    for (std::size_t i = 0; i < e.size(); ++i) {
      std::snprintf(buf, sizeof(buf), ",%.9g", e[i]);
      out << buf;
    }
    out << "\n";
  }
}

}  // namespace gaitcaps
