#pragma once

#include <map>
#include <string>
#include <vector>

#include "gaitcaps/dataset.hpp"
#include "gaitcaps/model.hpp"

namespace gaitcaps {

enum class ProtocolKind { kCasiaB, kOuMvlp, kSynthetic };

ProtocolKind protocol_from_name(const std::string& name);
std::string protocol_name(ProtocolKind kind);

struct ProtocolEntry {
  std::size_t seq_pos = 0;  // position in DatasetIndex::sequences
  std::string identity;
  int view = 0;
};

struct ProtocolSplit {
  std::vector<ProtocolEntry> gallery;
  // probe sets keyed by condition; disjoint from the gallery by
  // (identity, condition, sequence index)
  std::map<std::string, std::vector<ProtocolEntry>> probes;
};

/// casia-b: gallery = NM 1-4 per subject and view; probes NM 5-6, BG, CL.
/// ou-mvlp: probe = session 00, gallery = session 01.
/// synthetic: gallery = first half of the NM sequences per subject and view,
/// probes = everything else grouped by condition.
/// Throws with the missing keys when required sequences are absent.
ProtocolSplit build_protocol(const DatasetIndex& index, ProtocolKind kind);

struct EvalCell {
  bool included = false;  // identical-view cells and empty cells are excluded
  std::size_t correct = 0;
  std::size_t total = 0;
  double percent = 0.0;
};

struct ConditionMatrix {
  std::vector<int> views;        // row = probe view, column = gallery view
  std::vector<EvalCell> cells;   // views.size() x views.size(), row-major
  const EvalCell& at(std::size_t p, std::size_t g) const { return cells[p * views.size() + g]; }
  EvalCell& at(std::size_t p, std::size_t g) { return cells[p * views.size() + g]; }
};

struct ConditionMeans {
  std::vector<double> per_view;  // mean over included cells of each probe view row
  std::vector<bool> view_present;
  double mean = 0.0;  // over all included cells
};

struct EvalReport {
  std::map<std::string, ConditionMatrix> conditions;

  double overall_mean() const;  // over every included cell of every condition
};

/// Rank-1 nearest-gallery matching for one condition's probe set. A probe is
/// correct when its Euclidean nearest gallery embedding of the target view
/// shares its identity; ties resolve to the lowest gallery index.
ConditionMatrix rank1_matrix(const std::vector<Tensor>& gallery_emb,
                             const std::vector<ProtocolEntry>& gallery,
                             const std::vector<Tensor>& probe_emb,
                             const std::vector<ProtocolEntry>& probes,
                             const std::vector<int>& views);

ConditionMeans aggregate(const ConditionMatrix& matrix);

/// Embedding of one sequence: all frames, dropout off.
Tensor embed_sequence(const GaitCapsModel& model, const GaitSequence& seq);

/// Full protocol evaluation of a trained model over `index`.
EvalReport evaluate(const GaitCapsModel& model, const DatasetIndex& index, ProtocolKind kind);

/// One matrix per condition; excluded cells print as "-".
void write_report_csv(const EvalReport& report, const std::string& path);

/// Flat key=value summary (condition means, per-view means, overall mean).
void write_report_summary(const EvalReport& report, const std::string& path);
std::string report_summary_text(const EvalReport& report);

/// CSV with header id,view,condition,e0..e{n-1}, one row per sequence in
/// index order, 9 significant digits.
void export_embeddings(const GaitCapsModel& model, const DatasetIndex& index,
                       const std::string& path);

}  // namespace gaitcaps
