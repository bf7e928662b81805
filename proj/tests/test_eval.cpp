#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gaitcaps/eval.hpp"
#include "gaitcaps/train.hpp"

namespace fs = std::filesystem;
using namespace gaitcaps;

namespace {

SilhouetteFrame dot_frame() {
  SilhouetteFrame f;
  f.mask.assign(kFrameSize * kFrameSize, 0);
  f.mask[32 * kFrameSize + 32] = 1;
  return f;
}

GaitSequence make_seq(const std::string& id, const std::string& cond, int seq, int view) {
  GaitSequence s;
  s.identity = id;
  s.condition = cond;
  s.seq_index = seq;
  s.view = view;
  s.frames = {dot_frame()};
  return s;
}

void finalize(DatasetIndex& index) {
  std::set<std::string> ids;
  std::set<int> views;
  for (const GaitSequence& s : index.sequences) {
    ids.insert(s.identity);
    views.insert(s.view);
  }
  index.identities.assign(ids.begin(), ids.end());
  index.views.assign(views.begin(), views.end());
}

DatasetIndex casia_mini(bool drop_nm4 = false) {
  DatasetIndex index;
  std::vector<int> views;
  for (int v = 0; v <= 180; v += 18) views.push_back(v);
  for (const std::string& id : {"001", "002", "003"})
    for (int view : views) {
      for (int s = 1; s <= 6; ++s) {
        if (drop_nm4 && id == "002" && s == 4 && view == 36) continue;
        index.sequences.push_back(make_seq(id, "NM", s, view));
      }
      for (int s = 1; s <= 2; ++s) {
        index.sequences.push_back(make_seq(id, "BG", s, view));
        index.sequences.push_back(make_seq(id, "CL", s, view));
      }
    }
  finalize(index);
  return index;
}

TrainConfig tiny_config() {
  TrainConfig cfg = TrainConfig::desk();
  cfg.conv_channels = "4,p,4,p";
  cfg.bin_dim = 8;
  cfg.gru_hidden = 8;
  cfg.num_primary = 2;
  cfg.primary_dim = 8;
  cfg.num_digit = 2;
  cfg.digit_dim = 4;
  return cfg;
}

Tensor rand_emb(std::size_t d, Rng& rng) {
  Tensor t({d});
  for (std::size_t i = 0; i < d; ++i) t[i] = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("casia protocol: gallery NM 1-4, probes NM 5-6 / BG / CL") {
  DatasetIndex index = casia_mini();
  ProtocolSplit split = build_protocol(index, ProtocolKind::kCasiaB);
  CHECK(split.gallery.size() == 3 * 11 * 4);  // 132
  CHECK(split.probes.at("NM").size() == 3 * 11 * 2);
  CHECK(split.probes.at("BG").size() == 3 * 11 * 2);
  CHECK(split.probes.at("CL").size() == 3 * 11 * 2);

  // gallery and probes are disjoint by (identity, condition, seq index)
  std::set<std::tuple<std::string, std::string, int>> gal;
  for (const ProtocolEntry& e : split.gallery) {
    const GaitSequence& s = index.sequences[e.seq_pos];
    gal.insert({s.identity, s.condition, s.seq_index});
  }
  for (const auto& [cond, probes] : split.probes)
    for (const ProtocolEntry& e : probes) {
      const GaitSequence& s = index.sequences[e.seq_pos];
      CHECK(gal.count({s.identity, s.condition, s.seq_index}) == 0);
    }
}

TEST_CASE("casia protocol reports missing gallery sequences by key") {
  DatasetIndex index = casia_mini(/*drop_nm4=*/true);
  CHECK_THROWS_WITH(build_protocol(index, ProtocolKind::kCasiaB),
                    doctest::Contains("002/nm-04/036"));
}

TEST_CASE("ou-mvlp protocol: session 00 probes, session 01 gallery") {
  DatasetIndex index;
  for (const std::string& id : {"0001", "0002"})
    for (int view : {0, 90}) {
      index.sequences.push_back(make_seq(id, "00", 0, view));
      index.sequences.push_back(make_seq(id, "01", 1, view));
    }
  finalize(index);
  ProtocolSplit split = build_protocol(index, ProtocolKind::kOuMvlp);
  CHECK(split.gallery.size() == 4);
  CHECK(split.probes.at("00").size() == 4);
}

TEST_CASE("synthetic protocol: first half of NM is the gallery") {
  DatasetIndex index;
  for (const std::string& id : {"001", "002"})
    for (int view : {0, 90}) {
      for (int s = 1; s <= 4; ++s) index.sequences.push_back(make_seq(id, "NM", s, view));
      index.sequences.push_back(make_seq(id, "BG", 1, view));
    }
  finalize(index);
  ProtocolSplit split = build_protocol(index, ProtocolKind::kSynthetic);
  CHECK(split.gallery.size() == 2 * 2 * 2);
  CHECK(split.probes.at("NM").size() == 2 * 2 * 2);
  CHECK(split.probes.at("BG").size() == 2 * 2 * 1);
  for (const ProtocolEntry& e : split.gallery)
    CHECK(index.sequences[e.seq_pos].seq_index <= 2);
}

TEST_CASE("rank1_matrix: probes equal to gallery entries score 100") {
  Rng rng(1);
  const std::vector<int> views = {0, 90};
  std::vector<ProtocolEntry> gallery, probes;
  std::vector<Tensor> gal_emb, probe_emb;
  for (std::size_t id = 0; id < 3; ++id)
    for (int view : views) {
      Tensor e = rand_emb(4, rng);
      gallery.push_back({0, "id" + std::to_string(id), view});
      gal_emb.push_back(e);
      probes.push_back({0, "id" + std::to_string(id), view == 0 ? 90 : 0});
      probe_emb.push_back(e);  // identical embedding, opposite view
    }
  ConditionMatrix m = rank1_matrix(gal_emb, gallery, probe_emb, probes, views);
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t g = 0; g < 2; ++g) {
      if (p == g)
        CHECK(!m.at(p, g).included);
      else
        CHECK(m.at(p, g).percent == 100.0);
    }
}

TEST_CASE("rank1_matrix: adversarial nearest neighbors score 0") {
  const std::vector<int> views = {0, 90};
  std::vector<ProtocolEntry> gallery = {{0, "a", 0}, {0, "b", 0}};
  std::vector<Tensor> gal_emb = {Tensor({1}, {0.0}), Tensor({1}, {10.0})};
  // probe of identity a at view 90 sits exactly on b's gallery embedding
  std::vector<ProtocolEntry> probes = {{0, "a", 90}};
  std::vector<Tensor> probe_emb = {Tensor({1}, {10.0})};
  ConditionMatrix m = rank1_matrix(gal_emb, gallery, probe_emb, probes, views);
  CHECK(m.at(1, 0).percent == 0.0);
}

TEST_CASE("rank1_matrix matches a brute-force nearest-neighbor oracle") {
  Rng rng(3);
  const std::vector<int> views = {0, 90};
  std::vector<ProtocolEntry> gallery;
  std::vector<Tensor> gal_emb;
  for (int id = 0; id < 3; ++id)
    for (int view : views)
      for (int s = 0; s < 2; ++s) {
        gallery.push_back({0, "id" + std::to_string(id), view});
        gal_emb.push_back(rand_emb(3, rng));
      }
  std::vector<ProtocolEntry> probes;
  std::vector<Tensor> probe_emb;
  for (int id = 0; id < 3; ++id)
    for (int view : views) {
      probes.push_back({0, "id" + std::to_string(id), view});
      probe_emb.push_back(rand_emb(3, rng));
    }
  ConditionMatrix m = rank1_matrix(gal_emb, gallery, probe_emb, probes, views);

  for (std::size_t pv = 0; pv < 2; ++pv)
    for (std::size_t gv = 0; gv < 2; ++gv) {
      if (pv == gv) continue;
      std::size_t correct = 0, total = 0;
      for (std::size_t pi = 0; pi < probes.size(); ++pi) {
        if (probes[pi].view != views[pv]) continue;
        ++total;
        double best = 1e300;
        std::string best_id;
        for (std::size_t gi = 0; gi < gallery.size(); ++gi) {
          if (gallery[gi].view != views[gv]) continue;
          double d = 0.0;
          for (std::size_t k = 0; k < 3; ++k) {
            const double diff = probe_emb[pi][k] - gal_emb[gi][k];
            d += diff * diff;
          }
          if (d < best) {
            best = d;
            best_id = gallery[gi].identity;
          }
        }
        if (best_id == probes[pi].identity) ++correct;
      }
      CHECK(m.at(pv, gv).percent ==
            doctest::Approx(100.0 * correct / total).epsilon(1e-12));
    }
}

TEST_CASE("rank1 cells are invariant to positive scaling of all embeddings") {
  Rng rng(4);
  const std::vector<int> views = {0, 90};
  std::vector<ProtocolEntry> gallery, probes;
  std::vector<Tensor> gal_emb, probe_emb;
  for (int id = 0; id < 4; ++id)
    for (int view : views) {
      gallery.push_back({0, "id" + std::to_string(id), view});
      gal_emb.push_back(rand_emb(5, rng));
      probes.push_back({0, "id" + std::to_string(id), view});
      probe_emb.push_back(rand_emb(5, rng));
    }
  ConditionMatrix base = rank1_matrix(gal_emb, gallery, probe_emb, probes, views);
  for (Tensor& t : gal_emb)
    for (std::size_t i = 0; i < t.size(); ++i) t[i] *= 3.7;
  for (Tensor& t : probe_emb)
    for (std::size_t i = 0; i < t.size(); ++i) t[i] *= 3.7;
  ConditionMatrix scaled = rank1_matrix(gal_emb, gallery, probe_emb, probes, views);
  for (std::size_t i = 0; i < base.cells.size(); ++i)
    CHECK(base.cells[i].percent == scaled.cells[i].percent);
}

TEST_CASE("rank1 is invariant to gallery order when distances are distinct") {
  Rng rng(5);
  const std::vector<int> views = {0, 90};
  std::vector<ProtocolEntry> gallery, probes;
  std::vector<Tensor> gal_emb, probe_emb;
  for (int id = 0; id < 3; ++id)
    for (int view : views) {
      gallery.push_back({0, "id" + std::to_string(id), view});
      gal_emb.push_back(rand_emb(4, rng));
    }
  for (int id = 0; id < 3; ++id) {
    probes.push_back({0, "id" + std::to_string(id), 0});
    probe_emb.push_back(rand_emb(4, rng));
  }
  ConditionMatrix base = rank1_matrix(gal_emb, gallery, probe_emb, probes, views);
  // reverse the gallery
  std::reverse(gallery.begin(), gallery.end());
  std::reverse(gal_emb.begin(), gal_emb.end());
  ConditionMatrix rev = rank1_matrix(gal_emb, gallery, probe_emb, probes, views);
  for (std::size_t i = 0; i < base.cells.size(); ++i)
    CHECK(base.cells[i].percent == rev.cells[i].percent);
}

TEST_CASE("aggregate means") {
  ConditionMatrix m;
  m.views = {0, 90, 180};
  m.cells.assign(9, EvalCell{});
  // all included off-diagonal cells at 100
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t g = 0; g < 3; ++g)
      if (p != g) {
        m.at(p, g).included = true;
        m.at(p, g).percent = 100.0;
      }
  ConditionMeans means = aggregate(m);
  CHECK(means.mean == 100.0);
  for (std::size_t p = 0; p < 3; ++p) CHECK(means.per_view[p] == 100.0);

  // single included cell per row equals that cell
  ConditionMatrix single;
  single.views = {0, 90};
  single.cells.assign(4, EvalCell{});
  single.at(0, 1).included = true;
  single.at(0, 1).percent = 62.5;
  ConditionMeans sm = aggregate(single);
  CHECK(sm.per_view[0] == 62.5);
  CHECK(!sm.view_present[1]);
  CHECK(sm.mean == 62.5);
}

TEST_CASE("aggregate matches a summation oracle on a random matrix") {
  Rng rng(6);
  ConditionMatrix m;
  m.views = {0, 45, 90};
  m.cells.assign(9, EvalCell{});
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t g = 0; g < 3; ++g)
      if (p != g) {
        m.at(p, g).included = true;
        m.at(p, g).percent = 100.0 * rng.uniform01();
        total += m.at(p, g).percent;
        ++count;
      }
  ConditionMeans means = aggregate(m);
  CHECK(means.mean == doctest::Approx(total / count).epsilon(1e-12));
  for (std::size_t p = 0; p < 3; ++p) {
    double row = 0.0;
    for (std::size_t g = 0; g < 3; ++g)
      if (p != g) row += m.at(p, g).percent;
    CHECK(means.per_view[p] == doctest::Approx(row / 2).epsilon(1e-12));
  }
}

TEST_CASE("embeddings are deterministic and frame-permutation invariant") {
  Rng rng(7);
  TrainConfig cfg = tiny_config();
  GaitCapsModel model(cfg.model_config(2), rng);

  GaitSequence seq = make_seq("001", "NM", 1, 0);
  seq.frames.clear();
  for (int f = 0; f < 4; ++f) {
    SilhouetteFrame frame;
    frame.mask.assign(kFrameSize * kFrameSize, 0);
    for (std::size_t i = 0; i < 200; ++i)
      frame.mask[rng.below(kFrameSize * kFrameSize)] = 1;
    seq.frames.push_back(frame);
  }

  Tensor a = embed_sequence(model, seq);
  Tensor b = embed_sequence(model, seq);
  CHECK(a.size() == model.feature_dim());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);

  GaitSequence permuted = seq;
  std::swap(permuted.frames[0], permuted.frames[3]);
  std::swap(permuted.frames[1], permuted.frames[2]);
  Tensor c = embed_sequence(model, permuted);
  CHECK(std::memcmp(a.data(), c.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("export_embeddings writes one row per sequence at 9 digits") {
  Rng rng(8);
  TrainConfig cfg = tiny_config();
  GaitCapsModel model(cfg.model_config(2), rng);

  DatasetIndex index;
  for (const std::string& id : {"001", "002"})
    for (int view : {0, 90}) index.sequences.push_back(make_seq(id, "NM", 1, view));
  finalize(index);

  const fs::path dir = fs::temp_directory_path() / "gaitcaps_export";
  fs::create_directories(dir);
  const std::string path = (dir / "emb.csv").string();
  export_embeddings(model, index, path);

  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  const std::size_t dim = model.feature_dim();
  std::string expect = "id,view,condition";
  for (std::size_t i = 0; i < dim; ++i) expect += ",e" + std::to_string(i);
  CHECK(header == expect);

  std::size_t rows = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == static_cast<long>(2 + dim));
    // reload the first embedding value and compare at printed precision
    std::istringstream ss(line);
    std::string id, view, cond, e0;
    std::getline(ss, id, ',');
    std::getline(ss, view, ',');
    std::getline(ss, cond, ',');
    std::getline(ss, e0, ',');
    const GaitSequence& seq = index.sequences[rows - 1];
    Tensor emb = embed_sequence(model, seq);
    CHECK(std::abs(std::stod(e0) - emb[0]) <= 1e-9 * std::max(1.0, std::abs(emb[0])));
  }
  CHECK(rows == 4);
}

TEST_CASE("report CSV has one matrix per condition with dashes on diagonals") {
  EvalReport report;
  ConditionMatrix m;
  m.views = {0, 90};
  m.cells.assign(4, EvalCell{});
  m.at(0, 1) = {true, 1, 2, 50.0};
  m.at(1, 0) = {true, 2, 2, 100.0};
  report.conditions["NM"] = m;

  const fs::path dir = fs::temp_directory_path() / "gaitcaps_report";
  fs::create_directories(dir);
  const std::string path = (dir / "r.csv").string();
  write_report_csv(report, path);

  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(text.find("condition,NM") != std::string::npos);
  CHECK(text.find("0,-,50.00") != std::string::npos);
  CHECK(text.find("90,100.00,-") != std::string::npos);
  CHECK(text.find("overall_mean,75.00") != std::string::npos);

  const std::string summary = report_summary_text(report);
  CHECK(summary.find("nm.mean=75.0") != std::string::npos);
  CHECK(summary.find("overall_mean=75.0") != std::string::npos);
}
