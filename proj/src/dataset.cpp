#include "gaitcaps/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>

namespace fs = std::filesystem;

namespace gaitcaps {

SilhouetteFrame preprocess_frame(const GrayImage& raw) {
  const std::size_t H = raw.height, W = raw.width;
  long rmin = -1, rmax = -1;
  double col_sum = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      if (raw.at(r, c) != 0) {
        if (rmin < 0) rmin = static_cast<long>(r);
        rmax = static_cast<long>(r);
        col_sum += static_cast<double>(c);
        ++count;
      }
  if (count == 0) throw std::runtime_error("blank silhouette");

  const long box_h = rmax - rmin + 1;
  // square window of side box_h, horizontally centered on the centroid column
  const double center = col_sum / static_cast<double>(count) + 0.5;
  const long col0 = std::llround(center - static_cast<double>(box_h) / 2.0);

  SilhouetteFrame out;
  out.mask.assign(kFrameSize * kFrameSize, 0);
  const double scale = static_cast<double>(box_h) / static_cast<double>(kFrameSize);
  std::size_t fg = 0;
  for (std::size_t r = 0; r < kFrameSize; ++r) {
    const long src_r = rmin + static_cast<long>((static_cast<double>(r) + 0.5) * scale);
    if (src_r < 0 || src_r >= static_cast<long>(H)) continue;
    for (std::size_t c = 0; c < kFrameSize; ++c) {
      const long src_c = col0 + static_cast<long>((static_cast<double>(c) + 0.5) * scale);
      if (src_c < 0 || src_c >= static_cast<long>(W)) continue;
      // source is binarized before sampling, so 0.5 thresholding is implicit
      if (raw.at(src_r, src_c) != 0) {
        out.mask[r * kFrameSize + c] = 1;
        ++fg;
      }
    }
  }
  if (fg == 0) throw std::runtime_error("blank silhouette after resize");
  return out;
}

int DatasetIndex::identity_class(const std::string& id) const {
  const auto it = std::lower_bound(identities.begin(), identities.end(), id);
  if (it == identities.end() || *it != id)
    throw std::invalid_argument("unknown identity: " + id);
  return static_cast<int>(it - identities.begin());
}

DatasetLayout layout_from_name(const std::string& name) {
  if (name == "casia-b") return DatasetLayout::kCasiaB;
  if (name == "ou-mvlp" || name == "ou-mvlp-like") return DatasetLayout::kOuMvlp;
  throw std::invalid_argument("unknown dataset layout: " + name);
}

namespace {

std::vector<std::string> sorted_subdirs(const fs::path& dir) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

std::vector<std::string> sorted_pngs(const fs::path& dir) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png")
      names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

DatasetIndex load_dataset(const std::string& root, DatasetLayout layout) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root not found: " + root);
  DatasetIndex index;
  std::set<std::string> ids;
  std::set<int> views;

  for (const std::string& subject : sorted_subdirs(root)) {
    const fs::path subject_dir = fs::path(root) / subject;
    for (const std::string& group : sorted_subdirs(subject_dir)) {
      std::string condition;
      int seq_index = 0;
      if (layout == DatasetLayout::kCasiaB) {
        const auto dash = group.find('-');
        if (dash == std::string::npos) {
          index.warnings.push_back("skipping unrecognized sequence dir: " + group);
          continue;
        }
        condition = upper(group.substr(0, dash));
        seq_index = std::stoi(group.substr(dash + 1));
      } else {
        condition = group;  // session index 00 / 01
        seq_index = std::stoi(group);
      }
      for (const std::string& view_name : sorted_subdirs(subject_dir / group)) {
        const fs::path view_dir = subject_dir / group / view_name;
        GaitSequence seq;
        seq.identity = subject;
        seq.condition = condition;
        seq.seq_index = seq_index;
        seq.view = std::stoi(view_name);
        bool corrupted = false;
        for (const std::string& frame_name : sorted_pngs(view_dir)) {
          const std::string path = (view_dir / frame_name).string();
          GrayImage raw;
          try {
            raw = read_png_gray(path);
          } catch (const std::exception& e) {
            // unreadable data disqualifies the whole sequence
            index.warnings.push_back("excluding sequence " + view_dir.string() +
                                     ", unreadable frame: " + e.what());
            corrupted = true;
            break;
          }
          try {
            seq.frames.push_back(preprocess_frame(raw));
          } catch (const std::exception& e) {
            index.warnings.push_back(std::string("skipping frame ") + path + ": " + e.what());
          }
        }
        if (corrupted) continue;
        if (seq.frames.empty()) {
          index.warnings.push_back("excluding sequence with no valid frames: " +
                                   view_dir.string());
          continue;
        }
        ids.insert(seq.identity);
        views.insert(seq.view);
        index.sequences.push_back(std::move(seq));
      }
    }
  }

  std::sort(index.sequences.begin(), index.sequences.end(),
            [](const GaitSequence& a, const GaitSequence& b) {
              return std::tie(a.identity, a.condition, a.seq_index, a.view) <
                     std::tie(b.identity, b.condition, b.seq_index, b.view);
            });
  index.identities.assign(ids.begin(), ids.end());
  index.views.assign(views.begin(), views.end());
  return index;
}

DatasetIndex filter_identities(const DatasetIndex& index, const std::vector<std::string>& keep) {
  std::set<std::string> keep_set(keep.begin(), keep.end());
  DatasetIndex out;
  std::set<int> views;
  for (const GaitSequence& seq : index.sequences)
    if (keep_set.count(seq.identity)) {
      out.sequences.push_back(seq);
      views.insert(seq.view);
    }
  for (const std::string& id : keep_set)
    out.identities.push_back(id);  // std::set iterates sorted
  out.views.assign(views.begin(), views.end());
  return out;
}

Tensor frames_to_tensor(const std::vector<SilhouetteFrame>& frames) {
  const std::size_t T = frames.size();
  Tensor t({T, 1, kFrameSize, kFrameSize});
  for (std::size_t f = 0; f < T; ++f)
    for (std::size_t i = 0; i < kFrameSize * kFrameSize; ++i)
      t[f * kFrameSize * kFrameSize + i] = frames[f].mask[i] ? 1.0 : 0.0;
  return t;
}

TrainingBatch sample_batch(const DatasetIndex& index, std::size_t p, std::size_t k,
                           std::size_t frames_per_sample, Rng& rng) {
  // group sequence positions by identity, keeping index order
  std::map<std::string, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < index.sequences.size(); ++i)
    by_id[index.sequences[i].identity].push_back(i);

  std::vector<std::string> eligible;
  for (const auto& [id, seqs] : by_id)
    if (seqs.size() >= k) eligible.push_back(id);
  if (eligible.size() < p)
    throw std::runtime_error("sample_batch: need " + std::to_string(p) + " identities with " +
                             std::to_string(k) + " sequences, have " +
                             std::to_string(eligible.size()));

  // choose p identities without replacement
  for (std::size_t i = 0; i + 1 < eligible.size(); ++i) {
    const std::size_t j = i + rng.below(eligible.size() - i);
    std::swap(eligible[i], eligible[j]);
  }
  eligible.resize(p);

  TrainingBatch batch;
  for (const std::string& id : eligible) {
    std::vector<std::size_t> seqs = by_id[id];
    for (std::size_t i = 0; i + 1 < seqs.size(); ++i) {
      const std::size_t j = i + rng.below(seqs.size() - i);
      std::swap(seqs[i], seqs[j]);
    }
    for (std::size_t s = 0; s < k; ++s) {
      const GaitSequence& seq = index.sequences[seqs[s]];
      const std::size_t T = seq.frames.size();
      std::vector<SilhouetteFrame> sample;
      if (T >= frames_per_sample) {
        const std::size_t start = rng.below(T - frames_per_sample + 1);
        sample.assign(seq.frames.begin() + start,
                      seq.frames.begin() + start + frames_per_sample);
      } else {
        for (std::size_t i = 0; i < frames_per_sample; ++i)
          sample.push_back(seq.frames[rng.below(T)]);
      }
      batch.frames.push_back(frames_to_tensor(sample));
      batch.labels.push_back(index.identity_class(id));
    }
  }
  return batch;
}

}  // namespace gaitcaps
