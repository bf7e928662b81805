#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gaitcaps/png_io.hpp"
#include "gaitcaps/rng.hpp"
#include "gaitcaps/tensor.hpp"

namespace gaitcaps {

inline constexpr std::size_t kFrameSize = 64;

/// A preprocessed binary silhouette: 64x64, 0 = background, 1 = foreground,
/// at least one foreground pixel.
struct SilhouetteFrame {
  std::vector<std::uint8_t> mask;  // kFrameSize * kFrameSize

  std::uint8_t at(std::size_t r, std::size_t c) const { return mask[r * kFrameSize + c]; }
};

/// Tight vertical crop, horizontal centering on the foreground centroid
/// column with zero padding to a square, nearest-neighbor resize to 64x64
/// and re-binarization at 0.5. Throws on a blank frame.
SilhouetteFrame preprocess_frame(const GrayImage& raw);

struct GaitSequence {
  std::string identity;
  std::string condition;  // NM / BG / CL, or the session index for OU-MVLP
  int seq_index = 0;
  int view = 0;  // degrees
  std::vector<SilhouetteFrame> frames;
};

struct DatasetIndex {
  std::vector<GaitSequence> sequences;  // sorted by (identity, condition, seq, view)
  std::vector<std::string> identities;  // sorted roster
  std::vector<int> views;               // sorted roster
  std::vector<std::string> warnings;    // skipped frames / sequences

  int identity_class(const std::string& id) const;
};

enum class DatasetLayout { kCasiaB, kOuMvlp };

DatasetLayout layout_from_name(const std::string& name);

/// Scans root/<subject>/<condition>-<seq>/<view>/*.png (casia-b) or
/// root/<subject>/<session>/<view>/*.png (ou-mvlp-like). Unreadable or blank
/// frames are skipped with a warning; sequences with no valid frame are
/// dropped.
DatasetIndex load_dataset(const std::string& root, DatasetLayout layout);

/// Keeps only the identities for which `keep` returns true.
DatasetIndex filter_identities(const DatasetIndex& index,
                               const std::vector<std::string>& keep);

/// Frames of one sequence as a [T,1,64,64] tensor of 0/1 values.
Tensor frames_to_tensor(const std::vector<SilhouetteFrame>& frames);

struct TrainingBatch {
  std::vector<Tensor> frames;  // per sample [T,1,64,64]
  std::vector<int> labels;     // class = position in the identity roster
};

/// p identities x k sequences each; every sample carries frames_per_sample
/// frames (contiguous window, or drawn with replacement when the sequence is
/// shorter). Throws when p identities with k sequences are not available.
TrainingBatch sample_batch(const DatasetIndex& index, std::size_t p, std::size_t k,
                           std::size_t frames_per_sample, Rng& rng);

}  // namespace gaitcaps
