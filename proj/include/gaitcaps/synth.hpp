#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gaitcaps/png_io.hpp"

namespace gaitcaps {

/// Deterministic procedural walker dataset written in the casia-b layout:
/// out/<subject>/<condition>-<seq>/<view>/<frame>.png.
struct SynthConfig {
  std::size_t n_identities = 8;
  std::vector<int> views = {0, 90};
  // condition name (nm/bg/cl) and sequence count per (identity, view)
  std::vector<std::pair<std::string, std::size_t>> conditions = {{"nm", 4}, {"bg", 2}, {"cl", 2}};
  std::size_t frames_per_seq = 24;
  std::uint64_t seed = 42;
};

struct SynthSummary {
  std::size_t sequences = 0;
  std::size_t frames = 0;
};

SynthSummary synth_dataset(const SynthConfig& cfg, const std::string& out_root);

/// One rendered frame, exposed for tests: identity geometry and gait phase
/// are derived from the config seed only.
GrayImage synth_render_frame(const SynthConfig& cfg, std::size_t identity, const std::string& condition,
                             std::size_t seq, int view, std::size_t frame);

}  // namespace gaitcaps
