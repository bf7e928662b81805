#include "gaitcaps/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "gaitcaps/rng.hpp"

namespace fs = std::filesystem;

namespace gaitcaps {

namespace {

constexpr std::size_t kCanvas = 128;
constexpr double kPi = 3.14159265358979323846;

struct WalkerShape {
  double leg_len, torso_len, torso_hw, shoulder_hw, head_r, neck_len;
  double arm_len, limb_w, stride_amp, stride_freq, arm_amp, knee_gain;
};

WalkerShape identity_shape(Rng rng) {
  WalkerShape w;
  w.leg_len = rng.uniform(36.0, 46.0);
  w.torso_len = rng.uniform(26.0, 34.0);
  w.torso_hw = rng.uniform(5.0, 9.0);
  w.shoulder_hw = w.torso_hw + rng.uniform(0.0, 2.5);
  w.head_r = rng.uniform(5.0, 8.0);
  w.neck_len = rng.uniform(2.0, 5.0);
  w.arm_len = rng.uniform(24.0, 32.0);
  w.limb_w = rng.uniform(1.8, 3.2);
  w.stride_amp = rng.uniform(0.35, 0.65);
  w.stride_freq = rng.uniform(0.05, 0.085);
  w.arm_amp = w.stride_amp * rng.uniform(0.5, 0.9);
  w.knee_gain = rng.uniform(1.2, 1.5);
  return w;
}

struct Mask {
  std::vector<std::uint8_t> px;
  Mask() : px(kCanvas * kCanvas, 0) {}
  void set(long x, long y) {
    if (x >= 0 && x < static_cast<long>(kCanvas) && y >= 0 && y < static_cast<long>(kCanvas))
      px[static_cast<std::size_t>(y) * kCanvas + static_cast<std::size_t>(x)] = 1;
  }
};

void fill_capsule(Mask& m, double x0, double y0, double x1, double y1, double radius) {
  const long xa = static_cast<long>(std::floor(std::min(x0, x1) - radius - 1));
  const long xb = static_cast<long>(std::ceil(std::max(x0, x1) + radius + 1));
  const long ya = static_cast<long>(std::floor(std::min(y0, y1) - radius - 1));
  const long yb = static_cast<long>(std::ceil(std::max(y0, y1) + radius + 1));
  const double dx = x1 - x0, dy = y1 - y0;
  const double len2 = dx * dx + dy * dy;
  for (long y = ya; y <= yb; ++y)
    for (long x = xa; x <= xb; ++x) {
      const double px = static_cast<double>(x) - x0, py = static_cast<double>(y) - y0;
      double t = len2 > 0.0 ? (px * dx + py * dy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double ex = px - t * dx, ey = py - t * dy;
      if (ex * ex + ey * ey <= radius * radius) m.set(x, y);
    }
}

void fill_ellipse(Mask& m, double cx, double cy, double rx, double ry) {
  for (long y = static_cast<long>(std::floor(cy - ry)); y <= static_cast<long>(std::ceil(cy + ry)); ++y)
    for (long x = static_cast<long>(std::floor(cx - rx)); x <= static_cast<long>(std::ceil(cx + rx)); ++x) {
      const double ex = (static_cast<double>(x) - cx) / rx, ey = (static_cast<double>(y) - cy) / ry;
      if (ex * ex + ey * ey <= 1.0) m.set(x, y);
    }
}

void fill_rect(Mask& m, double x0, double x1, double y0, double y1) {
  for (long y = static_cast<long>(std::ceil(y0)); y <= static_cast<long>(std::floor(y1)); ++y)
    for (long x = static_cast<long>(std::ceil(x0)); x <= static_cast<long>(std::floor(x1)); ++x)
      m.set(x, y);
}

/// Canonical side view (the 90-degree view) of one frame.
Mask render_canonical(const WalkerShape& w, const std::string& condition, double phase) {
  Mask m;
  const double cx = kCanvas / 2.0;
  const double ground = 120.0;
  const double hip_y = ground - w.leg_len;
  const bool coat = condition == "CL";
  const double torso_hw = w.torso_hw + (coat ? 3.0 : 0.0);
  const double torso_bottom = coat ? hip_y + 0.3 * w.leg_len : hip_y;
  const double shoulder_y = hip_y - w.torso_len;

  // legs: thigh plus shin per side, swinging in anti-phase
  for (int side = 0; side < 2; ++side) {
    const double a = w.stride_amp * std::sin(phase + (side ? kPi : 0.0));
    const double thigh = 0.55 * w.leg_len, shin = 0.5 * w.leg_len;
    const double kx = cx + thigh * std::sin(a), ky = hip_y + thigh * std::cos(a);
    const double sa = a * w.knee_gain;
    const double ax = kx + shin * std::sin(sa), ay = ky + shin * std::cos(sa);
    fill_capsule(m, cx, hip_y, kx, ky, w.limb_w);
    fill_capsule(m, kx, ky, ax, ay, w.limb_w);
  }
  // arms swing opposite to the near leg
  for (int side = 0; side < 2; ++side) {
    const double a = w.arm_amp * std::sin(phase + (side ? 0.0 : kPi));
    const double hx = cx + w.arm_len * std::sin(a), hy = shoulder_y + 2.0 + w.arm_len * std::cos(a);
    fill_capsule(m, cx, shoulder_y + 2.0, hx, hy, w.limb_w * 0.8);
  }
  fill_rect(m, cx - torso_hw, cx + torso_hw, shoulder_y, torso_bottom);
  fill_capsule(m, cx - w.shoulder_hw + 1.0, shoulder_y + 1.5, cx + w.shoulder_hw - 1.0,
               shoulder_y + 1.5, 2.5);
  fill_ellipse(m, cx, shoulder_y - w.neck_len - w.head_r, w.head_r, w.head_r * 1.1);

  if (condition == "BG") {
    // rigid blob on the back at hip height
    fill_ellipse(m, cx - torso_hw - 4.5, hip_y - 5.0, 5.0, 8.0);
  }
  return m;
}

/// Views other than the side view are a horizontal shear plus width scaling.
GrayImage apply_view(const Mask& canonical, int view_deg) {
  const double theta = static_cast<double>(view_deg) * kPi / 180.0;
  const double scale = 0.45 + 0.55 * std::abs(std::sin(theta));
  const double shear = 0.35 * std::cos(theta);
  const double cx = kCanvas / 2.0, cy = kCanvas / 2.0;

  GrayImage img;
  img.height = img.width = kCanvas;
  img.pixels.assign(kCanvas * kCanvas, 0);
  for (std::size_t y = 0; y < kCanvas; ++y)
    for (std::size_t x = 0; x < kCanvas; ++x) {
      const double xo = static_cast<double>(x) - cx, yo = static_cast<double>(y) - cy;
      const double xc = (xo - shear * yo) / scale + cx;
      const long sx = std::lround(xc);
      if (sx < 0 || sx >= static_cast<long>(kCanvas)) continue;
      if (canonical.px[y * kCanvas + static_cast<std::size_t>(sx)])
        img.pixels[y * kCanvas + x] = 255;
    }
  return img;
}

Rng seq_rng(const SynthConfig& cfg, std::size_t identity, const std::string& condition,
            std::size_t seq) {
  std::uint64_t salt = 0x53455145ULL;  // sequence stream tag
  for (char c : condition) salt = splitmix64(salt ^ static_cast<std::uint64_t>(c));
  salt = splitmix64(salt ^ identity * 1000003ULL) ^ splitmix64(seq + 17);
  return Rng(cfg.seed).fork(salt);
}

}  // namespace

GrayImage synth_render_frame(const SynthConfig& cfg, std::size_t identity,
                             const std::string& condition, std::size_t seq, int view,
                             std::size_t frame) {
  const WalkerShape shape = identity_shape(Rng(cfg.seed).fork(0x4944ULL ^ identity * 7919ULL));
  std::string cond_uc = condition;
  for (char& c : cond_uc) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  Rng rng = seq_rng(cfg, identity, cond_uc, seq);
  const double phase0 = rng.uniform(0.0, 2.0 * kPi);
  const double phase = phase0 + 2.0 * kPi * shape.stride_freq * static_cast<double>(frame);
  return apply_view(render_canonical(shape, cond_uc, phase), view);
}

SynthSummary synth_dataset(const SynthConfig& cfg, const std::string& out_root) {
  if (cfg.n_identities < 2) throw std::invalid_argument("synth_dataset: need >= 2 identities");
  if (cfg.views.size() < 2) throw std::invalid_argument("synth_dataset: need >= 2 views");
  if (cfg.frames_per_seq < 1 || cfg.conditions.empty())
    throw std::invalid_argument("synth_dataset: empty conditions or frames");

  SynthSummary summary;
  char buf[64];
  for (std::size_t id = 0; id < cfg.n_identities; ++id) {
    const WalkerShape shape = identity_shape(Rng(cfg.seed).fork(0x4944ULL ^ id * 7919ULL));
    std::snprintf(buf, sizeof(buf), "%03zu", id + 1);
    const std::string subject = buf;
    for (const auto& [cond, count] : cfg.conditions) {
      std::string cond_uc = cond;
      for (char& c : cond_uc) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      for (std::size_t seq = 1; seq <= count; ++seq) {
        Rng rng = seq_rng(cfg, id, cond_uc, seq);
        const double phase0 = rng.uniform(0.0, 2.0 * kPi);
        std::snprintf(buf, sizeof(buf), "%s-%02zu", cond.c_str(), seq);
        const std::string seq_dir = buf;
        // the canonical render is shared by all views of a frame
        std::vector<Mask> canonical;
        canonical.reserve(cfg.frames_per_seq);
        for (std::size_t f = 0; f < cfg.frames_per_seq; ++f) {
          const double phase =
              phase0 + 2.0 * kPi * shape.stride_freq * static_cast<double>(f);
          canonical.push_back(render_canonical(shape, cond_uc, phase));
        }
        for (int view : cfg.views) {
          std::snprintf(buf, sizeof(buf), "%03d", view);
          const fs::path dir = fs::path(out_root) / subject / seq_dir / buf;
          fs::create_directories(dir);
          for (std::size_t f = 0; f < cfg.frames_per_seq; ++f) {
            std::snprintf(buf, sizeof(buf), "%04zu.png", f + 1);
            write_png_gray((dir / buf).string(), apply_view(canonical[f], view));
            ++summary.frames;
          }
          ++summary.sequences;
        }
      }
    }
  }
  return summary;
}

}  // namespace gaitcaps
