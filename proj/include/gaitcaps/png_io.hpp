#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gaitcaps {

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  std::uint8_t at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
  std::uint8_t& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
};

/// Decodes any PNG to 8-bit grayscale. Throws std::runtime_error on
/// unreadable or corrupted files.
GrayImage read_png_gray(const std::string& path);

void write_png_gray(const std::string& path, const GrayImage& img);

}  // namespace gaitcaps
