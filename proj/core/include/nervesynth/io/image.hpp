#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace nervesynth::io {

// 8-bit grayscale image held as floats in [0, 1], row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;
};

// Value v maps to round(clamp(v, 0, 1) * 255).
std::vector<unsigned char> quantize(std::span<const double> values);

// Format chosen by extension: .png or .pgm (binary P5).
void write_image(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_image(const std::filesystem::path& path);

}  // namespace nervesynth::io
