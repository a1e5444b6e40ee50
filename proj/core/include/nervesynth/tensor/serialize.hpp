#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "nervesynth/tensor/tensor.hpp"

namespace nervesynth {

// Wire format: one text line `shape=d0,d1,...\n` (empty list for scalars)
// followed by numel little-endian IEEE-754 float64 values.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// Raw little-endian float64 payload without a header, used for the
// concatenated buffers of adapter and model checkpoints.
void write_raw(std::ostream& out, std::span<const double> values);
std::vector<double> read_raw(std::istream& in, std::size_t count);

// FNV-1a over the little-endian bytes of every value; stable across runs.
std::uint64_t hash_values(std::span<const double> values, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace nervesynth
