#include "nervesynth/tensor/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "nervesynth/common/error.hpp"

namespace nervesynth {

namespace {

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0x00000000000000FFULL) << 56) | ((v & 0x000000000000FF00ULL) << 40) |
        ((v & 0x0000000000FF0000ULL) << 24) | ((v & 0x00000000FF000000ULL) << 8) |
        ((v & 0x000000FF00000000ULL) >> 8) | ((v & 0x0000FF0000000000ULL) >> 24) |
        ((v & 0x00FF000000000000ULL) >> 40) | ((v & 0xFF00000000000000ULL) >> 56);
  }
  return v;
}

}  // namespace

void write_raw(std::ostream& out, std::span<const double> values) {
  for (double v : values) {
    const std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(v));
    out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
  }
  if (!out) throw DataError("failed to write tensor payload");
}

std::vector<double> read_raw(std::istream& in, std::size_t count) {
  std::vector<double> values(count);
  for (auto& v : values) {
    std::uint64_t bits = 0;
    in.read(reinterpret_cast<char*>(&bits), sizeof(bits));
    if (!in) throw DataError("truncated tensor payload");
    v = std::bit_cast<double>(to_le(bits));
  }
  return values;
}

void write_tensor(std::ostream& out, const Tensor& t) {
  out << "shape=";
  const auto& s = t.shape();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out << ',';
    out << s[i];
  }
  out << '\n';
  write_raw(out, t.data());
}

Tensor read_tensor(std::istream& in) {
  std::string header;
  if (!std::getline(in, header) || header.rfind("shape=", 0) != 0) {
    throw DataError("tensor stream lacks a shape= header");
  }
  Shape shape;
  std::stringstream ss(header.substr(6));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const auto d = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      shape.push_back(static_cast<std::size_t>(d));
    } catch (const std::exception&) {
      throw DataError("malformed tensor extent '" + item + "'");
    }
  }
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), read_raw(in, n));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read_tensor(in);
}

std::uint64_t hash_values(std::span<const double> values, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (double v : values) {
    const std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(v));
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xFFu;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace nervesynth
