#include "tap/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "tap/errors.hpp"

namespace tap {

namespace {

constexpr std::array<char, 4> kMagic = {'T', 'A', 'P', 'T'};
constexpr std::uint32_t kMaxRank = 16;

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<unsigned char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw DataError("TAPT: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_tapt(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  std::array<unsigned char, 8> b{};
  for (double v : t.data()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b.data()), 8);
  }
  if (!out) throw DataError("TAPT: write failed");
}

Tensor read_tapt(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kMagic) throw DataError("TAPT: bad magic bytes");
  const std::uint32_t rank = get_u32(in);
  if (rank == 0 || rank > kMaxRank) throw DataError("TAPT: unsupported rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = get_u32(in);
    if (d == 0) throw DataError("TAPT: zero-sized dimension");
  }
  std::vector<double> values(numel(shape));
  std::array<unsigned char, 8> b{};
  for (double& v : values) {
    if (!in.read(reinterpret_cast<char*>(b.data()), 8)) throw DataError("TAPT: truncated payload");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    v = std::bit_cast<double>(bits);
  }
  return Tensor(std::move(shape), std::move(values));
}

void save_tapt(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_tapt(out, t);
}

Tensor load_tapt(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return read_tapt(in);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace tap
