#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "tap/tensor.hpp"

namespace tap {

// TAPT layout: the 4 magic bytes "TAPT", a u32 little-endian rank, `rank`
// u32 LE dimension sizes, then the values as row-major IEEE-754 binary64 LE.
void write_tapt(std::ostream& out, const Tensor& t);
Tensor read_tapt(std::istream& in);

void save_tapt(const std::filesystem::path& path, const Tensor& t);
Tensor load_tapt(const std::filesystem::path& path);

}  // namespace tap
