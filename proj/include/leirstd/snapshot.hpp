#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "leirstd/tensor.hpp"

namespace leirstd {

// Tensor snapshot layout (little-endian):
//   "LET4" | u32 version = 1 | u64 n, c, h, w | n*c*h*w float32 values
inline constexpr char kSnapshotMagic[4] = {'L', 'E', 'T', '4'};
inline constexpr std::uint32_t kSnapshotVersion = 1;
inline constexpr std::size_t kSnapshotHeaderBytes = 4 + 4 + 4 * 8;

std::vector<std::uint8_t> encode_snapshot(const Shape& shape, const std::vector<double>& values);
void write_snapshot(std::ostream& out, const Shape& shape, const std::vector<double>& values);
void write_snapshot(const std::filesystem::path& path, const Tensor& tensor);

/// Reads one snapshot from the current stream position.
Tensor read_snapshot(std::istream& in);
Tensor read_snapshot(const std::filesystem::path& path);

}  // namespace leirstd
