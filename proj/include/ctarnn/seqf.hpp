#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ctarnn/tensor.hpp"

namespace ctarnn {

// Host-side float array as stored on disk and held by the dataset.
struct FloatArray {
  Shape shape;
  std::vector<float> data;

  std::size_t numel() const { return data.size(); }
  Tensor to_tensor(DType dtype = DType::f32) const;
  static FloatArray from_tensor(const Tensor& t);
};

// SEQF layout, all little-endian:
//   "SEQF" | u32 version=1 | u32 ndim | ndim x u32 extents | f32 payload (row-major)
inline constexpr std::uint32_t kSeqfVersion = 1;

std::vector<std::uint8_t> encode_seqf(const FloatArray& array);
FloatArray decode_seqf(std::span<const std::uint8_t> bytes);

void write_seqf(const std::filesystem::path& path, const FloatArray& array);
FloatArray read_seqf(const std::filesystem::path& path);
// Validates the header and payload length without keeping the payload.
Shape inspect_seqf(const std::filesystem::path& path);

}  // namespace ctarnn
