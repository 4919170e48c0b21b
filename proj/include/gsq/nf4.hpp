#pragma once

// 4-bit NormalFloat storage for frozen base weights, with double-quantized
// block scales.
//
// Each block of `block_size` weights stores 4-bit indices into a fixed
// 16-entry codebook plus an 8-bit scale code. Scale codes are relative to a
// second-level FP32 scale shared by up to 256 consecutive blocks:
//
//   scale(block) = scale_of_scales * absmax_code / 255
//
// The absmax code is the smallest one whose scale covers the block's absmax,
// so every element lands inside the codebook's [-1, 1] range.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "gsq/error.hpp"

namespace gsq {

inline constexpr std::size_t kNf4DefaultBlock = 64;
inline constexpr std::size_t kNf4BlocksPerScale = 256;

/// Normalized standard-normal quantiles, ascending; index 7 is exactly 0.
/// Generated by tools/gen_nf4_codebook.py.
const std::array<double, 16>& nf4_codebook() noexcept;
inline constexpr std::uint8_t kNf4ZeroCode = 7;

/// Index of the nearest codebook value (ties go to the lower index).
std::uint8_t nf4_nearest_code(double normalized) noexcept;

struct Nf4Block {
  std::vector<std::uint8_t> codes;
  std::uint8_t absmax_code = 0;
  float scale_of_scales = 1.0f;

  double scale() const noexcept { return double(scale_of_scales) * (absmax_code / 255.0); }
  bool operator==(const Nf4Block&) const = default;
};

struct Nf4Tensor {
  std::vector<Nf4Block> blocks;
  std::size_t length = 0;      ///< logical element count (without padding)
  std::size_t block_size = kNf4DefaultBlock;
  std::size_t padding = 0;     ///< zeros appended to fill the last block

  bool operator==(const Nf4Tensor&) const = default;
};

class CorruptDataError : public Error {
 public:
  using Error::Error;
};

/// Quantizes w into NF4 blocks. Zero-pads the tail to a whole block.
///
/// quantize(dequantize(q)) == q holds whenever every block's absmax is at
/// least 1/40 of the largest absmax among the 256 blocks sharing its
/// second-level scale (the block maximum then always snaps to ±1).
Nf4Tensor nf4_quantize(std::span<const double> w, std::size_t block_size = kNf4DefaultBlock);

/// Every element of every block, padding included. Throws CorruptDataError
/// on a code index >= 16.
std::vector<double> nf4_dequantize(std::span<const Nf4Block> blocks);

/// The logical tensor (padding stripped).
std::vector<double> nf4_dequantize(const Nf4Tensor& t);

}  // namespace gsq
