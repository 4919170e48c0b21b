#pragma once

// Bit-exact GSE wire encoding.
//
// A packed group starts on a byte boundary and is written LSB-first:
//   bits [0, 5)                  biased shared exponent
//   then N fields of (M+1) bits  magnitude in the low M bits, sign on top
// for exactly N(M+1) + 5 payload bits; the final byte is zero-filled.
//
// GSEB file:
//   "GSEB" | u8 version | u8 total_bits | u8 exponent_bias | u8 axis |
//   u32 group_size | u64 rows | u64 cols | u32 pad_len | packed groups
// with groups in line-major order (line = row for along-rows tensors,
// column for along-cols tensors).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "gsq/gse.hpp"

namespace gsq {

inline constexpr std::uint8_t kGsebVersion = 1;

std::size_t packed_group_bytes(const GseSpec& spec) noexcept;

/// Appends one packed group to `out`; returns the number of payload bits
/// written (always spec.group_storage_bits()).
std::size_t pack_group(const GseGroup& g, std::vector<std::uint8_t>& out);

/// Decodes one group from exactly packed_group_bytes(spec) bytes. Rejects
/// negative zero and nonzero fill bits. `base_offset` is used in errors.
GseGroup unpack_group(std::span<const std::uint8_t> bytes, const GseSpec& spec,
                      std::size_t base_offset = 0);

std::vector<std::uint8_t> encode_gseb(const GseTensor& t);
GseTensor decode_gseb(std::span<const std::uint8_t> bytes);

void save_gseb(const std::filesystem::path& path, const GseTensor& t);
GseTensor load_gseb(const std::filesystem::path& path);

}  // namespace gsq
