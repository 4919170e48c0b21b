#pragma once

// GSQT tensor files: magic "GSQT", u8 version, u8 dtype (0 = fp32, 1 = fp64),
// u8 rank, u64 dims[rank], then the row-major little-endian payload.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "gsq/matrix.hpp"

namespace gsq {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> values;

  std::uint64_t element_count() const noexcept;
};

inline constexpr std::uint8_t kTensorFileVersion = 1;

std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

Tensor load_tensor(const std::filesystem::path& path);
void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype);

/// Views a rank-2 tensor as a matrix; throws ShapeError otherwise.
Matrix tensor_to_matrix(const Tensor& t);
Tensor matrix_to_tensor(const Matrix& m);

}  // namespace gsq
