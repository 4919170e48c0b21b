#pragma once

// Group-shared exponent integer (GSE) kernels.
//
// A group of N reals becomes one shared exponent e and N signed integer
// mantissas m_i with |m_i| <= 2^M - 1. Element i represents m_i * 2^e.
//
// The exponent is chosen so the group's largest magnitude lands in
// [2^(M-1), 2^M): with e_max = floor(log2 max|x|), e = e_max - (M - 1),
// clamped to the 5-bit range [-bias, 31 - bias]. The stored (biased)
// exponent is e + bias.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "gsq/formats.hpp"
#include "gsq/matrix.hpp"

namespace gsq {

struct GseGroup {
  GseSpec spec;
  int exponent = 0;            ///< unbiased; the group's unit is 2^exponent
  std::vector<int> mantissas;  ///< signed, |m| <= spec.max_mantissa()
  bool saturated = false;      ///< exponent overflowed its 5-bit field
  bool carry_clamped = false;  ///< a rounding carry hit 2^M and was clamped

  int biased_exponent() const noexcept { return exponent + spec.exponent_bias; }
  bool operator==(const GseGroup&) const = default;
};

/// Quantizes exactly spec.group_size values. An all-zero group gets the
/// minimum exponent and zero mantissas. Values too large for the exponent
/// field saturate at ±(2^M - 1) with `saturated` set.
GseGroup gse_quantize_group(std::span<const double> values, const GseSpec& spec);

/// Exact: element i = m_i * 2^e.
std::vector<double> gse_dequantize_group(const GseGroup& g);

/// Within-group integer sums are held in int64_t. Worst case per group is
/// N * (2^M - 1)^2, i.e. 2M + ceil(log2 N) magnitude bits plus sign.
int required_accumulator_bits(const GseSpec& spec) noexcept;
using GroupAccumulator = std::int64_t;

/// Dot product of two aligned group sequences: exact integer multiply-
/// accumulate inside each group, then sum_g 2^(e_a + e_b) * S_g in FP64 in
/// ascending group order. Operands may differ in mantissa width but must
/// share the group size (ShapeError otherwise).
double gse_dot(std::span<const GseGroup> a, std::span<const GseGroup> b);

/// Which direction groups run in a matrix.
enum class GroupAxis : std::uint8_t {
  kAlongRows = 0,  ///< each row is cut into groups (reduction over columns)
  kAlongCols = 1,  ///< each column is cut into groups (reduction over rows)
};

/// A matrix stored as GSE groups along its reduction dimension K. Each
/// "line" (a row for kAlongRows, a column for kAlongCols) is zero-padded to
/// ceil(K / N) * N elements; padding mantissas are always zero.
class GseTensor {
 public:
  GseTensor() = default;

  /// Takes ownership of raw storage. mantissas is line-major with
  /// lines * padded_len entries, exponents holds lines * groups_per_line
  /// unbiased exponents. Validates sizes, ranges and zero padding.
  GseTensor(std::size_t rows, std::size_t cols, GroupAxis axis, GseSpec spec,
            std::vector<std::int8_t> mantissas, std::vector<std::int8_t> exponents);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  GroupAxis axis() const noexcept { return axis_; }
  const GseSpec& spec() const noexcept { return spec_; }

  std::size_t lines() const noexcept { return axis_ == GroupAxis::kAlongRows ? rows_ : cols_; }
  std::size_t reduction_len() const noexcept {
    return axis_ == GroupAxis::kAlongRows ? cols_ : rows_;
  }
  std::size_t groups_per_line() const noexcept {
    return (reduction_len() + spec_.group_size - 1) / spec_.group_size;
  }
  std::size_t padded_len() const noexcept { return groups_per_line() * spec_.group_size; }
  std::size_t pad_len() const noexcept { return padded_len() - reduction_len(); }
  std::size_t group_count() const noexcept { return lines() * groups_per_line(); }

  std::span<const std::int8_t> line_mantissas(std::size_t line) const noexcept {
    return {mantissas_.data() + line * padded_len(), padded_len()};
  }
  std::span<const std::int8_t> line_exponents(std::size_t line) const noexcept {
    return {exponents_.data() + line * groups_per_line(), groups_per_line()};
  }
  std::span<const std::int8_t> mantissas() const noexcept { return mantissas_; }
  std::span<const std::int8_t> exponents() const noexcept { return exponents_; }

  GseGroup group(std::size_t line, std::size_t g) const;
  std::vector<GseGroup> line_groups(std::size_t line) const;

  std::size_t saturated_groups() const noexcept { return saturated_groups_; }
  std::size_t carry_clamped_groups() const noexcept { return carry_clamped_groups_; }

  bool operator==(const GseTensor& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && axis_ == o.axis_ && spec_ == o.spec_ &&
           mantissas_ == o.mantissas_ && exponents_ == o.exponents_;
  }

 private:
  friend GseTensor quantize_matrix(const Matrix&, GroupAxis, const GseSpec&);

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  GroupAxis axis_ = GroupAxis::kAlongRows;
  GseSpec spec_;
  std::vector<std::int8_t> mantissas_;
  std::vector<std::int8_t> exponents_;
  std::size_t saturated_groups_ = 0;
  std::size_t carry_clamped_groups_ = 0;
};

/// Cuts every line along `axis` into groups of spec.group_size and
/// quantizes each with gse_quantize_group. Throws NonFiniteError.
GseTensor quantize_matrix(const Matrix& m, GroupAxis axis, const GseSpec& spec);

/// Exact reconstruction of the represented matrix (padding dropped).
Matrix dequantize_matrix(const GseTensor& t);

struct GemmOptions {
  unsigned workers = 1;  ///< output rows are split across this many threads
};

/// x (B x K, grouped along rows) times wt (K x O, grouped along columns).
/// Every output element is gse_dot of the matching row/column groups; the
/// per-element summation order is fixed, so results do not depend on
/// `workers`.
Matrix gse_gemm(const GseTensor& x, const GseTensor& wt, const GemmOptions& opts = {});

/// Full-precision oracle: plain FP64 product.
Matrix reference_gemm(const Matrix& a, const Matrix& b);

}  // namespace gsq
