#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gsq {

// ---------------------------------------------------------------------------
// Low-bit floating point emulation
// ---------------------------------------------------------------------------

/// How a format spends its top exponent code.
enum class SpecialValues {
  kIeee,       ///< top exponent reserved for inf/NaN (E5M2)
  kFiniteNan,  ///< only the all-ones code is NaN, no infinities (E4M3 "FN")
  kNone,       ///< every code is a finite number (FP6/FP7 style)
};

/// Descriptor of an emulated sign/exponent/mantissa float with subnormals.
struct FpFormat {
  int exponent_bits = 4;
  int mantissa_bits = 3;
  int bias = 7;
  bool saturating = true;
  SpecialValues specials = SpecialValues::kFiniteNan;

  /// Builds a format with the default bias 2^(E-1)-1. Throws ConfigError for
  /// E outside [2, 8] or M outside [1, 10].
  static FpFormat make(int exponent_bits, int mantissa_bits, SpecialValues specials,
                       bool saturating = true);

  int total_bits() const noexcept { return 1 + exponent_bits + mantissa_bits; }
  double max_finite() const noexcept;
  double min_subnormal() const noexcept;
  std::string name() const;  // e.g. "E4M3"
};

FpFormat fp8_e4m3();
FpFormat fp8_e5m2();
FpFormat fp7_e3m3();
FpFormat fp6_e3m2();

/// Snaps v to the nearest value on fmt's grid (ties to even). Saturates to
/// ±max_finite when fmt.saturating, otherwise throws OverflowError. NaN or
/// infinite input throws NonFiniteError.
double fp_encode(double v, const FpFormat& fmt);

/// Decodes a raw bit pattern; nullopt for codes that are NaN or infinity.
std::optional<double> fp_decode(std::uint32_t code, const FpFormat& fmt);

// ---------------------------------------------------------------------------
// Uniform (integer) quantization
// ---------------------------------------------------------------------------

struct UniformQuantParams {
  double scale = 1.0;
  int zero_point = 0;
  int bits = 8;
  int q_min = 0;
  int q_max = 255;
};

struct UniformQuantized {
  std::vector<int> codes;
  UniformQuantParams params;
};

/// codes = clamp(round(x / s) + z, 0, 2^b - 1) with s = max|x| / (2^(b-1) - 1)
/// and z = 2^(b-1). An all-zero input yields s = 1 and every code equal to z.
UniformQuantized uniform_quantize(std::span<const double> x, int bits);
std::vector<double> uniform_dequantize(const UniformQuantized& q);

// ---------------------------------------------------------------------------
// Group-shared exponent integer format descriptor
// ---------------------------------------------------------------------------

/// GSE-INT-b: groups of N values share one 5-bit exponent; each value keeps
/// a sign bit and an (b-1)-bit integer mantissa.
struct GseSpec {
  static constexpr int kExponentBits = 5;

  int total_bits = 8;
  std::size_t group_size = 32;
  int exponent_bias = 15;

  /// Validated constructor: bits in [5, 8], N in [1, 65536], bias in [0, 31].
  static GseSpec make(int total_bits, std::size_t group_size = 32, int exponent_bias = 15);
  void validate() const;

  int mantissa_bits() const noexcept { return total_bits - 1; }
  int max_mantissa() const noexcept { return (1 << mantissa_bits()) - 1; }
  int min_exponent() const noexcept { return -exponent_bias; }
  int max_exponent() const noexcept { return (1 << kExponentBits) - 1 - exponent_bias; }

  /// N(M+1) + 5: payload bits of one packed group.
  std::size_t group_storage_bits() const noexcept {
    return group_size * static_cast<std::size_t>(mantissa_bits() + 1) + kExponentBits;
  }

  bool operator==(const GseSpec&) const = default;
};

}  // namespace gsq
