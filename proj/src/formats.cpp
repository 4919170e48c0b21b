#include "gsq/formats.hpp"

#include <algorithm>
#include <cmath>

#include "gsq/error.hpp"
#include "gsq/rounding.hpp"

namespace gsq {

FpFormat FpFormat::make(int exponent_bits, int mantissa_bits, SpecialValues specials,
                        bool saturating) {
  if (exponent_bits < 2 || exponent_bits > 8)
    throw ConfigError("FpFormat: exponent bits must be in [2, 8]");
  if (mantissa_bits < 1 || mantissa_bits > 10)
    throw ConfigError("FpFormat: mantissa bits must be in [1, 10]");
  return FpFormat{exponent_bits, mantissa_bits, (1 << (exponent_bits - 1)) - 1, saturating,
                  specials};
}

double FpFormat::max_finite() const noexcept {
  const int top = (1 << exponent_bits) - 1;
  switch (specials) {
    case SpecialValues::kIeee:
      return std::ldexp(2.0 - std::ldexp(1.0, -mantissa_bits), top - 1 - bias);
    case SpecialValues::kFiniteNan:
      return std::ldexp(2.0 - std::ldexp(1.0, 1 - mantissa_bits), top - bias);
    case SpecialValues::kNone:
      break;
  }
  return std::ldexp(2.0 - std::ldexp(1.0, -mantissa_bits), top - bias);
}

double FpFormat::min_subnormal() const noexcept { return std::ldexp(1.0, 1 - bias - mantissa_bits); }

std::string FpFormat::name() const {
  return "E" + std::to_string(exponent_bits) + "M" + std::to_string(mantissa_bits);
}

FpFormat fp8_e4m3() { return FpFormat::make(4, 3, SpecialValues::kFiniteNan); }
FpFormat fp8_e5m2() { return FpFormat::make(5, 2, SpecialValues::kIeee); }
FpFormat fp7_e3m3() { return FpFormat::make(3, 3, SpecialValues::kNone); }
FpFormat fp6_e3m2() { return FpFormat::make(3, 2, SpecialValues::kNone); }

double fp_encode(double v, const FpFormat& fmt) {
  if (!std::isfinite(v)) throw NonFiniteError("fp_encode: non-finite input");
  const double a = std::fabs(v);
  if (a == 0.0) return 0.0;
  // Quantization step is fixed inside a binade and clamps at the subnormal step.
  const int e = std::max(std::ilogb(a), 1 - fmt.bias);
  const double ulp = std::ldexp(1.0, e - fmt.mantissa_bits);
  double q = round_half_even(a / ulp) * ulp;
  if (q > fmt.max_finite()) {
    if (!fmt.saturating) throw OverflowError("fp_encode: " + std::to_string(v) + " overflows " + fmt.name());
    q = fmt.max_finite();
  }
  return std::copysign(q, v) + 0.0;  // +0.0 folds -0 to 0
}

std::optional<double> fp_decode(std::uint32_t code, const FpFormat& fmt) {
  const int m_bits = fmt.mantissa_bits;
  const std::uint32_t mant = code & ((1u << m_bits) - 1);
  const std::uint32_t exp = (code >> m_bits) & ((1u << fmt.exponent_bits) - 1);
  const bool negative = (code >> (m_bits + fmt.exponent_bits)) & 1u;
  const std::uint32_t top = (1u << fmt.exponent_bits) - 1;
  if (fmt.specials == SpecialValues::kIeee && exp == top) return std::nullopt;
  if (fmt.specials == SpecialValues::kFiniteNan && exp == top && mant == (1u << m_bits) - 1)
    return std::nullopt;
  double mag;
  if (exp == 0)
    mag = std::ldexp(static_cast<double>(mant), 1 - fmt.bias - m_bits);
  else
    mag = std::ldexp(static_cast<double>((1u << m_bits) + mant),
                     static_cast<int>(exp) - fmt.bias - m_bits);
  return negative ? -mag : mag;
}

UniformQuantized uniform_quantize(std::span<const double> x, int bits) {
  if (x.empty()) throw ShapeError("uniform_quantize: empty input");
  if (bits < 2 || bits > 8) throw ConfigError("uniform_quantize: bits must be in [2, 8]");
  double amax = 0.0;
  for (double v : x) {
    if (!std::isfinite(v)) throw NonFiniteError("uniform_quantize: non-finite input");
    amax = std::max(amax, std::fabs(v));
  }
  UniformQuantized out;
  auto& p = out.params;
  p.bits = bits;
  p.q_min = 0;
  p.q_max = (1 << bits) - 1;
  p.zero_point = 1 << (bits - 1);
  p.scale = amax == 0.0 ? 1.0 : amax / ((1 << (bits - 1)) - 1);
  out.codes.reserve(x.size());
  for (double v : x) {
    const double q = round_half_even(v / p.scale) + p.zero_point;
    out.codes.push_back(static_cast<int>(std::clamp(q, double(p.q_min), double(p.q_max))));
  }
  return out;
}

std::vector<double> uniform_dequantize(const UniformQuantized& q) {
  std::vector<double> out;
  out.reserve(q.codes.size());
  for (int c : q.codes) out.push_back((c - q.params.zero_point) * q.params.scale);
  return out;
}

GseSpec GseSpec::make(int total_bits, std::size_t group_size, int exponent_bias) {
  GseSpec s{total_bits, group_size, exponent_bias};
  s.validate();
  return s;
}

void GseSpec::validate() const {
  if (total_bits < 5 || total_bits > 8)
    throw ConfigError("GseSpec: total bits must be in [5, 8], got " + std::to_string(total_bits));
  if (group_size < 1 || group_size > 65536)
    throw ConfigError("GseSpec: group size must be in [1, 65536]");
  if (exponent_bias < 0 || exponent_bias > 31)
    throw ConfigError("GseSpec: exponent bias must be in [0, 31]");
}

}  // namespace gsq
