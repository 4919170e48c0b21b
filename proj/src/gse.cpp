#include "gsq/gse.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <string>
#include <thread>

#include "gsq/error.hpp"
#include "gsq/rounding.hpp"

namespace gsq {

namespace {

struct QuantizedValues {
  int exponent;
  bool saturated;
  bool carry_clamped;
};

// Shared by the scalar and matrix paths. `out` receives the mantissas.
template <typename Out>
QuantizedValues quantize_values(std::span<const double> values, const GseSpec& spec, Out* out) {
  double amax = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteError("gse quantize: non-finite value");
    amax = std::max(amax, std::fabs(v));
  }
  QuantizedValues q{spec.min_exponent(), false, false};
  if (amax == 0.0) {
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = 0;
    return q;
  }
  int e = std::ilogb(amax) - (spec.mantissa_bits() - 1);
  if (e < spec.min_exponent()) e = spec.min_exponent();
  if (e > spec.max_exponent()) {
    e = spec.max_exponent();
    q.saturated = true;
  }
  q.exponent = e;
  const double limit = spec.max_mantissa();
  for (std::size_t i = 0; i < values.size(); ++i) {
    double m = round_half_even(std::ldexp(values[i], -e));
    if (std::fabs(m) > limit) {
      m = std::copysign(limit, m);
      if (!q.saturated) q.carry_clamped = true;
    }
    out[i] = static_cast<Out>(m);
  }
  return q;
}

void require_same_group_size(const GseSpec& a, const GseSpec& b, const char* op) {
  if (a.group_size != b.group_size) {
    throw ShapeError(std::string(op) + ": group size mismatch (" + std::to_string(a.group_size) +
                     " vs " + std::to_string(b.group_size) + ")");
  }
}

}  // namespace

int required_accumulator_bits(const GseSpec& spec) noexcept {
  const auto n = static_cast<unsigned long long>(spec.group_size);
  const int log2n = n <= 1 ? 0 : static_cast<int>(std::bit_width(n - 1));
  return 2 * spec.mantissa_bits() + log2n + 1;
}

GseGroup gse_quantize_group(std::span<const double> values, const GseSpec& spec) {
  spec.validate();
  if (values.size() != spec.group_size) {
    throw ShapeError("gse_quantize_group: expected " + std::to_string(spec.group_size) +
                     " values, got " + std::to_string(values.size()));
  }
  GseGroup g;
  g.spec = spec;
  g.mantissas.resize(values.size());
  const auto q = quantize_values(values, spec, g.mantissas.data());
  g.exponent = q.exponent;
  g.saturated = q.saturated;
  g.carry_clamped = q.carry_clamped;
  return g;
}

std::vector<double> gse_dequantize_group(const GseGroup& g) {
  std::vector<double> out;
  out.reserve(g.mantissas.size());
  for (int m : g.mantissas) out.push_back(std::ldexp(static_cast<double>(m), g.exponent));
  return out;
}

double gse_dot(std::span<const GseGroup> a, std::span<const GseGroup> b) {
  if (a.size() != b.size()) {
    throw ShapeError("gse_dot: group counts differ (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  }
  double acc = 0.0;
  for (std::size_t g = 0; g < a.size(); ++g) {
    require_same_group_size(a[g].spec, b[g].spec, "gse_dot");
    if (a[g].mantissas.size() != b[g].mantissas.size())
      throw ShapeError("gse_dot: group " + std::to_string(g) + " lengths differ");
    GroupAccumulator s = 0;
    for (std::size_t i = 0; i < a[g].mantissas.size(); ++i)
      s += GroupAccumulator{a[g].mantissas[i]} * b[g].mantissas[i];
    acc += std::ldexp(static_cast<double>(s), a[g].exponent + b[g].exponent);
  }
  return acc;
}

GseTensor::GseTensor(std::size_t rows, std::size_t cols, GroupAxis axis, GseSpec spec,
                     std::vector<std::int8_t> mantissas, std::vector<std::int8_t> exponents)
    : rows_(rows),
      cols_(cols),
      axis_(axis),
      spec_(spec),
      mantissas_(std::move(mantissas)),
      exponents_(std::move(exponents)) {
  spec_.validate();
  if (mantissas_.size() != lines() * padded_len())
    throw ShapeError("GseTensor: mantissa storage has wrong length");
  if (exponents_.size() != group_count())
    throw ShapeError("GseTensor: exponent storage has wrong length");
  const int limit = spec_.max_mantissa();
  for (auto m : mantissas_)
    if (m > limit || m < -limit) throw ShapeError("GseTensor: mantissa out of range");
  for (auto e : exponents_)
    if (e < spec_.min_exponent() || e > spec_.max_exponent())
      throw ShapeError("GseTensor: exponent out of range");
  for (std::size_t l = 0; l < lines(); ++l) {
    auto line = line_mantissas(l);
    for (std::size_t i = reduction_len(); i < padded_len(); ++i)
      if (line[i] != 0) throw ShapeError("GseTensor: nonzero padding mantissa");
  }
}

GseGroup GseTensor::group(std::size_t line, std::size_t g) const {
  GseGroup out;
  out.spec = spec_;
  out.exponent = line_exponents(line)[g];
  auto m = line_mantissas(line).subspan(g * spec_.group_size, spec_.group_size);
  out.mantissas.assign(m.begin(), m.end());
  return out;
}

std::vector<GseGroup> GseTensor::line_groups(std::size_t line) const {
  std::vector<GseGroup> out;
  out.reserve(groups_per_line());
  for (std::size_t g = 0; g < groups_per_line(); ++g) out.push_back(group(line, g));
  return out;
}

GseTensor quantize_matrix(const Matrix& m, GroupAxis axis, const GseSpec& spec) {
  spec.validate();
  GseTensor t;
  t.rows_ = m.rows();
  t.cols_ = m.cols();
  t.axis_ = axis;
  t.spec_ = spec;
  const std::size_t lines = t.lines();
  const std::size_t k = t.reduction_len();
  const std::size_t n = spec.group_size;
  t.mantissas_.assign(lines * t.padded_len(), 0);
  t.exponents_.assign(t.group_count(), 0);

  std::vector<double> buf(n);
  for (std::size_t l = 0; l < lines; ++l) {
    for (std::size_t g = 0; g < t.groups_per_line(); ++g) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t kk = g * n + i;
        if (kk >= k)
          buf[i] = 0.0;
        else
          buf[i] = axis == GroupAxis::kAlongRows ? m(l, kk) : m(kk, l);
      }
      std::int8_t* dst = t.mantissas_.data() + l * t.padded_len() + g * n;
      const auto q = quantize_values<std::int8_t>(buf, spec, dst);
      t.exponents_[l * t.groups_per_line() + g] = static_cast<std::int8_t>(q.exponent);
      t.saturated_groups_ += q.saturated;
      t.carry_clamped_groups_ += q.carry_clamped;
    }
  }
  return t;
}

Matrix dequantize_matrix(const GseTensor& t) {
  Matrix out(t.rows(), t.cols());
  const std::size_t n = t.spec().group_size;
  for (std::size_t l = 0; l < t.lines(); ++l) {
    auto mant = t.line_mantissas(l);
    auto exps = t.line_exponents(l);
    for (std::size_t kk = 0; kk < t.reduction_len(); ++kk) {
      const double v = std::ldexp(static_cast<double>(mant[kk]), exps[kk / n]);
      if (t.axis() == GroupAxis::kAlongRows)
        out(l, kk) = v;
      else
        out(kk, l) = v;
    }
  }
  return out;
}

Matrix gse_gemm(const GseTensor& x, const GseTensor& wt, const GemmOptions& opts) {
  if (x.axis() != GroupAxis::kAlongRows)
    throw ShapeError("gse_gemm: left operand must be grouped along rows");
  if (wt.axis() != GroupAxis::kAlongCols)
    throw ShapeError("gse_gemm: right operand must be grouped along columns");
  if (x.cols() != wt.rows()) {
    throw ShapeError("gse_gemm: inner dimensions " + std::to_string(x.cols()) + " and " +
                     std::to_string(wt.rows()) + " differ");
  }
  require_same_group_size(x.spec(), wt.spec(), "gse_gemm");

  const std::size_t n = x.spec().group_size;
  const std::size_t groups = x.groups_per_line();
  Matrix out(x.rows(), wt.cols());

  auto run_rows = [&](std::size_t begin, std::size_t end) {
    for (std::size_t b = begin; b < end; ++b) {
      auto xm = x.line_mantissas(b);
      auto xe = x.line_exponents(b);
      for (std::size_t o = 0; o < wt.cols(); ++o) {
        auto wm = wt.line_mantissas(o);
        auto we = wt.line_exponents(o);
        double acc = 0.0;
        for (std::size_t g = 0; g < groups; ++g) {
          GroupAccumulator s = 0;
          const std::size_t base = g * n;
          for (std::size_t i = 0; i < n; ++i)
            s += GroupAccumulator{xm[base + i]} * wm[base + i];
          acc += std::ldexp(static_cast<double>(s), xe[g] + we[g]);
        }
        out(b, o) = acc;
      }
    }
  };

  const std::size_t workers = std::clamp<std::size_t>(opts.workers, 1, std::max<std::size_t>(1, x.rows()));
  if (workers == 1) {
    run_rows(0, x.rows());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (x.rows() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(x.rows(), begin + chunk);
      if (begin < end) pool.emplace_back(run_rows, begin, end);
    }
  }
  return out;
}

Matrix reference_gemm(const Matrix& a, const Matrix& b) { return matmul(a, b); }

}  // namespace gsq
