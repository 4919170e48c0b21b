#include "gsq/gse_pack.hpp"

#include <cstdlib>
#include <string>

#include "gsq/error.hpp"
#include "gsq/io.hpp"

namespace gsq {

namespace {

class BitWriter {
 public:
  explicit BitWriter(std::vector<std::uint8_t>& out) : out_(out) {}

  void put(std::uint32_t value, int bits) {
    for (int i = 0; i < bits; ++i) {
      if (bit_ % 8 == 0) out_.push_back(0);
      if ((value >> i) & 1u) out_.back() |= static_cast<std::uint8_t>(1u << (bit_ % 8));
      ++bit_;
    }
  }

  std::size_t bits_written() const noexcept { return bit_; }

 private:
  std::vector<std::uint8_t>& out_;
  std::size_t bit_ = 0;
};

class BitReader {
 public:
  BitReader(std::span<const std::uint8_t> in, std::size_t base) : in_(in), base_(base) {}

  std::uint32_t get(int bits) {
    std::uint32_t v = 0;
    for (int i = 0; i < bits; ++i) {
      if (bit_ / 8 >= in_.size()) throw ParseError("packed group truncated", base_ + bit_ / 8);
      v |= static_cast<std::uint32_t>((in_[bit_ / 8] >> (bit_ % 8)) & 1u) << i;
      ++bit_;
    }
    return v;
  }

  std::size_t byte_offset() const noexcept { return base_ + bit_ / 8; }
  std::size_t bit() const noexcept { return bit_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t base_;
  std::size_t bit_ = 0;
};

}  // namespace

std::size_t packed_group_bytes(const GseSpec& spec) noexcept {
  return (spec.group_storage_bits() + 7) / 8;
}

std::size_t pack_group(const GseGroup& g, std::vector<std::uint8_t>& out) {
  const auto& spec = g.spec;
  if (g.mantissas.size() != spec.group_size) throw ShapeError("pack_group: wrong mantissa count");
  const int m_bits = spec.mantissa_bits();
  const int biased = g.biased_exponent();
  if (biased < 0 || biased > 31) throw ShapeError("pack_group: exponent out of range");
  BitWriter w(out);
  w.put(static_cast<std::uint32_t>(biased), GseSpec::kExponentBits);
  for (int m : g.mantissas) {
    const auto mag = static_cast<std::uint32_t>(std::abs(m));
    if (mag > static_cast<std::uint32_t>(spec.max_mantissa()))
      throw ShapeError("pack_group: mantissa out of range");
    w.put(mag | (m < 0 ? 1u << m_bits : 0u), m_bits + 1);
  }
  return w.bits_written();
}

GseGroup unpack_group(std::span<const std::uint8_t> bytes, const GseSpec& spec,
                      std::size_t base_offset) {
  if (bytes.size() != packed_group_bytes(spec))
    throw ParseError("packed group has wrong size", base_offset);
  BitReader r(bytes, base_offset);
  GseGroup g;
  g.spec = spec;
  g.exponent = static_cast<int>(r.get(GseSpec::kExponentBits)) - spec.exponent_bias;
  const int m_bits = spec.mantissa_bits();
  g.mantissas.reserve(spec.group_size);
  for (std::size_t i = 0; i < spec.group_size; ++i) {
    const std::size_t at = r.byte_offset();
    const std::uint32_t field = r.get(m_bits + 1);
    const int mag = static_cast<int>(field & ((1u << m_bits) - 1));
    const bool negative = (field >> m_bits) & 1u;
    if (negative && mag == 0) throw ParseError("negative zero mantissa", at);
    g.mantissas.push_back(negative ? -mag : mag);
  }
  while (r.bit() % 8 != 0) {
    const std::size_t at = r.byte_offset();
    if (r.get(1) != 0) throw ParseError("nonzero fill bits after packed group", at);
  }
  return g;
}

std::vector<std::uint8_t> encode_gseb(const GseTensor& t) {
  io::ByteWriter w;
  w.put_magic("GSEB");
  w.put<std::uint8_t>(kGsebVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.spec().total_bits));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.spec().exponent_bias));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.axis()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.spec().group_size));
  w.put<std::uint64_t>(t.rows());
  w.put<std::uint64_t>(t.cols());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.pad_len()));
  std::vector<std::uint8_t> payload;
  payload.reserve(t.group_count() * packed_group_bytes(t.spec()));
  for (std::size_t l = 0; l < t.lines(); ++l)
    for (std::size_t g = 0; g < t.groups_per_line(); ++g) pack_group(t.group(l, g), payload);
  w.put_bytes(payload);
  return w.take();
}

GseTensor decode_gseb(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("GSEB");
  std::size_t at = r.offset();
  if (r.get<std::uint8_t>("version") != kGsebVersion) throw ParseError("unsupported GSEB version", at);
  at = r.offset();
  const int bits = r.get<std::uint8_t>("total_bits");
  const int bias = r.get<std::uint8_t>("exponent_bias");
  const auto axis_at = r.offset();
  const auto axis_tag = r.get<std::uint8_t>("axis");
  if (axis_tag > 1) throw ParseError("unknown group axis " + std::to_string(axis_tag), axis_at);
  const auto n = r.get<std::uint32_t>("group_size");
  GseSpec spec{bits, n, bias};
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw ParseError(std::string("invalid GSE spec in header: ") + e.what(), at);
  }
  const auto rows = r.get<std::uint64_t>("rows");
  const auto cols = r.get<std::uint64_t>("cols");
  const auto pad_at = r.offset();
  const auto pad = r.get<std::uint32_t>("pad_len");
  const auto axis = static_cast<GroupAxis>(axis_tag);

  const std::uint64_t k = axis == GroupAxis::kAlongRows ? cols : rows;
  const std::uint64_t lines = axis == GroupAxis::kAlongRows ? rows : cols;
  const std::uint64_t groups_per_line = (k + n - 1) / n;
  if (pad != groups_per_line * n - k)
    throw ParseError("pad_len " + std::to_string(pad) + " inconsistent with dims", pad_at);
  const std::size_t group_bytes = packed_group_bytes(spec);
  if (lines != 0 && groups_per_line > (std::uint64_t{1} << 40) / lines)
    throw ParseError("tensor too large", pad_at);
  const std::uint64_t total = lines * groups_per_line;
  if (r.remaining() != total * group_bytes) {
    throw ParseError("payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                         std::to_string(total * group_bytes),
                     r.offset());
  }

  const std::size_t padded = groups_per_line * n;
  std::vector<std::int8_t> mantissas(lines * padded, 0);
  std::vector<std::int8_t> exponents(total, 0);
  for (std::uint64_t l = 0; l < lines; ++l) {
    for (std::uint64_t g = 0; g < groups_per_line; ++g) {
      const std::size_t offset = r.offset();
      const auto group = unpack_group(r.get_bytes(group_bytes, "group"), spec, offset);
      exponents[l * groups_per_line + g] = static_cast<std::int8_t>(group.exponent);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t kk = g * n + i;
        if (kk >= k && group.mantissas[i] != 0)
          throw ParseError("nonzero padding mantissa", offset);
        mantissas[l * padded + kk] = static_cast<std::int8_t>(group.mantissas[i]);
      }
    }
  }
  return GseTensor(rows, cols, axis, spec, std::move(mantissas), std::move(exponents));
}

void save_gseb(const std::filesystem::path& path, const GseTensor& t) {
  io::write_file_atomic(path, encode_gseb(t));
}

GseTensor load_gseb(const std::filesystem::path& path) { return decode_gseb(io::read_file(path)); }

}  // namespace gsq
