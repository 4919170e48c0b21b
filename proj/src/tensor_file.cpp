#include "gsq/tensor_file.hpp"

#include <string>

#include "gsq/error.hpp"
#include "gsq/io.hpp"

namespace gsq {

std::uint64_t Tensor::element_count() const noexcept {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype) {
  if (t.dims.size() > 255) throw ShapeError("tensor rank exceeds 255");
  if (t.element_count() != t.values.size()) throw ShapeError("tensor dims do not match payload");
  io::ByteWriter w;
  w.put_magic("GSQT");
  w.put<std::uint8_t>(kTensorFileVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims) w.put<std::uint64_t>(d);
  for (double v : t.values) {
    if (dtype == DType::kF32)
      w.put<float>(static_cast<float>(v));
    else
      w.put<double>(v);
  }
  return w.take();
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("GSQT");
  const auto version_at = r.offset();
  if (r.get<std::uint8_t>("version") != kTensorFileVersion)
    throw ParseError("unsupported GSQT version", version_at);
  const auto dtype_at = r.offset();
  const auto tag = r.get<std::uint8_t>("dtype");
  if (tag > 1) throw ParseError("unknown dtype tag " + std::to_string(tag), dtype_at);
  const auto rank = r.get<std::uint8_t>("rank");
  Tensor t;
  std::uint64_t count = 1;
  for (unsigned i = 0; i < rank; ++i) {
    const auto at = r.offset();
    const auto d = r.get<std::uint64_t>("dims");
    if (d != 0 && count > (std::uint64_t{1} << 40) / d) throw ParseError("tensor too large", at);
    count *= d;
    t.dims.push_back(d);
  }
  const std::size_t width = tag == 0 ? 4 : 8;
  if (r.remaining() < count * width) {
    throw ParseError("payload truncated: need " + std::to_string(count * width) + " bytes, have " +
                         std::to_string(r.remaining()),
                     r.offset());
  }
  t.values.resize(count);
  for (auto& v : t.values) {
    v = tag == 0 ? static_cast<double>(r.get<float>("payload")) : r.get<double>("payload");
  }
  r.expect_end();
  return t;
}

Tensor load_tensor(const std::filesystem::path& path) { return decode_tensor(io::read_file(path)); }

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  io::write_file_atomic(path, encode_tensor(t, dtype));
}

Matrix tensor_to_matrix(const Tensor& t) {
  if (t.dims.size() != 2) {
    throw ShapeError("expected a 2-D tensor (grouping needs a reduction axis), got rank " +
                     std::to_string(t.dims.size()));
  }
  return Matrix(t.dims[0], t.dims[1], t.values);
}

Tensor matrix_to_tensor(const Matrix& m) {
  return Tensor{{m.rows(), m.cols()}, {m.values().begin(), m.values().end()}};
}

}  // namespace gsq
