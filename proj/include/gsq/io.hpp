#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "gsq/error.hpp"

namespace gsq::io {

static_assert(std::endian::native == std::endian::little,
              "byte streams assume a little-endian host");

/// Appends little-endian scalars to a byte buffer.
class ByteWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    bytes_.insert(bytes_.end(), raw, raw + sizeof(T));
  }

  void put_bytes(std::span<const std::uint8_t> data) {
    bytes_.insert(bytes_.end(), data.begin(), data.end());
  }

  void put_magic(std::string_view magic) {
    bytes_.insert(bytes_.end(), magic.begin(), magic.end());
  }

  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }
  std::vector<std::uint8_t> take() noexcept { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked little-endian reader. Every failure reports the byte offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get(const char* what) {
    require(sizeof(T), what);
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::span<const std::uint8_t> get_bytes(std::size_t n, const char* what) {
    require(n, what);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  void expect_magic(std::string_view magic) {
    require(magic.size(), "magic");
    if (std::memcmp(data_.data() + pos_, magic.data(), magic.size()) != 0) {
      throw ParseError("bad magic, expected \"" + std::string(magic) + "\"", pos_);
    }
    pos_ += magic.size();
  }

  void expect_end() const {
    if (pos_ != data_.size()) throw ParseError("trailing bytes after payload", pos_);
  }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void require(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) {
      throw ParseError(std::string("truncated input while reading ") + what, pos_);
    }
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Writes via a sibling temp file and rename, so readers never observe a
/// partially written file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace gsq::io
