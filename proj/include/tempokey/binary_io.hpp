#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <zlib.h>

#include "tempokey/error.hpp"

namespace tk::io {

// Appends little-endian encodings to a byte buffer.
class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  template <typename U>
  void le(U value) {
    static_assert(std::is_integral_v<U>);
    using Unsigned = std::make_unsigned_t<U>;
    auto u = static_cast<Unsigned>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      buf_.push_back(static_cast<char>(u & 0xFF));
      u = static_cast<Unsigned>(u >> 8);
    }
  }

  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }

  const std::vector<char>& buffer() const { return buf_; }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

// Bounds-checked little-endian reader over a byte range.
class ByteReader {
 public:
  ByteReader(const char* data, std::size_t size) : data_(data), size_(size) {}

  std::string bytes(std::size_t n) {
    need(n);
    std::string out(data_ + pos_, n);
    pos_ += n;
    return out;
  }

  template <typename U>
  U le() {
    static_assert(std::is_integral_v<U>);
    need(sizeof(U));
    std::make_unsigned_t<U> u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      u |= static_cast<std::make_unsigned_t<U>>(
               static_cast<unsigned char>(data_[pos_ + i]))
           << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<U>(u);
  }

  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }

  std::size_t remaining() const { return size_ - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (size_ - pos_ < n) throw DataError("unexpected end of data");
  }

  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path);
}

inline std::uint32_t crc32_of(const char* data, std::size_t size) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(size)));
}

}  // namespace tk::io
