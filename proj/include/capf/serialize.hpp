#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "capf/common.hpp"

namespace capf {

// Little-endian binary writer/reader with byte-offset tracking, so format
// errors can name the offending position.

class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : f_(path, std::ios::binary) {
    if (!f_) throw FormatError("cannot open for writing: " + path);
  }

  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    f_.write(buf, sizeof(T));
    offset_ += sizeof(T);
  }

  void put_bytes(const void* data, std::size_t n) {
    f_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    offset_ += n;
  }

  void put_magic(const char m[4]) { put_bytes(m, 4); }

  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }

  std::uint64_t offset() const { return offset_; }

  void finish() {
    f_.flush();
    if (!f_) throw FormatError("write failure", offset_);
  }

 private:
  std::ofstream f_;
  std::uint64_t offset_ = 0;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : f_(path, std::ios::binary) {
    if (!f_) throw FormatError("cannot open for reading: " + path);
  }

  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    char buf[sizeof(T)];
    f_.read(buf, sizeof(T));
    if (f_.gcount() != static_cast<std::streamsize>(sizeof(T)))
      throw FormatError("truncated file", offset_);
    offset_ += sizeof(T);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }

  void get_bytes(void* data, std::size_t n) {
    f_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (f_.gcount() != static_cast<std::streamsize>(n))
      throw FormatError("truncated file", offset_);
    offset_ += n;
  }

  void expect_magic(const char m[4], const std::string& what) {
    char buf[4];
    get_bytes(buf, 4);
    if (std::memcmp(buf, m, 4) != 0)
      throw FormatError("bad magic for " + what, offset_ - 4);
  }

  std::string get_string(std::uint32_t max_len = 1 << 16) {
    std::uint32_t n = get<std::uint32_t>();
    if (n > max_len) throw FormatError("string length out of bounds", offset_ - 4);
    std::string s(n, '\0');
    get_bytes(s.data(), n);
    return s;
  }

  bool at_eof() {
    f_.peek();
    return f_.eof();
  }

  std::uint64_t offset() const { return offset_; }

 private:
  std::ifstream f_;
  std::uint64_t offset_ = 0;
};

}  // namespace capf
