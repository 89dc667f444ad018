#pragma once

// Little-endian binary encoding shared by the corpus and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <type_traits>
#include <span>
#include <string>
#include <vector>

#include "avd2v/errors.hpp"

namespace avd2v::binio {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { buf_.append(s.data(), s.size()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  template <class T>
  void f32s(std::span<const T> values) {
    if constexpr (std::is_same_v<T, float> && std::endian::native == std::endian::little) {
      buf_.append(reinterpret_cast<const char*>(values.data()), values.size() * 4);
    } else {
      for (T v : values) f32(static_cast<float>(v));
    }
  }

  const std::string& bytes() const { return buf_; }
  std::size_t size() const { return buf_.size(); }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const char* data, std::size_t size, std::string context)
      : data_(data), size_(size), context_(std::move(context)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }
  std::string str(std::size_t max_len = 1u << 20) {
    const auto n = u32();
    if (n > max_len) throw FormatError(context_ + ": implausible string length " + std::to_string(n));
    return raw(n);
  }
  template <class T>
  std::vector<T> f32s(std::size_t n) {
    need(n * 4);
    std::vector<T> v(n);
    if constexpr (std::is_same_v<T, float> && std::endian::native == std::endian::little) {
      std::memcpy(v.data(), data_ + pos_, n * 4);
      pos_ += n * 4;
    } else {
      for (auto& x : v) x = static_cast<T>(f32());
    }
    return v;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return size_ - pos_; }
  bool at_end() const { return pos_ == size_; }

 private:
  void need(std::size_t n) const {
    if (size_ - pos_ < n) throw FormatError(context_ + ": truncated data");
  }

  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string context_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  if (size < 0) throw IoError("cannot determine size of '" + path + "'");
  std::string s(static_cast<std::size_t>(size), '\0');
  in.seekg(0, std::ios::beg);
  in.read(s.data(), size);
  if (!in) throw IoError("read failed for '" + path + "'");
  return s;
}

/// Writes to a temporary sibling and renames, so readers never observe a
/// partially written file.
inline void write_file_atomic(const std::string& path, std::string_view bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot rename '" + tmp + "' to '" + path + "'");
}

}  // namespace avd2v::binio
