// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// Little-endian readers/writers for the on-disk formats, plus atomic
// file replacement.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "conflictlens/errors.hpp"

namespace conflictlens::binio {

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

template <class U>
U to_le(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out;
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(U); ++i) dst[i] = src[sizeof(U) - 1 - i];
    return out;
  } else {
    return v;
  }
}

class Writer {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { raw(to_le(v)); }
  void u32(std::uint32_t v) { raw(to_le(v)); }
  void u64(std::uint64_t v) { raw(to_le(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> vs) {
    for (float v : vs) f32(v);
  }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }

  const std::string& buffer() const { return buf_; }

 private:
  template <class U>
  void raw(U v) {
    char tmp[sizeof(U)];
    std::memcpy(tmp, &v, sizeof(U));
    buf_.append(tmp, sizeof(U));
  }
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> data) : data_(data) {}
  explicit Reader(const std::string& s)
      : data_(reinterpret_cast<const unsigned char*>(s.data()), s.size()) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  void expect_magic(std::string_view magic) {
    need(magic.size(), "magic");
    if (std::memcmp(data_.data() + pos_, magic.data(), magic.size()) != 0) {
      throw FormatError("bad magic, expected '" + std::string(magic) + "'", pos_);
    }
    pos_ += magic.size();
  }
  std::uint8_t u8() {
    need(1, "u8");
    return data_[pos_++];
  }
  std::uint16_t u16() { return raw<std::uint16_t>(); }
  std::uint32_t u32() { return raw<std::uint32_t>(); }
  std::uint64_t u64() { return raw<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(u32()); }
  void f32s(std::span<float> out) {
    need(out.size() * 4, "f32 array");
    for (float& v : out) v = f32();
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n, "string");
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw FormatError(std::string("truncated input reading ") + what, pos_);
    }
  }
  template <class U>
  U raw() {
    need(sizeof(U), "integer");
    U v;
    std::memcpy(&v, data_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return to_le(v);
  }

  std::span<const unsigned char> data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return s;
}

// Writes to "<path>.tmp" then renames over `path`.
inline void write_file_atomic(const std::filesystem::path& path,
                              std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace conflictlens::binio
