#pragma once

// Little-endian binary encoding helpers, CRC32 and FNV-1a hashing shared by
// the checkpoint, trajectory, guide and adversarial-batch file formats.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ilalab/errors.hpp"

namespace ilalab {

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

std::uint64_t fnv1a64(std::string_view text, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string hex64(std::uint64_t v);

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f32(float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    put_le(u);
  }
  void f64(double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    put_le(u);
  }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void f32s(std::span<const float> v) {
    for (float x : v) f32(x);
  }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  template <typename T>
  void put_le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string context)
      : data_(data), context_(std::move(context)) {}

  void expect_magic(std::string_view m) {
    need(m.size());
    if (std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0) {
      throw IoError(context_ + ": bad magic, expected '" + std::string(m) + "'");
    }
    pos_ += m.size();
  }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  float f32() {
    const auto u = get_le<std::uint32_t>();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
  double f64() {
    const auto u = get_le<std::uint64_t>();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<float> f32s(std::size_t n) {
    need(n * 4);
    std::vector<float> v(n);
    for (auto& x : v) x = f32();
    return v;
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  const std::string& context() const { return context_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError(context_ + ": truncated file");
  }
  template <typename T>
  T get_le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(data_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> data_;
  std::string context_;
  std::size_t pos_ = 0;
};

// Appends CRC32 of the bytes written so far.
void append_crc(ByteWriter& w);
// Verifies the trailing CRC32 and returns the bytes before it.
std::span<const std::uint8_t> checked_body(std::span<const std::uint8_t> bytes, const std::string& context);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace ilalab
