#pragma once

// Little-endian binary container shared by the embedding (CIRFEMB1),
// assignment (CIRFASN1) and codebook (CIRFCBK1) files. Every file ends with
// a CRC-64/XZ of all preceding bytes.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <boost/crc.hpp>

#include "cirf/error.hpp"

namespace cirf {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

using Crc64 = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, 0xFFFFFFFFFFFFFFFFULL, 0xFFFFFFFFFFFFFFFFULL, true, true>;

inline std::uint64_t crc64(std::span<const std::uint8_t> bytes) {
  Crc64 crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

class ByteWriter {
 public:
  void magic(std::string_view m) { raw(m.data(), m.size()); }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void pad(std::size_t n) { bytes_.insert(bytes_.end(), n, 0); }
  void text(std::string_view s) { raw(s.data(), s.size()); }

  template <typename T>
  void f32_values(std::span<const T> values) {
    for (const T v : values) f32(static_cast<float>(v));
  }

  /// Appends the CRC-64 of everything written so far.
  void seal() { u64(crc64(bytes_)); }

  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }

  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

  std::uint8_t u8() { return take<std::uint8_t>(); }
  std::uint32_t u32() { return take<std::uint32_t>(); }
  std::uint64_t u64() { return take<std::uint64_t>(); }
  float f32() { return take<float>(); }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  template <typename T>
  T take() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (remaining() < n) throw Error(ErrorKind::ChecksumMismatch, "unexpected end of payload");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string read_file_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "short write to " + path.string());
}

inline void write_file_text(const std::filesystem::path& path, std::string_view text) {
  write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

/// Checks the magic and trailing checksum; returns a reader positioned after
/// the magic and limited to the payload (checksum excluded).
inline ByteReader open_sealed(std::span<const std::uint8_t> bytes, std::string_view magic) {
  if (bytes.size() < magic.size() ||
      std::memcmp(bytes.data(), magic.data(), magic.size()) != 0)
    throw Error(ErrorKind::BadMagic, "expected magic " + std::string(magic));
  if (bytes.size() < magic.size() + sizeof(std::uint64_t))
    throw Error(ErrorKind::ChecksumMismatch, "file too short");
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, sizeof stored);
  if (crc64(bytes.first(body)) != stored) throw Error(ErrorKind::ChecksumMismatch, "CRC-64 mismatch");
  ByteReader reader(bytes.first(body));
  reader.skip(magic.size());
  return reader;
}

}  // namespace cirf
