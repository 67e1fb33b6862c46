#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "tlnet/error.hpp"

// Explicit little-endian helpers; every on-disk format in tlnet is LE.
namespace tlnet::binary {

template <class UInt>
inline void put_le(std::ostream& out, UInt value) {
  unsigned char bytes[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(UInt));
}

template <class UInt>
inline UInt get_le(std::istream& in, const char* what) {
  unsigned char bytes[sizeof(UInt)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(UInt));
  if (!in) throw FormatError(std::string("unexpected end of stream reading ") + what);
  UInt value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    value |= static_cast<UInt>(bytes[i]) << (8 * i);
  }
  return value;
}

inline void put_u64(std::ostream& out, std::uint64_t v) { put_le<std::uint64_t>(out, v); }
inline void put_u32(std::ostream& out, std::uint32_t v) { put_le<std::uint32_t>(out, v); }
inline void put_i32(std::ostream& out, std::int32_t v) {
  put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
}
inline void put_f32(std::ostream& out, float v) {
  put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
}
inline void put_f64(std::ostream& out, double v) {
  put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

inline std::uint64_t get_u64(std::istream& in, const char* what = "u64") {
  return get_le<std::uint64_t>(in, what);
}
inline std::uint32_t get_u32(std::istream& in, const char* what = "u32") {
  return get_le<std::uint32_t>(in, what);
}
inline std::int32_t get_i32(std::istream& in, const char* what = "i32") {
  return std::bit_cast<std::int32_t>(get_le<std::uint32_t>(in, what));
}
inline float get_f32(std::istream& in, const char* what = "f32") {
  return std::bit_cast<float>(get_le<std::uint32_t>(in, what));
}
inline double get_f64(std::istream& in, const char* what = "f64") {
  return std::bit_cast<double>(get_le<std::uint64_t>(in, what));
}

inline float f32_from_bytes(const unsigned char* p) {
  std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                       (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

inline std::uint32_t u32_from_bytes(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

}  // namespace tlnet::binary
