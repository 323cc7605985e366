#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

// Little-endian primitives for the on-disk formats.

namespace cpgg::binio {

template <typename U>
void put_le(std::ostream& os, U v) {
  char bytes[sizeof(U)];
  for (size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes, sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw std::runtime_error("unexpected end of file");
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes[i]) << (8 * i));
  return v;
}

inline void put_f32(std::ostream& os, float f) { put_le<uint32_t>(os, std::bit_cast<uint32_t>(f)); }
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_le<uint32_t>(is)); }

inline void put_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }
inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
  char got[4];
  if (!is.read(got, 4) || std::string(got, 4) != std::string(magic, 4)) {
    throw std::runtime_error(what + ": bad magic, expected " + std::string(magic, 4));
  }
}

}  // namespace cpgg::binio
