#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

namespace dmadapter::io {

// Little-endian encoders, independent of host byte order.
inline void write_u32(std::ostream& os, std::uint32_t v) {
  std::array<unsigned char, 4> b{};
  for (std::size_t k = 0; k < 4; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
  os.write(reinterpret_cast<const char*>(b.data()), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  std::array<unsigned char, 8> b{};
  for (std::size_t k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
  os.write(reinterpret_cast<const char*>(b.data()), 8);
}

inline void write_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  write_u64(os, bits);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  std::uint32_t v = 0;
  for (std::size_t k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(b[k]) << (8 * k);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  is.read(reinterpret_cast<char*>(b.data()), 8);
  std::uint64_t v = 0;
  for (std::size_t k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(b[k]) << (8 * k);
  return v;
}

inline double read_f64(std::istream& is) {
  const std::uint64_t bits = read_u64(is);
  double d;
  std::memcpy(&d, &bits, sizeof d);
  return d;
}

}  // namespace dmadapter::io
