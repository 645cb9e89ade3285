#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <string>

namespace gradvac {

// Shortest decimal form that round-trips to the same double. CSV and JSON
// artifacts must be byte-stable across runs, so no locale-aware printf.
inline std::string format_double(double v) {
  std::array<char, 40> buf;
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline std::string format_int(std::int64_t v) {
  std::array<char, 24> buf;
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

// 16-digit lowercase hex, zero padded; used for config hashes.
inline std::string format_hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace gradvac
