#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace axvit {

// Error taxonomy. Every failure surfaced by the library is one of these.

/// Operand or parameter outside its representable range.
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Operation invoked on an object in the wrong state (uncalibrated, empty...).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed numeric input (NaN/Inf, divergence).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file or text input.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest string that parses back to exactly `v`.
inline std::string format_real(double v) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) throw RangeError("format_real: value not printable");
  return std::string(buf.data(), end);
}

inline std::string format_fixed(double v, int decimals) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v,
                                 std::chars_format::fixed, decimals);
  if (ec != std::errc{}) throw RangeError("format_fixed: value not printable");
  return std::string(buf.data(), end);
}

inline double parse_real(std::string_view s, std::string_view what) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw ParseError(std::string(what) + ": not a number: '" + std::string(s) + "'");
  return v;
}

inline long long parse_int(std::string_view s, std::string_view what) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw ParseError(std::string(what) + ": not an integer: '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(s.substr(start));
      return out;
    }
    out.emplace_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string trim(std::string_view s) {
  auto issp = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (!s.empty() && issp(s.front())) s.remove_prefix(1);
  while (!s.empty() && issp(s.back())) s.remove_suffix(1);
  return std::string(s);
}

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(std::span<const unsigned char> bytes,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Little-endian byte I/O, independent of host byte order.
namespace le {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_i32(std::ostream& os, std::int32_t v) { put_u32(os, static_cast<std::uint32_t>(v)); }
inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void put_string(std::ostream& os, std::string_view s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void need(std::istream& is, std::string_view what) {
  if (!is) throw ParseError(std::string("truncated input while reading ") + std::string(what));
}

inline std::uint8_t get_u8(std::istream& is, std::string_view what) {
  char c = 0;
  is.get(c);
  need(is, what);
  return static_cast<std::uint8_t>(c);
}

inline std::uint32_t get_u32(std::istream& is, std::string_view what) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  need(is, what);
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
         (std::uint32_t{b[3]} << 24);
}

inline std::uint64_t get_u64(std::istream& is, std::string_view what) {
  std::uint64_t lo = get_u32(is, what);
  std::uint64_t hi = get_u32(is, what);
  return lo | (hi << 32);
}

inline std::int32_t get_i32(std::istream& is, std::string_view what) {
  return static_cast<std::int32_t>(get_u32(is, what));
}
inline float get_f32(std::istream& is, std::string_view what) {
  return std::bit_cast<float>(get_u32(is, what));
}
inline double get_f64(std::istream& is, std::string_view what) {
  return std::bit_cast<double>(get_u64(is, what));
}

inline std::string get_string(std::istream& is, std::string_view what, std::uint32_t max_len = 1u << 16) {
  auto n = get_u32(is, what);
  if (n > max_len) throw ParseError(std::string(what) + ": string length " + std::to_string(n) + " too large");
  std::string s(n, '\0');
  is.read(s.data(), n);
  need(is, what);
  return s;
}

}  // namespace le

/// Writes via a sibling temp file and renames over the target, so readers
/// never observe a half-written file.
template <typename Writer>
void write_file_atomic(const std::filesystem::path& path, Writer&& write, bool binary = true) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    write(os);
    os.flush();
    if (!os) throw IoError("write failed for '" + path.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move temp file onto '" + path.string() + "'");
  }
}

inline std::ifstream open_input(const std::filesystem::path& path, bool binary = true) {
  std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
  if (!is) throw IoError("cannot open '" + path.string() + "' for reading");
  return is;
}

}  // namespace axvit
