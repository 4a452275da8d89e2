#pragma once

// Approximate integer multipliers: behavioral definitions, exhaustive product
// tables, error metrics and the hardware cost carried with each multiplier.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "axvit/common.hpp"

namespace axvit {

/// Largest operand width for which a full product table is built.
inline constexpr int kMaxLutBits = 12;
/// Largest operand width supported by the functional path (products fit in 32 bits).
inline constexpr int kMaxFunctionalBits = 16;
inline constexpr int kMinBits = 2;

enum class MulKind { exact, truncate_lsb, perforate_pp, external };

inline std::string_view to_string(MulKind k) {
  switch (k) {
    case MulKind::exact: return "exact";
    case MulKind::truncate_lsb: return "truncate";
    case MulKind::perforate_pp: return "perforate";
    case MulKind::external: return "external";
  }
  return "?";
}

struct HardwareCost {
  double power_mw = 0.0;
  double area_um2 = 0.0;
  double delay_ns = 0.0;
};

struct ErrorMetrics {
  double mae_pct = 0.0;
  double wce_pct = 0.0;
  double mre_pct = 0.0;
};

class ProductLut;

/// A named approximate multiplier over signed two's-complement operands.
///
/// Operands lie in [-2^(b-1), 2^(b-1)-1]. The product depends only on the two
/// operands, so every multiplier can be tabulated exhaustively for b <= 12.
///
///  - exact:        x*y
///  - truncate_lsb: the k lowest bits of both operands are cleared before an
///                  exact multiply (rounds each operand toward -inf).
///  - perforate_pp: the r lowest partial-product rows are dropped, i.e. the r
///                  lowest bits of the multiplier operand y are cleared.
///  - external:     products come from a table file produced elsewhere.
class AxMultiplier {
 public:
  static AxMultiplier exact(std::string name, int bits, HardwareCost cost = {}) {
    return AxMultiplier(std::move(name), bits, MulKind::exact, 0, cost);
  }
  static AxMultiplier truncate_lsb(std::string name, int bits, int k, HardwareCost cost = {}) {
    return AxMultiplier(std::move(name), bits, MulKind::truncate_lsb, k, cost);
  }
  static AxMultiplier perforate_pp(std::string name, int bits, int r, HardwareCost cost = {}) {
    return AxMultiplier(std::move(name), bits, MulKind::perforate_pp, r, cost);
  }
  /// Loads the product table at `lut_path` (AXLUT format).
  static AxMultiplier external(std::string name, const std::filesystem::path& lut_path, HardwareCost cost = {});
  static AxMultiplier external(std::string name, std::shared_ptr<const ProductLut> lut,
                               std::filesystem::path lut_path, HardwareCost cost = {});

  const std::string& name() const noexcept { return name_; }
  int bitwidth() const noexcept { return bits_; }
  MulKind kind() const noexcept { return kind_; }
  /// k for truncate_lsb, r for perforate_pp, 0 otherwise.
  int param() const noexcept { return param_; }
  const HardwareCost& cost() const noexcept { return cost_; }
  const std::filesystem::path& lut_path() const noexcept { return lut_path_; }
  const std::shared_ptr<const ProductLut>& external_table() const noexcept { return table_; }

  std::int32_t min_operand() const noexcept { return -(std::int32_t{1} << (bits_ - 1)); }
  std::int32_t max_operand() const noexcept { return (std::int32_t{1} << (bits_ - 1)) - 1; }

  /// Approximate product with range checking.
  std::int32_t operator()(std::int32_t x, std::int32_t y) const {
    check_operand(x, "x");
    check_operand(y, "y");
    return product_unchecked(x, y);
  }

  /// Approximate product; operands must already be in range.
  std::int32_t product_unchecked(std::int32_t x, std::int32_t y) const;

  void check_operand(std::int32_t v, const char* which) const {
    if (v < min_operand() || v > max_operand())
      throw RangeError(std::string("operand ") + which + "=" + std::to_string(v) + " outside " +
                       std::to_string(bits_) + "-bit signed range [" + std::to_string(min_operand()) + ", " +
                       std::to_string(max_operand()) + "] of multiplier '" + name_ + "'");
  }

  /// Human-readable behavioral description, e.g. "truncate(k=2)".
  std::string describe() const {
    switch (kind_) {
      case MulKind::exact: return "exact";
      case MulKind::truncate_lsb: return "truncate(k=" + std::to_string(param_) + ")";
      case MulKind::perforate_pp: return "perforate(r=" + std::to_string(param_) + ")";
      case MulKind::external: return "external(" + lut_path_.string() + ")";
    }
    return "?";
  }

 private:
  AxMultiplier(std::string name, int bits, MulKind kind, int param, HardwareCost cost)
      : name_(std::move(name)), bits_(bits), kind_(kind), param_(param), cost_(cost) {
    if (bits_ < kMinBits || bits_ > kMaxFunctionalBits)
      throw RangeError("multiplier '" + name_ + "': bitwidth " + std::to_string(bits_) + " outside [" +
                       std::to_string(kMinBits) + ", " + std::to_string(kMaxFunctionalBits) + "]");
    if (param_ < 0 || param_ >= bits_)
      throw RangeError("multiplier '" + name_ + "': parameter " + std::to_string(param_) +
                       " must satisfy 0 <= p < bitwidth (" + std::to_string(bits_) + ")");
    if (cost_.power_mw < 0 || cost_.area_um2 < 0 || cost_.delay_ns < 0)
      throw RangeError("multiplier '" + name_ + "': hardware costs must be non-negative");
    mask_ = ~((std::int32_t{1} << param_) - 1);
  }

  std::string name_;
  int bits_;
  MulKind kind_;
  int param_;
  HardwareCost cost_;
  std::int32_t mask_ = ~0;
  std::filesystem::path lut_path_;
  std::shared_ptr<const ProductLut> table_;
};

/// Immutable table of approximate products for every operand pair at one bitwidth.
///
/// Operand x is stored at index x + 2^(b-1); entries are row-major over
/// (encode(x), encode(y)).
class ProductLut {
 public:
  /// Takes ownership of a fully populated table. Used by build_lut and the file reader.
  static ProductLut from_entries(int bits, std::vector<std::int32_t> entries) {
    if (bits < kMinBits || bits > kMaxLutBits)
      throw RangeError("ProductLut: bitwidth " + std::to_string(bits) + " outside [" + std::to_string(kMinBits) +
                       ", " + std::to_string(kMaxLutBits) + "]");
    const std::size_t side = std::size_t{1} << bits;
    if (entries.size() != side * side)
      throw RangeError("ProductLut: expected " + std::to_string(side * side) + " entries, got " +
                       std::to_string(entries.size()));
    return ProductLut(bits, std::move(entries));
  }

  int bitwidth() const noexcept { return bits_; }
  std::size_t side() const noexcept { return side_; }
  std::int32_t offset() const noexcept { return offset_; }
  std::int32_t min_operand() const noexcept { return -offset_; }
  std::int32_t max_operand() const noexcept { return offset_ - 1; }
  const std::vector<std::int32_t>& entries() const noexcept { return entries_; }

  std::size_t encode(std::int32_t v) const noexcept { return static_cast<std::size_t>(v + offset_); }

  std::int32_t lookup(std::int32_t x, std::int32_t y) const {
    check(x, "x");
    check(y, "y");
    return entries_[encode(x) * side_ + encode(y)];
  }

  /// Row of products for a fixed left operand index.
  const std::int32_t* row(std::size_t ex) const noexcept { return entries_.data() + ex * side_; }

  void check(std::int32_t v, const char* which) const {
    if (v < min_operand() || v > max_operand())
      throw RangeError(std::string("LUT operand ") + which + "=" + std::to_string(v) + " outside " +
                       std::to_string(bits_) + "-bit signed range [" + std::to_string(min_operand()) + ", " +
                       std::to_string(max_operand()) + "]");
  }

 private:
  ProductLut(int bits, std::vector<std::int32_t> entries)
      : bits_(bits), side_(std::size_t{1} << bits), offset_(std::int32_t{1} << (bits - 1)),
        entries_(std::move(entries)) {}

  int bits_;
  std::size_t side_;
  std::int32_t offset_;
  std::vector<std::int32_t> entries_;
};

inline std::int32_t AxMultiplier::product_unchecked(std::int32_t x, std::int32_t y) const {
  switch (kind_) {
    case MulKind::exact: return x * y;
    case MulKind::truncate_lsb: return (x & mask_) * (y & mask_);
    case MulKind::perforate_pp: return x * (y & mask_);
    case MulKind::external: return table_->row(table_->encode(x))[table_->encode(y)];
  }
  return 0;
}

inline std::int32_t approx_product(const AxMultiplier& m, std::int32_t x, std::int32_t y) { return m(x, y); }

inline ProductLut build_lut(const AxMultiplier& m) {
  const int b = m.bitwidth();
  if (b > kMaxLutBits)
    throw RangeError("multiplier '" + m.name() + "': bitwidth " + std::to_string(b) + " exceeds the LUT cap of " +
                     std::to_string(kMaxLutBits) + " bits; use functional mode (direct approx_product) instead");
  if (m.kind() == MulKind::external) return *m.external_table();
  const std::size_t side = std::size_t{1} << b;
  std::vector<std::int32_t> entries(side * side);
  for (std::int32_t x = m.min_operand(); x <= m.max_operand(); ++x) {
    std::int32_t* row = entries.data() + static_cast<std::size_t>(x - m.min_operand()) * side;
    for (std::int32_t y = m.min_operand(); y <= m.max_operand(); ++y)
      row[y - m.min_operand()] = m.product_unchecked(x, y);
  }
  return ProductLut::from_entries(b, std::move(entries));
}

inline std::int32_t lut_lookup(const ProductLut& lut, std::int32_t x, std::int32_t y) { return lut.lookup(x, y); }

/// Exhaustive MAE / WCE / MRE in percent. MAE and WCE are normalized by the
/// largest exact product magnitude 2^(2b-2); MRE skips pairs whose exact product is 0.
inline ErrorMetrics error_metrics(const AxMultiplier& m) {
  const int b = m.bitwidth();
  if (b > kMaxLutBits)
    throw RangeError("error_metrics: bitwidth " + std::to_string(b) + " exceeds " + std::to_string(kMaxLutBits));
  long double sum_abs = 0.0L, sum_rel = 0.0L;
  std::int64_t worst = 0, nonzero = 0;
  for (std::int32_t x = m.min_operand(); x <= m.max_operand(); ++x)
    for (std::int32_t y = m.min_operand(); y <= m.max_operand(); ++y) {
      const std::int64_t exact = std::int64_t{x} * y;
      const std::int64_t err = std::abs(std::int64_t{m.product_unchecked(x, y)} - exact);
      sum_abs += static_cast<long double>(err);
      worst = std::max(worst, err);
      if (exact != 0) {
        sum_rel += static_cast<long double>(err) / static_cast<long double>(std::abs(exact));
        ++nonzero;
      }
    }
  const long double pairs = std::ldexp(1.0L, 2 * b);
  const long double norm = std::ldexp(1.0L, 2 * b - 2);
  ErrorMetrics out;
  out.mae_pct = static_cast<double>(sum_abs / pairs / norm * 100.0L);
  out.wce_pct = static_cast<double>(static_cast<long double>(worst) / norm * 100.0L);
  out.mre_pct = nonzero ? static_cast<double>(sum_rel / static_cast<long double>(nonzero) * 100.0L) : 0.0;
  return out;
}

// ---- AXLUT binary format -------------------------------------------------
// "AXLUT\0", version (u8 = 1), bitwidth (u8), signedness (u8, 1 = signed),
// then 2^(2b) little-endian int32 products, row-major by encode(x) then encode(y).

inline constexpr char kLutMagic[6] = {'A', 'X', 'L', 'U', 'T', '\0'};
inline constexpr std::uint8_t kLutVersion = 1;

inline void write_lut(std::ostream& os, const ProductLut& lut) {
  os.write(kLutMagic, sizeof kLutMagic);
  le::put_u8(os, kLutVersion);
  le::put_u8(os, static_cast<std::uint8_t>(lut.bitwidth()));
  le::put_u8(os, 1);
  for (std::int32_t v : lut.entries()) le::put_i32(os, v);
}

inline void write_lut(const std::filesystem::path& path, const ProductLut& lut) {
  write_file_atomic(path, [&](std::ostream& os) { write_lut(os, lut); });
}

inline ProductLut read_lut(std::istream& is) {
  char magic[6] = {};
  is.read(magic, sizeof magic);
  le::need(is, "LUT magic");
  if (!std::equal(std::begin(magic), std::end(magic), std::begin(kLutMagic)))
    throw ParseError("not an AXLUT file (bad magic)");
  const auto version = le::get_u8(is, "LUT version");
  if (version != kLutVersion) throw ParseError("unsupported AXLUT version " + std::to_string(version));
  const int bits = le::get_u8(is, "LUT bitwidth");
  const auto signedness = le::get_u8(is, "LUT signedness");
  if (signedness != 1) throw ParseError("only signed AXLUT tables are supported");
  if (bits < kMinBits || bits > kMaxLutBits)
    throw ParseError("AXLUT bitwidth " + std::to_string(bits) + " outside [2, 12]");
  const std::size_t n = std::size_t{1} << (2 * bits);
  std::vector<std::int32_t> entries(n);
  for (auto& v : entries) v = le::get_i32(is, "LUT entries");
  if (is.peek() != std::char_traits<char>::eof()) throw ParseError("trailing bytes after AXLUT payload");
  return ProductLut::from_entries(bits, std::move(entries));
}

inline ProductLut read_lut(const std::filesystem::path& path) {
  auto is = open_input(path);
  try {
    return read_lut(is);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

/// FNV-1a over the serialized little-endian payload.
inline std::uint64_t lut_checksum(const ProductLut& lut) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::int32_t v : lut.entries()) {
    const auto u = static_cast<std::uint32_t>(v);
    const unsigned char bytes[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                                    static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
    h = fnv1a(bytes, h);
  }
  return h;
}

inline AxMultiplier AxMultiplier::external(std::string name, std::shared_ptr<const ProductLut> lut,
                                           std::filesystem::path lut_path, HardwareCost cost) {
  if (!lut) throw StateError("external multiplier '" + name + "' requires a table");
  AxMultiplier m(std::move(name), lut->bitwidth(), MulKind::external, 0, cost);
  m.table_ = std::move(lut);
  m.lut_path_ = std::move(lut_path);
  return m;
}

inline AxMultiplier AxMultiplier::external(std::string name, const std::filesystem::path& lut_path,
                                           HardwareCost cost) {
  return external(std::move(name), std::make_shared<const ProductLut>(read_lut(lut_path)), lut_path, cost);
}

}  // namespace axvit
