#pragma once

#include <filesystem>
#include <istream>
#include <optional>
#include <ostream>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "axvit/axmul.hpp"

namespace axvit {

/// An ordered set of uniquely named multipliers. Index order is the action
/// order used by the search (and its tie-breaking).
class Catalog {
 public:
  Catalog() = default;
  explicit Catalog(std::vector<AxMultiplier> entries) {
    for (auto& m : entries) add(std::move(m));
  }

  void add(AxMultiplier m) {
    if (find(m.name())) throw ParseError("duplicate multiplier name '" + m.name() + "' in catalog");
    entries_.push_back(std::move(m));
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const AxMultiplier& operator[](std::size_t i) const { return entries_.at(i); }
  const std::vector<AxMultiplier>& entries() const noexcept { return entries_; }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name() == name) return i;
    return std::nullopt;
  }

  std::size_t index_of(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw RangeError("unknown multiplier '" + std::string(name) + "'");
  }

  const AxMultiplier& at(std::string_view name) const { return entries_[index_of(name)]; }

  /// Reference multiplier for power normalization: the first exact entry.
  const AxMultiplier& baseline() const {
    for (const auto& m : entries_)
      if (m.kind() == MulKind::exact) return m;
    throw StateError("catalog has no exact multiplier to serve as power baseline");
  }

  /// Catalog restricted to the named entries, in the given order.
  Catalog subset(const std::vector<std::string>& names) const {
    Catalog c;
    for (const auto& n : names) c.add(at(n));
    return c;
  }

 private:
  std::vector<AxMultiplier> entries_;
};

/// Four 8-bit presets carrying the published hardware figures of the
/// EvoApprox circuits they stand in for.
inline Catalog builtin_catalog() {
  return Catalog({
      AxMultiplier::exact("mul8s_1KV6", 8, {0.425, 729.8, 1.48}),
      AxMultiplier::truncate_lsb("mul8s_1KV9", 8, 1, {0.410, 685.2, 1.47}),
      AxMultiplier::truncate_lsb("mul8s_1L2H", 8, 2, {0.301, 558.8, 1.36}),
      AxMultiplier::truncate_lsb("mul8s_1L2L", 8, 3, {0.200, 411.6, 1.14}),
  });
}

/// Parses compact specs: "exact<b>", "trunc<b>k<k>", "perf<b>r<r>".
inline std::optional<AxMultiplier> parse_multiplier_spec(const std::string& spec) {
  static const std::regex exact_re(R"(exact(\d+))");
  static const std::regex trunc_re(R"(trunc(\d+)k(\d+))");
  static const std::regex perf_re(R"(perf(\d+)r(\d+))");
  std::smatch m;
  if (std::regex_match(spec, m, exact_re)) return AxMultiplier::exact(spec, std::stoi(m[1]));
  if (std::regex_match(spec, m, trunc_re)) return AxMultiplier::truncate_lsb(spec, std::stoi(m[1]), std::stoi(m[2]));
  if (std::regex_match(spec, m, perf_re)) return AxMultiplier::perforate_pp(spec, std::stoi(m[1]), std::stoi(m[2]));
  return std::nullopt;
}

// ---- catalog text format ---------------------------------------------------
// One multiplier per line, comma separated, '#' starts a comment:
//   name,bitwidth,kind,param,power_mw,area_um2,delay_ns
// kind is exact|truncate|perforate|external; param is k, r, 0 or (external)
// a LUT path relative to the catalog file.

inline constexpr const char* kCatalogHeader = "# name,bitwidth,kind,param,power_mw,area_um2,delay_ns";

inline Catalog parse_catalog(std::istream& is, const std::string& source = "<catalog>",
                             const std::filesystem::path& base_dir = {}) {
  Catalog cat;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    auto f = split(line, ',');
    if (f.size() != 7)
      throw ParseError(where + ": expected 7 comma-separated fields, got " + std::to_string(f.size()));
    for (auto& s : f) s = trim(s);
    try {
      const std::string& name = f[0];
      if (name.empty()) throw ParseError("empty multiplier name");
      const int bits = static_cast<int>(parse_int(f[1], "bitwidth"));
      const HardwareCost cost{parse_real(f[4], "power_mw"), parse_real(f[5], "area_um2"),
                              parse_real(f[6], "delay_ns")};
      const std::string& kind = f[2];
      if (kind == "exact") {
        cat.add(AxMultiplier::exact(name, bits, cost));
      } else if (kind == "truncate") {
        cat.add(AxMultiplier::truncate_lsb(name, bits, static_cast<int>(parse_int(f[3], "k")), cost));
      } else if (kind == "perforate") {
        cat.add(AxMultiplier::perforate_pp(name, bits, static_cast<int>(parse_int(f[3], "r")), cost));
      } else if (kind == "external") {
        std::filesystem::path p = f[3];
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        auto m = AxMultiplier::external(name, p, cost);
        if (m.bitwidth() != bits)
          throw ParseError("table bitwidth " + std::to_string(m.bitwidth()) + " != declared " + std::to_string(bits));
        cat.add(std::move(m));
      } else {
        throw ParseError("unknown kind '" + kind + "' (expected exact|truncate|perforate|external)");
      }
    } catch (const std::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  if (cat.empty()) throw ParseError(source + ": catalog lists no multipliers");
  return cat;
}

inline Catalog load_catalog(const std::filesystem::path& path) {
  auto is = open_input(path, false);
  return parse_catalog(is, path.string(), path.parent_path());
}

inline void write_catalog(std::ostream& os, const Catalog& cat) {
  os << kCatalogHeader << "\n";
  for (const auto& m : cat) {
    os << m.name() << "," << m.bitwidth() << "," << to_string(m.kind()) << ",";
    if (m.kind() == MulKind::external)
      os << m.lut_path().string();
    else
      os << m.param();
    os << "," << format_real(m.cost().power_mw) << "," << format_real(m.cost().area_um2) << ","
       << format_real(m.cost().delay_ns) << "\n";
  }
}

/// Resolves a catalog name first, then a compact spec.
inline AxMultiplier resolve_multiplier(const Catalog& cat, const std::string& name_or_spec) {
  if (auto i = cat.find(name_or_spec)) return cat[*i];
  if (auto m = parse_multiplier_spec(name_or_spec)) return *m;
  throw RangeError("'" + name_or_spec + "' is neither a catalog multiplier nor a spec like exact8 / trunc8k2 / perf8r1");
}

// ---- error table ---------------------------------------------------------------
//   multiplier,bitwidth,mae_pct,wce_pct,mre_pct,power_mw,area_um2,delay_ns

struct ErrorRow {
  std::string multiplier;
  int bitwidth = 0;
  ErrorMetrics metrics;
  HardwareCost cost;
};

inline constexpr const char* kErrorColumns = "multiplier,bitwidth,mae_pct,wce_pct,mre_pct,power_mw,area_um2,delay_ns";

inline std::vector<ErrorRow> error_table(const Catalog& cat) {
  std::vector<ErrorRow> rows;
  for (const auto& m : cat) rows.push_back({m.name(), m.bitwidth(), error_metrics(m), m.cost()});
  return rows;
}

inline void write_error_table(std::ostream& os, const std::vector<ErrorRow>& rows) {
  os << kErrorColumns << "\n";
  for (const auto& r : rows)
    os << r.multiplier << "," << r.bitwidth << "," << format_real(r.metrics.mae_pct) << ","
       << format_real(r.metrics.wce_pct) << "," << format_real(r.metrics.mre_pct) << "," << format_real(r.cost.power_mw)
       << "," << format_real(r.cost.area_um2) << "," << format_real(r.cost.delay_ns) << "\n";
}

inline std::vector<ErrorRow> parse_error_table(std::istream& is, const std::string& source = "<errors>") {
  std::vector<ErrorRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s == kErrorColumns) continue;
    const auto f = split(s, ',');
    const std::string where = source + ":" + std::to_string(lineno);
    if (f.size() != 8) throw ParseError(where + ": expected 8 fields, got " + std::to_string(f.size()));
    try {
      rows.push_back({f[0], static_cast<int>(parse_int(f[1], "bitwidth")),
                      {parse_real(f[2], "mae_pct"), parse_real(f[3], "wce_pct"), parse_real(f[4], "mre_pct")},
                      {parse_real(f[5], "power_mw"), parse_real(f[6], "area_um2"), parse_real(f[7], "delay_ns")}});
    } catch (const std::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  return rows;
}

}  // namespace axvit
