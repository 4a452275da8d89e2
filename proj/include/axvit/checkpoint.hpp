#pragma once

// Model checkpoints (binary) and scale maps (text).
//
// Checkpoint layout, all integers little-endian u32 unless noted:
//   magic "AXVITCK\0" (8 bytes), version
//   config: layers, embed_dim, heads, ffn_dim, patches, classes, patch_dim
//   tensor count, then per tensor: name (u32 length + bytes), rank, dims,
//     float32 values
//   scale bitwidth, scale count, then per scale: layer, role, float64 scale

#include <filesystem>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "axvit/nn.hpp"

namespace axvit {

inline constexpr char kCheckpointMagic[8] = {'A', 'X', 'V', 'I', 'T', 'C', 'K', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const VitModel& m) {
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  le::put_u32(os, kCheckpointVersion);
  const auto& c = m.config;
  for (std::size_t v : {c.layers, c.embed_dim, c.heads, c.ffn_dim, c.patches, c.classes, c.patch_dim})
    le::put_u32(os, static_cast<std::uint32_t>(v));
  const auto params = m.named_parameters();
  le::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    le::put_string(os, name);
    le::put_u32(os, static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) le::put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : t->values()) le::put_f32(os, static_cast<float>(v));
  }
  le::put_u32(os, static_cast<std::uint32_t>(m.scales.bitwidth));
  le::put_u32(os, static_cast<std::uint32_t>(m.scales.size()));
  for (const auto& [key, s] : m.scales.entries()) {
    le::put_string(os, key.first);
    le::put_string(os, key.second);
    le::put_f64(os, s);
  }
}

inline VitModel read_checkpoint(std::istream& is) {
  char magic[8] = {};
  is.read(magic, sizeof magic);
  le::need(is, "checkpoint magic");
  if (!std::equal(std::begin(magic), std::end(magic), std::begin(kCheckpointMagic)))
    throw ParseError("not a model checkpoint (bad magic)");
  if (auto v = le::get_u32(is, "checkpoint version"); v != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(v));
  ModelConfig c;
  for (std::size_t* f : {&c.layers, &c.embed_dim, &c.heads, &c.ffn_dim, &c.patches, &c.classes, &c.patch_dim})
    *f = le::get_u32(is, "checkpoint config");
  c.validate();
  VitModel m = VitModel::create(c, 0);
  auto params = m.named_parameters();
  const auto count = le::get_u32(is, "tensor count");
  if (count != params.size())
    throw ParseError("checkpoint has " + std::to_string(count) + " tensors, config implies " + std::to_string(params.size()));
  for (auto& [name, t] : params) {
    const auto got = le::get_string(is, "tensor name");
    if (got != name) throw ParseError("checkpoint tensor '" + got + "' where '" + name + "' was expected");
    const auto rank = le::get_u32(is, "tensor rank");
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = le::get_u32(is, "tensor dims");
    if (shape != t->shape())
      throw ParseError("tensor '" + name + "' has shape " + shape_string(shape) + ", expected " + shape_string(t->shape()));
    for (auto& v : t->values()) v = static_cast<double>(le::get_f32(is, "tensor values"));
  }
  m.scales.bitwidth = static_cast<int>(le::get_u32(is, "scale bitwidth"));
  const auto nscales = le::get_u32(is, "scale count");
  for (std::uint32_t i = 0; i < nscales; ++i) {
    auto layer = le::get_string(is, "scale layer");
    auto role = le::get_string(is, "scale role");
    m.scales.set(layer, role, le::get_f64(is, "scale value"));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw ParseError("trailing bytes after checkpoint");
  return m;
}

inline void save_checkpoint(const std::filesystem::path& path, const VitModel& m) {
  write_file_atomic(path, [&](std::ostream& os) { write_checkpoint(os, m); });
}

inline VitModel load_checkpoint(const std::filesystem::path& path) {
  auto is = open_input(path);
  try {
    return read_checkpoint(is);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// ---- scale map text ------------------------------------------------------------
//   # bitwidth 8
//   blocks.0.attn.q_proj input 0.0123...
// One "layer role scale" triple per line.

inline void write_scale_map(std::ostream& os, const ScaleMap& s) {
  os << "# bitwidth " << s.bitwidth << "\n";
  for (const auto& [key, v] : s.entries()) os << key.first << " " << key.second << " " << format_real(v) << "\n";
}

inline ScaleMap parse_scale_map(std::istream& is, const std::string& source = "<scales>") {
  ScaleMap s;
  std::string line;
  int lineno = 0;
  bool have_bits = false;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      std::istringstream hs(t.substr(1));
      std::string word;
      int bits = 0;
      if (hs >> word >> bits && word == "bitwidth") {
        s.bitwidth = bits;
        have_bits = true;
      }
      continue;
    }
    std::istringstream ls(t);
    std::string layer, role, value, extra;
    if (!(ls >> layer >> role >> value) || (ls >> extra))
      throw ParseError(where + ": expected 'layer role scale'");
    try {
      s.set(layer, role, parse_real(value, "scale"));
    } catch (const std::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  if (!have_bits) throw ParseError(source + ": missing '# bitwidth N' header");
  return s;
}

inline void save_scale_map(const std::filesystem::path& path, const ScaleMap& s) {
  write_file_atomic(path, [&](std::ostream& os) { write_scale_map(os, s); }, false);
}

inline ScaleMap load_scale_map(const std::filesystem::path& path) {
  auto is = open_input(path, false);
  return parse_scale_map(is, path.string());
}

}  // namespace axvit
