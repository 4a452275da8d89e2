#pragma once

// Labeled grayscale image sets: IDX files on disk and a seeded synthetic task.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "axvit/common.hpp"

namespace axvit {

struct Dataset {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;  // size() * rows * cols, row-major per image
  std::vector<std::uint8_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::size_t image_size() const noexcept { return rows * cols; }

  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * image_size(), image_size());
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset d{rows, cols, {}, {}};
    d.pixels.reserve(indices.size() * image_size());
    d.labels.reserve(indices.size());
    for (std::size_t i : indices) {
      if (i >= size()) throw RangeError("Dataset::subset: index " + std::to_string(i) + " out of range");
      auto img = image(i);
      d.pixels.insert(d.pixels.end(), img.begin(), img.end());
      d.labels.push_back(labels[i]);
    }
    return d;
  }

  /// First `n` samples (all if n >= size()).
  Dataset head(std::size_t n) const {
    std::vector<std::size_t> idx(std::min(n, size()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return subset(idx);
  }

  void validate() const {
    if (pixels.size() != labels.size() * image_size()) throw ParseError("dataset: pixel count does not match labels");
  }
};

/// `count` distinct indices drawn without replacement from [0, n) by a seeded shuffle.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(count, n));
  return idx;
}

/// Seeded 10-class task: every class is a smooth random prototype image;
/// samples are prototype + Gaussian pixel noise.
struct SyntheticSpec {
  std::size_t count = 1000;
  std::size_t classes = 10;
  std::size_t side = 16;
  double contrast = 8.0;    // class prototype amplitude in grey levels
  double noise = 8.0;       // per-pixel noise sigma in grey levels
  double background = 70.0; // amplitude of a field shared by every class
  std::uint64_t task_seed = 7;  // fixes the prototypes
  std::uint64_t sample_seed = 1;
};

inline Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes == 0 || spec.classes > 256) throw RangeError("synthetic: classes must be in [1, 256]");
  const std::size_t n = spec.side * spec.side;
  std::vector<std::vector<double>> protos(spec.classes + 1, std::vector<double>(n));
  {
    std::mt19937_64 rng(spec.task_seed);
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& p : protos) {
      // Coarse 5x5 random field, bilinearly upsampled: spatial structure that
      // survives patch embedding. The last field is the shared background.
      const std::size_t grid = 5;
      std::vector<double> coarse(grid * grid);
      for (auto& v : coarse) v = g(rng);
      for (std::size_t r = 0; r < spec.side; ++r)
        for (std::size_t c = 0; c < spec.side; ++c) {
          const double fr = static_cast<double>(r) / static_cast<double>(spec.side - 1) * (grid - 1);
          const double fc = static_cast<double>(c) / static_cast<double>(spec.side - 1) * (grid - 1);
          const std::size_t r0 = std::min<std::size_t>(static_cast<std::size_t>(fr), grid - 2);
          const std::size_t c0 = std::min<std::size_t>(static_cast<std::size_t>(fc), grid - 2);
          const double tr = fr - r0, tc = fc - c0;
          p[r * spec.side + c] = (1 - tr) * (1 - tc) * coarse[r0 * grid + c0] + (1 - tr) * tc * coarse[r0 * grid + c0 + 1] +
                                 tr * (1 - tc) * coarse[(r0 + 1) * grid + c0] + tr * tc * coarse[(r0 + 1) * grid + c0 + 1];
        }
    }
  }
  Dataset d{spec.side, spec.side, {}, {}};
  d.pixels.resize(spec.count * n);
  d.labels.resize(spec.count);
  std::mt19937_64 rng(spec.sample_seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> cls(0, spec.classes - 1);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::size_t y = cls(rng);
    d.labels[i] = static_cast<std::uint8_t>(y);
    for (std::size_t p = 0; p < n; ++p) {
      const double v = 128.0 + spec.background * protos[spec.classes][p] + spec.contrast * protos[y][p] + spec.noise * g(rng);
      d.pixels[i * n + p] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return d;
}

// ---- IDX files ---------------------------------------------------------------
// Big-endian as in the original format: magic 0x00000803 (u8, 3 dims) for
// images, 0x00000801 (u8, 1 dim) for labels.

namespace idx_detail {

inline void put_be32(std::ostream& os, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) os.put(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_be32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw ParseError(what + ": truncated header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

}  // namespace idx_detail

inline void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels, const Dataset& d) {
  d.validate();
  write_file_atomic(images, [&](std::ostream& os) {
    idx_detail::put_be32(os, 0x00000803u);
    idx_detail::put_be32(os, static_cast<std::uint32_t>(d.size()));
    idx_detail::put_be32(os, static_cast<std::uint32_t>(d.rows));
    idx_detail::put_be32(os, static_cast<std::uint32_t>(d.cols));
    os.write(reinterpret_cast<const char*>(d.pixels.data()), static_cast<std::streamsize>(d.pixels.size()));
  });
  write_file_atomic(labels, [&](std::ostream& os) {
    idx_detail::put_be32(os, 0x00000801u);
    idx_detail::put_be32(os, static_cast<std::uint32_t>(d.size()));
    os.write(reinterpret_cast<const char*>(d.labels.data()), static_cast<std::streamsize>(d.labels.size()));
  });
}

inline Dataset read_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  Dataset d;
  {
    auto is = open_input(images);
    const std::string what = images.string();
    if (idx_detail::get_be32(is, what) != 0x00000803u) throw ParseError(what + ": bad IDX image magic");
    const auto n = idx_detail::get_be32(is, what);
    d.rows = idx_detail::get_be32(is, what);
    d.cols = idx_detail::get_be32(is, what);
    d.pixels.resize(std::size_t{n} * d.rows * d.cols);
    is.read(reinterpret_cast<char*>(d.pixels.data()), static_cast<std::streamsize>(d.pixels.size()));
    if (!is) throw ParseError(what + ": truncated pixel data");
  }
  {
    auto is = open_input(labels);
    const std::string what = labels.string();
    if (idx_detail::get_be32(is, what) != 0x00000801u) throw ParseError(what + ": bad IDX label magic");
    const auto n = idx_detail::get_be32(is, what);
    d.labels.resize(n);
    is.read(reinterpret_cast<char*>(d.labels.data()), static_cast<std::streamsize>(n));
    if (!is) throw ParseError(what + ": truncated label data");
  }
  if (d.pixels.size() != d.labels.size() * d.image_size())
    throw ParseError(images.string() + ": image count does not match " + labels.string());
  return d;
}

}  // namespace axvit
