#pragma once

// Symmetric per-tensor quantization (real = scale * q), histogram percentile
// calibration, and the straight-through gradient of fake quantization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "axvit/common.hpp"
#include "axvit/tensor.hpp"

namespace axvit {

/// Largest representable magnitude at `bits`: 2^(b-1) - 1 (the range is symmetric).
constexpr std::int32_t quant_max(int bits) noexcept { return (std::int32_t{1} << (bits - 1)) - 1; }

struct QuantParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;
  int bitwidth = 8;

  std::int32_t qmax() const noexcept { return quant_max(bitwidth); }
  double clip() const noexcept { return scale * qmax(); }

  static QuantParams from_clip(double clip, int bits) {
    if (bits < 2 || bits > 16) throw RangeError("quantization bitwidth " + std::to_string(bits) + " outside [2, 16]");
    if (!(clip > 0.0) || !std::isfinite(clip)) throw RangeError("clip value must be positive and finite");
    return QuantParams{clip / quant_max(bits), 0, bits};
  }

  void validate() const {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw StateError("quantization scale must be positive");
    if (zero_point != 0) throw StateError("only zero_point = 0 is supported");
    if (bitwidth < 2 || bitwidth > 16) throw StateError("quantization bitwidth outside [2, 16]");
  }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

/// Histogram of |values| over [0, observed_max], percentile clip selection.
///
/// When a batch raises the maximum, the range is stretched to the new maximum
/// and every old bin's mass is redistributed over the new bins in proportion
/// to their overlap.
class HistogramCalibrator {
 public:
  explicit HistogramCalibrator(std::size_t num_bins = 2048, double percentile = 99.9)
      : counts_(num_bins, 0.0), percentile_(percentile) {
    if (num_bins == 0) throw RangeError("calibrator needs at least one bin");
    if (!(percentile > 0.0 && percentile <= 100.0)) throw RangeError("percentile must lie in (0, 100]");
  }

  void observe(std::span<const double> values) {
    double batch_max = 0.0;
    for (double v : values) {
      if (!std::isfinite(v)) throw DataError("calibrator: non-finite value observed");
      batch_max = std::max(batch_max, std::abs(v));
    }
    if (values.empty()) return;
    if (batch_max > observed_max_) grow(batch_max);
    const std::size_t n = counts_.size();
    for (double v : values) {
      const double a = std::abs(v);
      std::size_t bin = 0;
      if (observed_max_ > 0.0) {
        bin = static_cast<std::size_t>(a / observed_max_ * static_cast<double>(n));
        if (bin >= n) bin = n - 1;
      }
      counts_[bin] += 1.0;
    }
    total_ += static_cast<double>(values.size());
  }

  void observe(const RealTensor& t) { observe(t.values()); }

  /// Smallest bin upper edge whose cumulative fraction reaches the percentile,
  /// capped at the exact observed maximum.
  double compute_clip() const {
    if (total_ <= 0.0) throw StateError("calibrator has observed no values");
    if (observed_max_ == 0.0) return 0.0;
    const double target = percentile_ / 100.0 * total_;
    const double width = bin_width();
    double cum = 0.0;
    for (std::size_t i = 0; i < counts_.size(); ++i) {
      cum += counts_[i];
      if (cum >= target * (1.0 - 1e-12)) return std::min(static_cast<double>(i + 1) * width, observed_max_);
    }
    return observed_max_;
  }

  /// Scale for a `bits`-wide symmetric grid. An all-zero tensor gets clip 1.
  QuantParams compute_scale(int bits) const {
    double clip = compute_clip();
    if (clip <= 0.0) clip = 1.0;
    return QuantParams::from_clip(clip, bits);
  }

  std::size_t num_bins() const noexcept { return counts_.size(); }
  double percentile() const noexcept { return percentile_; }
  double observed_max() const noexcept { return observed_max_; }
  double total() const noexcept { return total_; }
  const std::vector<double>& counts() const noexcept { return counts_; }
  double bin_width() const noexcept { return observed_max_ / static_cast<double>(counts_.size()); }

 private:
  void grow(double new_max) {
    if (total_ > 0.0 && observed_max_ > 0.0) {
      const std::size_t n = counts_.size();
      const double old_w = observed_max_ / static_cast<double>(n);
      const double new_w = new_max / static_cast<double>(n);
      std::vector<double> fresh(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        if (counts_[i] == 0.0) continue;
        const double lo = static_cast<double>(i) * old_w, hi = lo + old_w;
        std::size_t j = static_cast<std::size_t>(lo / new_w);
        for (; j < n; ++j) {
          const double blo = static_cast<double>(j) * new_w, bhi = blo + new_w;
          const double overlap = std::min(hi, bhi) - std::max(lo, blo);
          if (overlap > 0.0) fresh[j] += counts_[i] * overlap / old_w;
          if (bhi >= hi) break;
        }
      }
      counts_ = std::move(fresh);
    }
    // Mass observed while the maximum was 0 sits in bin 0, which stays valid.
    observed_max_ = new_max;
  }

  std::vector<double> counts_;
  double percentile_;
  double observed_max_ = 0.0;
  double total_ = 0.0;
};

/// round-half-away-from-zero then saturate to the symmetric range.
inline std::int32_t quantize(double x, const QuantParams& qp) {
  const double q = std::round(x / qp.scale);
  const double lim = qp.qmax();
  return static_cast<std::int32_t>(std::clamp(q, -lim, lim));
}

inline double dequantize(std::int32_t q, const QuantParams& qp) { return qp.scale * q; }

inline IntTensor quantize(const RealTensor& x, const QuantParams& qp) {
  IntTensor q(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) q[i] = quantize(x[i], qp);
  return q;
}

inline RealTensor dequantize(const IntTensor& q, const QuantParams& qp) {
  RealTensor r(q.shape());
  for (std::size_t i = 0; i < q.size(); ++i) r[i] = dequantize(q[i], qp);
  return r;
}

/// Gradient of fake quantization under the straight-through estimator: the
/// upstream gradient where |x| <= clip, zero elsewhere.
inline RealTensor fake_quant_ste_grad(const RealTensor& upstream, const RealTensor& x, const QuantParams& qp) {
  if (upstream.shape() != x.shape()) throw RangeError("fake_quant_ste_grad: shape mismatch");
  const double clip = qp.clip();
  RealTensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = std::abs(x[i]) <= clip ? upstream[i] : 0.0;
  return g;
}

/// Max calibration (percentile 100 with exact max tracking).
inline QuantParams max_scale(std::span<const double> values, int bits) {
  HistogramCalibrator cal(1, 100.0);
  cal.observe(values);
  return cal.compute_scale(bits);
}

}  // namespace axvit
