#pragma once

// Integer matmul where every scalar product goes through a pluggable multiplier.

#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "axvit/axmul.hpp"
#include "axvit/quant.hpp"
#include "axvit/tensor.hpp"

namespace axvit {

/// Native integer multiply. Serves as the quantized reference path that an
/// exact LUT must reproduce bit for bit.
struct IntegerReference {
  int bitwidth = 8;
};

/// How the scalar products of a quantized matmul are computed: reference
/// integer multiply, table lookup, or the multiplier's behavioral function
/// (the fallback for widths above the LUT cap).
using MulBackend = std::variant<IntegerReference, std::shared_ptr<const ProductLut>, AxMultiplier>;

inline int backend_bitwidth(const MulBackend& b) {
  return std::visit(
      [](const auto& v) -> int {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, IntegerReference>)
          return v.bitwidth;
        else if constexpr (std::is_same_v<V, std::shared_ptr<const ProductLut>>)
          return v->bitwidth();
        else
          return v.bitwidth();
      },
      b);
}

/// LUT when the width allows it, behavioral function otherwise.
inline MulBackend make_backend(const AxMultiplier& m) {
  if (m.bitwidth() <= kMaxLutBits) return std::make_shared<const ProductLut>(build_lut(m));
  return m;
}

namespace detail {

inline void check_operands(const IntTensor& t, int bits, const char* which) {
  const std::int32_t hi = (std::int32_t{1} << (bits - 1)) - 1, lo = -hi - 1;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] < lo || t[i] > hi)
      throw RangeError(std::string("axx_matmul: operand ") + which + "[" + std::to_string(i) +
                       "]=" + std::to_string(t[i]) + " outside " + std::to_string(bits) + "-bit range");
}

}  // namespace detail

/// C[i][j] = sum_t mul(A[i][t], B[t][j]); products approximate, 32-bit accumulation exact.
inline IntTensor axx_matmul(const IntTensor& a, const IntTensor& b, const MulBackend& mul) {
  if (a.cols() != b.rows())
    throw RangeError("axx_matmul: shape mismatch " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const int bits = backend_bitwidth(mul);
  detail::check_operands(a, bits, "A");
  detail::check_operands(b, bits, "B");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  IntTensor c = IntTensor::matrix(m, n);

  if (const auto* lut = std::get_if<std::shared_ptr<const ProductLut>>(&mul)) {
    const ProductLut& table = **lut;
    std::vector<std::uint32_t> bidx(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) bidx[i] = static_cast<std::uint32_t>(table.encode(b[i]));
    for (std::size_t i = 0; i < m; ++i) {
      std::int32_t* crow = &c(i, 0);
      for (std::size_t t = 0; t < k; ++t) {
        const std::int32_t* prow = table.row(table.encode(a(i, t)));
        const std::uint32_t* brow = bidx.data() + t * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += prow[brow[j]];
      }
    }
  } else if (std::holds_alternative<IntegerReference>(mul)) {
    for (std::size_t i = 0; i < m; ++i) {
      std::int32_t* crow = &c(i, 0);
      for (std::size_t t = 0; t < k; ++t) {
        const std::int32_t av = a(i, t);
        const std::int32_t* brow = &b(t, 0);
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    const auto& fn = std::get<AxMultiplier>(mul);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t t = 0; t < k; ++t) {
        const std::int32_t av = a(i, t);
        for (std::size_t j = 0; j < n; ++j) c(i, j) += fn.product_unchecked(av, b(t, j));
      }
  }
  return c;
}

inline IntTensor axx_matmul(const IntTensor& a, const IntTensor& b, const ProductLut& lut) {
  // Non-owning alias; the table outlives the call.
  return axx_matmul(a, b, MulBackend{std::shared_ptr<const ProductLut>(std::shared_ptr<const ProductLut>{}, &lut)});
}

/// dequantize(axx_matmul(quantize(a), quantize(b))): the real-valued result
/// of multiplying two fake-quantized operands on the given multiplier.
inline RealTensor quantized_matmul(const RealTensor& a, const QuantParams& qa, const RealTensor& b,
                                   const QuantParams& qb, const MulBackend& mul) {
  const IntTensor acc = axx_matmul(quantize(a, qa), quantize(b, qb), mul);
  const double s = qa.scale * qb.scale;
  RealTensor out(acc.shape());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<double>(acc[i]) * s;
  return out;
}

}  // namespace axvit
