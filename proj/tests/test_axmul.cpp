#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "axvit/catalog.hpp"
#include "axvit/kernels.hpp"

using namespace axvit;

namespace {

// Floor-division truncation, written without bit masks.
std::int64_t trunc_oracle(std::int64_t v, int k) {
  const std::int64_t step = std::int64_t{1} << k;
  std::int64_t q = v / step;
  if (v % step != 0 && v < 0) --q;
  return q * step;
}

struct OracleMetrics {
  double mae, wce, mre;
};

OracleMetrics brute_force_trunc(int bits, int k) {
  const std::int64_t lo = -(std::int64_t{1} << (bits - 1)), hi = -lo - 1;
  long double sum = 0, rel = 0;
  std::int64_t worst = 0, nz = 0;
  for (std::int64_t x = lo; x <= hi; ++x)
    for (std::int64_t y = lo; y <= hi; ++y) {
      const std::int64_t e = std::llabs(trunc_oracle(x, k) * trunc_oracle(y, k) - x * y);
      sum += e;
      worst = std::max(worst, e);
      if (x * y != 0) {
        rel += static_cast<long double>(e) / std::llabs(x * y);
        ++nz;
      }
    }
  const long double pairs = static_cast<long double>((hi - lo + 1) * (hi - lo + 1));
  const long double norm = static_cast<long double>(hi + 1) * static_cast<long double>(hi + 1);
  return {static_cast<double>(sum / pairs / norm * 100), static_cast<double>(worst / norm * 100),
          static_cast<double>(rel / nz * 100)};
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("axvit_test_" + name);
}

}  // namespace

TEST(Multiplier, ExactLutHoldsEveryProduct) {
  const auto lut = build_lut(AxMultiplier::exact("e", 8));
  EXPECT_EQ(lut.entries().size(), 65536u);
  for (int x = -128; x < 128; ++x)
    for (int y = -128; y < 128; ++y) ASSERT_EQ(lut_lookup(lut, x, y), x * y);
}

TEST(Multiplier, TruncationMatchesFloorDivisionOracle) {
  for (int k = 0; k <= 4; ++k) {
    const auto m = AxMultiplier::truncate_lsb("t", 8, k);
    for (int x = -128; x < 128; ++x)
      for (int y = -128; y < 128; ++y) ASSERT_EQ(approx_product(m, x, y), trunc_oracle(x, k) * trunc_oracle(y, k));
  }
}

TEST(Multiplier, PerforationDropsLowMultiplierRows) {
  const auto m = AxMultiplier::perforate_pp("p", 8, 2);
  EXPECT_EQ(approx_product(m, 7, 7), 7 * 4);
  EXPECT_EQ(approx_product(m, 7, -1), 7 * -4);
  EXPECT_EQ(approx_product(m, -128, 3), 0);
}

TEST(Multiplier, OperandOutOfRangeNamesTheOperand) {
  const auto m = AxMultiplier::exact("e", 8);
  try {
    approx_product(m, 3, 128);
    FAIL();
  } catch (const RangeError& e) {
    EXPECT_NE(std::string(e.what()).find("y=128"), std::string::npos);
  }
  EXPECT_THROW(lut_lookup(build_lut(m), -129, 0), RangeError);
}

TEST(Multiplier, InvalidConstructionRejected) {
  EXPECT_THROW(AxMultiplier::exact("e", 1), RangeError);
  EXPECT_THROW(AxMultiplier::exact("e", 17), RangeError);
  EXPECT_THROW(AxMultiplier::truncate_lsb("t", 8, 8), RangeError);
  EXPECT_THROW(AxMultiplier::truncate_lsb("t", 8, -1), RangeError);
}

TEST(Multiplier, LutCapRefersToFunctionalMode) {
  const auto m = AxMultiplier::exact("e13", 13);
  try {
    build_lut(m);
    FAIL();
  } catch (const RangeError& e) {
    EXPECT_NE(std::string(e.what()).find("functional"), std::string::npos);
  }
  // The behavioral function still covers 16-bit operands.
  const auto w = AxMultiplier::truncate_lsb("t16", 16, 3);
  EXPECT_EQ(approx_product(w, 32767, -32768), trunc_oracle(32767, 3) * -32768);
}

TEST(Multiplier, LutAgreesWithFunctionForEveryPresetAndSmallWidths) {
  for (const auto& m : builtin_catalog()) {
    const auto lut = build_lut(m);
    for (int x = m.min_operand(); x <= m.max_operand(); ++x)
      for (int y = m.min_operand(); y <= m.max_operand(); ++y) ASSERT_EQ(lut_lookup(lut, x, y), approx_product(m, x, y));
  }
  for (int b = 2; b <= 6; ++b) {
    const auto m = AxMultiplier::perforate_pp("p", b, 1);
    const auto lut = build_lut(m);
    for (int x = m.min_operand(); x <= m.max_operand(); ++x)
      for (int y = m.min_operand(); y <= m.max_operand(); ++y) ASSERT_EQ(lut_lookup(lut, x, y), approx_product(m, x, y));
  }
}

TEST(LutFile, RoundTripPreservesEntriesAndChecksum) {
  const auto m = AxMultiplier::truncate_lsb("t", 8, 2);
  const auto lut = build_lut(m);
  const auto path = temp_path("trunc8k2.axlut");
  write_lut(path, lut);
  const auto back = read_lut(path);
  EXPECT_EQ(back.bitwidth(), 8);
  EXPECT_EQ(back.entries(), lut.entries());
  EXPECT_EQ(lut_checksum(back), lut_checksum(lut));
  EXPECT_EQ(std::filesystem::file_size(path), 9u + 4u * 65536u);
  const auto ext = AxMultiplier::external("ext", path);
  for (int x = -128; x < 128; x += 7)
    for (int y = -128; y < 128; ++y) ASSERT_EQ(approx_product(ext, x, y), approx_product(m, x, y));
  std::filesystem::remove(path);
}

TEST(LutFile, CorruptInputsRejected) {
  std::stringstream bad_magic("AXLUX\0", std::ios::in | std::ios::binary);
  EXPECT_THROW(read_lut(bad_magic), ParseError);

  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_lut(ss, build_lut(AxMultiplier::exact("e", 2)));
  std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 1), std::ios::in | std::ios::binary);
  EXPECT_THROW(read_lut(truncated), ParseError);
  std::stringstream trailing(bytes + "x", std::ios::in | std::ios::binary);
  EXPECT_THROW(read_lut(trailing), ParseError);
  EXPECT_THROW(read_lut(temp_path("does_not_exist.axlut")), IoError);
}

TEST(ErrorMetrics, ExactIsZero) {
  const auto e = error_metrics(AxMultiplier::exact("e", 8));
  EXPECT_EQ(e.mae_pct, 0.0);
  EXPECT_EQ(e.wce_pct, 0.0);
  EXPECT_EQ(e.mre_pct, 0.0);
}

TEST(ErrorMetrics, TruncationMatchesBruteForceAndGrowsWithK) {
  ErrorMetrics prev{};
  for (int k = 0; k <= 4; ++k) {
    const auto got = error_metrics(AxMultiplier::truncate_lsb("t", 8, k));
    const auto want = brute_force_trunc(8, k);
    // Integer error sums: exact. Relative errors: summation order differs.
    EXPECT_EQ(got.mae_pct, want.mae) << k;
    EXPECT_EQ(got.wce_pct, want.wce) << k;
    EXPECT_NEAR(got.mre_pct, want.mre, 1e-14 * want.mre) << k;
    EXPECT_GE(got.mae_pct, prev.mae_pct);
    EXPECT_GE(got.wce_pct, prev.wce_pct);
    EXPECT_GE(got.mre_pct, prev.mre_pct);
    prev = got;
  }
}

TEST(Catalog, BuiltinCarriesPublishedHardwareFigures) {
  const auto cat = builtin_catalog();
  ASSERT_EQ(cat.size(), 4u);
  EXPECT_EQ(cat.baseline().name(), "mul8s_1KV6");
  EXPECT_DOUBLE_EQ(cat.at("mul8s_1KV6").cost().power_mw, 0.425);
  EXPECT_DOUBLE_EQ(cat.at("mul8s_1KV9").cost().power_mw, 0.410);
  EXPECT_DOUBLE_EQ(cat.at("mul8s_1L2H").cost().power_mw, 0.301);
  EXPECT_DOUBLE_EQ(cat.at("mul8s_1L2L").cost().power_mw, 0.200);
  EXPECT_DOUBLE_EQ(cat.at("mul8s_1L2L").cost().area_um2, 411.6);
  EXPECT_DOUBLE_EQ(cat.at("mul8s_1L2H").cost().delay_ns, 1.36);
}

TEST(Catalog, TextRoundTrip) {
  std::stringstream ss;
  write_catalog(ss, builtin_catalog());
  const auto back = parse_catalog(ss);
  ASSERT_EQ(back.size(), 4u);
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].name(), builtin_catalog()[i].name());
    EXPECT_EQ(back[i].kind(), builtin_catalog()[i].kind());
    EXPECT_EQ(back[i].param(), builtin_catalog()[i].param());
    EXPECT_EQ(back[i].cost().power_mw, builtin_catalog()[i].cost().power_mw);
  }
}

TEST(Catalog, ParseErrorsCarryLineNumbers) {
  std::stringstream ss("# header\nexact8,8,exact,0,0.425,729.8,1.48\nbad,8,exact,0,0.4\n");
  try {
    parse_catalog(ss, "cat.csv");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("cat.csv:3"), std::string::npos) << e.what();
  }
  std::stringstream dup("a,8,exact,0,1,1,1\na,8,exact,0,1,1,1\n");
  EXPECT_THROW(parse_catalog(dup), ParseError);
  std::stringstream kind("a,8,magic,0,1,1,1\n");
  EXPECT_THROW(parse_catalog(kind), ParseError);
}

TEST(Catalog, ExternalEntriesResolveRelativeToCatalog) {
  const auto dir = temp_path("catdir");
  std::filesystem::create_directories(dir);
  write_lut(dir / "t.axlut", build_lut(AxMultiplier::truncate_lsb("t", 6, 1)));
  {
    std::ofstream os(dir / "cat.csv");
    os << "ex6,6,exact,0,1.0,1,1\next,6,external,t.axlut,0.5,1,1\n";
  }
  const auto cat = load_catalog(dir / "cat.csv");
  EXPECT_EQ(cat.at("ext").kind(), MulKind::external);
  EXPECT_EQ(approx_product(cat.at("ext"), 3, 3), 2 * 2);
  std::filesystem::remove_all(dir);
}

TEST(Catalog, SpecsResolve) {
  const auto cat = builtin_catalog();
  EXPECT_EQ(resolve_multiplier(cat, "mul8s_1L2H").param(), 2);
  EXPECT_EQ(resolve_multiplier(cat, "trunc8k3").kind(), MulKind::truncate_lsb);
  EXPECT_EQ(resolve_multiplier(cat, "perf10r2").bitwidth(), 10);
  EXPECT_EQ(resolve_multiplier(cat, "exact13").bitwidth(), 13);
  EXPECT_THROW(resolve_multiplier(cat, "nonsense"), RangeError);
}

TEST(Kernel, MatmulBackendsAgree) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> d(-128, 127);
  IntTensor a = IntTensor::matrix(7, 13), b = IntTensor::matrix(13, 5);
  for (auto& v : a.values()) v = d(rng);
  for (auto& v : b.values()) v = d(rng);
  const auto exact = AxMultiplier::exact("e", 8);
  const auto ref = axx_matmul(a, b, MulBackend{IntegerReference{8}});
  EXPECT_EQ(axx_matmul(a, b, make_backend(exact)), ref);
  EXPECT_EQ(axx_matmul(a, b, MulBackend{exact}), ref);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      std::int32_t s = 0;
      for (std::size_t t = 0; t < 13; ++t) s += a(i, t) * b(t, j);
      ASSERT_EQ(ref(i, j), s);
    }
  const auto tr = AxMultiplier::truncate_lsb("t", 8, 2);
  EXPECT_EQ(axx_matmul(a, b, make_backend(tr)), axx_matmul(a, b, MulBackend{tr}));
  const auto lut = build_lut(tr);
  EXPECT_EQ(axx_matmul(a, b, lut), axx_matmul(a, b, MulBackend{tr}));
}

TEST(Kernel, MatmulChecksShapesAndRanges) {
  IntTensor a = IntTensor::matrix(2, 3), b = IntTensor::matrix(2, 2);
  EXPECT_THROW(axx_matmul(a, b, MulBackend{IntegerReference{8}}), RangeError);
  IntTensor c = IntTensor::matrix(3, 1);
  a(1, 2) = 200;
  EXPECT_THROW(axx_matmul(a, c, MulBackend{IntegerReference{8}}), RangeError);
}
