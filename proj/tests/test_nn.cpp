#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "axvit/checkpoint.hpp"
#include "axvit/nn.hpp"

using namespace axvit;

namespace {

RealTensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, sd);
  RealTensor t = RealTensor::matrix(r, c);
  for (auto& v : t.values()) v = g(rng);
  return t;
}

struct Fixture {
  ModelConfig cfg;
  VitModel model;
  Dataset data;
  MultiplierBank bank{builtin_catalog()};

  Fixture() {
    SyntheticSpec s;
    s.count = 48;
    data = make_synthetic(s);
    model = VitModel::create(cfg, 9);
    model.scales = calibrate(model, data);
  }
};

}  // namespace

TEST(Linear, FineQuantizationApproachesReal) {
  const RealTensor x = random_matrix(5, 8, 1), w = random_matrix(8, 3, 2);
  const RealTensor b({3}, 0.25);
  const RealTensor real = linear_apply(x, LinearParams{w, b}, nullptr, nullptr);
  const auto qx = max_scale(x.values(), 12), qw = max_scale(w.values(), 12);
  const RealTensor q = linear_forward(x, w, b, qx, qw, make_backend(AxMultiplier::exact("e", 12)));
  for (std::size_t i = 0; i < q.size(); ++i) EXPECT_NEAR(q[i], real[i], 1e-2);
}

TEST(Linear, FunctionalPathAboveLutCap) {
  const RealTensor x = random_matrix(3, 4, 3), w = random_matrix(4, 2, 4);
  const RealTensor b({2});
  const auto qx = max_scale(x.values(), 14), qw = max_scale(w.values(), 14);
  const auto mul = make_backend(AxMultiplier::exact("e14", 14));
  ASSERT_TRUE(std::holds_alternative<AxMultiplier>(mul));
  const RealTensor q = linear_forward(x, w, b, qx, qw, mul);
  const RealTensor ref = linear_forward(x, w, b, qx, qw, MulBackend{IntegerReference{14}});
  EXPECT_EQ(q, ref);
}

TEST(Attention, RowsOfProbabilitiesSumToOneAndShapesHold) {
  const RealTensor q = random_matrix(6, 4, 5), k = random_matrix(6, 4, 6), v = random_matrix(6, 4, 7);
  HeadTrace tr;
  const RealTensor out = attention_apply(q, k, v, 4, nullptr, nullptr, &tr);
  EXPECT_EQ(out.shape(), (std::vector<std::size_t>{6, 4}));
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) s += tr.probs(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_THROW(attention_apply(q, random_matrix(6, 3, 1), v, 4, nullptr, nullptr), RangeError);
}

TEST(Attention, QuantizedIsCloseToReal) {
  const RealTensor q = random_matrix(8, 8, 8), k = random_matrix(8, 8, 9), v = random_matrix(8, 8, 10);
  const int bits = 12;
  AttentionQuant aq{max_scale(q.values(), bits), max_scale(k.values(), bits), max_scale(v.values(), bits),
                    probs_quant(bits)};
  const RealTensor real = attention_apply(q, k, v, 8, nullptr, nullptr);
  const RealTensor quant = attention_forward(q, k, v, 8, aq, make_backend(AxMultiplier::exact("e", bits)));
  for (std::size_t i = 0; i < real.size(); ++i) EXPECT_NEAR(quant[i], real[i], 2e-2);
  EXPECT_DOUBLE_EQ(probs_quant(8).scale, 1.0 / 127.0);
}

TEST(MultiHead, HeadsUseDisjointColumnSlices) {
  MhsaParams p;
  std::uint64_t seed = 30;
  for (auto* l : {&p.q_proj, &p.k_proj, &p.v_proj, &p.out_proj}) *l = LinearParams{random_matrix(8, 8, seed++), RealTensor({8})};
  const RealTensor x = random_matrix(5, 8, 99);
  MhsaTrace tr;
  const RealTensor out = multi_head_apply(x, p, 2, nullptr, nullptr, &tr);
  // Oracle: head 1 computed from column slice [4, 8) alone.
  const RealTensor q = ops::matmul(x, p.q_proj.weight), k = ops::matmul(x, p.k_proj.weight), v = ops::matmul(x, p.v_proj.weight);
  const RealTensor h1 = attention_apply(ops::slice_cols(q, 4, 4), ops::slice_cols(k, 4, 4), ops::slice_cols(v, 4, 4), 4,
                                        nullptr, nullptr);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(tr.concat(i, 4 + j), h1(i, j));
  EXPECT_EQ(out.shape(), x.shape());
  EXPECT_THROW(multi_head_apply(x, p, 3, nullptr, nullptr), RangeError);
}

TEST(Ffn, MatchesHandComputation) {
  FfnParams p{LinearParams{RealTensor({1, 2}, std::vector<double>{1.0, -2.0}), RealTensor({2}, 0.5)},
              LinearParams{RealTensor({2, 1}, std::vector<double>{3.0, 1.0}), RealTensor({1}, 0.0)}};
  const RealTensor x({1, 1}, std::vector<double>{0.7});
  const RealTensor y = ffn_apply(x, p, nullptr, nullptr);
  EXPECT_NEAR(y[0], 3.0 * gelu(1.2) + gelu(-0.9), 1e-12);
  EXPECT_NEAR(gelu(0.0), 0.0, 1e-15);
  EXPECT_NEAR(gelu(10.0), 10.0, 1e-9);
}

TEST(Gelu, DerivativeMatchesFiniteDifference) {
  for (double x = -4.0; x <= 4.0; x += 0.37) {
    const double h = 1e-6;
    EXPECT_NEAR(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), 1e-8);
  }
}

TEST(Config, ParseAndPrint) {
  const auto c = AxxConfig::parse("a|b, c");
  EXPECT_EQ(c.assignment, (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(c.to_string(), "a|b|c");
  EXPECT_THROW(AxxConfig::parse("a||b"), ParseError);
  ModelConfig bad;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), RangeError);
  bad = ModelConfig{};
  bad.patch_dim = 15;
  EXPECT_THROW(bad.validate(), RangeError);
}

TEST(Model, ExactLutForwardIsBitIdenticalToIntegerReference) {
  Fixture f;
  const MulBackend ref{IntegerReference{8}};
  const LayerMultipliers ref_muls(f.cfg.layers, &ref);
  const LayerMultipliers lut_muls = f.bank.resolve(AxxConfig::uniform("mul8s_1KV6", f.cfg.layers), f.cfg.layers);
  for (std::size_t i = 0; i < f.data.size(); ++i) {
    const RealTensor p = patchify(f.data, i, f.cfg);
    ASSERT_EQ(vit_forward(f.model, p, lut_muls), vit_forward(f.model, p, ref_muls)) << i;
  }
}

TEST(Model, ApproximationChangesLogits) {
  Fixture f;
  const RealTensor p = patchify(f.data, 0, f.cfg);
  const auto exact = vit_forward(f.model, p, AxxConfig::uniform("mul8s_1KV6", 2), f.bank);
  const auto approx = vit_forward(f.model, p, AxxConfig::uniform("mul8s_1L2L", 2), f.bank);
  EXPECT_NE(exact, approx);
  EXPECT_TRUE(ops::all_finite(approx));
}

TEST(Model, ForwardGuards) {
  Fixture f;
  const RealTensor p = patchify(f.data, 0, f.cfg);
  EXPECT_THROW(vit_forward(f.model, p, AxxConfig::uniform("mul8s_1KV6", 3), f.bank), RangeError);
  EXPECT_THROW(vit_forward(f.model, p, AxxConfig::uniform("nope", 2), f.bank), RangeError);
  VitModel raw = VitModel::create(f.cfg, 1);
  EXPECT_THROW(vit_forward(raw, p, AxxConfig::uniform("mul8s_1KV6", 2), f.bank), StateError);
  const MulBackend wide{IntegerReference{10}};
  EXPECT_THROW(vit_forward(f.model, p, LayerMultipliers{&wide, &wide}), StateError);
  EXPECT_THROW(vit_forward(f.model, random_matrix(3, 3, 1), LayerMultipliers{}), RangeError);
  Dataset empty{16, 16, {}, {}};
  EXPECT_THROW(evaluate_accuracy(f.model, empty, LayerMultipliers{}), DataError);
}

TEST(Model, PatchifyLayout) {
  Dataset d{16, 16, std::vector<std::uint8_t>(256), {0}};
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) d.pixels[r * 16 + c] = static_cast<std::uint8_t>(r * 16 + c);
  const RealTensor p = patchify(d, 0, ModelConfig{});
  // Patch 5 is grid (1, 1): rows 4..7, cols 4..7. Element 6 is (row 1, col 2) inside it.
  EXPECT_DOUBLE_EQ(p(5, 6), (5 * 16 + 6) / 127.5 - 1.0);
  EXPECT_DOUBLE_EQ(p(0, 0), -1.0);
}

TEST(Calibration, DeterministicPositiveAndComplete) {
  Fixture f;
  const ScaleMap again = calibrate(f.model, f.data);
  EXPECT_EQ(again, f.model.scales);
  EXPECT_EQ(f.model.scales.size(), f.cfg.layers * 15u);
  for (const auto& [k, s] : f.model.scales.entries()) EXPECT_GT(s, 0.0) << k.first << "/" << k.second;
  CalibrationOptions full;
  full.percentile = 100.0;
  const ScaleMap mx = calibrate(f.model, f.data, full);
  for (const auto& [k, s] : f.model.scales.entries()) EXPECT_GE(mx.get(k.first, k.second).scale, s * (1 - 1e-12));
}

TEST(Checkpoint, RoundTripAndFloat32Storage) {
  Fixture f;
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_checkpoint(ss, f.model);
  const VitModel back = read_checkpoint(ss);
  EXPECT_EQ(back.config, f.model.config);
  EXPECT_EQ(back.scales, f.model.scales);
  const auto a = f.model.named_parameters();
  const auto b = back.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    for (std::size_t j = 0; j < a[i].second->size(); ++j)
      ASSERT_EQ((*b[i].second)[j], static_cast<double>(static_cast<float>((*a[i].second)[j])));
  }
  // A float32-exact model survives byte for byte.
  std::stringstream s2(std::ios::in | std::ios::out | std::ios::binary);
  write_checkpoint(s2, back);
  EXPECT_EQ(s2.str(), [&] {
    std::stringstream s3(std::ios::in | std::ios::out | std::ios::binary);
    write_checkpoint(s3, read_checkpoint(s2));
    return s3.str();
  }());
}

TEST(Checkpoint, CorruptionDetected) {
  Fixture f;
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_checkpoint(ss, f.model);
  const std::string bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() / 2), std::ios::in | std::ios::binary);
  EXPECT_THROW(read_checkpoint(cut), ParseError);
  std::string bad = bytes;
  bad[0] = 'Z';
  std::stringstream magic(bad, std::ios::in | std::ios::binary);
  EXPECT_THROW(read_checkpoint(magic), ParseError);
}

TEST(ScaleMapText, RoundTripAndErrors) {
  Fixture f;
  std::stringstream ss;
  write_scale_map(ss, f.model.scales);
  EXPECT_EQ(parse_scale_map(ss), f.model.scales);
  std::stringstream bad("# bitwidth 8\nlayer role notanumber\n");
  try {
    parse_scale_map(bad, "s.txt");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("s.txt:2"), std::string::npos);
  }
  std::stringstream nohdr("a b 1.0\n");
  EXPECT_THROW(parse_scale_map(nohdr), ParseError);
}

TEST(Data, IdxRoundTripAndSyntheticDeterminism) {
  SyntheticSpec s;
  s.count = 20;
  const Dataset a = make_synthetic(s), b = make_synthetic(s);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  const auto dir = std::filesystem::temp_directory_path();
  write_idx(dir / "axvit_t-images.idx", dir / "axvit_t-labels.idx", a);
  const Dataset c = read_idx(dir / "axvit_t-images.idx", dir / "axvit_t-labels.idx");
  EXPECT_EQ(c.pixels, a.pixels);
  EXPECT_EQ(c.labels, a.labels);
  EXPECT_EQ(c.rows, 16u);
  std::filesystem::remove(dir / "axvit_t-images.idx");
  std::filesystem::remove(dir / "axvit_t-labels.idx");
}

TEST(Macs, ProfileArithmetic) {
  const auto p = mac_profile(ModelConfig{});
  ASSERT_EQ(p.block_macs.size(), 2u);
  EXPECT_EQ(p.block_macs[0], 4u * 16 * 32 * 32 + 2u * 16 * 16 * 32 + 2u * 16 * 32 * 64);
  EXPECT_EQ(p.exact_macs, 16u * 16 * 32 + 32u * 10);
}
