#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "axvit/dse.hpp"

using namespace axvit;

namespace {

// A share `f` of all MACs on one multiplier, the rest on the baseline.
double reduction_pct(double f, double power_mw) {
  MacProfile macs;
  macs.block_macs = {static_cast<std::uint64_t>(std::llround(f * 10000))};
  macs.exact_macs = 10000 - macs.block_macs[0];
  return 100.0 * power_reduction(normalized_power({power_mw}, macs, 0.425));
}

// Separable synthetic problem: accuracy is a product of per-layer factors.
SearchProblem separable_problem(std::size_t layers, const std::vector<double>& factor, const std::vector<double>& power) {
  SearchProblem p;
  p.layers = layers;
  for (std::size_t j = 0; j < factor.size(); ++j) p.actions.push_back("m" + std::to_string(j));
  p.accuracy = [=](const std::vector<std::size_t>& a) {
    double acc = 1.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc *= std::pow(factor[a[i]], 1.0 + static_cast<double>(i % 2));
    return acc;
  };
  p.power = [=](const std::vector<std::size_t>& a) {
    double s = 0.0;
    for (auto j : a) s += power[j];
    return s / static_cast<double>(a.size());
  };
  return p;
}

SensitivityTable separable_sensitivity(const SearchProblem& p) {
  SensitivityTable t;
  t.layers = p.layers;
  t.multipliers = p.actions;
  for (std::size_t j = 0; j < p.actions.size(); ++j) {
    std::vector<double> s, pw;
    for (std::size_t i = 0; i < p.layers; ++i) {
      std::vector<std::size_t> a(p.layers, 0);
      a[i] = j;
      s.push_back(p.accuracy(a) / p.accuracy(std::vector<std::size_t>(p.layers, 0)));
      pw.push_back(p.power(a));
    }
    t.s.push_back(s);
    t.p.push_back(pw);
  }
  return t;
}

std::vector<SearchPoint> brute_force_front(const std::vector<SearchPoint>& pts) {
  std::vector<SearchPoint> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    bool dominated = false, duplicate = false;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      const auto &a = pts[j], &b = pts[i];
      if (a.predicted_accuracy >= b.predicted_accuracy && a.normalized_power <= b.normalized_power &&
          (a.predicted_accuracy > b.predicted_accuracy || a.normalized_power < b.normalized_power))
        dominated = true;
      if (j < i && a.predicted_accuracy == b.predicted_accuracy && a.normalized_power == b.normalized_power)
        duplicate = true;
    }
    if (!dominated && !duplicate) out.push_back(pts[i]);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const SearchPoint& a, const SearchPoint& b) { return a.normalized_power < b.normalized_power; });
  return out;
}

SearchPoint pt(double acc, double pw, const std::string& name = "x") {
  return SearchPoint{AxxConfig{{name}}, acc, pw, acc - pw};
}

}  // namespace

TEST(Power, ReductionForMacShares) {
  EXPECT_NEAR(reduction_pct(0.9854, 0.301), 28.75, 0.1);
  EXPECT_NEAR(reduction_pct(0.9854, 0.200), 52.18, 0.1);
  EXPECT_NEAR(reduction_pct(0.997, 0.410), 3.52, 0.1);
  EXPECT_NEAR(reduction_pct(0.755, 0.200), 39.98, 0.1);
  EXPECT_NEAR(reduction_pct(0.755, 0.301), 22.03, 0.1);
}

TEST(Power, ConfigOnModel) {
  const auto cat = builtin_catalog();
  const auto macs = mac_profile(ModelConfig{});
  EXPECT_DOUBLE_EQ(power_of_config(AxxConfig::uniform("mul8s_1KV6", 2), macs, cat), 1.0);
  const double p = power_of_config(AxxConfig{{"mul8s_1L2L", "mul8s_1KV6"}}, macs, cat);
  const double want = (macs.block_macs[0] * 0.200 + (macs.block_macs[1] + macs.exact_macs) * 0.425) /
                      (static_cast<double>(macs.total()) * 0.425);
  EXPECT_DOUBLE_EQ(p, want);
  EXPECT_THROW(power_of_config(AxxConfig{{"nope", "mul8s_1KV6"}}, macs, cat), RangeError);
  EXPECT_THROW(power_of_config(AxxConfig{{"mul8s_1KV6"}}, macs, cat), RangeError);
}

TEST(Ucb, ValuesAndSentinel) {
  EXPECT_NEAR(ucb_score(0.5, std::sqrt(2.0), 100, 10), 1.4598, 1e-3);
  EXPECT_TRUE(std::isinf(ucb_score(0.5, 1.0, 10, 0)));
  EXPECT_DOUBLE_EQ(ucb_score(0.3, 0.0, 50, 7), 0.3);
}

TEST(Policy, SoftmaxValues) {
  const auto p = rollout_policy_probs({1.0, 0.8}, {1.0, 0.5}, 1.0);
  EXPECT_NEAR(p[0], 0.4256, 1e-3);
  EXPECT_NEAR(p[1], 0.5744, 1e-3);
  const auto eq = rollout_policy_probs({0.7, 0.7}, {0.4, 0.4}, 2.0);
  EXPECT_DOUBLE_EQ(eq[0], 0.5);
  const auto r = rollout_policy_probs({0.2, 0.9, 0.5}, {1.0, 0.1, 0.4}, 0.0);
  EXPECT_GT(r[1], r[2]);
  EXPECT_GT(r[2], r[0]);
  EXPECT_NEAR(r[0] + r[1] + r[2], 1.0, 1e-9);
  EXPECT_THROW(rollout_policy_probs({}, {}, 1.0), RangeError);
}

TEST(Pareto, SmallExamples) {
  EXPECT_TRUE(pareto_front({}).empty());
  EXPECT_EQ(pareto_front({pt(0.5, 0.5)}).size(), 1u);
  const auto f = pareto_front({pt(0.7, 0.5, "a"), pt(0.6, 0.6, "b"), pt(0.8, 0.9, "c")});
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f[0].config.assignment[0], "a");
  EXPECT_EQ(f[1].config.assignment[0], "c");
  const auto d = pareto_front({pt(0.7, 0.5, "first"), pt(0.7, 0.5, "second")});
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].config.assignment[0], "first");
}

TEST(Pareto, MatchesBruteForceOnRandomPoints) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> u(0, 30);  // coarse grid to force ties
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<SearchPoint> pts;
    for (int i = 0; i < 200; ++i) pts.push_back(pt(u(rng) / 30.0, u(rng) / 30.0, std::to_string(i)));
    const auto got = pareto_front(pts), want = brute_force_front(pts);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].config, want[i].config);
      for (const auto& q : got) EXPECT_FALSE(dominates(q, got[i]));
    }
  }
}

TEST(Search, SingleMultiplierIsConstant) {
  const auto p = separable_problem(3, {0.9}, {1.0});
  SearchParams sp;
  sp.simulations = 40;
  sp.policy = RolloutPolicy::random;
  const auto r = mcts_search(p, sp);
  ASSERT_EQ(r.points.size(), 40u);
  for (const auto& x : r.points) EXPECT_EQ(x.reward, r.points[0].reward);
  EXPECT_EQ(r.evaluations, 1u);
}

TEST(Search, TreeStaysConsistentAndRewardIdentityHolds) {
  const auto p = separable_problem(4, {1.0, 0.95, 0.8}, {1.0, 0.7, 0.4});
  const auto sens = separable_sensitivity(p);
  SearchParams sp;
  sp.simulations = 300;
  sp.lambda = 0.7;
  std::size_t checks = 0;
  const auto r = mcts_search(p, sp, &sens, [&](std::size_t sim, const std::vector<MctsNode>& tree) {
    ASSERT_TRUE(tree_consistent(tree)) << sim;
    EXPECT_EQ(tree[0].visits, sim + 1);
    for (const auto& n : tree) {
      if (n.depth == 4) {
        EXPECT_TRUE(n.children.empty());
      }
      if (!n.children.empty()) {
        EXPECT_EQ(n.children.size(), 3u);
      }
    }
    ++checks;
  });
  EXPECT_EQ(checks, 300u);
  for (const auto& x : r.points) EXPECT_EQ(x.reward, x.predicted_accuracy - sp.lambda * x.normalized_power);
  EXPECT_EQ(r.rewards.size(), 300u);
  EXPECT_EQ(r.root_means.size(), 300u);
}

TEST(Search, ExhaustiveEquivalenceOnSmallSpace) {
  const std::vector<double> factor{1.0, 0.97, 0.85, 0.6}, power{1.0, 0.8, 0.55, 0.3};
  const auto p = separable_problem(3, factor, power);  // 64 configs
  const auto sens = separable_sensitivity(p);
  for (double lambda : {0.0, 0.5, 1.5}) {
    double best = -1e9;
    std::vector<std::size_t> best_a;
    for (std::size_t c = 0; c < 64; ++c) {
      std::vector<std::size_t> a{c % 4, (c / 4) % 4, c / 16};
      const double r = p.accuracy(a) - lambda * p.power(a);
      if (r > best) best = r, best_a = a;
    }
    for (auto pol : {RolloutPolicy::random, RolloutPolicy::hardware}) {
      SearchParams sp;
      sp.lambda = lambda;
      sp.simulations = 2000;
      sp.policy = pol;
      const auto r = mcts_search(p, sp, &sens);
      EXPECT_EQ(r.evaluations, 64u);
      const auto top = std::max_element(r.points.begin(), r.points.end(),
                                        [](const SearchPoint& a, const SearchPoint& b) { return a.reward < b.reward; });
      EXPECT_EQ(top->config, p.config_of(best_a)) << lambda;
    }
  }
}

TEST(Search, SeedDeterminismAndGuards) {
  const auto p = separable_problem(5, {1.0, 0.9, 0.7}, {1.0, 0.6, 0.3});
  const auto sens = separable_sensitivity(p);
  SearchParams sp;
  sp.simulations = 200;
  sp.seed = 3;
  const auto a = mcts_search(p, sp, &sens), b = mcts_search(p, sp, &sens);
  EXPECT_EQ(a.rewards, b.rewards);
  sp.seed = 4;
  EXPECT_NE(mcts_search(p, sp, &sens).rewards, a.rewards);
  EXPECT_THROW(mcts_search(p, sp), StateError);  // hardware policy without a table
  sp.simulations = 0;
  EXPECT_THROW(mcts_search(p, sp, &sens), RangeError);
  sp.simulations = 5;
  sp.c = 0.0;
  EXPECT_THROW(mcts_search(p, sp, &sens), RangeError);
  SearchProblem empty = p;
  empty.actions.clear();
  sp.c = 1.0;
  sp.policy = RolloutPolicy::random;
  EXPECT_THROW(mcts_search(empty, sp), RangeError);
}

TEST(Search, HardwarePolicyFavoursCheapHarmlessChoices) {
  // Multiplier 1 costs nothing in accuracy and saves power: the policy prefers it.
  const auto p = separable_problem(3, {1.0, 1.0}, {1.0, 0.2});
  const auto sens = separable_sensitivity(p);
  const auto probs = rollout_policy_probs(sens.s_column(0), sens.p_column(0), 1.0);
  EXPECT_GT(probs[1], probs[0]);
}

TEST(Search, RollingMeanAndSettling) {
  const auto rm = rolling_mean({1, 2, 3, 4}, 2);
  EXPECT_EQ(rm, (std::vector<double>{1, 1.5, 2.5, 3.5}));
  const double nan = std::nan("");
  const std::vector<std::vector<double>> means{{nan, 1.0}, {0.5, 1.0}, {0.99, 1.0}, {1.0, 1.0}};
  EXPECT_EQ(settling_simulation(means, 0.02), 2u);
}

TEST(Sensitivity, ExactRowIsOneAndPowersNormalized) {
  SyntheticSpec s;
  s.count = 64;
  const Dataset d = make_synthetic(s);
  VitModel m = VitModel::create(ModelConfig{}, 2);
  // Bias the head so the untrained model predicts the most common label and
  // the all-exact probe accuracy is non-zero.
  std::vector<int> counts(10, 0);
  for (auto l : d.labels) counts[l]++;
  m.head.bias[std::max_element(counts.begin(), counts.end()) - counts.begin()] = 50.0;
  m.scales = calibrate(m, d);
  MultiplierBank bank(builtin_catalog());
  const auto t = profile_sensitivity(m, bank, d);
  ASSERT_EQ(t.s.size(), 4u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(t.s[0][i], 1.0);
    EXPECT_EQ(t.p[0][i], 1.0);
    for (std::size_t j = 1; j < 4; ++j) EXPECT_LT(t.p[j][i], 1.0);
  }
  std::stringstream ss;
  write_sensitivity(ss, t);
  const auto back = parse_sensitivity(ss);
  EXPECT_EQ(back.s, t.s);
  EXPECT_EQ(back.p, t.p);
  EXPECT_EQ(back.multipliers, t.multipliers);

  m.head.bias.fill(0.0);
  m.head.weight.fill(0.0);
  m.head.bias[(std::max_element(counts.begin(), counts.end()) - counts.begin() + 1) % 10] = 50.0;
  Dataset one_class = d;
  for (auto& l : one_class.labels) l = static_cast<std::uint8_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  EXPECT_THROW(profile_sensitivity(m, bank, one_class), StateError);
}

TEST(Reports, SearchCsvRoundTrip) {
  const auto p = separable_problem(3, {1.0, 0.9, 0.7}, {1.0, 0.6, 0.3});
  SearchParams sp;
  sp.simulations = 50;
  sp.policy = RolloutPolicy::random;
  const auto r = mcts_search(p, sp);
  SearchReport rep;
  rep.header = {{"lambda", "0.5"}, {"policy", "random"}};
  rep.rows = search_rows(r.points);
  std::stringstream ss;
  write_search_report(ss, rep);
  const auto back = parse_search_report(ss);
  EXPECT_EQ(back.header, rep.header);
  ASSERT_EQ(back.rows.size(), rep.rows.size());
  for (std::size_t i = 0; i < back.rows.size(); ++i) {
    EXPECT_EQ(back.rows[i].point.config, rep.rows[i].point.config);
    EXPECT_EQ(back.rows[i].point.reward, rep.rows[i].point.reward);
    EXPECT_EQ(back.rows[i].point.normalized_power, rep.rows[i].point.normalized_power);
    EXPECT_EQ(back.rows[i].on_pareto, rep.rows[i].on_pareto);
  }
  // Pareto rows are exactly the flagged rows, and match pareto_front.
  const auto pr = pareto_rows(rep.rows);
  const auto front = pareto_front(r.points);
  ASSERT_EQ(pr.size(), front.size());
  for (std::size_t i = 0; i < pr.size(); ++i) EXPECT_EQ(pr[i].point.config, front[i].config);

  std::stringstream tr;
  write_reward_trace(tr, r.rewards);
  EXPECT_EQ(parse_reward_trace(tr), r.rewards);

  std::stringstream bad("simulation_index,config,predicted_accuracy,normalized_power,reward,on_pareto\n1,a,0.5,x,0,true\n");
  try {
    parse_search_report(bad, "r.csv");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("r.csv:2"), std::string::npos);
  }
}

TEST(Surrogate, RmseAndProbe) {
  EXPECT_DOUBLE_EQ(rmse({1, 2}, {1, 4}), std::sqrt(2.0));
  EXPECT_THROW(rmse({}, {}), RangeError);
  SyntheticSpec s;
  s.count = 300;
  const Dataset d = make_synthetic(s);
  const Dataset a = make_probe(d, 128, 1), b = make_probe(d, 128, 1);
  EXPECT_EQ(a.size(), 128u);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_THROW(make_probe(d, 0, 1), RangeError);
}
