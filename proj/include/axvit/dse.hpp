#pragma once

// Design-space exploration over per-block multiplier assignments: layer
// sensitivity profiling, MAC-weighted power model, probe-batch accuracy
// surrogate, Monte Carlo tree search and Pareto extraction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "axvit/nn.hpp"

namespace axvit {

// ---- power model ---------------------------------------------------------------

/// MAC-weighted power of per-block multiplier powers, normalized by running
/// every MAC on `baseline_mw`. Non-approximable MACs are charged at the baseline.
inline double normalized_power(const std::vector<double>& block_power_mw, const MacProfile& macs, double baseline_mw) {
  if (block_power_mw.size() != macs.block_macs.size())
    throw RangeError("power model: " + std::to_string(block_power_mw.size()) + " multipliers for " +
                     std::to_string(macs.block_macs.size()) + " blocks");
  if (!(baseline_mw > 0.0)) throw RangeError("power model: baseline power must be positive");
  const double total = static_cast<double>(macs.total());
  if (!(total > 0.0)) throw RangeError("power model: no MACs");
  // Summing the savings keeps an all-baseline assignment at exactly 1.
  double saved = 0.0;
  for (std::size_t i = 0; i < block_power_mw.size(); ++i)
    saved += static_cast<double>(macs.block_macs[i]) * (baseline_mw - block_power_mw[i]);
  return 1.0 - saved / (total * baseline_mw);
}

inline double power_of_config(const AxxConfig& cfg, const MacProfile& macs, const Catalog& cat) {
  std::vector<double> p;
  p.reserve(cfg.size());
  for (const auto& n : cfg.assignment) p.push_back(cat.at(n).cost().power_mw);
  return normalized_power(p, macs, cat.baseline().cost().power_mw);
}

/// 1 - normalized power.
inline double power_reduction(double normalized) { return 1.0 - normalized; }

// ---- accuracy surrogate ----------------------------------------------------------

inline constexpr std::size_t kDefaultProbeSize = 128;

/// Seeded random subset of `data` used as the accuracy probe.
inline Dataset make_probe(const Dataset& data, std::size_t size, std::uint64_t seed) {
  if (size == 0) throw RangeError("probe size must be positive");
  return data.subset(sample_indices(data.size(), size, seed));
}

inline double predict_accuracy(const VitModel& m, const MultiplierBank& bank, const AxxConfig& cfg, const Dataset& probe) {
  if (probe.empty()) throw DataError("predict_accuracy: empty probe batch");
  return evaluate_accuracy(m, probe, cfg, bank);
}

inline double rmse(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.empty()) throw RangeError("rmse: sequences must be non-empty and of equal length");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(s / static_cast<double>(x.size()));
}

// ---- sensitivity -----------------------------------------------------------------

/// s[j][i]: probe accuracy with multiplier j on block i only (exact elsewhere),
/// normalized by the all-exact probe accuracy. p[j][i]: normalized power of the
/// same configuration.
struct SensitivityTable {
  std::vector<std::string> multipliers;
  std::size_t layers = 0;
  std::vector<std::vector<double>> s, p;

  std::vector<double> s_column(std::size_t layer) const { return column(s, layer); }
  std::vector<double> p_column(std::size_t layer) const { return column(p, layer); }

 private:
  static std::vector<double> column(const std::vector<std::vector<double>>& m, std::size_t layer) {
    std::vector<double> c;
    c.reserve(m.size());
    for (const auto& row : m) c.push_back(row.at(layer));
    return c;
  }
};

inline SensitivityTable profile_sensitivity(const VitModel& m, const MultiplierBank& bank, const Dataset& probe) {
  const auto& cat = bank.catalog();
  const std::size_t L = m.config.layers;
  const std::string exact = cat.baseline().name();
  const double base = predict_accuracy(m, bank, AxxConfig::uniform(exact, L), probe);
  if (base <= 0.0) throw StateError("sensitivity: all-exact probe accuracy is zero (degenerate model)");
  const MacProfile macs = mac_profile(m.config);
  SensitivityTable t;
  t.layers = L;
  for (const auto& mul : cat) {
    t.multipliers.push_back(mul.name());
    std::vector<double> srow, prow;
    for (std::size_t i = 0; i < L; ++i) {
      AxxConfig cfg = AxxConfig::uniform(exact, L);
      cfg.assignment[i] = mul.name();
      srow.push_back(mul.name() == exact ? 1.0 : predict_accuracy(m, bank, cfg, probe) / base);
      prow.push_back(power_of_config(cfg, macs, cat));
    }
    t.s.push_back(std::move(srow));
    t.p.push_back(std::move(prow));
  }
  return t;
}

// ---- search primitives -----------------------------------------------------------

/// x + c sqrt(ln N / n); +inf for an unvisited child.
inline double ucb_score(double mean, double c, std::uint64_t parent_visits, std::uint64_t visits) {
  if (visits == 0) return std::numeric_limits<double>::infinity();
  return mean + c * std::sqrt(std::log(static_cast<double>(parent_visits)) / static_cast<double>(visits));
}

/// softmax(s_j - lambda p_j) over the k candidates for one layer.
inline std::vector<double> rollout_policy_probs(const std::vector<double>& s, const std::vector<double>& p, double lambda) {
  if (s.empty()) throw RangeError("rollout policy: empty catalog");
  if (s.size() != p.size()) throw RangeError("rollout policy: sensitivity and power columns differ in length");
  std::vector<double> z(s.size());
  for (std::size_t j = 0; j < s.size(); ++j) z[j] = s[j] - lambda * p[j];
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (auto& v : z) sum += (v = std::exp(v - mx));
  for (auto& v : z) v /= sum;
  return z;
}

enum class RolloutPolicy { random, hardware };

inline std::string_view to_string(RolloutPolicy p) { return p == RolloutPolicy::random ? "random" : "hw"; }

inline RolloutPolicy parse_policy(std::string_view s) {
  if (s == "random") return RolloutPolicy::random;
  if (s == "hw") return RolloutPolicy::hardware;
  throw ParseError("unknown policy '" + std::string(s) + "' (expected random|hw)");
}

struct SearchParams {
  double lambda = 0.5;
  double c = std::sqrt(2.0);
  std::size_t simulations = 500;
  RolloutPolicy policy = RolloutPolicy::hardware;
  std::size_t probe_size = kDefaultProbeSize;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw RangeError("lambda must be >= 0");
    if (!(c > 0.0) || !std::isfinite(c)) throw RangeError("exploration constant c must be > 0");
    if (simulations < 1) throw RangeError("simulation budget must be >= 1");
  }
};

struct SearchPoint {
  AxxConfig config;
  double predicted_accuracy = 0.0;
  double normalized_power = 0.0;
  double reward = 0.0;
};

struct MctsNode {
  std::size_t parent = kNone;
  std::size_t depth = 0;   // next layer to assign
  std::size_t action = 0;  // multiplier chosen on the edge from the parent
  std::vector<std::size_t> children;  // empty until expanded; indexed by action
  std::uint64_t visits = 0;
  double total = 0.0;

  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  double mean() const { return visits ? total / static_cast<double>(visits) : 0.0; }
};

/// Abstract evaluation problem: `layers` decisions, `actions` choices each.
/// Accuracy and power of a full assignment come from callbacks.
struct SearchProblem {
  std::size_t layers = 0;
  std::vector<std::string> actions;  // multiplier names, in catalog order
  std::function<double(const std::vector<std::size_t>&)> accuracy;
  std::function<double(const std::vector<std::size_t>&)> power;

  AxxConfig config_of(const std::vector<std::size_t>& a) const {
    AxxConfig c;
    for (auto i : a) c.assignment.push_back(actions.at(i));
    return c;
  }
};

struct SearchResult {
  std::vector<SearchPoint> points;  // one per simulation
  std::vector<double> rewards;      // per-simulation reward
  std::vector<std::vector<double>> root_means;  // [simulation][action], NaN while unvisited
  std::size_t best_root_action = 0;             // most visited root child
  std::vector<MctsNode> tree;
  std::size_t evaluations = 0;  // distinct configurations evaluated
};

/// True when visits and totals along the tree are mutually consistent.
inline bool tree_consistent(const std::vector<MctsNode>& tree) {
  for (const auto& n : tree) {
    std::uint64_t child_visits = 0;
    for (auto c : n.children) {
      if (tree[c].parent == MctsNode::kNone || &tree[tree[c].parent] != &n) return false;
      if (tree[c].depth != n.depth + 1) return false;
      child_visits += tree[c].visits;
    }
    if (child_visits > n.visits) return false;
  }
  return true;
}

using SearchObserver = std::function<void(std::size_t simulation, const std::vector<MctsNode>& tree)>;

inline SearchResult mcts_search(const SearchProblem& prob, const SearchParams& params,
                                const SensitivityTable* sensitivity = nullptr, const SearchObserver& observer = {}) {
  params.validate();
  const std::size_t k = prob.actions.size(), L = prob.layers;
  if (k == 0) throw RangeError("search: empty catalog");
  if (L == 0) throw RangeError("search: model has no layers");
  std::vector<std::vector<double>> policy(L, std::vector<double>(k, 1.0 / static_cast<double>(k)));
  if (params.policy == RolloutPolicy::hardware) {
    if (!sensitivity) throw StateError("search: hardware-driven policy needs a sensitivity table");
    if (sensitivity->layers != L || sensitivity->s.size() != k)
      throw RangeError("search: sensitivity table shape does not match the problem");
    for (std::size_t i = 0; i < L; ++i)
      policy[i] = rollout_policy_probs(sensitivity->s_column(i), sensitivity->p_column(i), params.lambda);
  }

  std::mt19937_64 rng(params.seed);
  std::map<std::vector<std::size_t>, std::pair<double, double>> memo;
  SearchResult res;
  auto& tree = res.tree;
  tree.push_back(MctsNode{});

  for (std::size_t sim = 0; sim < params.simulations; ++sim) {
    // selection
    std::size_t node = 0;
    std::vector<std::size_t> assignment;
    while (!tree[node].children.empty()) {
      const auto& n = tree[node];
      std::size_t best = n.children[0];
      double best_score = -std::numeric_limits<double>::infinity();
      for (auto c : n.children) {
        const double s = ucb_score(tree[c].mean(), params.c, n.visits, tree[c].visits);
        if (s > best_score) {
          best_score = s;
          best = c;
        }
      }
      node = best;
      assignment.push_back(tree[node].action);
    }
    // expansion
    if (tree[node].depth < L) {
      for (std::size_t a = 0; a < k; ++a) {
        MctsNode child;
        child.parent = node;
        child.depth = tree[node].depth + 1;
        child.action = a;
        tree[node].children.push_back(tree.size());
        tree.push_back(child);
      }
      node = tree[node].children[0];
      assignment.push_back(0);
    }
    // rollout
    while (assignment.size() < L) {
      const auto& pr = policy[assignment.size()];
      std::discrete_distribution<std::size_t> pick(pr.begin(), pr.end());
      assignment.push_back(pick(rng));
    }
    // evaluation
    auto it = memo.find(assignment);
    if (it == memo.end()) it = memo.emplace(assignment, std::pair{prob.accuracy(assignment), prob.power(assignment)}).first;
    const auto [acc, pw] = it->second;
    const double reward = acc - params.lambda * pw;
    res.points.push_back(SearchPoint{prob.config_of(assignment), acc, pw, reward});
    res.rewards.push_back(reward);
    // backpropagation
    for (std::size_t n = node; n != MctsNode::kNone; n = tree[n].parent) {
      tree[n].visits += 1;
      tree[n].total += reward;
    }
    std::vector<double> means(k, std::numeric_limits<double>::quiet_NaN());
    for (auto c : tree[0].children)
      if (tree[c].visits) means[tree[c].action] = tree[c].mean();
    res.root_means.push_back(std::move(means));
    if (observer) observer(sim, tree);
  }
  res.evaluations = memo.size();
  std::uint64_t most = 0;
  for (auto c : tree[0].children)
    if (tree[c].visits > most) {
      most = tree[c].visits;
      res.best_root_action = tree[c].action;
    }
  return res;
}

/// The search problem of a calibrated model: probe-batch accuracy and the MAC
/// power model. Holds references to all three arguments.
inline SearchProblem model_problem(const VitModel& m, const MultiplierBank& bank, const Dataset& probe) {
  if (!m.calibrated()) throw StateError("search: model is not calibrated");
  if (probe.empty()) throw DataError("search: empty probe batch");
  SearchProblem p;
  p.layers = m.config.layers;
  for (const auto& mul : bank.catalog()) p.actions.push_back(mul.name());
  const MacProfile macs = mac_profile(m.config);
  p.accuracy = [&m, &bank, &probe, names = p.actions](const std::vector<std::size_t>& a) {
    LayerMultipliers muls;
    for (auto i : a) muls.push_back(&bank.backend(i));
    return evaluate_accuracy(m, probe, muls);
  };
  p.power = [&bank, macs, names = p.actions](const std::vector<std::size_t>& a) {
    AxxConfig c;
    for (auto i : a) c.assignment.push_back(names[i]);
    return power_of_config(c, macs, bank.catalog());
  };
  return p;
}

/// First simulation index after which every root-action mean stays within
/// `rel_tol` (relative) of its final value.
inline std::size_t settling_simulation(const std::vector<std::vector<double>>& root_means, double rel_tol) {
  if (root_means.empty()) return 0;
  const auto& last = root_means.back();
  std::size_t settle = 0;
  for (std::size_t t = 0; t < root_means.size(); ++t) {
    for (std::size_t j = 0; j < last.size(); ++j) {
      if (std::isnan(last[j])) continue;
      const double v = root_means[t][j];
      if (std::isnan(v) || std::abs(v - last[j]) > rel_tol * std::abs(last[j])) {
        settle = t + 1;
        break;
      }
    }
  }
  return settle;
}

/// Trailing rolling mean; entry t averages rewards (t-window, t].
inline std::vector<double> rolling_mean(const std::vector<double>& v, std::size_t window) {
  if (window == 0) throw RangeError("rolling mean: window must be positive");
  std::vector<double> out;
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    s += v[i];
    if (i >= window) s -= v[i - window];
    out.push_back(s / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

// ---- Pareto front ----------------------------------------------------------------

inline bool dominates(const SearchPoint& a, const SearchPoint& b) {
  return a.predicted_accuracy >= b.predicted_accuracy && a.normalized_power <= b.normalized_power &&
         (a.predicted_accuracy > b.predicted_accuracy || a.normalized_power < b.normalized_power);
}

/// mask[i] is true iff point i is non-dominated and the first point with its
/// (accuracy, power) pair.
inline std::vector<bool> pareto_mask(const std::vector<SearchPoint>& pts) {
  std::vector<std::size_t> order(pts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Ascending power, then descending accuracy: a point is dominated iff an
  // earlier distinct point has accuracy >= its own.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (pts[a].normalized_power != pts[b].normalized_power) return pts[a].normalized_power < pts[b].normalized_power;
    return pts[a].predicted_accuracy > pts[b].predicted_accuracy;
  });
  std::vector<bool> mask(pts.size(), false);
  double best_acc = -std::numeric_limits<double>::infinity();
  const SearchPoint* prev = nullptr;
  for (auto i : order) {
    const auto& p = pts[i];
    if (prev && p.predicted_accuracy == prev->predicted_accuracy && p.normalized_power == prev->normalized_power) continue;
    if (p.predicted_accuracy > best_acc) {
      mask[i] = true;
      best_acc = p.predicted_accuracy;
    }
    prev = &p;
  }
  return mask;
}

/// Non-dominated points, deduplicated, in ascending power (stable).
inline std::vector<SearchPoint> pareto_front(const std::vector<SearchPoint>& pts) {
  const auto mask = pareto_mask(pts);
  std::vector<SearchPoint> out;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (mask[i]) out.push_back(pts[i]);
  std::stable_sort(out.begin(), out.end(),
                   [](const SearchPoint& a, const SearchPoint& b) { return a.normalized_power < b.normalized_power; });
  return out;
}

// ---- reports -------------------------------------------------------------------
// Search and Pareto CSV columns:
//   simulation_index,config,predicted_accuracy,normalized_power,reward,on_pareto
// preceded by "# key=value" header lines.

struct ReportRow {
  std::size_t simulation_index = 0;
  SearchPoint point;
  bool on_pareto = false;
};

struct SearchReport {
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<ReportRow> rows;
};

inline constexpr const char* kSearchColumns =
    "simulation_index,config,predicted_accuracy,normalized_power,reward,on_pareto";

inline void write_search_report(std::ostream& os, const SearchReport& r) {
  for (const auto& [k, v] : r.header) os << "# " << k << "=" << v << "\n";
  os << kSearchColumns << "\n";
  for (const auto& row : r.rows)
    os << row.simulation_index << "," << row.point.config.to_string() << "," << format_real(row.point.predicted_accuracy)
       << "," << format_real(row.point.normalized_power) << "," << format_real(row.point.reward) << ","
       << (row.on_pareto ? "true" : "false") << "\n";
}

inline SearchReport parse_search_report(std::istream& is, const std::string& source = "<search>") {
  SearchReport r;
  std::string line;
  int lineno = 0;
  bool have_columns = false;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      const std::string body = trim(t.substr(1));
      const auto eq = body.find('=');
      if (eq != std::string::npos) r.header.emplace_back(body.substr(0, eq), body.substr(eq + 1));
      continue;
    }
    if (!have_columns) {
      if (t != kSearchColumns) throw ParseError(where + ": expected header '" + kSearchColumns + "'");
      have_columns = true;
      continue;
    }
    const auto f = split(t, ',');
    if (f.size() != 6) throw ParseError(where + ": expected 6 fields, got " + std::to_string(f.size()));
    try {
      ReportRow row;
      row.simulation_index = static_cast<std::size_t>(parse_int(f[0], "simulation_index"));
      row.point.config = AxxConfig::parse(f[1]);
      row.point.predicted_accuracy = parse_real(f[2], "predicted_accuracy");
      row.point.normalized_power = parse_real(f[3], "normalized_power");
      row.point.reward = parse_real(f[4], "reward");
      if (f[5] != "true" && f[5] != "false") throw ParseError("on_pareto must be true or false");
      row.on_pareto = f[5] == "true";
      r.rows.push_back(std::move(row));
    } catch (const ParseError& e) {
      throw ParseError(where + ": " + e.what());
    } catch (const RangeError& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  if (!have_columns) throw ParseError(source + ": missing column header");
  return r;
}

/// Rows for the full search report, with on_pareto set from pareto_mask.
inline std::vector<ReportRow> search_rows(const std::vector<SearchPoint>& pts) {
  const auto mask = pareto_mask(pts);
  std::vector<ReportRow> rows;
  for (std::size_t i = 0; i < pts.size(); ++i) rows.push_back(ReportRow{i, pts[i], mask[i]});
  return rows;
}

/// The on_pareto rows, in ascending power.
inline std::vector<ReportRow> pareto_rows(const std::vector<ReportRow>& rows) {
  std::vector<ReportRow> out;
  for (const auto& r : rows)
    if (r.on_pareto) out.push_back(r);
  std::stable_sort(out.begin(), out.end(), [](const ReportRow& a, const ReportRow& b) {
    return a.point.normalized_power < b.point.normalized_power;
  });
  return out;
}

inline void write_reward_trace(std::ostream& os, const std::vector<double>& rewards, std::size_t window = 50) {
  const auto rm = rolling_mean(rewards, window);
  os << "simulation_index,reward,rolling_mean\n";
  for (std::size_t i = 0; i < rewards.size(); ++i)
    os << i << "," << format_real(rewards[i]) << "," << format_real(rm[i]) << "\n";
}

inline std::vector<double> parse_reward_trace(std::istream& is) {
  std::string line;
  std::vector<double> out;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t.rfind("simulation_index", 0) == 0) continue;
    const auto f = split(t, ',');
    if (f.size() != 3) throw ParseError("reward trace line " + std::to_string(lineno) + ": expected 3 fields");
    out.push_back(parse_real(f[1], "reward"));
  }
  return out;
}

inline void write_sensitivity(std::ostream& os, const SensitivityTable& t) {
  os << "multiplier,layer,sensitivity,power\n";
  for (std::size_t j = 0; j < t.multipliers.size(); ++j)
    for (std::size_t i = 0; i < t.layers; ++i)
      os << t.multipliers[j] << "," << i << "," << format_real(t.s[j][i]) << "," << format_real(t.p[j][i]) << "\n";
}

inline SensitivityTable parse_sensitivity(std::istream& is, const std::string& source = "<sensitivity>") {
  SensitivityTable t;
  std::map<std::string, std::map<std::size_t, std::pair<double, double>>> cells;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s.rfind("multiplier,", 0) == 0) continue;
    const auto f = split(s, ',');
    const std::string where = source + ":" + std::to_string(lineno);
    if (f.size() != 4) throw ParseError(where + ": expected 4 fields");
    try {
      if (!cells.count(f[0])) t.multipliers.push_back(f[0]);
      cells[f[0]][static_cast<std::size_t>(parse_int(f[1], "layer"))] = {parse_real(f[2], "sensitivity"),
                                                                          parse_real(f[3], "power")};
    } catch (const std::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  if (t.multipliers.empty()) throw ParseError(source + ": no rows");
  t.layers = cells[t.multipliers[0]].size();
  for (const auto& name : t.multipliers) {
    const auto& c = cells[name];
    if (c.size() != t.layers) throw ParseError(source + ": multiplier '" + name + "' has a different layer count");
    std::vector<double> srow, prow;
    for (std::size_t i = 0; i < t.layers; ++i) {
      auto it = c.find(i);
      if (it == c.end()) throw ParseError(source + ": multiplier '" + name + "' misses layer " + std::to_string(i));
      srow.push_back(it->second.first);
      prow.push_back(it->second.second);
    }
    t.s.push_back(std::move(srow));
    t.p.push_back(std::move(prow));
  }
  return t;
}

}  // namespace axvit
