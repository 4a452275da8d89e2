#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "axvit/axvit.hpp"

namespace fs = std::filesystem;
using namespace axvit;

namespace {

struct FlagError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Runs `fn`, prefixing any failure with the flag whose value caused it.
template <typename F>
auto for_flag(const std::string& flag, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const FlagError&) {
    throw;
  } catch (const std::exception& e) {
    throw FlagError(flag + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& flag, const std::function<void(std::ostream&)>& w) {
  for_flag(flag, [&] { write_file_atomic(path, w, false); });
}

Catalog load_catalog_flag(const std::string& path) {
  if (path.empty()) return builtin_catalog();
  return for_flag("--catalog", [&] { return load_catalog(path); });
}

/// "synthetic:SEED[:COUNT]" or an IDX prefix (PREFIX-images.idx, PREFIX-labels.idx).
Dataset load_dataset_flag(const std::string& spec) {
  return for_flag("--dataset", [&] {
    if (spec.empty()) throw RangeError("a dataset is required");
    if (spec.rfind("synthetic:", 0) == 0) {
      const auto f = split(spec.substr(10), ':');
      if (f.empty() || f.size() > 2) throw ParseError("expected synthetic:SEED[:COUNT], got '" + spec + "'");
      SyntheticSpec s;
      s.sample_seed = static_cast<std::uint64_t>(parse_int(f[0], "seed"));
      if (f.size() == 2) s.count = static_cast<std::size_t>(parse_int(f[1], "count"));
      return make_synthetic(s);
    }
    return read_idx(spec + "-images.idx", spec + "-labels.idx");
  });
}

VitModel load_model_flag(const std::string& path, const std::string& scales) {
  if (path.empty()) throw FlagError("--model: a checkpoint is required");
  VitModel m = for_flag("--model", [&] { return load_checkpoint(path); });
  if (!scales.empty()) m.scales = for_flag("--scales", [&] { return load_scale_map(scales); });
  return m;
}

AxxConfig axx_flag(const std::string& text, const VitModel& m, const Catalog& cat) {
  return for_flag("--axx", [&] {
    AxxConfig c = text.empty() ? AxxConfig::uniform(cat.baseline().name(), m.config.layers) : AxxConfig::parse(text);
    if (c.size() == 1 && m.config.layers > 1) c = AxxConfig::uniform(c.assignment[0], m.config.layers);
    if (c.size() != m.config.layers)
      throw RangeError("config has " + std::to_string(c.size()) + " entries, model has " +
                       std::to_string(m.config.layers) + " layers");
    for (const auto& n : c.assignment) cat.index_of(n);
    return c;
  });
}

void ensure_dir(const std::string& dir) {
  for_flag("--out", [&] {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir)) throw IoError("cannot create directory '" + dir + "'");
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Approximate-multiplier emulation, finetuning and design-space search for small vision transformers"};
  app.set_config("--config", "", "TOML/INI file with option defaults; command-line flags win");
  app.require_subcommand(1);
  app.fallthrough();

  std::uint64_t seed = 0;
  std::string out, catalog_path, model_path, scales_path, dataset;
  app.add_option("--seed", seed, "global seed")->capture_default_str();
  app.add_option("--catalog", catalog_path, "multiplier catalog (built-in 8-bit set when omitted)");

  // gen-lut
  auto* gen_lut = app.add_subcommand("gen-lut", "write the product table of a multiplier");
  std::string lut_mul;
  gen_lut->add_option("multiplier", lut_mul, "catalog name or spec (exact8, trunc8k2, perf8r1)")->required();
  gen_lut->add_option("--out", out, "output AXLUT file")->required();

  // error-metrics
  auto* errors = app.add_subcommand("error-metrics", "MAE/WCE/MRE and hardware figures per multiplier");
  errors->add_option("--out", out, "CSV output (stdout when omitted)");

  // gen-data
  auto* gen_data = app.add_subcommand("gen-data", "write a synthetic dataset as IDX files");
  gen_data->add_option("--dataset", dataset, "synthetic:SEED[:COUNT]")->required();
  gen_data->add_option("--out", out, "output prefix")->required();

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "train a model in real arithmetic");
  ModelConfig mcfg;
  TrainHyperparams pre_hp;
  pre_hp.learning_rate = 1e-3;
  pre_hp.epochs = 10;
  pre_hp.data_fraction = 1.0;
  std::string pre_opt = "adam", loss_out;
  pretrain->add_option("--dataset", dataset)->required();
  pretrain->add_option("--out", out, "checkpoint")->required();
  pretrain->add_option("--layers", mcfg.layers)->capture_default_str();
  pretrain->add_option("--embed-dim", mcfg.embed_dim)->capture_default_str();
  pretrain->add_option("--heads", mcfg.heads)->capture_default_str();
  pretrain->add_option("--ffn-dim", mcfg.ffn_dim)->capture_default_str();
  pretrain->add_option("--classes", mcfg.classes)->capture_default_str();
  pretrain->add_option("--epochs", pre_hp.epochs)->capture_default_str();
  pretrain->add_option("--lr", pre_hp.learning_rate)->capture_default_str();
  pretrain->add_option("--batch", pre_hp.batch_size)->capture_default_str();
  pretrain->add_option("--optimizer", pre_opt)->capture_default_str();
  pretrain->add_option("--loss-out", loss_out, "loss CSV (default: <out>.loss.csv)");

  // calibrate
  auto* calib = app.add_subcommand("calibrate", "percentile calibration of activation scales");
  CalibrationOptions copt;
  std::size_t calib_limit = 0;
  std::string model_out;
  calib->add_option("--model", model_path)->required();
  calib->add_option("--dataset", dataset)->required();
  calib->add_option("--out", out, "scale map file")->required();
  calib->add_option("--bitwidth", copt.bitwidth)->capture_default_str();
  calib->add_option("--percentile", copt.percentile)->capture_default_str();
  calib->add_option("--bins", copt.bins)->capture_default_str();
  calib->add_option("--limit", calib_limit, "samples used (0 = all)")->capture_default_str();
  calib->add_option("--model-out", model_out, "also write the checkpoint with these scales");

  // eval
  auto* eval = app.add_subcommand("eval", "accuracy and power of one multiplier assignment");
  std::string axx_text;
  std::size_t probe = 0;
  eval->add_option("--model", model_path)->required();
  eval->add_option("--scales", scales_path, "scale map overriding the checkpoint's");
  eval->add_option("--dataset", dataset)->required();
  eval->add_option("--axx", axx_text, "per-layer names joined by '|' (one name applies to all layers)");
  eval->add_option("--probe", probe, "evaluate on a seeded probe batch of this size (0 = whole dataset)");
  eval->add_option("--out", out, "report file");

  // finetune
  auto* fine = app.add_subcommand("finetune", "approximation-aware retraining");
  TrainHyperparams ft_hp;
  std::string ft_opt = "adam";
  fine->add_option("--model", model_path)->required();
  fine->add_option("--scales", scales_path);
  fine->add_option("--dataset", dataset)->required();
  fine->add_option("--axx", axx_text);
  fine->add_option("--out", out, "checkpoint")->required();
  fine->add_option("--lr", ft_hp.learning_rate)->capture_default_str();
  fine->add_option("--epochs", ft_hp.epochs)->capture_default_str();
  fine->add_option("--batch", ft_hp.batch_size)->capture_default_str();
  fine->add_option("--fraction", ft_hp.data_fraction)->capture_default_str();
  fine->add_option("--optimizer", ft_opt)->capture_default_str();
  fine->add_option("--loss-out", loss_out, "loss CSV (default: <out>.loss.csv)");

  // sensitivity
  auto* sens = app.add_subcommand("sensitivity", "per-layer sensitivity and power table");
  std::size_t sens_probe = kDefaultProbeSize;
  sens->add_option("--model", model_path)->required();
  sens->add_option("--scales", scales_path);
  sens->add_option("--dataset", dataset)->required();
  sens->add_option("--probe", sens_probe)->capture_default_str();
  sens->add_option("--out", out, "CSV output")->required();

  // search
  auto* search = app.add_subcommand("search", "Monte Carlo tree search over multiplier assignments");
  SearchParams sp;
  std::string policy = "hw", sens_in;
  std::size_t window = 50;
  search->add_option("--model", model_path)->required();
  search->add_option("--scales", scales_path);
  search->add_option("--dataset", dataset)->required();
  search->add_option("--lambda", sp.lambda)->capture_default_str();
  search->add_option("--c", sp.c)->capture_default_str();
  search->add_option("--sims", sp.simulations)->capture_default_str();
  search->add_option("--policy", policy, "random|hw")->capture_default_str();
  search->add_option("--probe", sp.probe_size)->capture_default_str();
  search->add_option("--sensitivity", sens_in, "reuse a sensitivity CSV instead of profiling");
  search->add_option("--window", window, "rolling-mean window of the reward trace")->capture_default_str();
  search->add_option("--out", out, "output directory")->required();

  // pareto
  auto* pareto = app.add_subcommand("pareto", "Pareto front of one or more search CSVs");
  std::vector<std::string> inputs;
  pareto->add_option("inputs", inputs, "search CSV files")->required();
  pareto->add_option("--out", out, "CSV output")->required();

  // toy
  auto* toy = app.add_subcommand("toy", "single-attention-layer training under one multiplier");
  ToyOptions topt;
  std::string toy_mul = "mul8s_1L2H";
  toy->add_option("--multiplier", toy_mul)->capture_default_str();
  toy->add_option("--iterations", topt.iterations)->capture_default_str();
  toy->add_option("--lr", topt.learning_rate)->capture_default_str();
  toy->add_option("--bins", topt.histogram_bins)->capture_default_str();
  toy->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen_lut) {
      const Catalog cat = load_catalog_flag(catalog_path);
      const AxMultiplier mul = for_flag("multiplier", [&] { return resolve_multiplier(cat, lut_mul); });
      const ProductLut lut = for_flag("multiplier", [&] { return build_lut(mul); });
      for_flag("--out", [&] { write_lut(fs::path(out), lut); });
      std::cout << "wrote " << out << " multiplier=" << mul.name() << " bitwidth=" << lut.bitwidth()
                << " entries=" << lut.entries().size() << " checksum=" << std::hex << lut_checksum(lut) << std::dec
                << "\n";
    } else if (*errors) {
      const Catalog cat = load_catalog_flag(catalog_path);
      const auto rows = error_table(cat);
      if (!out.empty()) write_text(out, "--out", [&](std::ostream& os) { write_error_table(os, rows); });
      std::cout << "multiplier      bits   MAE%      WCE%      MRE%      power_mW  area_um2  delay_ns\n";
      for (const auto& r : rows) {
        std::cout << std::left << std::setw(16) << r.multiplier << std::setw(7) << r.bitwidth << std::setw(10)
                  << format_fixed(r.metrics.mae_pct, 4) << std::setw(10) << format_fixed(r.metrics.wce_pct, 4)
                  << std::setw(10) << format_fixed(r.metrics.mre_pct, 4) << std::setw(10)
                  << format_fixed(r.cost.power_mw, 3) << std::setw(10) << format_fixed(r.cost.area_um2, 1)
                  << format_fixed(r.cost.delay_ns, 2) << "\n";
      }
    } else if (*gen_data) {
      const Dataset d = load_dataset_flag(dataset);
      for_flag("--out", [&] { write_idx(out + "-images.idx", out + "-labels.idx", d); });
      std::cout << "wrote " << d.size() << " images of " << d.rows << "x" << d.cols << " to " << out
                << "-{images,labels}.idx\n";
    } else if (*pretrain) {
      const Dataset d = load_dataset_flag(dataset);
      for_flag("--optimizer", [&] { pre_hp.optimizer = parse_optimizer(pre_opt); });
      pre_hp.seed = seed;
      VitModel m = for_flag("model shape", [&] { return VitModel::create(mcfg, seed); });
      const auto r = train(m, d, {}, pre_hp);
      for_flag("--out", [&] { save_checkpoint(out, m); });
      write_text(loss_out.empty() ? out + ".loss.csv" : loss_out, "--loss-out",
                 [&](std::ostream& os) { write_series(os, "step", "loss", r.loss_history); });
      std::cout << "steps=" << r.loss_history.size() << " final_loss=" << format_fixed(r.loss_history.back(), 6)
                << " real_accuracy=" << format_fixed(evaluate_accuracy(m, d, LayerMultipliers{}), 4) << "\n";
    } else if (*calib) {
      VitModel m = load_model_flag(model_path, "");
      const Dataset d = load_dataset_flag(dataset);
      if (calib_limit > 0) copt.limit = calib_limit;
      m.scales = for_flag("--percentile/--bins/--bitwidth", [&] { return calibrate(m, d, copt); });
      for_flag("--out", [&] { save_scale_map(out, m.scales); });
      if (!model_out.empty()) for_flag("--model-out", [&] { save_checkpoint(model_out, m); });
      std::cout << "calibrated " << m.scales.size() << " tensors at " << copt.bitwidth << " bits\n";
    } else if (*eval) {
      const Catalog cat = load_catalog_flag(catalog_path);
      const VitModel m = load_model_flag(model_path, scales_path);
      const Dataset full = load_dataset_flag(dataset);
      const AxxConfig cfg = axx_flag(axx_text, m, cat);
      const Dataset d = probe > 0 ? for_flag("--probe", [&] { return make_probe(full, probe, seed); }) : full;
      const MultiplierBank bank(cat);
      const double acc = evaluate_accuracy(m, d, cfg, bank);
      const double pw = power_of_config(cfg, mac_profile(m.config), cat);
      std::ostringstream rep;
      rep << "config=" << cfg.to_string() << "\n"
          << "samples=" << d.size() << "\n"
          << "accuracy=" << format_real(acc) << "\n"
          << "normalized_power=" << format_real(pw) << "\n"
          << "power_reduction_pct=" << format_fixed(100.0 * power_reduction(pw), 2) << "\n";
      std::cout << rep.str();
      if (!out.empty()) write_text(out, "--out", [&](std::ostream& os) { os << rep.str(); });
    } else if (*fine) {
      const Catalog cat = load_catalog_flag(catalog_path);
      VitModel m = load_model_flag(model_path, scales_path);
      const Dataset d = load_dataset_flag(dataset);
      const AxxConfig cfg = axx_flag(axx_text, m, cat);
      for_flag("--optimizer", [&] { ft_hp.optimizer = parse_optimizer(ft_opt); });
      ft_hp.seed = seed;
      for_flag("--lr/--epochs/--batch/--fraction", [&] { ft_hp.validate(); });
      const MultiplierBank bank(cat);
      const auto r = finetune(m, bank, cfg, d, ft_hp);
      for_flag("--out", [&] { save_checkpoint(out, m); });
      write_text(loss_out.empty() ? out + ".loss.csv" : loss_out, "--loss-out",
                 [&](std::ostream& os) { write_series(os, "step", "loss", r.loss_history); });
      std::cout << "steps=" << r.loss_history.size() << " config=" << cfg.to_string() << "\n";
    } else if (*sens) {
      const Catalog cat = load_catalog_flag(catalog_path);
      const VitModel m = load_model_flag(model_path, scales_path);
      const Dataset d = load_dataset_flag(dataset);
      const Dataset pr = for_flag("--probe", [&] { return make_probe(d, sens_probe, seed); });
      const auto t = profile_sensitivity(m, MultiplierBank(cat), pr);
      write_text(out, "--out", [&](std::ostream& os) { write_sensitivity(os, t); });
      std::cout << "profiled " << t.multipliers.size() << " multipliers x " << t.layers << " layers\n";
    } else if (*search) {
      const Catalog cat = load_catalog_flag(catalog_path);
      const VitModel m = load_model_flag(model_path, scales_path);
      const Dataset d = load_dataset_flag(dataset);
      sp.policy = for_flag("--policy", [&] { return parse_policy(policy); });
      sp.seed = seed;
      for_flag("--lambda/--c/--sims", [&] { sp.validate(); });
      const Dataset pr = for_flag("--probe", [&] { return make_probe(d, sp.probe_size, seed); });
      const MultiplierBank bank(cat);
      std::optional<SensitivityTable> table;
      if (!sens_in.empty()) {
        table = for_flag("--sensitivity", [&] {
          auto is = open_input(sens_in, false);
          return parse_sensitivity(is, sens_in);
        });
      } else if (sp.policy == RolloutPolicy::hardware) {
        table = profile_sensitivity(m, bank, pr);
      }
      const auto r = mcts_search(model_problem(m, bank, pr), sp, table ? &*table : nullptr);
      SearchReport rep;
      rep.header = {{"lambda", format_real(sp.lambda)},
                    {"c", format_real(sp.c)},
                    {"simulations", std::to_string(sp.simulations)},
                    {"policy", std::string(to_string(sp.policy))},
                    {"probe", std::to_string(pr.size())},
                    {"seed", std::to_string(seed)},
                    {"catalog", [&] {
                       std::string s;
                       for (const auto& mul : cat) s += (s.empty() ? "" : "|") + mul.name();
                       return s;
                     }()}};
      rep.rows = search_rows(r.points);
      SearchReport front{rep.header, pareto_rows(rep.rows)};
      ensure_dir(out);
      const fs::path dir(out);
      write_text(dir / "search.csv", "--out", [&](std::ostream& os) { write_search_report(os, rep); });
      write_text(dir / "pareto.csv", "--out", [&](std::ostream& os) { write_search_report(os, front); });
      write_text(dir / "rewards.csv", "--out", [&](std::ostream& os) { write_reward_trace(os, r.rewards, window); });
      if (table) write_text(dir / "sensitivity.csv", "--out", [&](std::ostream& os) { write_sensitivity(os, *table); });
      const auto best = std::max_element(r.points.begin(), r.points.end(),
                                         [](const SearchPoint& a, const SearchPoint& b) { return a.reward < b.reward; });
      std::cout << "simulations=" << sp.simulations << " evaluations=" << r.evaluations
                << " pareto_points=" << front.rows.size() << "\n"
                << "best=" << best->config.to_string() << " reward=" << format_fixed(best->reward, 4)
                << " accuracy=" << format_fixed(best->predicted_accuracy, 4)
                << " power=" << format_fixed(best->normalized_power, 4) << "\n";
    } else if (*pareto) {
      SearchReport all;
      for (const auto& in : inputs) {
        auto rep = for_flag(in, [&] {
          auto is = open_input(in, false);
          return parse_search_report(is, in);
        });
        if (all.header.empty()) all.header = rep.header;
        all.rows.insert(all.rows.end(), rep.rows.begin(), rep.rows.end());
      }
      std::vector<SearchPoint> pts;
      for (const auto& r : all.rows) pts.push_back(r.point);
      const auto mask = pareto_mask(pts);
      for (std::size_t i = 0; i < all.rows.size(); ++i) all.rows[i].on_pareto = mask[i];
      SearchReport front{all.header, pareto_rows(all.rows)};
      write_text(out, "--out", [&](std::ostream& os) { write_search_report(os, front); });
      std::cout << "rows=" << all.rows.size() << " pareto_points=" << front.rows.size() << "\n";
    } else if (*toy) {
      const Catalog cat = load_catalog_flag(catalog_path);
      const AxMultiplier mul = for_flag("--multiplier", [&] { return resolve_multiplier(cat, toy_mul); });
      topt.seed = seed;
      const auto r = toy_attention_experiment(mul, topt);
      ensure_dir(out);
      const fs::path dir(out);
      write_text(dir / "loss.csv", "--out", [&](std::ostream& os) { write_series(os, "iteration", "mse", r.mse); });
      write_text(dir / "histogram.csv", "--out", [&](std::ostream& os) { write_histogram(os, r.histogram); });
      std::cout << "multiplier=" << mul.name() << " initial_mse=" << format_fixed(r.mse.front(), 6)
                << " final_mse=" << format_fixed(r.mse.back(), 6) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "axvit: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
