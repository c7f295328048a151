// metalink: command-line driver for data generation, training, evaluation,
// sweeps and gradient checks. Outputs are plain JSON/CSV and byte-identical
// across reruns with the same config and seed.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metalink/config.hpp"
#include "metalink/dataset.hpp"
#include "metalink/gradcheck.hpp"
#include "metalink/model.hpp"
#include "metalink/training.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitGradcheck = 4;

namespace fs = std::filesystem;
using namespace metalink;

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;  // key=value overrides
  std::string out_dir;
  std::int64_t seed = -1;
  bool seed_given = false;
};

/// Precedence: flag > METALINK_SEED env > config file > default.
RunConfig resolve_config(const CommonOpts& opts) {
  RunConfig cfg = opts.config_path.empty() ? RunConfig{} : parse_config_file(opts.config_path);
  if (const char* env = std::getenv("METALINK_SEED")) {
    apply_config_kv(cfg, "seed", env);
  }
  for (const std::string& kv : opts.sets) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_config_kv(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (opts.seed_given) cfg.train.seed = static_cast<std::uint64_t>(opts.seed);
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required) {
  auto* c = cmd->add_option("--config", opts.config_path, "Run config file (key = value lines)");
  if (config_required) c->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", opts.sets, "Override a config key, e.g. --set epochs=5 (repeatable)");
  cmd->add_option("--out", opts.out_dir, "Output directory (overrides out_dir)");
  cmd->add_option("--seed", opts.seed, "Run seed (overrides METALINK_SEED and the config file)")
      ->each([&opts](const std::string&) { opts.seed_given = true; });
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& csv) {
  std::vector<T> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item.empty()) continue;
    if constexpr (std::is_same_v<T, double>)
      out.push_back(detail::parse_double(key, item));
    else
      out.push_back(static_cast<T>(detail::parse_size(key, item)));
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

int cmd_gen_data(std::size_t n, std::size_t m, std::size_t d, double rho, double noise,
                 double missing, std::uint64_t seed, bool onehot, const std::string& out) {
  MultiLabelDataset ds = generate_synthetic(n, m, d, rho, noise, missing, seed, onehot);
  save_csv(ds, out);
  std::cout << "wrote " << out << ": n=" << ds.n << " m=" << ds.m << " d=" << ds.d << "\n";
  for (std::size_t j = 0; j < ds.m; ++j) {
    std::size_t pos = 0, obs = 0;
    for (std::size_t i = 0; i < ds.n; ++i) {
      if (ds.label(i, j) == Label::missing) continue;
      ++obs;
      if (ds.label(i, j) == Label::positive) ++pos;
    }
    std::cout << "  " << ds.task_names[j] << ": " << pos << "/" << obs << " positive\n";
  }
  return 0;
}

int cmd_train(const CommonOpts& opts) {
  RunConfig cfg = resolve_config(opts);
  const fs::path out_dir(cfg.out_dir);
  fs::create_directories(out_dir);
  write_text(out_dir / "config_resolved.txt", resolved_config_text(cfg));

  MultiLabelDataset ds = cfg.load_dataset();
  TrainResult res = train(ds, cfg.train, &std::cerr);
  save_snapshot(res.model, (out_dir / "checkpoint.json").string());
  write_text(out_dir / "history.json", res.history.to_json().dump(2) + "\n");
  std::cout << "test macro_auc " << res.history.final_test.macro_auc << " mAP "
            << res.history.final_test.mean_ap;
  if (res.history.final_test.episode_accuracy >= 0.0)
    std::cout << " episode_accuracy " << res.history.final_test.episode_accuracy;
  std::cout << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& checkpoint) {
  RunConfig cfg = resolve_config(opts);
  const fs::path out_dir(cfg.out_dir);
  fs::create_directories(out_dir);

  MultiLabelDataset ds = cfg.load_dataset();
  MetaLinkModel model = load_snapshot(checkpoint);
  SplitSpec split = split_dataset(ds, cfg.train.train_frac, cfg.train.val_frac,
                                  cfg.train.test_frac, Rng::mix(cfg.train.seed, 1));
  std::vector<std::size_t> seen, unseen = model.unseen_tasks;
  std::set<std::size_t> unseen_set(unseen.begin(), unseen.end());
  for (std::size_t j = 0; j < ds.m; ++j)
    if (!unseen_set.count(j)) seen.push_back(j);

  EvalParams params = detail::eval_params_for(cfg.train, seen, unseen, true,
                                              Rng::mix(cfg.train.seed, 0xE7A1));
  MetricsReport rep = evaluate(model, ds, split.test, params);
  write_text(out_dir / "metrics.json", rep.to_json().dump(2) + "\n");
  std::cout << "macro_auc " << rep.macro_auc << " mAP " << rep.mean_ap << "\n";
  return 0;
}

int run_sweep_command(const CommonOpts& opts, const std::string& xs_csv, const std::string& seeds_csv,
                      std::size_t workers, bool layers_mode) {
  RunConfig cfg = resolve_config(opts);
  const fs::path out_dir(cfg.out_dir);
  fs::create_directories(out_dir);
  write_text(out_dir / "config_resolved.txt", resolved_config_text(cfg));
  MultiLabelDataset ds = cfg.load_dataset();
  const auto seeds = parse_list<std::uint64_t>("seeds", seeds_csv);

  std::vector<SweepCell> cells;
  std::string header, file;
  if (layers_mode) {
    cells = sweep_layers(ds, cfg.train, parse_list<std::size_t>("layers", xs_csv), seeds, workers);
    header = "layers,seed,metric";
    file = "layer_sweep.csv";
  } else {
    cells = sweep_aux_ratio(ds, cfg.train, parse_list<double>("ratios", xs_csv), seeds, workers);
    header = "ratio,seed,metric";
    file = "ratio_sweep.csv";
  }
  std::ostringstream os;
  os << header << "\n";
  char buf[64];
  for (const auto& c : cells) {
    if (layers_mode)
      os << static_cast<std::size_t>(c.x);
    else {
      std::snprintf(buf, sizeof(buf), "%g", c.x);
      os << buf;
    }
    std::snprintf(buf, sizeof(buf), "%.17g", c.metric);
    os << "," << c.seed << "," << buf << "\n";
  }
  write_text(out_dir / file, os.str());
  std::cout << os.str();
  return 0;
}

int cmd_gradcheck() {
  struct Check {
    std::string name;
    double tol;
    double err;
  };
  std::vector<Check> checks;

  {
    Rng rng(11);
    ParamMap p;
    p["x"] = DenseMatrix(3, 4);
    for (std::size_t i = 0; i < p["x"].size(); ++i) p["x"][i] = rng.normal();
    checks.push_back({"quadratic", 1e-6, grad_check(p, [](Tape& t, const ParamMap& pm) {
                        Var v = t.parameter("x", pm.at("x"));
                        return scale(sum_all(hadamard(v, v)), 0.5);
                      })});
  }
  {
    Rng rng(12);
    ParamMap p;
    p["W"] = DenseMatrix(4, 3);
    p["b"] = DenseMatrix(1, 3);
    for (std::size_t i = 0; i < p["W"].size(); ++i) p["W"][i] = rng.normal();
    DenseMatrix X(5, 4);
    for (std::size_t i = 0; i < X.size(); ++i) X[i] = rng.normal();
    checks.push_back({"affine+sigmoid+bce", 1e-6, grad_check(p, [X](Tape& t, const ParamMap& pm) {
                        Var h = affine(t.constant(X), t.parameter("W", pm.at("W")),
                                       t.parameter("b", pm.at("b")));
                        return bce_with_logits(row_sum(h), {1, 0, 1, 0, 1}, {1, 1, 1, 1, 1});
                      })});
  }
  {
    // Full model: 4 data nodes, 3 tasks, D=5, L=2, random edges.
    ModelConfig mc;
    mc.input_dim = 6;
    mc.feat_hidden = {5};
    mc.embed_dim = 5;
    mc.gnn_layers = 2;
    mc.num_tasks = 3;
    Rng rng(13);
    MetaLinkModel model = MetaLinkModel::init(mc, rng);
    DenseMatrix X(4, 6);
    for (std::size_t i = 0; i < X.size(); ++i) X[i] = rng.normal();
    std::vector<std::tuple<std::size_t, std::size_t, double>> edges{
        {0, 0, 1.0}, {1, 2, 0.0}, {2, 1, 1.0}, {3, 0, 0.0}};
    std::vector<std::pair<std::size_t, std::size_t>> targets{{0, 1}, {1, 0}, {2, 2}, {3, 1}};
    auto build = [&, X](Tape& t, const ParamMap& pm) {
      MetaLinkModel m;
      m.config = mc;
      m.params = pm;
      Var Z = extract_features(t, m, X);
      DenseMatrix TW(2, 5);
      for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 5; ++c) TW(r, c) = pm.at("tasks.W")(r, c);
      auto g = build_graph(t.value(Z), {0, 1}, TW, {2}, edges);
      return bce_with_logits(model_forward(t, m, g, Z, targets), {1, 0, 1, 1}, {1, 1, 1, 1});
    };
    checks.push_back({"metalink-forward", 1e-4, grad_check(model.params, build)});
  }

  bool ok = true;
  for (const auto& c : checks) {
    const bool pass = c.err < c.tol;
    ok = ok && pass;
    std::cout << (pass ? "[PASS] " : "[FAIL] ") << c.name << " max_rel_err " << c.err
              << " (tol " << c.tol << ")\n";
  }
  return ok ? 0 : kExitGradcheck;
}

int cmd_correlate(const std::string& data_path, const std::string& out_path) {
  MultiLabelDataset ds = load_csv(data_path);
  PearsonResult pr = pearson_matrix(ds);
  std::ostringstream os;
  for (std::size_t j = 0; j < ds.m; ++j) os << (j ? "," : "") << ds.task_names[j];
  os << "\n";
  char buf[64];
  for (std::size_t a = 0; a < ds.m; ++a) {
    for (std::size_t b = 0; b < ds.m; ++b) {
      std::snprintf(buf, sizeof(buf), "%.17g", pr.corr(a, b));
      os << (b ? "," : "") << buf;
    }
    os << "\n";
  }
  write_text(out_path, os.str());
  std::cout << os.str();
  if (!pr.flagged.empty()) {
    std::cerr << "flagged (undefined, reported 0):";
    for (auto& [a, b] : pr.flagged) std::cerr << " (" << a << "," << b << ")";
    std::cerr << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MetaLink: relational multi-task learning on a data/task knowledge graph"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic correlated multi-label CSV");
  std::size_t g_n = 2000, g_m = 12, g_d = 32;
  double g_rho = 0.9, g_noise = 0.1, g_missing = 0.1;
  std::uint64_t g_seed = 0;
  bool g_onehot = false;
  std::string g_out = "data.csv";
  gen->add_option("--n", g_n, "Number of examples")->capture_default_str();
  gen->add_option("--m", g_m, "Number of tasks")->capture_default_str();
  gen->add_option("--d", g_d, "Feature dimension")->capture_default_str();
  gen->add_option("--rho", g_rho, "Task correlation in [0,1]")->capture_default_str();
  gen->add_option("--noise", g_noise, "Label flip probability in [0,1)")->capture_default_str();
  gen->add_option("--missing", g_missing, "Missing label probability in [0,1)")->capture_default_str();
  gen->add_option("--seed", g_seed, "Generator seed")->capture_default_str();
  gen->add_flag("--onehot", g_onehot, "Exactly one positive task per row (few-shot data)");
  gen->add_option("--out", g_out, "Output CSV path")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "Train a model; writes checkpoint.json and history.json");
  CommonOpts tr_opts;
  add_common(tr, tr_opts, true);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the config's test split");
  CommonOpts ev_opts;
  std::string ev_checkpoint;
  add_common(ev, ev_opts, true);
  ev->add_option("--checkpoint", ev_checkpoint, "checkpoint.json from train")
      ->required()
      ->check(CLI::ExistingFile);

  // sweep-ratio
  auto* sr = app.add_subcommand("sweep-ratio", "Train/eval per (aux ratio, seed); writes CSV");
  CommonOpts sr_opts;
  std::string sr_ratios = "0,0.2,0.4,0.6,0.8", sr_seeds = "0,1,2,3,4";
  std::size_t sr_workers = 1;
  add_common(sr, sr_opts, true);
  sr->add_option("--ratios", sr_ratios, "Comma-separated aux ratios")->capture_default_str();
  sr->add_option("--seeds", sr_seeds, "Comma-separated seeds")->capture_default_str();
  sr->add_option("--workers", sr_workers, "Parallel sweep cells")->capture_default_str();

  // sweep-layers
  auto* sl = app.add_subcommand("sweep-layers", "Train/eval per (GNN layer count, seed); writes CSV");
  CommonOpts sl_opts;
  std::string sl_layers = "2,3,4,5", sl_seeds = "0,1,2,3,4";
  std::size_t sl_workers = 1;
  add_common(sl, sl_opts, true);
  sl->add_option("--layers", sl_layers, "Comma-separated layer counts")->capture_default_str();
  sl->add_option("--seeds", sl_seeds, "Comma-separated seeds")->capture_default_str();
  sl->add_option("--workers", sl_workers, "Parallel sweep cells")->capture_default_str();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks; exit 4 on failure");
  (void)gc;

  // correlate
  auto* co = app.add_subcommand("correlate", "Write the m x m Pearson label-correlation CSV");
  std::string co_data, co_out = "correlation.csv";
  co->add_option("--data", co_data, "Dataset CSV")->required()->check(CLI::ExistingFile);
  co->add_option("--out", co_out, "Output CSV path")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(g_n, g_m, g_d, g_rho, g_noise, g_missing, g_seed, g_onehot, g_out);
    if (tr->parsed()) return cmd_train(tr_opts);
    if (ev->parsed()) return cmd_eval(ev_opts, ev_checkpoint);
    if (sr->parsed()) return run_sweep_command(sr_opts, sr_ratios, sr_seeds, sr_workers, false);
    if (sl->parsed()) return run_sweep_command(sl_opts, sl_layers, sl_seeds, sl_workers, true);
    if (gc->parsed()) return cmd_gradcheck();
    if (co->parsed()) return cmd_correlate(co_data, co_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
