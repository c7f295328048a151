#pragma once

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "metalink/errors.hpp"
#include "metalink/training.hpp"

namespace metalink {

/// Run configuration: TrainConfig plus the dataset source and output
/// directory. Parsed from a flat `key = value` file (# comments, UTF-8);
/// unknown keys are rejected. Precedence: flag > METALINK_SEED env > file >
/// default.
struct RunConfig {
  TrainConfig train;
  // Dataset source: a CSV path, or synthetic generator parameters.
  std::string data_path;
  std::size_t synthetic_n = 2000, synthetic_m = 12, synthetic_d = 32;
  double synthetic_rho = 0.9, synthetic_noise = 0.1, synthetic_missing = 0.1;
  bool synthetic_onehot = false;
  std::uint64_t data_seed = 0;
  std::string out_dir = "out";

  MultiLabelDataset load_dataset() const {
    if (!data_path.empty()) return load_csv(data_path);
    return generate_synthetic(synthetic_n, synthetic_m, synthetic_d, synthetic_rho, synthetic_noise,
                              synthetic_missing, data_seed, synthetic_onehot);
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t");
  std::size_t b = s.find_last_not_of(" \t");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size())
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  const double x = parse_double(key, v);
  if (x < 0 || x != std::floor(x)) throw ConfigError(key + ": expected a non-negative integer");
  return static_cast<std::size_t>(x);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (detail::trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(key, trim(item)));
  return out;
}

}  // namespace detail

/// Applies one key/value pair. Shared by the file parser and CLI overrides.
inline void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "setting") cfg.train.setting = setting_from_string(value);
  else if (key == "aux_ratio") cfg.train.aux_ratio = parse_double(key, value);
  else if (key == "held_out_task_fraction") cfg.train.held_out_task_fraction = parse_double(key, value);
  else if (key == "shots") cfg.train.shots = parse_size(key, value);
  else if (key == "query_size") cfg.train.query_size = parse_size(key, value);
  else if (key == "n_way") cfg.train.n_way = parse_size(key, value);
  else if (key == "batch_size") cfg.train.batch_size = parse_size(key, value);
  else if (key == "epochs") cfg.train.epochs = parse_size(key, value);
  else if (key == "base_lr") cfg.train.base_lr = parse_double(key, value);
  else if (key == "weight_decay") cfg.train.weight_decay = parse_double(key, value);
  else if (key == "gnn_layers") cfg.train.gnn_layers = parse_size(key, value);
  else if (key == "feat_hidden") cfg.train.feat_hidden = parse_size_list(key, value);
  else if (key == "embed_dim") cfg.train.embed_dim = parse_size(key, value);
  else if (key == "shared_weights") cfg.train.shared_weights = parse_bool(key, value);
  else if (key == "edge_head") cfg.train.edge_head = edge_head_from_string(value);
  else if (key == "seed") cfg.train.seed = static_cast<std::uint64_t>(parse_size(key, value));
  else if (key == "eval_every") cfg.train.eval_every = std::max<std::size_t>(1, parse_size(key, value));
  else if (key == "train_frac") cfg.train.train_frac = parse_double(key, value);
  else if (key == "val_frac") cfg.train.val_frac = parse_double(key, value);
  else if (key == "test_frac") cfg.train.test_frac = parse_double(key, value);
  else if (key == "fewshot_eval_episodes") cfg.train.fewshot_eval_episodes = parse_size(key, value);
  else if (key == "fewshot_query_size") cfg.train.fewshot_query_size = parse_size(key, value);
  else if (key == "data") cfg.data_path = value;
  else if (key == "synthetic_n") cfg.synthetic_n = parse_size(key, value);
  else if (key == "synthetic_m") cfg.synthetic_m = parse_size(key, value);
  else if (key == "synthetic_d") cfg.synthetic_d = parse_size(key, value);
  else if (key == "synthetic_rho") cfg.synthetic_rho = parse_double(key, value);
  else if (key == "synthetic_noise") cfg.synthetic_noise = parse_double(key, value);
  else if (key == "synthetic_missing") cfg.synthetic_missing = parse_double(key, value);
  else if (key == "synthetic_onehot") cfg.synthetic_onehot = parse_bool(key, value);
  else if (key == "data_seed") cfg.data_seed = static_cast<std::uint64_t>(parse_size(key, value));
  else if (key == "out_dir") cfg.out_dir = value;
  else throw ConfigError("unknown config key '" + key + "'");
}

inline RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    try {
      apply_config_kv(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

/// Serializes the fully resolved configuration in the same key = value
/// grammar, every key present, defaults included.
inline std::string resolved_config_text(const RunConfig& cfg) {
  std::ostringstream os;
  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  os << "setting = " << to_string(cfg.train.setting) << "\n";
  os << "aux_ratio = " << num(cfg.train.aux_ratio) << "\n";
  os << "held_out_task_fraction = " << num(cfg.train.held_out_task_fraction) << "\n";
  os << "shots = " << cfg.train.shots << "\n";
  os << "query_size = " << cfg.train.query_size << "\n";
  os << "n_way = " << cfg.train.n_way << "\n";
  os << "batch_size = " << cfg.train.batch_size << "\n";
  os << "epochs = " << cfg.train.epochs << "\n";
  os << "base_lr = " << num(cfg.train.base_lr) << "\n";
  os << "weight_decay = " << num(cfg.train.weight_decay) << "\n";
  os << "gnn_layers = " << cfg.train.gnn_layers << "\n";
  os << "feat_hidden = ";
  for (std::size_t i = 0; i < cfg.train.feat_hidden.size(); ++i)
    os << (i ? "," : "") << cfg.train.feat_hidden[i];
  os << "\n";
  os << "embed_dim = " << cfg.train.embed_dim << "\n";
  os << "shared_weights = " << (cfg.train.shared_weights ? "true" : "false") << "\n";
  os << "edge_head = " << to_string(cfg.train.edge_head) << "\n";
  os << "seed = " << cfg.train.seed << "\n";
  os << "eval_every = " << cfg.train.eval_every << "\n";
  os << "train_frac = " << num(cfg.train.train_frac) << "\n";
  os << "val_frac = " << num(cfg.train.val_frac) << "\n";
  os << "test_frac = " << num(cfg.train.test_frac) << "\n";
  os << "fewshot_eval_episodes = " << cfg.train.fewshot_eval_episodes << "\n";
  os << "fewshot_query_size = " << cfg.train.fewshot_query_size << "\n";
  os << "data = " << cfg.data_path << "\n";
  os << "synthetic_n = " << cfg.synthetic_n << "\n";
  os << "synthetic_m = " << cfg.synthetic_m << "\n";
  os << "synthetic_d = " << cfg.synthetic_d << "\n";
  os << "synthetic_rho = " << num(cfg.synthetic_rho) << "\n";
  os << "synthetic_noise = " << num(cfg.synthetic_noise) << "\n";
  os << "synthetic_missing = " << num(cfg.synthetic_missing) << "\n";
  os << "synthetic_onehot = " << (cfg.synthetic_onehot ? "true" : "false") << "\n";
  os << "data_seed = " << cfg.data_seed << "\n";
  os << "out_dir = " << cfg.out_dir << "\n";
  return os.str();
}

}  // namespace metalink
