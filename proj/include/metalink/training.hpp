#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "metalink/dataset.hpp"
#include "metalink/episode.hpp"
#include "metalink/errors.hpp"
#include "metalink/gradcheck.hpp"
#include "metalink/kgraph.hpp"
#include "metalink/metrics.hpp"
#include "metalink/model.hpp"
#include "metalink/optim.hpp"
#include "metalink/tape.hpp"

namespace metalink {

enum class Setting { standard, relational, meta, relational_meta, fewshot };

inline std::string to_string(Setting s) {
  switch (s) {
    case Setting::standard: return "standard";
    case Setting::relational: return "relational";
    case Setting::meta: return "meta";
    case Setting::relational_meta: return "relational_meta";
    case Setting::fewshot: return "fewshot";
  }
  return "?";
}

inline Setting setting_from_string(const std::string& s) {
  if (s == "standard") return Setting::standard;
  if (s == "relational") return Setting::relational;
  if (s == "meta") return Setting::meta;
  if (s == "relational_meta") return Setting::relational_meta;
  if (s == "fewshot") return Setting::fewshot;
  throw ConfigError("unknown setting '" + s + "'");
}

struct TrainConfig {
  Setting setting = Setting::standard;
  double aux_ratio = 0.2;
  double held_out_task_fraction = 0.2;
  std::size_t shots = 64;
  std::size_t query_size = 128;
  std::size_t n_way = 5;
  std::size_t batch_size = 128;
  std::size_t epochs = 50;
  double base_lr = 0.001;
  double weight_decay = 0.0;
  std::size_t gnn_layers = 2;
  std::vector<std::size_t> feat_hidden = {64, 64};
  std::size_t embed_dim = 64;
  bool shared_weights = false;
  EdgeHead edge_head = EdgeHead::mlp;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  double train_frac = 0.8, val_frac = 0.1, test_frac = 0.1;
  std::size_t fewshot_eval_episodes = 50;
  std::size_t fewshot_query_size = 15;

  bool is_meta_mode() const {
    return setting == Setting::meta || setting == Setting::relational_meta ||
           setting == Setting::fewshot;
  }

  void validate(const MultiLabelDataset& ds) const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (base_lr <= 0.0) throw ConfigError("base_lr must be > 0");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (aux_ratio < 0.0 || aux_ratio >= 1.0) throw ConfigError("aux_ratio must be in [0,1)");
    if (ds.d == 0 || ds.m == 0) throw ConfigError("dataset is empty");
    if (is_meta_mode()) {
      if (held_out_task_fraction <= 0.0 || held_out_task_fraction >= 1.0)
        throw ConfigError("meta settings require held_out_task_fraction in (0,1)");
      if (ds.m < 2) throw ConfigError("meta settings require at least 2 tasks");
      if (shots < 1) throw ConfigError("shots must be >= 1");
      if (query_size < 1) throw ConfigError("query_size must be >= 1");
    }
    if (setting == Setting::fewshot && n_way < 2) throw ConfigError("fewshot requires n_way >= 2");
  }
};

struct TrainHistory {
  std::vector<double> train_loss;   // per epoch
  std::vector<double> val_metric;   // per epoch, carried forward between evals
  std::vector<double> lr;           // per epoch, lr of the epoch's first step
  std::vector<double> epoch_seconds;  // wall clock; log-only, never serialized
  MetricsReport final_test;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  std::size_t leakage_violations = 0;
  std::size_t meta_hygiene_violations = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["train_loss"] = train_loss;
    j["val_metric"] = val_metric;
    j["lr"] = lr;
    j["best_epoch"] = best_epoch;
    j["best_val"] = best_val;
    j["leakage_violations"] = leakage_violations;
    j["meta_hygiene_violations"] = meta_hygiene_violations;
    j["final_test"] = final_test.to_json();
    return j;
  }
};

// ---------------------------------------------------------------------------
// Episode -> tape forward
// ---------------------------------------------------------------------------

struct EpisodeForward {
  Var logits;  // n_targets x 1
  std::vector<double> target_labels;
  std::vector<std::size_t> target_examples;  // dataset rows, aligned with logits
  std::vector<std::size_t> target_tasks;     // global ids, aligned with logits
  std::size_t leakage_overlaps = 0;
};

/// Runs feature extraction, graph construction and the GNN forward for one
/// episode. Gradients flow into every model parameter the episode touches.
inline EpisodeForward episode_forward(Tape& t, const MetaLinkModel& model,
                                      const MultiLabelDataset& ds, const EpisodeBatch& ep) {
  const std::vector<std::size_t> examples = ep.all_examples();
  if (examples.empty()) throw ContractError("episode_forward: no examples");
  std::map<std::size_t, std::size_t> row_of;
  DenseMatrix X(examples.size(), ds.d);
  for (std::size_t r = 0; r < examples.size(); ++r) {
    if (!row_of.emplace(examples[r], r).second)
      throw ContractError("episode_forward: duplicate example in batch");
    for (std::size_t c = 0; c < ds.d; ++c) X(r, c) = ds.features(examples[r], c);
  }

  Var Z = extract_features(t, model, X);

  DenseMatrix task_w(ep.seen_tasks.size(), model.config.embed_dim);
  const DenseMatrix& W = model.params.at("tasks.W");
  for (std::size_t r = 0; r < ep.seen_tasks.size(); ++r) {
    if (ep.seen_tasks[r] >= W.rows()) throw ContractError("episode_forward: seen task out of range");
    for (std::size_t c = 0; c < W.cols(); ++c) task_w(r, c) = W(ep.seen_tasks[r], c);
  }

  std::vector<std::tuple<std::size_t, std::size_t, double>> known;
  std::set<std::pair<std::size_t, std::size_t>> known_pairs;
  for (const auto* list : {&ep.support, &ep.query_known})
    for (const auto& tr : *list) {
      known.emplace_back(row_of.at(tr.example), tr.task, label_value(tr.label));
      known_pairs.emplace(row_of.at(tr.example), tr.task);
    }

  EpisodeForward out;
  std::vector<std::pair<std::size_t, std::size_t>> target_rows;  // (row, global task)
  for (const auto& tr : ep.query_targets) {
    target_rows.emplace_back(row_of.at(tr.example), tr.task);
    if (known_pairs.count({row_of.at(tr.example), tr.task})) ++out.leakage_overlaps;
    out.target_labels.push_back(label_value(tr.label));
    out.target_examples.push_back(tr.example);
    out.target_tasks.push_back(tr.task);
  }

  KnowledgeGraph g =
      build_graph(t.value(Z), ep.seen_tasks, task_w, ep.unseen_tasks, known, target_rows);

  std::vector<std::pair<std::size_t, std::size_t>> target_pairs;
  target_pairs.reserve(target_rows.size());
  for (const auto& [r, task] : target_rows) target_pairs.emplace_back(r, g.task_pos(task));

  out.logits = model_forward(t, model, g, Z, target_pairs);
  return out;
}

/// Masked BCE over the episode's query targets.
inline Var episode_loss_multilabel_var(Tape& t, const MetaLinkModel& model,
                                       const MultiLabelDataset& ds, const EpisodeBatch& ep) {
  if (ep.query_targets.empty()) throw ContractError("episode loss: no query targets");
  EpisodeForward fwd = episode_forward(t, model, ds, ep);
  return bce_with_logits(fwd.logits, fwd.target_labels,
                         std::vector<double>(fwd.target_labels.size(), 1.0));
}

inline double episode_loss_multilabel(const MetaLinkModel& model, const MultiLabelDataset& ds,
                                      const EpisodeBatch& ep) {
  Tape t;
  return t.value(episode_loss_multilabel_var(t, model, ds, ep))[0];
}

/// N-way cross-entropy: per query example, softmax over its n_way link
/// logits with the single positive as the target class; averaged.
inline Var fewshot_ce_from_forward(Tape& t, const EpisodeForward& fwd) {
  // Group target rows by query example, preserving order.
  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> groups;
  for (std::size_t i = 0; i < fwd.target_examples.size(); ++i) {
    if (groups.empty() || groups.back().first != fwd.target_examples[i])
      groups.push_back({fwd.target_examples[i], {}});
    groups.back().second.push_back(i);
  }
  Var total{&t, 0};
  bool first = true;
  for (const auto& [ex, rows] : groups) {
    std::size_t positives = 0, pos_at = 0;
    for (std::size_t k = 0; k < rows.size(); ++k)
      if (fwd.target_labels[rows[k]] == 1.0) {
        ++positives;
        pos_at = k;
      }
    if (positives != 1)
      throw ContractError("fewshot loss: example " + std::to_string(ex) + " has " +
                          std::to_string(positives) + " positive links, expected exactly 1");
    Var group_logits = gather_rows(fwd.logits, rows);
    Var ce = softmax_ce(group_logits, pos_at);
    total = first ? ce : add(total, ce);
    first = false;
  }
  return scale(total, 1.0 / static_cast<double>(groups.size()));
}

inline Var episode_loss_fewshot_var(Tape& t, const MetaLinkModel& model,
                                    const MultiLabelDataset& ds, const EpisodeBatch& ep) {
  if (ep.query_targets.empty()) throw ContractError("episode loss: no query targets");
  EpisodeForward fwd = episode_forward(t, model, ds, ep);
  return fewshot_ce_from_forward(t, fwd);
}

inline double episode_loss_fewshot(const MetaLinkModel& model, const MultiLabelDataset& ds,
                                   const EpisodeBatch& ep) {
  Tape t;
  return t.value(episode_loss_fewshot_var(t, model, ds, ep))[0];
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalParams {
  Setting setting = Setting::standard;
  double aux_ratio = 0.0;
  std::size_t shots = 64;
  std::size_t n_way = 5;
  std::size_t episodes = 50;      // fewshot
  std::size_t query_size = 15;    // fewshot
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  // Meta modes: tasks evaluated with ones-init nodes (real or simulated
  // unseen), and seen tasks available as auxiliary knowledge.
  std::vector<std::size_t> target_tasks;
  std::vector<std::size_t> aux_tasks;
};

namespace detail {

struct ScoreSink {
  std::vector<std::vector<double>> scores, labels;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;

  explicit ScoreSink(std::size_t m) : scores(m), labels(m) {}

  void add(const EpisodeForward& fwd, const DenseMatrix& logits,
           const std::map<std::size_t, std::size_t>& task_slot) {
    for (std::size_t i = 0; i < fwd.target_labels.size(); ++i) {
      const std::size_t slot = task_slot.at(fwd.target_tasks[i]);
      const double l = logits(i, 0);
      scores[slot].push_back(stable_sigmoid(l));
      labels[slot].push_back(fwd.target_labels[i]);
      const double t = fwd.target_labels[i];
      loss_sum += std::max(l, 0.0) - l * t + std::log1p(std::exp(-std::abs(l)));
      ++loss_count;
    }
  }
};

/// Per-example auxiliary subset at eval time: a fixed function of
/// (dataset row, seed), independent of batch composition.
inline std::vector<std::size_t> eval_aux_subset(const MultiLabelDataset& ds, std::size_t ex,
                                                const std::vector<std::size_t>& pool_tasks,
                                                double aux_ratio, std::uint64_t seed,
                                                bool keep_one_target) {
  std::vector<std::size_t> avail;
  for (std::size_t j : pool_tasks)
    if (ds.label(ex, j) != Label::missing) avail.push_back(j);
  if (avail.empty()) return {};
  std::size_t k = aux_count(aux_ratio, pool_tasks.size());
  if (keep_one_target) k = std::min(k, avail.size() - 1);
  k = std::min(k, avail.size());
  Rng rng(Rng::mix(seed, ex));
  std::vector<std::size_t> aux = rng.sample_without_replacement(avail, k);
  std::sort(aux.begin(), aux.end());
  return aux;
}

}  // namespace detail

/// Evaluates a model over a split. Standard and relational runs share the
/// same per-example target partition for a given seed, so their reports are
/// directly comparable; with aux_ratio = 0 the two are identical.
inline MetricsReport evaluate(const MetaLinkModel& model, const MultiLabelDataset& ds,
                              const std::vector<std::size_t>& split, const EvalParams& params) {
  if (split.empty()) throw ContractError("evaluate: empty split");

  if (params.setting == Setting::standard || params.setting == Setting::relational) {
    std::vector<std::size_t> all_tasks(ds.m);
    std::iota(all_tasks.begin(), all_tasks.end(), 0);
    detail::ScoreSink sink(ds.m);
    std::map<std::size_t, std::size_t> task_slot;
    for (std::size_t j = 0; j < ds.m; ++j) task_slot[j] = j;

    for (std::size_t start = 0; start < split.size(); start += params.batch_size) {
      const std::size_t stop = std::min(split.size(), start + params.batch_size);
      EpisodeBatch ep;
      ep.seen_tasks = all_tasks;
      ep.query_examples.assign(split.begin() + start, split.begin() + stop);
      for (std::size_t ex : ep.query_examples) {
        const std::vector<std::size_t> aux =
            detail::eval_aux_subset(ds, ex, all_tasks, params.aux_ratio, params.seed, true);
        std::set<std::size_t> aux_set(aux.begin(), aux.end());
        if (params.setting == Setting::relational)
          for (std::size_t j : aux) ep.query_known.push_back({ex, j, ds.label(ex, j)});
        for (std::size_t j : ds.non_missing_tasks(ex))
          if (!aux_set.count(j)) ep.query_targets.push_back({ex, j, ds.label(ex, j)});
      }
      if (ep.query_targets.empty()) continue;
      Tape t;
      EpisodeForward fwd = episode_forward(t, model, ds, ep);
      sink.add(fwd, t.value(fwd.logits), task_slot);
    }
    MetricsReport rep = make_report(ds.task_names, sink.scores, sink.labels);
    rep.eval_loss = sink.loss_count ? sink.loss_sum / static_cast<double>(sink.loss_count) : 0.0;
    return rep;
  }

  if (params.setting == Setting::meta || params.setting == Setting::relational_meta) {
    if (params.target_tasks.empty()) throw ContractError("evaluate: meta modes need target tasks");
    if (split.size() <= params.shots)
      throw SamplingError("evaluate: split of " + std::to_string(split.size()) +
                          " cannot supply " + std::to_string(params.shots) + " support examples");
    std::vector<std::size_t> shuffled = split;
    Rng support_rng(Rng::mix(params.seed, 0x5EED));
    support_rng.shuffle(shuffled);
    const std::vector<std::size_t> support(shuffled.begin(), shuffled.begin() + params.shots);
    const std::vector<std::size_t> queries(shuffled.begin() + params.shots, shuffled.end());

    std::vector<std::string> names;
    std::map<std::size_t, std::size_t> task_slot;
    for (std::size_t j : params.target_tasks) {
      task_slot[j] = names.size();
      names.push_back(ds.task_names[j]);
    }
    detail::ScoreSink sink(names.size());

    const std::size_t chunk = std::max<std::size_t>(1, params.batch_size);
    for (std::size_t start = 0; start < queries.size(); start += chunk) {
      const std::size_t stop = std::min(queries.size(), start + chunk);
      EpisodeBatch ep;
      ep.unseen_tasks = params.target_tasks;
      ep.support_examples = support;
      ep.query_examples.assign(queries.begin() + start, queries.begin() + stop);
      for (std::size_t ex : support)
        for (std::size_t j : params.target_tasks)
          if (ds.label(ex, j) != Label::missing) ep.support.push_back({ex, j, ds.label(ex, j)});
      if (params.setting == Setting::relational_meta) {
        ep.seen_tasks = params.aux_tasks;
        for (std::size_t ex : ep.query_examples)
          for (std::size_t j :
               detail::eval_aux_subset(ds, ex, params.aux_tasks, params.aux_ratio, params.seed, false))
            ep.query_known.push_back({ex, j, ds.label(ex, j)});
      }
      for (std::size_t ex : ep.query_examples)
        for (std::size_t j : params.target_tasks)
          if (ds.label(ex, j) != Label::missing) ep.query_targets.push_back({ex, j, ds.label(ex, j)});
      if (ep.query_targets.empty()) continue;
      Tape t;
      EpisodeForward fwd = episode_forward(t, model, ds, ep);
      sink.add(fwd, t.value(fwd.logits), task_slot);
    }
    MetricsReport rep = make_report(names, sink.scores, sink.labels);
    rep.eval_loss = sink.loss_count ? sink.loss_sum / static_cast<double>(sink.loss_count) : 0.0;
    return rep;
  }

  // Few-shot: episodic accuracy over sampled N-way episodes.
  if (params.target_tasks.empty()) throw ContractError("evaluate: fewshot needs candidate tasks");
  Rng rng(Rng::mix(params.seed, 0xF05));
  double correct = 0.0, total = 0.0, loss_sum = 0.0;
  for (std::size_t e = 0; e < params.episodes; ++e) {
    EpisodeBatch ep = sample_fewshot(ds, split, params.target_tasks, params.n_way, params.shots,
                                     params.query_size, rng);
    Tape t;
    EpisodeForward fwd = episode_forward(t, model, ds, ep);
    const DenseMatrix logits = t.value(fwd.logits);  // copy: loss recording extends the tape
    loss_sum += t.value(fewshot_ce_from_forward(t, fwd))[0];
    for (std::size_t q = 0; q < ep.query_examples.size(); ++q) {
      const std::size_t base = q * params.n_way;
      std::size_t best = 0;
      for (std::size_t k = 1; k < params.n_way; ++k)
        if (logits(base + k, 0) > logits(base + best, 0)) best = k;
      correct += fwd.target_labels[base + best] == 1.0 ? 1.0 : 0.0;
      total += 1.0;
    }
  }
  MetricsReport rep;
  rep.episode_accuracy = total > 0 ? correct / total : 0.0;
  rep.eval_loss = loss_sum / static_cast<double>(params.episodes);
  return rep;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  MetaLinkModel model;
  TrainHistory history;
  SplitSpec split;
  std::vector<std::size_t> seen_tasks;
  std::vector<std::size_t> unseen_tasks;
};

namespace detail {

inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> task_split(
    std::size_t m, double held_out_fraction, std::uint64_t seed) {
  std::vector<std::size_t> tasks(m);
  std::iota(tasks.begin(), tasks.end(), 0);
  Rng rng(Rng::mix(seed, 0x7A5C));
  rng.shuffle(tasks);
  const std::size_t n_u = std::max<std::size_t>(1, aux_count(held_out_fraction, m));
  if (n_u >= m) throw ConfigError("held_out_task_fraction leaves no seen tasks");
  std::vector<std::size_t> unseen(tasks.begin(), tasks.begin() + n_u);
  std::vector<std::size_t> seen(tasks.begin() + n_u, tasks.end());
  std::sort(unseen.begin(), unseen.end());
  std::sort(seen.begin(), seen.end());
  return {seen, unseen};
}

inline EvalParams eval_params_for(const TrainConfig& cfg, const std::vector<std::size_t>& seen,
                                  const std::vector<std::size_t>& unseen, bool final_test,
                                  std::uint64_t eval_seed) {
  EvalParams p;
  p.setting = cfg.setting;
  p.aux_ratio = cfg.setting == Setting::standard ? 0.0 : cfg.aux_ratio;
  p.shots = cfg.shots;
  p.n_way = cfg.n_way;
  p.episodes = cfg.fewshot_eval_episodes;
  p.query_size = cfg.fewshot_query_size;
  p.seed = eval_seed;
  switch (cfg.setting) {
    case Setting::standard:
    case Setting::relational:
      break;
    case Setting::meta:
      // Validation must not touch the held-out tasks: simulate on seen ones.
      p.target_tasks = final_test ? unseen : seen;
      break;
    case Setting::relational_meta: {
      if (final_test) {
        p.target_tasks = unseen;
        p.aux_tasks = seen;
      } else {
        auto [aux, sim] = task_split(seen.size(), cfg.held_out_task_fraction, eval_seed);
        for (auto& j : sim) j = seen[j];
        for (auto& j : aux) j = seen[j];
        p.target_tasks = sim;
        p.aux_tasks = aux;
      }
      break;
    }
    case Setting::fewshot:
      p.target_tasks = final_test ? unseen : seen;
      break;
  }
  return p;
}

inline double report_metric(const MetricsReport& rep, Setting setting) {
  return setting == Setting::fewshot ? rep.episode_accuracy : rep.macro_auc;
}

}  // namespace detail

/// Trains under the configured setting: sample episode, extract features,
/// build the batch knowledge graph, run L GNN layers with per-layer edge
/// predictions, backprop the criterion, Adam step on a cosine schedule.
/// Checkpoints the best-validation parameters and evaluates them on test.
inline TrainResult train(const MultiLabelDataset& ds, const TrainConfig& cfg,
                         std::ostream* log = nullptr) {
  cfg.validate(ds);
  ds.validate();

  TrainResult res;
  res.split = split_dataset(ds, cfg.train_frac, cfg.val_frac, cfg.test_frac, Rng::mix(cfg.seed, 1));

  std::vector<std::size_t> all_tasks(ds.m);
  std::iota(all_tasks.begin(), all_tasks.end(), 0);
  if (cfg.is_meta_mode()) {
    std::tie(res.seen_tasks, res.unseen_tasks) =
        detail::task_split(ds.m, cfg.held_out_task_fraction, cfg.seed);
    if (cfg.setting == Setting::fewshot &&
        (res.seen_tasks.size() < cfg.n_way || res.unseen_tasks.size() < cfg.n_way))
      throw ConfigError("fewshot: n_way exceeds seen or held-out task count");
  } else {
    res.seen_tasks = all_tasks;
  }

  ModelConfig mc;
  mc.input_dim = ds.d;
  mc.feat_hidden = cfg.feat_hidden;
  mc.embed_dim = cfg.embed_dim;
  mc.gnn_layers = cfg.gnn_layers;
  mc.shared_weights = cfg.shared_weights;
  mc.num_tasks = ds.m;
  mc.edge_head = cfg.edge_head;
  Rng init_rng(Rng::mix(cfg.seed, 2));
  res.model = MetaLinkModel::init(mc, init_rng);
  res.model.unseen_tasks = res.unseen_tasks;

  const std::size_t train_n = res.split.train.size();
  std::size_t iters = 1;
  if (cfg.setting == Setting::standard || cfg.setting == Setting::relational)
    iters = (train_n + cfg.batch_size - 1) / cfg.batch_size;
  else
    iters = std::max<std::size_t>(1, (train_n + cfg.shots + cfg.query_size - 1) /
                                         (cfg.shots + cfg.query_size));
  const std::size_t total_steps = std::max<std::size_t>(1, cfg.epochs * iters);
  const std::uint64_t eval_seed = Rng::mix(cfg.seed, 0xE7A1);

  Rng episode_rng(Rng::mix(cfg.seed, 3));
  OptimizerState opt;
  std::size_t global_step = 0;
  ParamMap best_params;
  bool have_best = false;
  const std::set<std::size_t> unseen_set(res.unseen_tasks.begin(), res.unseen_tasks.end());

  const std::size_t n_sim =
      cfg.setting == Setting::relational_meta
          ? std::max<std::size_t>(1, aux_count(cfg.held_out_task_fraction, res.seen_tasks.size()))
          : 0;
  if (cfg.setting == Setting::relational_meta && n_sim >= res.seen_tasks.size())
    throw ConfigError("relational_meta: no seen tasks left after simulating held-out tasks");

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    std::vector<std::size_t> order = res.split.train;
    episode_rng.shuffle(order);
    res.history.lr.push_back(cosine_lr(cfg.base_lr, global_step, total_steps));

    for (std::size_t it = 0; it < iters; ++it) {
      EpisodeBatch ep;
      switch (cfg.setting) {
        case Setting::standard:
        case Setting::relational: {
          const std::size_t start = it * cfg.batch_size;
          const std::size_t stop = std::min(train_n, start + cfg.batch_size);
          std::vector<std::size_t> chunk(order.begin() + start, order.begin() + stop);
          const double ratio = cfg.setting == Setting::standard ? 0.0 : cfg.aux_ratio;
          ep = sample_relational(ds, chunk, ratio, episode_rng);
          break;
        }
        case Setting::meta:
          ep = sample_meta(ds, res.split.train, res.seen_tasks, 0, cfg.shots, cfg.query_size,
                           episode_rng);
          break;
        case Setting::relational_meta: {
          std::vector<std::size_t> sim =
              episode_rng.sample_without_replacement(res.seen_tasks, n_sim);
          std::sort(sim.begin(), sim.end());
          std::vector<std::size_t> rest;
          std::set<std::size_t> sim_set(sim.begin(), sim.end());
          for (std::size_t j : res.seen_tasks)
            if (!sim_set.count(j)) rest.push_back(j);
          ep = sample_relational_meta(ds, res.split.train, rest, sim, cfg.aux_ratio, cfg.shots,
                                      cfg.query_size, episode_rng);
          break;
        }
        case Setting::fewshot:
          ep = sample_fewshot(ds, res.split.train, res.seen_tasks, cfg.n_way, cfg.shots,
                              cfg.query_size, episode_rng);
          break;
      }
      if (ep.query_targets.empty()) continue;

      // Meta hygiene: training must never touch a held-out task.
      for (const auto* list : {&ep.support, &ep.query_known, &ep.query_targets})
        for (const auto& tr : *list)
          if (unseen_set.count(tr.task)) ++res.history.meta_hygiene_violations;

      Tape t;
      EpisodeForward fwd = episode_forward(t, res.model, ds, ep);
      res.history.leakage_violations += fwd.leakage_overlaps;
      Var loss = cfg.setting == Setting::fewshot
                     ? fewshot_ce_from_forward(t, fwd)
                     : bce_with_logits(fwd.logits, fwd.target_labels,
                                       std::vector<double>(fwd.target_labels.size(), 1.0));
      const double loss_value = t.value(loss)[0];
      if (!std::isfinite(loss_value))
        throw DivergenceError("training diverged: non-finite loss at epoch " +
                              std::to_string(epoch) + ", step " + std::to_string(global_step));
      t.backward(loss);

      ParamMap grads;
      for (const auto& [name, _] : res.model.params) grads.emplace(name, t.gradient(name));
      const double lr = cosine_lr(cfg.base_lr, global_step, total_steps);
      adam_step(res.model.params, grads, opt, lr, cfg.weight_decay);
      ++global_step;
      loss_sum += loss_value;
      ++loss_count;
    }

    res.history.train_loss.push_back(loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0);

    double val_metric = res.history.val_metric.empty() ? 0.0 : res.history.val_metric.back();
    if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
      const EvalParams vp =
          detail::eval_params_for(cfg, res.seen_tasks, res.unseen_tasks, false, eval_seed);
      val_metric = detail::report_metric(evaluate(res.model, ds, res.split.val, vp), cfg.setting);
      if (!have_best || val_metric > res.history.best_val) {
        res.history.best_val = val_metric;
        res.history.best_epoch = epoch;
        best_params = res.model.params;
        have_best = true;
      }
    }
    res.history.val_metric.push_back(val_metric);

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.history.epoch_seconds.push_back(secs);
    if (log)
      (*log) << "epoch " << epoch << " loss " << res.history.train_loss.back() << " val "
             << val_metric << " lr " << res.history.lr.back() << " (" << secs << "s)\n";
  }

  if (have_best) res.model.params = best_params;
  if (cfg.epochs > 0) {
    const EvalParams tp =
        detail::eval_params_for(cfg, res.seen_tasks, res.unseen_tasks, true, eval_seed);
    res.history.final_test = evaluate(res.model, ds, res.split.test, tp);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepCell {
  double x = 0.0;  // ratio or layer count
  std::uint64_t seed = 0;
  double metric = 0.0;
};

namespace detail {

template <typename MakeConfig>
inline std::vector<SweepCell> run_sweep(const MultiLabelDataset& ds, const std::vector<double>& xs,
                                        const std::vector<std::uint64_t>& seeds,
                                        const MakeConfig& make_config, std::size_t workers) {
  std::vector<SweepCell> cells;
  for (double x : xs)
    for (std::uint64_t s : seeds) cells.push_back({x, s, 0.0});

  auto run_cell = [&](SweepCell& cell) {
    TrainConfig cfg = make_config(cell.x, cell.seed);
    TrainResult r = train(ds, cfg);
    cell.metric = report_metric(r.history.final_test, cfg.setting);
  };

  if (workers <= 1) {
    for (auto& c : cells) run_cell(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, cells.size()); ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1))
          run_cell(cells[i]);
      });
    for (auto& th : pool) th.join();
  }
  return cells;
}

}  // namespace detail

/// Trains and evaluates one run per (aux ratio, seed); ratio 0 is the
/// standard setting baseline.
inline std::vector<SweepCell> sweep_aux_ratio(const MultiLabelDataset& ds, const TrainConfig& base,
                                              const std::vector<double>& ratios,
                                              const std::vector<std::uint64_t>& seeds,
                                              std::size_t workers = 1) {
  for (double r : ratios)
    if (r < 0.0 || r >= 1.0) throw ConfigError("sweep: ratios must lie in [0,1)");
  return detail::run_sweep(ds, ratios, seeds,
                           [&](double x, std::uint64_t s) {
                             TrainConfig cfg = base;
                             cfg.setting = Setting::relational;
                             cfg.aux_ratio = x;
                             cfg.seed = s;
                             return cfg;
                           },
                           workers);
}

inline std::vector<SweepCell> sweep_layers(const MultiLabelDataset& ds, const TrainConfig& base,
                                           const std::vector<std::size_t>& layer_counts,
                                           const std::vector<std::uint64_t>& seeds,
                                           std::size_t workers = 1) {
  std::vector<double> xs;
  for (std::size_t l : layer_counts) xs.push_back(static_cast<double>(l));
  return detail::run_sweep(ds, xs, seeds,
                           [&](double x, std::uint64_t s) {
                             TrainConfig cfg = base;
                             cfg.gnn_layers = static_cast<std::size_t>(x);
                             cfg.seed = s;
                             return cfg;
                           },
                           workers);
}

}  // namespace metalink
