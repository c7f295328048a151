#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "metalink/errors.hpp"

namespace metalink {

/// Mann-Whitney ROC AUC: the probability that a random positive outscores a
/// random negative, with ties credited 1/2. Computed from average ranks.
inline double roc_auc(const std::vector<double>& scores, const std::vector<double>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("roc_auc: length mismatch");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (double l : labels) {
    if (l != 0.0 && l != 1.0) throw ContractError("roc_auc: labels must be 0 or 1");
    if (l == 1.0) ++n_pos;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw MetricError("roc_auc: undefined for single-class labels");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of average ranks (1-based) over positives, ties sharing one rank.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1.0) rank_sum_pos += avg_rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

/// Ranking average precision over the score-descending order; ties broken by
/// original index (stable).
inline double average_precision(const std::vector<double>& scores, const std::vector<double>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("average_precision: length mismatch");
  std::size_t n_pos = 0;
  for (double l : labels) {
    if (l != 0.0 && l != 1.0) throw ContractError("average_precision: labels must be 0 or 1");
    if (l == 1.0) ++n_pos;
  }
  if (n_pos == 0) throw MetricError("average_precision: no positives");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double hits = 0.0, ap = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]] == 1.0) {
      hits += 1.0;
      ap += hits / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(n_pos);
}

struct TaskMetrics {
  std::string task;
  double auc = 0.0;
  double ap = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

/// Per-task and macro metrics of one evaluation. Tasks with a single label
/// class in the split are excluded from the macro averages and listed.
struct MetricsReport {
  std::vector<TaskMetrics> per_task;
  double macro_auc = 0.0;
  double mean_ap = 0.0;  // mAP
  double eval_loss = 0.0;
  std::vector<std::string> excluded_tasks;
  double episode_accuracy = -1.0;  // few-shot mode only; negative = absent

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["macro_auc"] = macro_auc;
    j["mAP"] = mean_ap;
    j["eval_loss"] = eval_loss;
    j["excluded_tasks"] = excluded_tasks;
    j["per_task"] = nlohmann::json::array();
    for (const auto& t : per_task)
      j["per_task"].push_back({{"task", t.task},
                               {"auc", t.auc},
                               {"ap", t.ap},
                               {"n_pos", t.n_pos},
                               {"n_neg", t.n_neg}});
    if (episode_accuracy >= 0.0) j["episode_accuracy"] = episode_accuracy;
    return j;
  }
};

/// Builds a report from per-task (score, label) collections.
inline MetricsReport make_report(const std::vector<std::string>& task_names,
                                 const std::vector<std::vector<double>>& scores,
                                 const std::vector<std::vector<double>>& labels) {
  MetricsReport rep;
  double auc_sum = 0.0, ap_sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t j = 0; j < task_names.size(); ++j) {
    std::size_t n_pos = 0, n_neg = 0;
    for (double l : labels[j]) (l == 1.0 ? n_pos : n_neg) += 1;
    if (n_pos == 0 || n_neg == 0) {
      rep.excluded_tasks.push_back(task_names[j]);
      continue;
    }
    TaskMetrics tm;
    tm.task = task_names[j];
    tm.auc = roc_auc(scores[j], labels[j]);
    tm.ap = average_precision(scores[j], labels[j]);
    tm.n_pos = n_pos;
    tm.n_neg = n_neg;
    auc_sum += tm.auc;
    ap_sum += tm.ap;
    ++counted;
    rep.per_task.push_back(std::move(tm));
  }
  if (counted > 0) {
    rep.macro_auc = auc_sum / static_cast<double>(counted);
    rep.mean_ap = ap_sum / static_cast<double>(counted);
  }
  return rep;
}

/// Mean and sample standard deviation (n-1) of per-seed reports.
struct AggregateReport {
  std::size_t n_runs = 0;
  double macro_auc_mean = 0.0, macro_auc_std = 0.0;
  double map_mean = 0.0, map_std = 0.0;
  bool single_run_flag = false;  // std reported as 0 from one run
  std::vector<std::string> task_names;
  std::vector<double> task_auc_mean, task_auc_std;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["n_runs"] = n_runs;
    j["macro_auc"] = {{"mean", macro_auc_mean}, {"std", macro_auc_std}};
    j["mAP"] = {{"mean", map_mean}, {"std", map_std}};
    j["single_run_flag"] = single_run_flag;
    j["per_task"] = nlohmann::json::array();
    for (std::size_t i = 0; i < task_names.size(); ++i)
      j["per_task"].push_back(
          {{"task", task_names[i]}, {"auc_mean", task_auc_mean[i]}, {"auc_std", task_auc_std[i]}});
    return j;
  }
};

inline AggregateReport aggregate(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ContractError("aggregate: no reports");
  for (std::size_t r = 1; r < reports.size(); ++r) {
    if (reports[r].per_task.size() != reports[0].per_task.size())
      throw ContractError("aggregate: reports cover different task sets");
    for (std::size_t j = 0; j < reports[r].per_task.size(); ++j)
      if (reports[r].per_task[j].task != reports[0].per_task[j].task)
        throw ContractError("aggregate: reports cover different task sets");
  }
  auto mean_std = [](const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double std = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    return std::pair<double, double>{mean, std};
  };

  AggregateReport agg;
  agg.n_runs = reports.size();
  agg.single_run_flag = reports.size() == 1;
  std::vector<double> macro, maps;
  for (const auto& r : reports) {
    macro.push_back(r.macro_auc);
    maps.push_back(r.mean_ap);
  }
  std::tie(agg.macro_auc_mean, agg.macro_auc_std) = mean_std(macro);
  std::tie(agg.map_mean, agg.map_std) = mean_std(maps);
  for (std::size_t j = 0; j < reports[0].per_task.size(); ++j) {
    std::vector<double> aucs;
    for (const auto& r : reports) aucs.push_back(r.per_task[j].auc);
    auto [m, s] = mean_std(aucs);
    agg.task_names.push_back(reports[0].per_task[j].task);
    agg.task_auc_mean.push_back(m);
    agg.task_auc_std.push_back(s);
  }
  return agg;
}

}  // namespace metalink
