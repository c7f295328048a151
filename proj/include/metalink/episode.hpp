#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <vector>

#include "metalink/dataset.hpp"
#include "metalink/errors.hpp"
#include "metalink/rng.hpp"

namespace metalink {

/// One (example, task, label) triple. example is a dataset row index.
struct LabeledTriple {
  std::size_t example;
  std::size_t task;
  Label label;
};

/// One training/eval unit. Support triples come from the support set S,
/// query_known are auxiliary labels available at inference, query_targets
/// are the pairs to predict. In meta modes unseen_tasks holds the episode's
/// simulated-or-real unseen task set.
struct EpisodeBatch {
  std::vector<std::size_t> support_examples;
  std::vector<std::size_t> query_examples;
  std::vector<LabeledTriple> support;
  std::vector<LabeledTriple> query_known;
  std::vector<LabeledTriple> query_targets;
  std::vector<std::size_t> seen_tasks;
  std::vector<std::size_t> unseen_tasks;

  std::vector<std::size_t> all_examples() const {
    std::vector<std::size_t> out = support_examples;
    out.insert(out.end(), query_examples.begin(), query_examples.end());
    return out;
  }

  /// Episode task set: seen then unseen, ascending within each group.
  std::vector<std::size_t> episode_tasks() const {
    std::vector<std::size_t> out = seen_tasks;
    out.insert(out.end(), unseen_tasks.begin(), unseen_tasks.end());
    return out;
  }

  void check_invariants() const {
    std::set<std::pair<std::size_t, std::size_t>> known;
    for (const auto& t : support) known.emplace(t.example, t.task);
    for (const auto& t : query_known) {
      if (!known.emplace(t.example, t.task).second)
        throw ContractError("episode: duplicate known pair");
    }
    for (const auto& t : query_targets)
      if (known.count({t.example, t.task}))
        throw ContractError("episode: target pair also given as known input");
    for (const auto* list : {&support, &query_known, &query_targets})
      for (const auto& t : *list)
        if (t.label == Label::missing) throw ContractError("episode: missing label referenced");
  }
};

/// Auxiliary-task count for a pool of size pool_m at the given ratio.
/// floor rounding, with an epsilon so exact fractions like 1/3 * 3 survive.
inline std::size_t aux_count(double aux_ratio, std::size_t pool_m) {
  return static_cast<std::size_t>(std::floor(aux_ratio * static_cast<double>(pool_m) + 1e-9));
}

/// Relational episode: per example, k = floor(aux_ratio * m) non-missing
/// tasks become auxiliary inputs and every other non-missing task becomes a
/// target. aux_ratio = 0 reduces to the standard setting.
inline EpisodeBatch sample_relational(const MultiLabelDataset& ds,
                                      const std::vector<std::size_t>& example_indices,
                                      double aux_ratio, Rng& rng) {
  if (aux_ratio < 0.0 || aux_ratio >= 1.0)
    throw ContractError("sample_relational: aux_ratio must be in [0,1)");
  EpisodeBatch ep;
  ep.query_examples = example_indices;
  ep.seen_tasks.resize(ds.m);
  std::iota(ep.seen_tasks.begin(), ep.seen_tasks.end(), 0);

  const std::size_t k = aux_count(aux_ratio, ds.m);
  for (std::size_t ex : example_indices) {
    std::vector<std::size_t> avail = ds.non_missing_tasks(ex);
    if (avail.empty()) continue;
    // Keep at least one target when the example has too few observed labels.
    const std::size_t k_ex = std::min(k, avail.size() - 1);
    std::vector<std::size_t> aux = rng.sample_without_replacement(avail, k_ex);
    std::set<std::size_t> aux_set(aux.begin(), aux.end());
    for (std::size_t j : aux) ep.query_known.push_back({ex, j, ds.label(ex, j)});
    for (std::size_t j : avail)
      if (!aux_set.count(j)) ep.query_targets.push_back({ex, j, ds.label(ex, j)});
  }
  return ep;
}

namespace detail {

/// Draws disjoint support/query example sets and retries until every task in
/// `tasks` has at least one positive and one negative among the support, up
/// to max_retries attempts.
inline void sample_support_query(const MultiLabelDataset& ds, const std::vector<std::size_t>& pool,
                                 const std::vector<std::size_t>& tasks, std::size_t shots,
                                 std::size_t query_size, Rng& rng,
                                 std::vector<std::size_t>& support_out,
                                 std::vector<std::size_t>& query_out) {
  if (shots < 1) throw ContractError("sample_meta: shots must be >= 1");
  if (query_size < 1) throw ContractError("sample_meta: query_size must be >= 1 (empty objective)");
  if (pool.size() < shots + query_size)
    throw SamplingError("sample_meta: pool of " + std::to_string(pool.size()) +
                        " examples cannot supply " + std::to_string(shots) + " support + " +
                        std::to_string(query_size) + " query");
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<std::size_t> drawn = rng.sample_without_replacement(pool, shots + query_size);
    support_out.assign(drawn.begin(), drawn.begin() + shots);
    query_out.assign(drawn.begin() + shots, drawn.end());
    bool ok = true;
    for (std::size_t j : tasks) {
      bool pos = false, neg = false;
      for (std::size_t ex : support_out) {
        Label l = ds.label(ex, j);
        if (l == Label::positive) pos = true;
        if (l == Label::negative) neg = true;
      }
      if (!pos || !neg) {
        ok = false;
        break;
      }
    }
    if (ok) return;
  }
  throw SamplingError("sample_meta: no support draw satisfied the one-positive-one-negative "
                      "constraint after 100 retries");
}

}  // namespace detail

/// Meta episode: `shots` support examples carry their labels on the episode
/// tasks as edges; disjoint query examples' labels on those tasks are the
/// targets. Task node features are not derived from trained heads here, so
/// the episode works for unseen tasks. n_way = 0 means "all given tasks".
inline EpisodeBatch sample_meta(const MultiLabelDataset& ds, const std::vector<std::size_t>& pool,
                                const std::vector<std::size_t>& candidate_tasks, std::size_t n_way,
                                std::size_t shots, std::size_t query_size, Rng& rng) {
  EpisodeBatch ep;
  if (candidate_tasks.empty()) throw ContractError("sample_meta: no candidate tasks");
  ep.unseen_tasks = n_way == 0 ? candidate_tasks
                               : rng.sample_without_replacement(candidate_tasks, n_way);
  if (n_way != 0 && ep.unseen_tasks.size() < n_way)
    throw SamplingError("sample_meta: fewer candidate tasks than n_way");
  std::sort(ep.unseen_tasks.begin(), ep.unseen_tasks.end());

  detail::sample_support_query(ds, pool, ep.unseen_tasks, shots, query_size, rng,
                               ep.support_examples, ep.query_examples);
  for (std::size_t ex : ep.support_examples)
    for (std::size_t j : ep.unseen_tasks)
      if (ds.label(ex, j) != Label::missing) ep.support.push_back({ex, j, ds.label(ex, j)});
  for (std::size_t ex : ep.query_examples)
    for (std::size_t j : ep.unseen_tasks)
      if (ds.label(ex, j) != Label::missing) ep.query_targets.push_back({ex, j, ds.label(ex, j)});
  if (ep.query_targets.empty()) throw SamplingError("sample_meta: query produced no targets");
  return ep;
}

/// Relational-meta episode: sample_meta on the unseen tasks, plus each query
/// example reveals floor(aux_ratio * |seen_tasks|) of its labels on seen
/// tasks as auxiliary knowledge.
inline EpisodeBatch sample_relational_meta(const MultiLabelDataset& ds,
                                           const std::vector<std::size_t>& pool,
                                           const std::vector<std::size_t>& seen_tasks,
                                           const std::vector<std::size_t>& unseen_tasks,
                                           double aux_ratio, std::size_t shots,
                                           std::size_t query_size, Rng& rng) {
  for (std::size_t s : seen_tasks)
    if (std::find(unseen_tasks.begin(), unseen_tasks.end(), s) != unseen_tasks.end())
      throw ContractError("sample_relational_meta: seen and unseen task sets intersect");
  EpisodeBatch ep = sample_meta(ds, pool, unseen_tasks, 0, shots, query_size, rng);
  ep.seen_tasks = seen_tasks;
  std::sort(ep.seen_tasks.begin(), ep.seen_tasks.end());

  const std::size_t k = aux_count(aux_ratio, seen_tasks.size());
  for (std::size_t ex : ep.query_examples) {
    std::vector<std::size_t> avail;
    for (std::size_t j : ep.seen_tasks)
      if (ds.label(ex, j) != Label::missing) avail.push_back(j);
    for (std::size_t j : rng.sample_without_replacement(avail, std::min(k, avail.size())))
      ep.query_known.push_back({ex, j, ds.label(ex, j)});
  }
  return ep;
}

/// N-way single-positive episode for the few-shot mode: every query example
/// has exactly one positive link among the episode's n_way tasks, and the
/// support holds `shots` examples per task.
inline EpisodeBatch sample_fewshot(const MultiLabelDataset& ds, const std::vector<std::size_t>& pool,
                                   const std::vector<std::size_t>& candidate_tasks, std::size_t n_way,
                                   std::size_t shots_per_class, std::size_t query_size, Rng& rng) {
  if (n_way < 2) throw ContractError("sample_fewshot: n_way must be >= 2");
  if (candidate_tasks.size() < n_way)
    throw SamplingError("sample_fewshot: fewer candidate tasks than n_way");
  if (query_size < 1) throw ContractError("sample_fewshot: query_size must be >= 1");

  auto positive_class = [&](std::size_t ex, const std::vector<std::size_t>& tasks)
      -> std::optional<std::size_t> {
    std::optional<std::size_t> pos;
    for (std::size_t j : tasks) {
      if (ds.label(ex, j) == Label::missing) return std::nullopt;
      if (ds.label(ex, j) == Label::positive) {
        if (pos) return std::nullopt;  // multiple positives
        pos = j;
      }
    }
    return pos;
  };

  for (int attempt = 0; attempt < 100; ++attempt) {
    EpisodeBatch ep;
    ep.unseen_tasks = rng.sample_without_replacement(candidate_tasks, n_way);
    std::sort(ep.unseen_tasks.begin(), ep.unseen_tasks.end());

    std::vector<std::vector<std::size_t>> per_class(n_way);
    std::vector<std::size_t> eligible;
    for (std::size_t ex : pool) {
      auto pos = positive_class(ex, ep.unseen_tasks);
      if (!pos) continue;
      auto it = std::find(ep.unseen_tasks.begin(), ep.unseen_tasks.end(), *pos);
      per_class[static_cast<std::size_t>(it - ep.unseen_tasks.begin())].push_back(ex);
      eligible.push_back(ex);
    }
    bool enough = true;
    for (const auto& cls : per_class) enough = enough && cls.size() >= shots_per_class;
    if (!enough || eligible.size() < n_way * shots_per_class + query_size) continue;

    std::set<std::size_t> taken;
    for (std::size_t c = 0; c < n_way; ++c)
      for (std::size_t ex : rng.sample_without_replacement(per_class[c], shots_per_class)) {
        ep.support_examples.push_back(ex);
        taken.insert(ex);
      }
    std::vector<std::size_t> query_pool;
    for (std::size_t ex : eligible)
      if (!taken.count(ex)) query_pool.push_back(ex);
    if (query_pool.size() < query_size) continue;
    ep.query_examples = rng.sample_without_replacement(query_pool, query_size);

    for (std::size_t ex : ep.support_examples)
      for (std::size_t j : ep.unseen_tasks) ep.support.push_back({ex, j, ds.label(ex, j)});
    for (std::size_t ex : ep.query_examples)
      for (std::size_t j : ep.unseen_tasks) ep.query_targets.push_back({ex, j, ds.label(ex, j)});
    return ep;
  }
  throw SamplingError("sample_fewshot: could not assemble an episode after 100 attempts");
}

}  // namespace metalink
