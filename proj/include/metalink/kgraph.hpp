#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "metalink/dataset.hpp"
#include "metalink/errors.hpp"
#include "metalink/matrix.hpp"

namespace metalink {

/// Bipartite data/task graph for one batch. Data nodes are initialized with
/// the batch's embeddings, seen task nodes with the trained head weights and
/// unseen task nodes with the all-ones vector. Edges carry known labels;
/// pairs the model must predict are never edges.
class KnowledgeGraph {
 public:
  struct DataNode {
    std::size_t batch_row;     // row in the batch's embedding matrix
    DenseMatrix init;          // 1 x D
  };
  struct TaskNode {
    std::size_t task_index;    // global task id
    bool unseen;
    DenseMatrix init;          // 1 x D
  };
  struct Edge {
    std::size_t data_pos;      // position in data_nodes
    std::size_t task_pos;      // position in task_nodes
    double label;              // 0 or 1
  };

  std::vector<DataNode> data_nodes;
  std::vector<TaskNode> task_nodes;
  std::vector<Edge> edges;

  /// task global id -> position in task_nodes
  std::size_t task_pos(std::size_t task_index) const {
    auto it = task_pos_.find(task_index);
    if (it == task_pos_.end())
      throw ContractError("kgraph: task " + std::to_string(task_index) + " not in this graph");
    return it->second;
  }
  bool has_task(std::size_t task_index) const { return task_pos_.count(task_index) != 0; }

  /// Incident (neighbor position, edge label) pairs of a data node,
  /// ascending by task position.
  const std::vector<std::pair<std::size_t, double>>& data_neighbors(std::size_t data_pos) const {
    if (data_pos >= adj_data_.size()) throw ContractError("kgraph: unknown data node");
    return adj_data_[data_pos];
  }
  const std::vector<std::pair<std::size_t, double>>& task_neighbors(std::size_t task_pos) const {
    if (task_pos >= adj_task_.size()) throw ContractError("kgraph: unknown task node");
    return adj_task_[task_pos];
  }

  /// {data_nodes, task_nodes, edges} JSON document for inspection. Not a
  /// stability-guaranteed format.
  nlohmann::json debug_json() const {
    nlohmann::json j;
    j["data_nodes"] = nlohmann::json::array();
    for (const auto& dn : data_nodes)
      j["data_nodes"].push_back({{"batch_row", dn.batch_row}, {"embedding", dn.init.values()}});
    j["task_nodes"] = nlohmann::json::array();
    for (const auto& tn : task_nodes)
      j["task_nodes"].push_back(
          {{"task_index", tn.task_index}, {"unseen", tn.unseen}, {"embedding", tn.init.values()}});
    j["edges"] = nlohmann::json::array();
    for (const auto& e : edges) j["edges"].push_back({e.data_pos, e.task_pos, e.label});
    return j;
  }

  friend KnowledgeGraph build_graph(const DenseMatrix&, const std::vector<std::size_t>&,
                                    const DenseMatrix&, const std::vector<std::size_t>&,
                                    const std::vector<std::tuple<std::size_t, std::size_t, double>>&,
                                    const std::vector<std::pair<std::size_t, std::size_t>>&);

 private:
  std::map<std::size_t, std::size_t> task_pos_;
  std::vector<std::vector<std::pair<std::size_t, double>>> adj_data_;
  std::vector<std::vector<std::pair<std::size_t, double>>> adj_task_;
};

/// Builds the batch graph.
///   embeddings      one row per batch example (h_i(0) = z_i)
///   seen_tasks      global ids initialized from task_weights rows, in order
///   task_weights    |seen_tasks| x D, row r = weights of seen_tasks[r]
///   unseen_tasks    global ids initialized with ones
///   known_labels    (batch_row, global task id, label in {0,1}) edges
///   query_targets   pairs that must NOT be edges; checked here
inline KnowledgeGraph build_graph(
    const DenseMatrix& embeddings, const std::vector<std::size_t>& seen_tasks,
    const DenseMatrix& task_weights, const std::vector<std::size_t>& unseen_tasks,
    const std::vector<std::tuple<std::size_t, std::size_t, double>>& known_labels,
    const std::vector<std::pair<std::size_t, std::size_t>>& query_targets = {}) {
  const std::size_t D = embeddings.cols();
  if (task_weights.rows() != seen_tasks.size() || (seen_tasks.size() > 0 && task_weights.cols() != D))
    throw DimensionError("build_graph: task_weights " + task_weights.shape_str() + " does not match " +
                         std::to_string(seen_tasks.size()) + " seen tasks of width " + std::to_string(D));

  KnowledgeGraph g;
  g.data_nodes.reserve(embeddings.rows());
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    DenseMatrix init(1, D);
    for (std::size_t c = 0; c < D; ++c) init(0, c) = embeddings(i, c);
    g.data_nodes.push_back({i, std::move(init)});
  }
  for (std::size_t r = 0; r < seen_tasks.size(); ++r) {
    DenseMatrix init(1, D);
    for (std::size_t c = 0; c < D; ++c) init(0, c) = task_weights(r, c);
    if (g.task_pos_.count(seen_tasks[r])) throw ContractError("build_graph: duplicate task node");
    g.task_pos_[seen_tasks[r]] = g.task_nodes.size();
    g.task_nodes.push_back({seen_tasks[r], false, std::move(init)});
  }
  for (std::size_t u : unseen_tasks) {
    if (g.task_pos_.count(u)) throw ContractError("build_graph: duplicate task node");
    g.task_pos_[u] = g.task_nodes.size();
    g.task_nodes.push_back({u, true, DenseMatrix(1, D, 1.0)});
  }

  std::set<std::pair<std::size_t, std::size_t>> forbidden;
  for (const auto& [row, task] : query_targets) forbidden.emplace(row, task);

  std::set<std::pair<std::size_t, std::size_t>> seen_pairs;
  for (const auto& [row, task, y] : known_labels) {
    if (row >= g.data_nodes.size())
      throw ContractError("build_graph: batch row " + std::to_string(row) + " out of range");
    if (y != 0.0 && y != 1.0)
      throw ContractError("build_graph: edge label must be 0 or 1, got " + std::to_string(y));
    if (!seen_pairs.emplace(row, task).second)
      throw ContractError("build_graph: duplicate edge (" + std::to_string(row) + ", " +
                          std::to_string(task) + ")");
    if (forbidden.count({row, task}))
      throw ContractError("build_graph: label leakage, target pair (" + std::to_string(row) + ", " +
                          std::to_string(task) + ") supplied as an edge");
    g.edges.push_back({row, g.task_pos(task), y});
  }
  // Canonical edge order makes construction independent of input order.
  std::sort(g.edges.begin(), g.edges.end(), [](const auto& a, const auto& b) {
    return std::tie(a.data_pos, a.task_pos) < std::tie(b.data_pos, b.task_pos);
  });

  g.adj_data_.assign(g.data_nodes.size(), {});
  g.adj_task_.assign(g.task_nodes.size(), {});
  for (const auto& e : g.edges) {
    g.adj_data_[e.data_pos].emplace_back(e.task_pos, e.label);
    g.adj_task_[e.task_pos].emplace_back(e.data_pos, e.label);
  }
  for (auto& lst : g.adj_data_) std::sort(lst.begin(), lst.end());
  for (auto& lst : g.adj_task_) std::sort(lst.begin(), lst.end());
  return g;
}

}  // namespace metalink
