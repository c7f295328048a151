#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "metalink/errors.hpp"
#include "metalink/kgraph.hpp"
#include "metalink/matrix.hpp"
#include "metalink/optim.hpp"
#include "metalink/rng.hpp"
#include "metalink/tape.hpp"

namespace metalink {

/// Per-layer edge predictor. `mlp` is the trained 2-layer head; `dot` scores
/// a pair by the plain inner product, the configuration under which the
/// zero-layer model reduces to a vanilla linear task head.
enum class EdgeHead { mlp, dot };

inline std::string to_string(EdgeHead h) { return h == EdgeHead::mlp ? "mlp" : "dot"; }
inline EdgeHead edge_head_from_string(const std::string& s) {
  if (s == "mlp") return EdgeHead::mlp;
  if (s == "dot") return EdgeHead::dot;
  throw ConfigError("unknown edge head '" + s + "' (expected mlp or dot)");
}

struct ModelConfig {
  std::size_t input_dim = 0;                 // d
  std::vector<std::size_t> feat_hidden = {64, 64};
  std::size_t embed_dim = 64;                // D, also the task-head width
  std::size_t gnn_layers = 2;                // L
  bool shared_weights = false;               // false = distinct data/task update weights
  std::size_t num_tasks = 0;                 // m
  EdgeHead edge_head = EdgeHead::mlp;

  std::vector<std::size_t> feat_dims() const {
    std::vector<std::size_t> dims{input_dim};
    dims.insert(dims.end(), feat_hidden.begin(), feat_hidden.end());
    dims.push_back(embed_dim);
    return dims;
  }
};

/// The MetaLink predictor: feature extractor, task heads reinterpreted as
/// task-node features, L heterogeneous GNN layers with per-layer edge
/// prediction heads whose logits are summed.
struct MetaLinkModel {
  ModelConfig config;
  ParamMap params;
  // Task split bookkeeping for meta checkpoints; empty otherwise.
  std::vector<std::size_t> unseen_tasks;

  static MetaLinkModel init(const ModelConfig& cfg, Rng& rng) {
    if (cfg.input_dim == 0 || cfg.embed_dim == 0 || cfg.num_tasks == 0)
      throw ConfigError("model: input_dim, embed_dim and num_tasks must be positive");
    MetaLinkModel m;
    m.config = cfg;
    auto xavier = [&rng](std::size_t rows, std::size_t cols) {
      DenseMatrix w(rows, cols);
      const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-lim, lim);
      return w;
    };

    const auto dims = cfg.feat_dims();
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      m.params["feat." + std::to_string(i) + ".W"] = xavier(dims[i], dims[i + 1]);
      m.params["feat." + std::to_string(i) + ".b"] = DenseMatrix(1, dims[i + 1]);
    }
    m.params["tasks.W"] = xavier(cfg.num_tasks, cfg.embed_dim);

    const std::size_t D = cfg.embed_dim;
    for (std::size_t l = 0; l < cfg.gnn_layers; ++l) {
      const std::string p = "gnn." + std::to_string(l) + ".";
      if (cfg.shared_weights) {
        m.params[p + "Wmsg"] = xavier(D, D);
        m.params[p + "U"] = xavier(2 * D, D);
      } else {
        m.params[p + "Wmsg_d2t"] = xavier(D, D);
        m.params[p + "Wmsg_t2d"] = xavier(D, D);
        m.params[p + "U_data"] = xavier(2 * D, D);
        m.params[p + "U_task"] = xavier(2 * D, D);
      }
      m.params[p + "O"] = xavier(1, D);
    }
    if (cfg.edge_head == EdgeHead::mlp) {
      // One head per GNN layer; the zero-layer model owns a single head
      // acting directly on (z_i, w_j).
      const std::size_t first = cfg.gnn_layers == 0 ? 0 : 1;
      const std::size_t last = cfg.gnn_layers == 0 ? 0 : cfg.gnn_layers;
      for (std::size_t l = first; l <= last; ++l) {
        const std::string p = "head." + std::to_string(l) + ".";
        m.params[p + "W1"] = xavier(2 * D, D);
        m.params[p + "b1"] = DenseMatrix(1, D);
        m.params[p + "W2"] = xavier(D, 1);
        m.params[p + "b2"] = DenseMatrix(1, 1);
      }
    }
    return m;
  }

  Var pvar(Tape& t, const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("model: no parameter '" + name + "'");
    return t.parameter(name, it->second);
  }
};

/// f_theta: MLP forward with ReLU between layers and a linear output,
/// recorded on the tape.
inline Var extract_features(Tape& t, const MetaLinkModel& model, const DenseMatrix& X) {
  if (X.cols() != model.config.input_dim)
    throw DimensionError("extract_features: input " + X.shape_str() + " vs input_dim " +
                         std::to_string(model.config.input_dim));
  Var h = t.constant(X);
  const std::size_t n_layers = model.config.feat_hidden.size() + 1;
  for (std::size_t i = 0; i < n_layers; ++i) {
    const std::string p = "feat." + std::to_string(i) + ".";
    h = affine(h, model.pvar(t, p + "W"), model.pvar(t, p + "b"));
    if (i + 1 < n_layers) h = relu(h);
  }
  return h;
}

namespace detail {

struct GnnLayerVars {
  Var W_d2t, W_t2d, O, U_data, U_task;
};

inline GnnLayerVars bind_gnn_layer(Tape& t, const MetaLinkModel& model, std::size_t l) {
  const std::string p = "gnn." + std::to_string(l) + ".";
  GnnLayerVars v;
  if (model.config.shared_weights) {
    v.W_d2t = model.pvar(t, p + "Wmsg");
    v.W_t2d = v.W_d2t;
    v.U_data = model.pvar(t, p + "U");
    v.U_task = v.U_data;
  } else {
    v.W_d2t = model.pvar(t, p + "Wmsg_d2t");
    v.W_t2d = model.pvar(t, p + "Wmsg_t2d");
    v.U_data = model.pvar(t, p + "U_data");
    v.U_task = model.pvar(t, p + "U_task");
  }
  v.O = model.pvar(t, p + "O");
  return v;
}

}  // namespace detail

/// One heterogeneous GraphSAGE layer over the bipartite graph. A node's
/// update is U_type . Concat(Mean over neighbors of ReLU(W_dir . h_u + O y),
/// h_v); isolated nodes aggregate the zero vector.
inline std::pair<Var, Var> gnn_layer(Tape& t, const detail::GnnLayerVars& w,
                                     const KnowledgeGraph& g, Var H_data, Var H_task) {
  const std::size_t Dmsg = w.W_d2t.cols();
  Var from_task = matmul(H_task, w.W_t2d);  // message sources for data nodes
  Var from_data = matmul(H_data, w.W_d2t);  // message sources for task nodes

  Var agg_data{&t, 0}, agg_task{&t, 0};
  if (g.edges.empty()) {
    agg_data = t.constant(DenseMatrix(H_data.rows(), Dmsg));
    agg_task = t.constant(DenseMatrix(H_task.rows(), Dmsg));
  } else {
    DenseMatrix ycol(g.edges.size(), 1);
    std::vector<std::size_t> src_task, src_data;
    src_task.reserve(g.edges.size());
    src_data.reserve(g.edges.size());
    std::vector<std::vector<std::size_t>> seg_data(H_data.rows()), seg_task(H_task.rows());
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
      ycol(e, 0) = g.edges[e].label;
      src_task.push_back(g.edges[e].task_pos);
      src_data.push_back(g.edges[e].data_pos);
      seg_data[g.edges[e].data_pos].push_back(e);
      seg_task[g.edges[e].task_pos].push_back(e);
    }
    Var label_term = matmul(t.constant(std::move(ycol)), w.O);  // row e = y_e * O
    Var msg_to_data = relu(add(gather_rows(from_task, std::move(src_task)), label_term));
    Var msg_to_task = relu(add(gather_rows(from_data, std::move(src_data)), label_term));
    agg_data = segment_mean(msg_to_data, std::move(seg_data));
    agg_task = segment_mean(msg_to_task, std::move(seg_task));
  }
  Var H_data_next = matmul(concat_cols(agg_data, H_data), w.U_data);
  Var H_task_next = matmul(concat_cols(agg_task, H_task), w.U_task);
  return {H_data_next, H_task_next};
}

/// Logits of one edge-prediction head for a list of (data_pos, task_pos)
/// pairs, as an n_pairs x 1 column.
inline Var edge_head_logits(Tape& t, const MetaLinkModel& model, std::size_t head_index,
                            Var H_data, Var H_task,
                            const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  std::vector<std::size_t> di, ti;
  di.reserve(pairs.size());
  ti.reserve(pairs.size());
  for (const auto& [d_pos, t_pos] : pairs) {
    di.push_back(d_pos);
    ti.push_back(t_pos);
  }
  Var hd = gather_rows(H_data, std::move(di));
  Var ht = gather_rows(H_task, std::move(ti));
  if (model.config.edge_head == EdgeHead::dot) return row_sum(hadamard(hd, ht));
  const std::string p = "head." + std::to_string(head_index) + ".";
  Var hidden = relu(affine(concat_cols(hd, ht), model.pvar(t, p + "W1"), model.pvar(t, p + "b1")));
  return affine(hidden, model.pvar(t, p + "W2"), model.pvar(t, p + "b2"));
}

/// Scalar logit for a single (h_i, h_j) pair through one head.
inline Var edge_logit(Tape& t, const MetaLinkModel& model, std::size_t head_index, Var h_i, Var h_j) {
  Var both = vstack(t, {h_i, h_j});
  return edge_head_logits(t, model, head_index, both, both, {{0, 1}});
}

/// Full MetaLink forward over a built graph: runs L GNN layers, applies each
/// layer's head to the target pairs and sums the per-layer logits. Z must be
/// the tape node the graph's data-node embeddings came from.
inline Var model_forward(Tape& t, const MetaLinkModel& model, const KnowledgeGraph& g, Var Z,
                         const std::vector<std::pair<std::size_t, std::size_t>>& target_pairs) {
  if (Z.rows() != g.data_nodes.size() || Z.cols() != model.config.embed_dim)
    throw DimensionError("model_forward: embeddings " + Z.value().shape_str() + " do not match graph");
  if (target_pairs.empty()) throw ContractError("model_forward: no target pairs");

  std::set<std::pair<std::size_t, std::size_t>> edge_set;
  for (const auto& e : g.edges) edge_set.emplace(e.data_pos, e.task_pos);
  for (const auto& [d_pos, t_pos] : target_pairs) {
    if (d_pos >= g.data_nodes.size() || t_pos >= g.task_nodes.size())
      throw ContractError("model_forward: target pair out of range");
    if (edge_set.count({d_pos, t_pos}))
      throw ContractError("model_forward: label leakage, target pair (" + std::to_string(d_pos) +
                          ", " + std::to_string(t_pos) + ") is an edge");
  }

  // h_j(0): trained weights for seen tasks, ones for unseen.
  std::vector<Var> task_rows;
  task_rows.reserve(g.task_nodes.size());
  Var task_W = model.pvar(t, "tasks.W");
  for (const auto& tn : g.task_nodes) {
    if (tn.unseen) {
      task_rows.push_back(t.constant(DenseMatrix(1, model.config.embed_dim, 1.0)));
    } else {
      if (tn.task_index >= model.config.num_tasks)
        throw ContractError("model_forward: task index out of range of task heads");
      task_rows.push_back(row(task_W, tn.task_index));
    }
  }
  Var H_task = vstack(t, task_rows);
  Var H_data = Z;

  if (model.config.gnn_layers == 0)
    return edge_head_logits(t, model, 0, H_data, H_task, target_pairs);

  Var total{&t, 0};
  for (std::size_t l = 0; l < model.config.gnn_layers; ++l) {
    auto layer = detail::bind_gnn_layer(t, model, l);
    std::tie(H_data, H_task) = gnn_layer(t, layer, g, H_data, H_task);
    Var logits = edge_head_logits(t, model, l + 1, H_data, H_task, target_pairs);
    total = l == 0 ? logits : add(total, logits);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Snapshot: single JSON document {config, params}. 64-bit values round-trip
// bit-exactly through the serializer.
// ---------------------------------------------------------------------------

inline nlohmann::json snapshot_json(const MetaLinkModel& model) {
  nlohmann::json j;
  j["config"] = {
      {"input_dim", model.config.input_dim},
      {"feat_hidden", model.config.feat_hidden},
      {"embed_dim", model.config.embed_dim},
      {"gnn_layers", model.config.gnn_layers},
      {"shared_weights", model.config.shared_weights},
      {"num_tasks", model.config.num_tasks},
      {"edge_head", to_string(model.config.edge_head)},
  };
  j["unseen_tasks"] = model.unseen_tasks;
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, p] : model.params)
    params[name] = {{"rows", p.rows()}, {"cols", p.cols()}, {"data", p.values()}};
  j["params"] = std::move(params);
  return j;
}

inline void save_snapshot(const MetaLinkModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out << snapshot_json(model).dump(2) << '\n';
}

inline MetaLinkModel load_snapshot(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  MetaLinkModel m;
  const auto& c = j.at("config");
  m.config.input_dim = c.at("input_dim").get<std::size_t>();
  m.config.feat_hidden = c.at("feat_hidden").get<std::vector<std::size_t>>();
  m.config.embed_dim = c.at("embed_dim").get<std::size_t>();
  m.config.gnn_layers = c.at("gnn_layers").get<std::size_t>();
  m.config.shared_weights = c.at("shared_weights").get<bool>();
  m.config.num_tasks = c.at("num_tasks").get<std::size_t>();
  m.config.edge_head = edge_head_from_string(c.at("edge_head").get<std::string>());
  m.unseen_tasks = j.at("unseen_tasks").get<std::vector<std::size_t>>();
  for (const auto& [name, pj] : j.at("params").items()) {
    DenseMatrix p(pj.at("rows").get<std::size_t>(), pj.at("cols").get<std::size_t>());
    const auto data = pj.at("data").get<std::vector<double>>();
    if (data.size() != p.size()) throw ParseError(path + ": tensor '" + name + "' size mismatch");
    std::copy(data.begin(), data.end(), p.data());
    m.params[name] = std::move(p);
  }
  return m;
}

}  // namespace metalink
