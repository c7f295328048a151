#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "metalink/gradcheck.hpp"
#include "metalink/model.hpp"

using namespace metalink;

namespace {

DenseMatrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  DenseMatrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = scale * rng.normal();
  return m;
}

// ---------------------------------------------------------------------------
// Straight-line re-evaluation of the message passing and heads with plain
// loops, independent of the tape. Row-vector convention throughout.
// ---------------------------------------------------------------------------

std::vector<double> vec_mat(const std::vector<double>& v, const DenseMatrix& W) {
  std::vector<double> out(W.cols(), 0.0);
  for (std::size_t k = 0; k < W.rows(); ++k)
    for (std::size_t c = 0; c < W.cols(); ++c) out[c] += v[k] * W(k, c);
  return out;
}

std::vector<double> oracle_forward_logits(const MetaLinkModel& model, const KnowledgeGraph& g,
                                          const DenseMatrix& Z,
                                          const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  const std::size_t D = model.config.embed_dim;
  std::vector<std::vector<double>> hd(g.data_nodes.size()), ht(g.task_nodes.size());
  for (std::size_t i = 0; i < g.data_nodes.size(); ++i) {
    hd[i].resize(D);
    for (std::size_t c = 0; c < D; ++c) hd[i][c] = Z(i, c);
  }
  const DenseMatrix& TW = model.params.at("tasks.W");
  for (std::size_t p = 0; p < g.task_nodes.size(); ++p) {
    ht[p].assign(D, 1.0);
    if (!g.task_nodes[p].unseen)
      for (std::size_t c = 0; c < D; ++c) ht[p][c] = TW(g.task_nodes[p].task_index, c);
  }

  auto head_logit = [&](std::size_t head, const std::vector<double>& a,
                        const std::vector<double>& b) {
    std::vector<double> cat = a;
    cat.insert(cat.end(), b.begin(), b.end());
    if (model.config.edge_head == EdgeHead::dot) {
      double s = 0.0;
      for (std::size_t c = 0; c < D; ++c) s += a[c] * b[c];
      return s;
    }
    const std::string p = "head." + std::to_string(head) + ".";
    std::vector<double> h = vec_mat(cat, model.params.at(p + "W1"));
    const DenseMatrix& b1 = model.params.at(p + "b1");
    for (std::size_t c = 0; c < h.size(); ++c) h[c] = std::max(h[c] + b1(0, c), 0.0);
    std::vector<double> o = vec_mat(h, model.params.at(p + "W2"));
    return o[0] + model.params.at(p + "b2")(0, 0);
  };

  std::vector<double> logits(pairs.size(), 0.0);
  if (model.config.gnn_layers == 0) {
    for (std::size_t t = 0; t < pairs.size(); ++t)
      logits[t] = head_logit(0, hd[pairs[t].first], ht[pairs[t].second]);
    return logits;
  }

  for (std::size_t l = 0; l < model.config.gnn_layers; ++l) {
    const std::string pre = "gnn." + std::to_string(l) + ".";
    const bool shared = model.config.shared_weights;
    const DenseMatrix& Wd2t = model.params.at(pre + (shared ? "Wmsg" : "Wmsg_d2t"));
    const DenseMatrix& Wt2d = model.params.at(pre + (shared ? "Wmsg" : "Wmsg_t2d"));
    const DenseMatrix& Ud = model.params.at(pre + (shared ? "U" : "U_data"));
    const DenseMatrix& Ut = model.params.at(pre + (shared ? "U" : "U_task"));
    const DenseMatrix& O = model.params.at(pre + "O");

    auto message = [&](const std::vector<double>& src, const DenseMatrix& W, double y) {
      std::vector<double> m = vec_mat(src, W);
      for (std::size_t c = 0; c < m.size(); ++c) m[c] = std::max(m[c] + y * O(0, c), 0.0);
      return m;
    };

    std::vector<std::vector<double>> hd2(hd.size()), ht2(ht.size());
    for (std::size_t i = 0; i < hd.size(); ++i) {
      std::vector<double> agg(D, 0.0);
      const auto& nbrs = g.data_neighbors(i);
      for (const auto& [tpos, y] : nbrs) {
        auto m = message(ht[tpos], Wt2d, y);
        for (std::size_t c = 0; c < D; ++c) agg[c] += m[c];
      }
      if (!nbrs.empty())
        for (double& v : agg) v /= static_cast<double>(nbrs.size());
      std::vector<double> cat = agg;
      cat.insert(cat.end(), hd[i].begin(), hd[i].end());
      hd2[i] = vec_mat(cat, Ud);
    }
    for (std::size_t p = 0; p < ht.size(); ++p) {
      std::vector<double> agg(D, 0.0);
      const auto& nbrs = g.task_neighbors(p);
      for (const auto& [dpos, y] : nbrs) {
        auto m = message(hd[dpos], Wd2t, y);
        for (std::size_t c = 0; c < D; ++c) agg[c] += m[c];
      }
      if (!nbrs.empty())
        for (double& v : agg) v /= static_cast<double>(nbrs.size());
      std::vector<double> cat = agg;
      cat.insert(cat.end(), ht[p].begin(), ht[p].end());
      ht2[p] = vec_mat(cat, Ut);
    }
    hd = hd2;
    ht = ht2;
    for (std::size_t t = 0; t < pairs.size(); ++t)
      logits[t] += head_logit(l + 1, hd[pairs[t].first], ht[pairs[t].second]);
  }
  return logits;
}

MetaLinkModel tiny_model(std::size_t input_dim, std::size_t D, std::size_t L, bool shared,
                         std::size_t tasks, std::uint64_t seed, EdgeHead head = EdgeHead::mlp) {
  ModelConfig cfg;
  cfg.input_dim = input_dim;
  cfg.feat_hidden = {D};
  cfg.embed_dim = D;
  cfg.gnn_layers = L;
  cfg.shared_weights = shared;
  cfg.num_tasks = tasks;
  cfg.edge_head = head;
  Rng rng(seed);
  return MetaLinkModel::init(cfg, rng);
}

}  // namespace

TEST_CASE("extract_features identity configuration reproduces the input") {
  ModelConfig cfg;
  cfg.input_dim = 3;
  cfg.feat_hidden = {};
  cfg.embed_dim = 3;
  cfg.gnn_layers = 0;
  cfg.num_tasks = 2;
  Rng rng(1);
  MetaLinkModel m = MetaLinkModel::init(cfg, rng);
  m.params["feat.0.W"] = DenseMatrix::identity(3);
  m.params["feat.0.b"] = DenseMatrix(1, 3);
  DenseMatrix X{{1.0, -2.0, 3.0}, {0.5, 0.0, -1.0}};
  Tape t;
  CHECK(t.value(extract_features(t, m, X)) == X);
}

TEST_CASE("extract_features with zero weights yields bias rows") {
  ModelConfig cfg;
  cfg.input_dim = 2;
  cfg.feat_hidden = {};
  cfg.embed_dim = 2;
  cfg.num_tasks = 2;
  Rng rng(1);
  MetaLinkModel m = MetaLinkModel::init(cfg, rng);
  m.params["feat.0.W"] = DenseMatrix(2, 2);
  m.params["feat.0.b"] = DenseMatrix{{0.7, -0.3}};
  Tape t;
  DenseMatrix Z = t.value(extract_features(t, m, DenseMatrix(3, 2, 5.0)));
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(Z(i, 0) == 0.7);
    CHECK(Z(i, 1) == -0.3);
  }
}

TEST_CASE("extract_features matches an independent MLP re-evaluation") {
  MetaLinkModel m = tiny_model(4, 3, 0, false, 2, 9);
  Rng rng(5);
  DenseMatrix X = random_matrix(5, 4, rng);
  Tape t;
  DenseMatrix Z = t.value(extract_features(t, m, X));
  // by-hand: X -> W0,b0 -> relu -> W1,b1
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> x(4);
    for (std::size_t c = 0; c < 4; ++c) x[c] = X(i, c);
    std::vector<double> h = vec_mat(x, m.params.at("feat.0.W"));
    for (std::size_t c = 0; c < h.size(); ++c)
      h[c] = std::max(h[c] + m.params.at("feat.0.b")(0, c), 0.0);
    std::vector<double> z = vec_mat(h, m.params.at("feat.1.W"));
    for (std::size_t c = 0; c < z.size(); ++c) z[c] += m.params.at("feat.1.b")(0, c);
    for (std::size_t c = 0; c < 3; ++c) CHECK(Z(i, c) == Catch::Approx(z[c]).epsilon(1e-14));
  }
}

TEST_CASE("gnn_layer hand-derived identity example") {
  // D=2, data h_i=(1,0), task h_j=(0,1), edge y=1, W=I, O=0,
  // U sums the two concat halves: expect h_i' = h_j' = (1,1).
  Tape t;
  detail::GnnLayerVars w;
  w.W_d2t = t.parameter("Wd", DenseMatrix::identity(2));
  w.W_t2d = t.parameter("Wt", DenseMatrix::identity(2));
  w.O = t.parameter("O", DenseMatrix(1, 2));
  DenseMatrix U{{1.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}, {0.0, 1.0}};
  w.U_data = t.parameter("Ud", U);
  w.U_task = t.parameter("Ut", U);

  DenseMatrix Z{{1.0, 0.0}};
  DenseMatrix TW{{0.0, 1.0}};
  auto g = build_graph(Z, {0}, TW, {}, {{0, 0, 1.0}});
  auto [hd, ht] = gnn_layer(t, w, g, t.constant(Z), t.constant(TW));
  CHECK(t.value(hd) == DenseMatrix{{1.0, 1.0}});
  CHECK(t.value(ht) == DenseMatrix{{1.0, 1.0}});
}

TEST_CASE("edgeless gnn_layer applies U to Concat(0, h)") {
  Tape t;
  Rng rng(3);
  detail::GnnLayerVars w;
  w.W_d2t = t.parameter("Wd", random_matrix(2, 2, rng));
  w.W_t2d = t.parameter("Wt", random_matrix(2, 2, rng));
  w.O = t.parameter("O", random_matrix(1, 2, rng));
  w.U_data = t.parameter("Ud", random_matrix(4, 2, rng));
  w.U_task = t.parameter("Ut", random_matrix(4, 2, rng));
  DenseMatrix Z{{0.3, -0.2}};
  DenseMatrix TW{{0.5, 1.5}};
  auto g = build_graph(Z, {0}, TW, {}, {});
  auto [hd, ht] = gnn_layer(t, w, g, t.constant(Z), t.constant(TW));
  const DenseMatrix& Ud = t.value(w.U_data);
  for (std::size_t c = 0; c < 2; ++c)
    CHECK(t.value(hd)(0, c) == Catch::Approx(0.3 * Ud(2, c) - 0.2 * Ud(3, c)).epsilon(1e-14));
}

TEST_CASE("flipping an edge label changes the pre-activation by exactly O") {
  // With W = 0 the message is relu(y * O); positive O makes the difference O itself.
  Tape t;
  detail::GnnLayerVars w;
  w.W_d2t = t.parameter("Wd", DenseMatrix(2, 2));
  w.W_t2d = t.parameter("Wt", DenseMatrix(2, 2));
  w.O = t.parameter("O", DenseMatrix{{0.5, 0.25}});
  DenseMatrix U{{1.0, 0.0}, {0.0, 1.0}, {0.0, 0.0}, {0.0, 0.0}};  // keep only the message half
  w.U_data = t.parameter("Ud", U);
  w.U_task = t.parameter("Ut", U);
  DenseMatrix Z{{1.0, 2.0}};
  DenseMatrix TW{{3.0, 4.0}};
  auto g0 = build_graph(Z, {0}, TW, {}, {{0, 0, 0.0}});
  auto g1 = build_graph(Z, {0}, TW, {}, {{0, 0, 1.0}});
  auto [hd0, ht0] = gnn_layer(t, w, g0, t.constant(Z), t.constant(TW));
  auto [hd1, ht1] = gnn_layer(t, w, g1, t.constant(Z), t.constant(TW));
  CHECK(t.value(hd1)(0, 0) - t.value(hd0)(0, 0) == Catch::Approx(0.5));
  CHECK(t.value(hd1)(0, 1) - t.value(hd0)(0, 1) == Catch::Approx(0.25));
}

TEST_CASE("edge_logit examples") {
  SECTION("dot-product head gives the inner product") {
    MetaLinkModel m = tiny_model(2, 2, 0, false, 1, 1, EdgeHead::dot);
    Tape t;
    Var z = t.constant({{1.0, 2.0}});
    Var w = t.constant({{3.0, 4.0}});
    CHECK(t.value(edge_logit(t, m, 0, z, w))[0] == 11.0);
  }
  SECTION("zero MLP head gives zero") {
    MetaLinkModel m = tiny_model(2, 2, 0, false, 1, 1);
    m.params["head.0.W1"] = DenseMatrix(4, 2);
    m.params["head.0.b1"] = DenseMatrix(1, 2);
    m.params["head.0.W2"] = DenseMatrix(2, 1);
    m.params["head.0.b2"] = DenseMatrix(1, 1);
    Tape t;
    Var z = t.constant({{1.0, 2.0}});
    Var w = t.constant({{3.0, 4.0}});
    CHECK(t.value(edge_logit(t, m, 0, z, w))[0] == 0.0);
  }
  SECTION("heads are order sensitive") {
    MetaLinkModel m = tiny_model(2, 2, 0, false, 1, 7);
    Tape t;
    Var a = t.constant({{1.0, 2.0}});
    Var b = t.constant({{-0.5, 4.0}});
    CHECK(t.value(edge_logit(t, m, 0, a, b))[0] != t.value(edge_logit(t, m, 0, b, a))[0]);
  }
}

TEST_CASE("zero-layer forward is the degenerate head on (z, w)") {
  MetaLinkModel m = tiny_model(3, 4, 0, false, 2, 11, EdgeHead::dot);
  Rng rng(2);
  DenseMatrix Z = random_matrix(2, 4, rng);
  DenseMatrix TW(2, 4);
  const DenseMatrix& W = m.params.at("tasks.W");
  for (std::size_t i = 0; i < TW.size(); ++i) TW[i] = W[i];
  auto g = build_graph(Z, {0, 1}, TW, {}, {});
  Tape t;
  Var logits = model_forward(t, m, g, t.constant(Z), {{0, 1}, {1, 0}});
  double expect01 = 0.0, expect10 = 0.0;
  for (std::size_t c = 0; c < 4; ++c) {
    expect01 += Z(0, c) * W(1, c);
    expect10 += Z(1, c) * W(0, c);
  }
  CHECK(t.value(logits)(0, 0) == Catch::Approx(expect01).epsilon(1e-14));
  CHECK(t.value(logits)(1, 0) == Catch::Approx(expect10).epsilon(1e-14));
}

TEST_CASE("edgeless forward is batch-composition invariant") {
  MetaLinkModel m = tiny_model(3, 4, 2, false, 2, 13);
  Rng rng(4);
  DenseMatrix Zbig = random_matrix(3, 4, rng);
  DenseMatrix Zone(1, 4);
  for (std::size_t c = 0; c < 4; ++c) Zone(0, c) = Zbig(1, c);
  DenseMatrix TW(2, 4);
  const DenseMatrix& W = m.params.at("tasks.W");
  for (std::size_t i = 0; i < TW.size(); ++i) TW[i] = W[i];

  Tape t1, t2;
  auto gbig = build_graph(Zbig, {0, 1}, TW, {}, {});
  auto gone = build_graph(Zone, {0, 1}, TW, {}, {});
  double a = t1.value(model_forward(t1, m, gbig, t1.constant(Zbig), {{1, 0}}))(0, 0);
  double b = t2.value(model_forward(t2, m, gone, t2.constant(Zone), {{0, 0}}))(0, 0);
  CHECK(a == b);  // bit identical

  // Two identical rows produce identical logits for the same task.
  DenseMatrix Zdup(2, 4);
  for (std::size_t c = 0; c < 4; ++c) Zdup(0, c) = Zdup(1, c) = Zbig(0, c);
  Tape t3;
  auto gdup = build_graph(Zdup, {0, 1}, TW, {}, {});
  DenseMatrix L = t3.value(model_forward(t3, m, gdup, t3.constant(Zdup), {{0, 1}, {1, 1}}));
  CHECK(L(0, 0) == L(1, 0));
}

TEST_CASE("forward matches the straight-line oracle") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    for (std::size_t L : {1ull, 2ull}) {
      MetaLinkModel m = tiny_model(4, 3, L, seed % 2 == 0, 3, 100 + seed);
      Rng rng(seed);
      DenseMatrix Z = random_matrix(4, 3, rng);
      const DenseMatrix& W = m.params.at("tasks.W");
      DenseMatrix TW(2, 3);  // rows for the seen tasks 0 and 1
      for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 3; ++c) TW(r, c) = W(r, c);
      auto g = build_graph(Z, {0, 1}, TW, {2},
                           {{0, 0, 1.0}, {1, 1, 0.0}, {2, 2, 1.0}, {3, 0, 0.0}, {0, 2, 1.0}});
      std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 1}, {1, 0}, {2, 1}, {3, 2}};
      Tape t;
      DenseMatrix got = t.value(model_forward(t, m, g, t.constant(Z), pairs));
      std::vector<double> want = oracle_forward_logits(m, g, Z, pairs);
      for (std::size_t i = 0; i < pairs.size(); ++i)
        CHECK(got(i, 0) == Catch::Approx(want[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("logits are invariant to edge storage order") {
  MetaLinkModel m = tiny_model(4, 3, 2, false, 3, 21);
  Rng rng(8);
  DenseMatrix Z = random_matrix(4, 3, rng);
  DenseMatrix TW(3, 3);
  for (std::size_t i = 0; i < TW.size(); ++i) TW[i] = m.params.at("tasks.W")[i];
  std::vector<std::tuple<std::size_t, std::size_t, double>> triples{
      {0, 0, 1.0}, {1, 1, 0.0}, {2, 0, 1.0}, {3, 1, 1.0}, {0, 2, 0.0}};
  std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 1}, {2, 2}};
  auto run = [&](const std::vector<std::tuple<std::size_t, std::size_t, double>>& tr) {
    auto g = build_graph(Z, {0, 1, 2}, TW, {}, tr);
    Tape t;
    return t.value(model_forward(t, m, g, t.constant(Z), pairs));
  };
  auto shuffled = triples;
  Rng shuffler(99);
  shuffler.shuffle(shuffled);
  CHECK(run(triples) == run(shuffled));
}

TEST_CASE("edge label flips reach the logits when L >= 1 and O != 0") {
  MetaLinkModel m = tiny_model(4, 3, 1, false, 2, 33);
  Rng rng(6);
  DenseMatrix Z = random_matrix(2, 3, rng);
  DenseMatrix TW(2, 3);
  for (std::size_t i = 0; i < TW.size(); ++i) TW[i] = m.params.at("tasks.W")[i];
  auto run = [&](double y) {
    auto g = build_graph(Z, {0, 1}, TW, {}, {{0, 1, y}});
    Tape t;
    return t.value(model_forward(t, m, g, t.constant(Z), {{0, 0}}))(0, 0);
  };
  CHECK(run(0.0) != run(1.0));
}

TEST_CASE("forward rejects a target pair that is an edge") {
  MetaLinkModel m = tiny_model(4, 3, 1, false, 2, 5);
  DenseMatrix Z(2, 3, 0.5);
  DenseMatrix TW(2, 3, 0.1);
  auto g = build_graph(Z, {0, 1}, TW, {}, {{0, 0, 1.0}});
  Tape t;
  CHECK_THROWS_WITH(model_forward(t, m, g, t.constant(Z), {{0, 0}}),
                    Catch::Matchers::ContainsSubstring("leakage"));
}

TEST_CASE("full forward with BCE passes the gradient check") {
  // 4 data nodes, 3 tasks, D=5, L=2, random edges.
  ModelConfig cfg;
  cfg.input_dim = 6;
  cfg.feat_hidden = {5};
  cfg.embed_dim = 5;
  cfg.gnn_layers = 2;
  cfg.shared_weights = false;
  cfg.num_tasks = 3;
  Rng rng(17);
  MetaLinkModel model = MetaLinkModel::init(cfg, rng);
  DenseMatrix X = random_matrix(4, 6, rng);
  std::vector<std::tuple<std::size_t, std::size_t, double>> edges{
      {0, 0, 1.0}, {1, 2, 0.0}, {2, 1, 1.0}, {3, 0, 0.0}};
  std::vector<std::pair<std::size_t, std::size_t>> targets{{0, 1}, {1, 0}, {2, 2}, {3, 1}};
  std::vector<double> labels{1.0, 0.0, 1.0, 1.0};

  auto build = [&](Tape& t, const ParamMap& p) {
    MetaLinkModel m;
    m.config = cfg;
    m.params = p;
    Var Z = extract_features(t, m, X);
    DenseMatrix TW(2, 5);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 5; ++c) TW(r, c) = p.at("tasks.W")(r, c);
    auto g = build_graph(t.value(Z), {0, 1}, TW, {2}, edges);
    Var logits = model_forward(t, m, g, Z, targets);
    return bce_with_logits(logits, labels, {1.0, 1.0, 1.0, 1.0});
  };
  CHECK(grad_check(model.params, build, 1e-5) < 1e-4);
}

TEST_CASE("shared weights accumulate both directions into one gradient") {
  ModelConfig shared_cfg;
  shared_cfg.input_dim = 3;
  shared_cfg.feat_hidden = {};
  shared_cfg.embed_dim = 3;
  shared_cfg.gnn_layers = 1;
  shared_cfg.shared_weights = true;
  shared_cfg.num_tasks = 2;
  Rng rng(55);
  MetaLinkModel shared = MetaLinkModel::init(shared_cfg, rng);

  MetaLinkModel hetero = shared;
  hetero.config.shared_weights = false;
  hetero.params.erase("gnn.0.Wmsg");
  hetero.params.erase("gnn.0.U");
  hetero.params["gnn.0.Wmsg_d2t"] = shared.params.at("gnn.0.Wmsg");
  hetero.params["gnn.0.Wmsg_t2d"] = shared.params.at("gnn.0.Wmsg");
  hetero.params["gnn.0.U_data"] = shared.params.at("gnn.0.U");
  hetero.params["gnn.0.U_task"] = shared.params.at("gnn.0.U");

  DenseMatrix X = random_matrix(3, 3, rng);
  std::vector<std::tuple<std::size_t, std::size_t, double>> edges{{0, 0, 1.0}, {1, 1, 0.0}, {2, 0, 1.0}};
  std::vector<std::pair<std::size_t, std::size_t>> targets{{0, 1}, {2, 1}};
  std::vector<double> labels{1.0, 0.0};

  auto backprop = [&](const MetaLinkModel& m) {
    Tape t;
    Var Z = extract_features(t, m, X);
    DenseMatrix TW = m.params.at("tasks.W");
    auto g = build_graph(t.value(Z), {0, 1}, TW, {}, edges);
    Var logits = model_forward(t, m, g, Z, targets);
    t.backward(bce_with_logits(logits, labels, {1.0, 1.0}));
    ParamMap grads;
    for (const auto& [name, _] : m.params) grads.emplace(name, t.gradient(name));
    return grads;
  };

  ParamMap gs = backprop(shared);
  ParamMap gh = backprop(hetero);
  for (std::size_t i = 0; i < gs.at("gnn.0.Wmsg").size(); ++i)
    CHECK(gs.at("gnn.0.Wmsg")[i] ==
          Catch::Approx(gh.at("gnn.0.Wmsg_d2t")[i] + gh.at("gnn.0.Wmsg_t2d")[i]).margin(1e-12));
  for (std::size_t i = 0; i < gs.at("gnn.0.U").size(); ++i)
    CHECK(gs.at("gnn.0.U")[i] ==
          Catch::Approx(gh.at("gnn.0.U_data")[i] + gh.at("gnn.0.U_task")[i]).margin(1e-12));
}

TEST_CASE("no NaN for inputs bounded by 1e3") {
  MetaLinkModel m = tiny_model(4, 3, 2, false, 2, 77);
  DenseMatrix Z(3, 3);
  Rng rng(1);
  for (std::size_t i = 0; i < Z.size(); ++i) Z[i] = rng.uniform(-1e3, 1e3);
  DenseMatrix TW(2, 3);
  for (std::size_t i = 0; i < TW.size(); ++i) TW[i] = m.params.at("tasks.W")[i];
  auto g = build_graph(Z, {0, 1}, TW, {}, {{0, 0, 1.0}, {1, 1, 1.0}});
  Tape t;
  DenseMatrix L = t.value(model_forward(t, m, g, t.constant(Z), {{0, 1}, {2, 0}}));
  CHECK(L.all_finite());
}

TEST_CASE("snapshot round trip is bit exact and byte stable") {
  MetaLinkModel m = tiny_model(5, 4, 2, true, 3, 123);
  m.unseen_tasks = {2};
  const auto dir = std::filesystem::temp_directory_path();
  const std::string p1 = (dir / "metalink_snap1.json").string();
  const std::string p2 = (dir / "metalink_snap2.json").string();
  save_snapshot(m, p1);
  MetaLinkModel back = load_snapshot(p1);
  CHECK(back.config.embed_dim == m.config.embed_dim);
  CHECK(back.config.shared_weights == m.config.shared_weights);
  CHECK(back.unseen_tasks == m.unseen_tasks);
  REQUIRE(back.params.size() == m.params.size());
  for (const auto& [name, v] : m.params) CHECK(back.params.at(name) == v);
  save_snapshot(back, p2);
  std::ifstream f1(p1), f2(p2);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}
