#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "metalink/training.hpp"

using namespace metalink;

namespace {

TrainConfig small_config(Setting s, std::uint64_t seed = 0) {
  TrainConfig cfg;
  cfg.setting = s;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.feat_hidden = {16};
  cfg.embed_dim = 16;
  cfg.gnn_layers = 1;
  cfg.shots = 24;
  cfg.query_size = 24;
  cfg.seed = seed;
  return cfg;
}

MetaLinkModel zero_head_model(const MultiLabelDataset& ds, std::size_t L) {
  ModelConfig mc;
  mc.input_dim = ds.d;
  mc.feat_hidden = {8};
  mc.embed_dim = 8;
  mc.gnn_layers = L;
  mc.num_tasks = ds.m;
  Rng rng(3);
  MetaLinkModel m = MetaLinkModel::init(mc, rng);
  const std::size_t first = L == 0 ? 0 : 1;
  const std::size_t last = L == 0 ? 0 : L;
  for (std::size_t l = first; l <= last; ++l) {
    const std::string p = "head." + std::to_string(l) + ".";
    m.params[p + "W1"] = DenseMatrix(16, 8);
    m.params[p + "b1"] = DenseMatrix(1, 8);
    m.params[p + "W2"] = DenseMatrix(8, 1);
    m.params[p + "b2"] = DenseMatrix(1, 1);
  }
  return m;
}

}  // namespace

TEST_CASE("episode_loss_multilabel equals ln 2 under zero logits") {
  auto ds = generate_synthetic(60, 4, 8, 0.5, 0.0, 0.0, 7);
  MetaLinkModel m = zero_head_model(ds, 1);
  Rng rng(1);
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  auto ep = sample_relational(ds, idx, 0.25, rng);
  CHECK(episode_loss_multilabel(m, ds, ep) == Catch::Approx(std::log(2.0)));
}

TEST_CASE("episode_loss_multilabel matches bce_with_logits on the flattened targets") {
  auto ds = generate_synthetic(40, 4, 8, 0.5, 0.1, 0.0, 8);
  TrainConfig cfg = small_config(Setting::relational, 3);
  cfg.epochs = 1;
  auto res = train(ds, cfg);
  Rng rng(5);
  std::vector<std::size_t> idx{0, 1, 2, 3, 4};
  auto ep = sample_relational(ds, idx, 0.25, rng);
  Tape t;
  EpisodeForward fwd = episode_forward(t, res.model, ds, ep);
  std::vector<double> mask(fwd.target_labels.size(), 1.0);
  const double direct = t.value(bce_with_logits(fwd.logits, fwd.target_labels, mask))[0];
  CHECK(episode_loss_multilabel(res.model, ds, ep) == Catch::Approx(direct));
}

TEST_CASE("fewshot loss is ln N for uniform logits and rejects bad positives") {
  auto ds = generate_synthetic(300, 8, 16, 0.3, 0.0, 0.0, 9, true);
  MetaLinkModel m = zero_head_model(ds, 1);
  Rng rng(2);
  std::vector<std::size_t> pool(300);
  std::iota(pool.begin(), pool.end(), 0);
  std::vector<std::size_t> tasks{0, 1, 2, 3, 4, 5, 6, 7};
  auto ep = sample_fewshot(ds, pool, tasks, 5, 3, 6, rng);
  CHECK(episode_loss_fewshot(m, ds, ep) == Catch::Approx(std::log(5.0)));

  // Two positives in one group violate the contract.
  auto bad = ep;
  for (auto& t : bad.query_targets)
    if (t.example == bad.query_examples[0]) t.label = Label::positive;
  CHECK_THROWS_AS(episode_loss_fewshot(m, ds, bad), ContractError);
}

TEST_CASE("training with epochs=0 returns the initialized model and empty history") {
  auto ds = generate_synthetic(100, 4, 8, 0.5, 0.0, 0.0, 3);
  TrainConfig cfg = small_config(Setting::standard);
  cfg.epochs = 0;
  auto res = train(ds, cfg);
  CHECK(res.history.train_loss.empty());
  CHECK(res.history.val_metric.empty());
  CHECK(res.model.params.size() > 0);
}

TEST_CASE("training is deterministic given config and seed") {
  auto ds = generate_synthetic(150, 5, 8, 0.6, 0.05, 0.1, 4);
  TrainConfig cfg = small_config(Setting::relational, 11);
  auto a = train(ds, cfg);
  auto b = train(ds, cfg);
  CHECK(a.history.train_loss == b.history.train_loss);
  CHECK(a.history.val_metric == b.history.val_metric);
  REQUIRE(a.model.params.size() == b.model.params.size());
  for (const auto& [name, v] : a.model.params) CHECK(b.model.params.at(name) == v);
  CHECK(snapshot_json(a.model).dump() == snapshot_json(b.model).dump());
}

TEST_CASE("relational training with aux_ratio 0 reproduces the standard losses exactly") {
  auto ds = generate_synthetic(150, 5, 8, 0.6, 0.05, 0.1, 4);
  TrainConfig std_cfg = small_config(Setting::standard, 5);
  TrainConfig rel_cfg = small_config(Setting::relational, 5);
  rel_cfg.aux_ratio = 0.0;
  auto a = train(ds, std_cfg);
  auto b = train(ds, rel_cfg);
  CHECK(a.history.train_loss == b.history.train_loss);
  CHECK(a.history.val_metric == b.history.val_metric);
}

TEST_CASE("untrained models score at chance on balanced data, on average") {
  // One random model's per-task AUC can sit far from 0.5 (its random score
  // direction may align with a task by luck), so average over models.
  auto ds = generate_synthetic(600, 8, 8, 0.0, 0.0, 0.0, 6);
  std::vector<std::size_t> split(600);
  std::iota(split.begin(), split.end(), 0);
  double sum = 0.0;
  const int n_models = 12;
  for (int s = 0; s < n_models; ++s) {
    ModelConfig mc;
    mc.input_dim = ds.d;
    mc.feat_hidden = {16};
    mc.embed_dim = 16;
    mc.gnn_layers = 1;
    mc.num_tasks = ds.m;
    Rng rng(100 + s);
    MetaLinkModel m = MetaLinkModel::init(mc, rng);
    EvalParams p;
    p.setting = Setting::standard;
    p.seed = 3;
    sum += evaluate(m, ds, split, p).macro_auc;
  }
  CHECK(sum / n_models == Catch::Approx(0.5).margin(0.05));
}

TEST_CASE("relational eval with aux_ratio 0 is bit-identical to standard eval") {
  auto ds = generate_synthetic(200, 5, 8, 0.6, 0.05, 0.1, 4);
  TrainConfig cfg = small_config(Setting::relational, 2);
  auto res = train(ds, cfg);
  EvalParams std_p, rel_p;
  std_p.setting = Setting::standard;
  std_p.seed = 42;
  rel_p.setting = Setting::relational;
  rel_p.aux_ratio = 0.0;
  rel_p.seed = 42;
  MetricsReport a = evaluate(res.model, ds, res.split.test, std_p);
  MetricsReport b = evaluate(res.model, ds, res.split.test, rel_p);
  CHECK(a.to_json().dump() == b.to_json().dump());
  CHECK(a.eval_loss == b.eval_loss);
}

TEST_CASE("meta evaluation touches only the held-out tasks and uses support edges") {
  auto ds = generate_synthetic(400, 8, 16, 0.8, 0.05, 0.0, 13);
  TrainConfig cfg = small_config(Setting::meta, 7);
  cfg.epochs = 1;
  auto res = train(ds, cfg);
  REQUIRE(res.unseen_tasks.size() == 1);  // floor(0.2 * 8) = 1
  EvalParams p;
  p.setting = Setting::meta;
  p.shots = 32;
  p.seed = 9;
  p.target_tasks = res.unseen_tasks;
  MetricsReport rep = evaluate(res.model, ds, res.split.test, p);
  for (const auto& tm : rep.per_task) CHECK(tm.task == ds.task_names[res.unseen_tasks[0]]);
}

TEST_CASE("meta training never touches held-out tasks") {
  auto ds = generate_synthetic(300, 8, 8, 0.7, 0.05, 0.0, 14);
  for (Setting s : {Setting::meta, Setting::relational_meta}) {
    TrainConfig cfg = small_config(s, 21);
    cfg.epochs = 2;
    auto res = train(ds, cfg);
    CHECK(res.history.meta_hygiene_violations == 0);
    CHECK(res.history.leakage_violations == 0);
  }
}

TEST_CASE("history records the cosine schedule endpoints") {
  auto ds = generate_synthetic(400, 4, 8, 0.5, 0.05, 0.0, 15);
  TrainConfig cfg = small_config(Setting::standard, 8);
  cfg.epochs = 10;
  cfg.batch_size = 40;  // 320 train examples -> 8 iters, 80 steps
  auto res = train(ds, cfg);
  CHECK(res.history.lr.front() == Catch::Approx(cfg.base_lr));
  CHECK(res.history.lr.back() < cfg.base_lr);
  CHECK(res.history.train_loss.size() == cfg.epochs);
  CHECK(res.history.val_metric.size() == cfg.epochs);
  CHECK(res.history.lr.size() == cfg.epochs);
  // Last step of the run evaluates the schedule at T-1, never at T.
  const std::size_t total = 80;
  CHECK(cosine_lr(cfg.base_lr, total - 1, total) > 0.0);
}

TEST_CASE("best-validation checkpoint is restored") {
  auto ds = generate_synthetic(300, 5, 8, 0.7, 0.05, 0.0, 16);
  TrainConfig cfg = small_config(Setting::relational, 12);
  cfg.epochs = 4;
  auto res = train(ds, cfg);
  double best = -1.0;
  for (double v : res.history.val_metric) best = std::max(best, v);
  CHECK(res.history.best_val == Catch::Approx(best));
  CHECK(res.history.best_epoch < cfg.epochs);
}

TEST_CASE("fewshot training runs and evaluates on held-out classes") {
  auto ds = generate_synthetic(600, 10, 16, 0.3, 0.0, 0.0, 17, true);
  TrainConfig cfg;
  cfg.setting = Setting::fewshot;
  cfg.epochs = 1;
  cfg.n_way = 2;
  cfg.shots = 2;
  cfg.query_size = 6;
  cfg.held_out_task_fraction = 0.2;
  cfg.feat_hidden = {16};
  cfg.embed_dim = 16;
  cfg.gnn_layers = 1;
  cfg.fewshot_eval_episodes = 5;
  cfg.fewshot_query_size = 4;
  cfg.seed = 19;
  auto res = train(ds, cfg);
  CHECK(res.unseen_tasks.size() == 2);
  CHECK(res.history.final_test.episode_accuracy >= 0.0);
  CHECK(res.history.final_test.episode_accuracy <= 1.0);
  CHECK(res.history.meta_hygiene_violations == 0);
}

TEST_CASE("config validation rejects inconsistent settings") {
  auto ds = generate_synthetic(100, 3, 8, 0.5, 0.0, 0.0, 18);
  TrainConfig cfg = small_config(Setting::meta);
  cfg.held_out_task_fraction = 0.0;
  CHECK_THROWS_AS(train(ds, cfg), ConfigError);
  cfg = small_config(Setting::standard);
  cfg.base_lr = -1.0;
  CHECK_THROWS_AS(train(ds, cfg), ConfigError);
  cfg = small_config(Setting::fewshot);
  cfg.n_way = 9;  // more ways than tasks
  CHECK_THROWS_AS(train(ds, cfg), ConfigError);
}

TEST_CASE("sweep over one zero ratio matches the standard run") {
  auto ds = generate_synthetic(150, 4, 8, 0.6, 0.05, 0.0, 20);
  TrainConfig base = small_config(Setting::standard, 30);
  auto std_res = train(ds, base);
  auto cells = sweep_aux_ratio(ds, base, {0.0}, {30});
  REQUIRE(cells.size() == 1);
  CHECK(cells[0].metric == Catch::Approx(std_res.history.final_test.macro_auc));
}

TEST_CASE("sweep emits one row per (x, seed) cell and parallel equals serial") {
  auto ds = generate_synthetic(150, 4, 8, 0.6, 0.05, 0.0, 20);
  TrainConfig base = small_config(Setting::relational, 0);
  base.epochs = 1;
  auto serial = sweep_aux_ratio(ds, base, {0.0, 0.25}, {1, 2}, 1);
  auto parallel = sweep_aux_ratio(ds, base, {0.0, 0.25}, {1, 2}, 2);
  REQUIRE(serial.size() == 4);
  REQUIRE(parallel.size() == 4);
  for (std::size_t i = 0; i < serial.size(); ++i) {
    CHECK(serial[i].x == parallel[i].x);
    CHECK(serial[i].seed == parallel[i].seed);
    CHECK(serial[i].metric == parallel[i].metric);
  }
}

TEST_CASE("sweep_layers covers the requested layer counts") {
  auto ds = generate_synthetic(120, 4, 8, 0.6, 0.05, 0.0, 23);
  TrainConfig base = small_config(Setting::relational, 1);
  base.epochs = 1;
  auto cells = sweep_layers(ds, base, {0, 1}, {5});
  REQUIRE(cells.size() == 2);
  CHECK(cells[0].x == 0.0);
  CHECK(cells[1].x == 1.0);
}
