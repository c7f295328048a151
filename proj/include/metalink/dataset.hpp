#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "metalink/errors.hpp"
#include "metalink/matrix.hpp"
#include "metalink/rng.hpp"

namespace metalink {

/// Tri-state label. Missing is a first-class state, never a sentinel number,
/// so missing entries cannot leak into arithmetic.
enum class Label : std::uint8_t { negative = 0, positive = 1, missing = 2 };

inline double label_value(Label l) {
  if (l == Label::missing) throw ContractError("label_value on missing label");
  return l == Label::positive ? 1.0 : 0.0;
}

/// Feature matrix plus a {0,1,missing} label matrix over m named tasks.
struct MultiLabelDataset {
  DenseMatrix features;              // n x d
  std::vector<Label> labels;         // n x m, row-major
  std::vector<std::string> task_names;
  std::size_t n = 0, m = 0, d = 0;

  Label label(std::size_t i, std::size_t j) const { return labels[i * m + j]; }
  Label& label(std::size_t i, std::size_t j) { return labels[i * m + j]; }

  std::vector<std::size_t> non_missing_tasks(std::size_t i) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < m; ++j)
      if (label(i, j) != Label::missing) out.push_back(j);
    return out;
  }

  void validate() const {
    if (features.rows() != n || features.cols() != d)
      throw ContractError("dataset: feature shape " + features.shape_str() + " does not match n=" +
                          std::to_string(n) + ", d=" + std::to_string(d));
    if (labels.size() != n * m) throw ContractError("dataset: label matrix size mismatch");
    if (task_names.size() != m) throw ContractError("dataset: task name count mismatch");
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = a + 1; b < m; ++b)
        if (task_names[a] == task_names[b])
          throw ContractError("dataset: duplicate task name '" + task_names[a] + "'");
    for (std::size_t j = 0; j < m; ++j) {
      bool any = false;
      for (std::size_t i = 0; i < n && !any; ++i) any = label(i, j) != Label::missing;
      if (!any) throw ContractError("dataset: task '" + task_names[j] + "' has no observed labels");
    }
  }
};

/// Latent-factor synthetic generator. Task correlation is an explicit dial:
/// task weights mix a shared direction (weight sqrt(rho)) with a private one
/// (weight sqrt(1-rho)), so rho=1 forces identical label columns and rho=0
/// gives independent tasks. Labels are sign(b_j . u), then flipped with
/// probability label_noise and dropped with probability missing_frac.
inline MultiLabelDataset generate_synthetic(std::size_t n, std::size_t m, std::size_t d, double rho,
                                            double label_noise, double missing_frac,
                                            std::uint64_t seed, bool one_positive_per_row = false) {
  if (n < 1 || m < 1 || d < 1) throw ContractError("generate_synthetic: n, m, d must be >= 1");
  if (rho < 0.0 || rho > 1.0) throw ContractError("generate_synthetic: rho must be in [0,1]");
  if (label_noise < 0.0 || label_noise >= 1.0)
    throw ContractError("generate_synthetic: label_noise must be in [0,1)");
  if (missing_frac < 0.0 || missing_frac >= 1.0)
    throw ContractError("generate_synthetic: missing_frac must be in [0,1)");

  Rng rng(seed);
  const std::size_t k = std::min<std::size_t>(d, 8);

  // Feature map scale keeps features informative but not a perfect decoder
  // of the latent, so auxiliary labels carry signal beyond the features.
  const double feature_scale = 0.12 / std::sqrt(static_cast<double>(k));
  DenseMatrix A(d, k);
  for (std::size_t i = 0; i < A.size(); ++i) A[i] = feature_scale * rng.normal();

  auto unit_normal_vec = [&](std::size_t len) {
    std::vector<double> v(len);
    double norm2 = 0.0;
    for (double& x : v) {
      x = rng.normal();
      norm2 += x * x;
    }
    const double inv = 1.0 / std::max(std::sqrt(norm2), 1e-12);
    for (double& x : v) x *= inv;
    return v;
  };

  const std::vector<double> b_shared = unit_normal_vec(k);

  // Private directions are Gram-Schmidt orthogonalized against the shared
  // direction and against each other (cyclically once the latent dimension
  // is exhausted), so sqrt(rho) b_shared + sqrt(1-rho) b_priv has pairwise
  // inner products of exactly rho: rho=0 means independent tasks, rho=1
  // identical ones.
  std::vector<std::vector<double>> gs_basis{b_shared};
  auto make_task_weights = [&]() {
    std::vector<double> priv;
    for (int tries = 0; tries < 32; ++tries) {
      priv = unit_normal_vec(k);
      if (gs_basis.size() >= k) gs_basis.assign(1, b_shared);
      for (const auto& q : gs_basis) {
        double dot = 0.0;
        for (std::size_t c = 0; c < k; ++c) dot += priv[c] * q[c];
        for (std::size_t c = 0; c < k; ++c) priv[c] -= dot * q[c];
      }
      double norm2 = 0.0;
      for (double x : priv) norm2 += x * x;
      if (norm2 > 1e-12) {
        const double inv = 1.0 / std::sqrt(norm2);
        for (double& x : priv) x *= inv;
        break;
      }
    }
    gs_basis.push_back(priv);
    std::vector<double> b(k);
    for (std::size_t c = 0; c < k; ++c)
      b[c] = std::sqrt(rho) * b_shared[c] + std::sqrt(1.0 - rho) * priv[c];
    return b;
  };

  std::vector<std::vector<double>> task_w(m);
  for (std::size_t j = 0; j < m; ++j) task_w[j] = make_task_weights();

  DenseMatrix U(n, k);
  for (std::size_t i = 0; i < U.size(); ++i) U[i] = rng.normal();

  MultiLabelDataset ds;
  ds.n = n;
  ds.m = m;
  ds.d = d;
  ds.features = DenseMatrix(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < d; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += A(r, c) * U(i, c);
      ds.features(i, r) = s + 0.1 * rng.normal();
    }
  ds.labels.assign(n * m, Label::missing);
  ds.task_names.resize(m);
  for (std::size_t j = 0; j < m; ++j) ds.task_names[j] = "task" + std::to_string(j);

  if (one_positive_per_row) {
    // Single-label variant for N-way episodic runs: the positive task is the
    // argmax of b_j . u, all other tasks are negative.
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_score = -1e300;
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) s += task_w[j][c] * U(i, c);
        if (s > best_score) {
          best_score = s;
          best = j;
        }
      }
      for (std::size_t j = 0; j < m; ++j)
        ds.label(i, j) = (j == best) ? Label::positive : Label::negative;
    }
    ds.validate();
    return ds;
  }

  auto fill_task_column = [&](std::size_t j, const std::vector<double>& b) {
    bool saw_pos = false, saw_neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += b[c] * U(i, c);
      bool positive = s > 0.0;
      if (rng.bernoulli(label_noise)) positive = !positive;
      if (rng.bernoulli(missing_frac)) {
        ds.label(i, j) = Label::missing;
        continue;
      }
      ds.label(i, j) = positive ? Label::positive : Label::negative;
      (positive ? saw_pos : saw_neg) = true;
    }
    return saw_pos && saw_neg;
  };

  for (std::size_t j = 0; j < m; ++j) {
    std::vector<double> b = task_w[j];
    bool ok = fill_task_column(j, b);
    int retries = 0;
    while (!ok) {
      if (++retries > 10)
        throw SamplingError("generate_synthetic: task " + std::to_string(j) +
                            " stayed single-class after 10 retries");
      b = make_task_weights();
      ok = fill_task_column(j, b);
    }
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// CSV format: header `f0,...,f{d-1},t:<name>,...`; features are decimal
// reals, labels are 0, 1 or empty (missing). UTF-8, comma delimited.
// ---------------------------------------------------------------------------

inline void save_csv(const MultiLabelDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  for (std::size_t c = 0; c < ds.d; ++c) {
    if (c) out << ',';
    out << 'f' << c;
  }
  for (std::size_t j = 0; j < ds.m; ++j) out << ",t:" << ds.task_names[j];
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < ds.n; ++i) {
    for (std::size_t c = 0; c < ds.d; ++c) {
      if (c) out << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", ds.features(i, c));
      out << buf;
    }
    for (std::size_t j = 0; j < ds.m; ++j) {
      out << ',';
      Label l = ds.label(i, j);
      if (l != Label::missing) out << (l == Label::positive ? '1' : '0');
    }
    out << '\n';
  }
  if (!out) throw ParseError("write to '" + path + "' failed");
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline MultiLabelDataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw ParseError(path + ": empty file");

  MultiLabelDataset ds;
  const std::vector<std::string> header = detail::split_csv_line(line);
  bool in_tasks = false;
  for (const std::string& col : header) {
    if (col.rfind("t:", 0) == 0) {
      in_tasks = true;
      ds.task_names.push_back(col.substr(2));
    } else if (col.size() > 1 && col[0] == 'f' && !in_tasks) {
      std::size_t expect = ds.d;
      if (col != "f" + std::to_string(expect))
        throw ParseError(path + ":1: feature columns must be contiguous f0..f{d-1}, got '" + col + "'");
      ++ds.d;
    } else {
      throw ParseError(path + ":1: unknown column prefix in '" + col + "'");
    }
  }
  ds.m = ds.task_names.size();
  if (ds.d == 0 || ds.m == 0) throw ParseError(path + ":1: need at least one feature and one task column");

  std::vector<double> feats;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != ds.d + ds.m)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(ds.d + ds.m) + " cells, got " + std::to_string(cells.size()));
    for (std::size_t c = 0; c < ds.d; ++c) {
      const std::string& cell = cells[c];
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (cell.empty() || end != cell.c_str() + cell.size() || !std::isfinite(v))
        throw ParseError(path + ":" + std::to_string(lineno) + ": non-numeric feature cell '" + cell + "'");
      feats.push_back(v);
    }
    for (std::size_t j = 0; j < ds.m; ++j) {
      const std::string& cell = cells[ds.d + j];
      if (cell.empty())
        ds.labels.push_back(Label::missing);
      else if (cell == "1")
        ds.labels.push_back(Label::positive);
      else if (cell == "0")
        ds.labels.push_back(Label::negative);
      else
        throw ParseError(path + ":" + std::to_string(lineno) + ": label cell must be 0, 1 or empty, got '" +
                         cell + "'");
    }
    ++ds.n;
  }
  if (ds.n == 0) throw ParseError(path + ": no data rows");
  ds.features = DenseMatrix(ds.n, ds.d);
  std::copy(feats.begin(), feats.end(), ds.features.data());
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------

/// Disjoint train/val/test partition of example indices.
struct SplitSpec {
  std::vector<std::size_t> train, val, test;
};

/// Deterministic shuffled split. Val and test sizes are floor(frac * n)
/// (with a tiny epsilon so exact fractions survive rounding); the remainder
/// goes to train.
inline SplitSpec split_dataset(const MultiLabelDataset& ds, double train_frac, double val_frac,
                               double test_frac, std::uint64_t seed) {
  if (train_frac <= 0.0 || val_frac < 0.0 || test_frac < 0.0)
    throw ContractError("split: fractions must be positive");
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw ContractError("split: fractions must sum to 1");
  const std::size_t n = ds.n;
  auto sized = [n](double frac) {
    return static_cast<std::size_t>(std::floor(frac * static_cast<double>(n) + 1e-9));
  };
  const std::size_t n_val = sized(val_frac);
  const std::size_t n_test = sized(test_frac);
  if (n_val + n_test >= n) throw ContractError("split: train split is empty");
  if (val_frac > 0.0 && n_val == 0) throw ContractError("split: val split empty at n=" + std::to_string(n));
  if (test_frac > 0.0 && n_test == 0) throw ContractError("split: test split empty at n=" + std::to_string(n));

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(Rng::mix(seed, 0x5197));
  rng.shuffle(idx);

  SplitSpec s;
  s.train.assign(idx.begin(), idx.begin() + (n - n_val - n_test));
  s.val.assign(idx.begin() + (n - n_val - n_test), idx.begin() + (n - n_test));
  s.test.assign(idx.begin() + (n - n_test), idx.end());
  return s;
}

// ---------------------------------------------------------------------------

struct PearsonResult {
  DenseMatrix corr;  // m x m
  std::vector<std::pair<std::size_t, std::size_t>> flagged;  // undefined entries, set to 0
};

/// Pairwise Pearson correlation of label columns over jointly observed rows.
/// Pairs with fewer than two joint observations or zero variance are set to
/// 0 and flagged.
inline PearsonResult pearson_matrix(const MultiLabelDataset& ds) {
  PearsonResult res;
  res.corr = DenseMatrix(ds.m, ds.m);
  for (std::size_t a = 0; a < ds.m; ++a) {
    res.corr(a, a) = 1.0;
    for (std::size_t b = a + 1; b < ds.m; ++b) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      std::size_t cnt = 0;
      for (std::size_t i = 0; i < ds.n; ++i) {
        if (ds.label(i, a) == Label::missing || ds.label(i, b) == Label::missing) continue;
        const double x = label_value(ds.label(i, a));
        const double y = label_value(ds.label(i, b));
        sx += x; sy += y; sxx += x * x; syy += y * y; sxy += x * y;
        ++cnt;
      }
      double r = 0.0;
      bool defined = cnt >= 2;
      if (defined) {
        const double nq = static_cast<double>(cnt);
        const double vx = sxx - sx * sx / nq;
        const double vy = syy - sy * sy / nq;
        const double cov = sxy - sx * sy / nq;
        if (vx <= 0.0 || vy <= 0.0)
          defined = false;
        else
          r = cov / std::sqrt(vx * vy);
      }
      if (!defined) res.flagged.emplace_back(a, b);
      res.corr(a, b) = r;
      res.corr(b, a) = r;
    }
  }
  return res;
}

}  // namespace metalink
