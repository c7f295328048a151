#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "metalink/errors.hpp"
#include "metalink/matrix.hpp"

namespace metalink {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid for the
/// lifetime of the owning tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t idx = 0;

  const DenseMatrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Records primitive applications for one forward pass and replays them in
/// reverse to accumulate parameter gradients. One tape per training
/// iteration; parameters live outside the tape and are bound by name.
class Tape {
 public:
  struct Node {
    DenseMatrix value;
    DenseMatrix grad;  // allocated only when requires_grad
    bool requires_grad = false;
    std::function<void(Tape&)> backprop;  // empty for leaves
  };

  Var constant(DenseMatrix value) {
    value.check_finite("constant");
    return push(std::move(value), false, {});
  }

  /// Binds a named parameter slot. Re-binding the same name returns the
  /// existing node, so two uses of one name share a gradient accumulator.
  Var parameter(const std::string& name, const DenseMatrix& value) {
    auto it = registry_.find(name);
    if (it != registry_.end()) {
      const Node& n = nodes_[it->second];
      if (!n.value.same_shape(value))
        throw DimensionError("parameter '" + name + "' re-bound with shape " + value.shape_str() +
                             ", was " + n.value.shape_str());
      return Var{this, it->second};
    }
    value.check_finite("parameter " + name);
    Var v = push(value, true, {});
    registry_.emplace(name, v.idx);
    return v;
  }

  const DenseMatrix& value(Var v) const { return nodes_[v.idx].value; }

  /// Gradient of the most recent backward() w.r.t. a registered parameter.
  const DenseMatrix& gradient(const std::string& name) const {
    auto it = registry_.find(name);
    if (it == registry_.end()) throw ContractError("unknown parameter '" + name + "'");
    return nodes_[it->second].grad;
  }

  const std::map<std::string, std::size_t>& registry() const { return registry_; }

  /// Reverse pass from a scalar loss. Every registered parameter ends up
  /// with a gradient of its own shape (zero if unused by the loss).
  void backward(Var loss) {
    if (loss.tape != this) throw ContractError("backward: loss recorded on a different tape");
    const Node& ln = nodes_[loss.idx];
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
      throw ContractError("backward: loss must be a 1x1 scalar, got " + ln.value.shape_str());
    if (ln.requires_grad) nodes_[loss.idx].grad[0] = 1.0;
    for (std::size_t i = loss.idx + 1; i-- > 0;) {
      if (nodes_[i].requires_grad && nodes_[i].backprop) nodes_[i].backprop(*this);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

  Node& node(std::size_t i) { return nodes_[i]; }
  const Node& node(std::size_t i) const { return nodes_[i]; }

  Var push(DenseMatrix value, bool requires_grad, std::function<void(Tape&)> backprop) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.grad = DenseMatrix(n.value.rows(), n.value.cols());
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

 private:
  // Deque keeps references from value() stable while new nodes are recorded.
  std::deque<Node> nodes_;
  std::map<std::string, std::size_t> registry_;
};

inline const DenseMatrix& Var::value() const { return tape->value(*this); }

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.tape) throw ContractError("operation on null Var");
  return *a.tape;
}

inline Tape& same_tape(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape != &t) throw ContractError("operands recorded on different tapes");
  return t;
}

}  // namespace detail

/// out = a . b  (matrix product)
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const DenseMatrix& A = a.value();
  const DenseMatrix& B = b.value();
  if (A.cols() != B.rows())
    throw DimensionError("matmul: " + A.shape_str() + " . " + B.shape_str());
  DenseMatrix out(A.rows(), B.cols());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t k = 0; k < A.cols(); ++k) {
      const double aik = A(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < B.cols(); ++j) out(i, j) += aik * B(k, j);
    }
  out.check_finite("matmul");
  bool rg = t.node(a.idx).requires_grad || t.node(b.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, ai = a.idx, bi = b.idx;
    t.node(self).backprop = [ai, bi, self](Tape& tp) {
      const DenseMatrix& G = tp.node(self).grad;
      const DenseMatrix& A2 = tp.node(ai).value;
      const DenseMatrix& B2 = tp.node(bi).value;
      if (tp.node(ai).requires_grad) {
        DenseMatrix& dA = tp.node(ai).grad;  // G . B^T
        for (std::size_t i = 0; i < A2.rows(); ++i)
          for (std::size_t j = 0; j < B2.cols(); ++j) {
            const double g = G(i, j);
            if (g == 0.0) continue;
            for (std::size_t k = 0; k < A2.cols(); ++k) dA(i, k) += g * B2(k, j);
          }
      }
      if (tp.node(bi).requires_grad) {
        DenseMatrix& dB = tp.node(bi).grad;  // A^T . G
        for (std::size_t i = 0; i < A2.rows(); ++i)
          for (std::size_t k = 0; k < A2.cols(); ++k) {
            const double aik = A2(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < B2.cols(); ++j) dB(k, j) += aik * G(i, j);
          }
      }
    };
  }
  return v;
}

/// Elementwise sum; shapes must match.
inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const DenseMatrix& A = a.value();
  const DenseMatrix& B = b.value();
  require_same_shape(A, B, "add");
  DenseMatrix out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  out.check_finite("add");
  bool rg = t.node(a.idx).requires_grad || t.node(b.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, ai = a.idx, bi = b.idx;
    t.node(self).backprop = [ai, bi, self](Tape& tp) {
      const DenseMatrix& G = tp.node(self).grad;
      if (tp.node(ai).requires_grad) {
        DenseMatrix& dA = tp.node(ai).grad;
        for (std::size_t i = 0; i < G.size(); ++i) dA[i] += G[i];
      }
      if (tp.node(bi).requires_grad) {
        DenseMatrix& dB = tp.node(bi).grad;
        for (std::size_t i = 0; i < G.size(); ++i) dB[i] += G[i];
      }
    };
  }
  return v;
}

/// Adds a 1xC row vector to every row of an NxC matrix.
inline Var add_row_broadcast(Var x, Var row) {
  Tape& t = detail::same_tape(x, row);
  const DenseMatrix& X = x.value();
  const DenseMatrix& R = row.value();
  if (R.rows() != 1 || R.cols() != X.cols())
    throw DimensionError("add_row_broadcast: " + X.shape_str() + " + " + R.shape_str());
  DenseMatrix out = X;
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) += R(0, j);
  out.check_finite("add_row_broadcast");
  bool rg = t.node(x.idx).requires_grad || t.node(row.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, xi = x.idx, ri = row.idx;
    t.node(self).backprop = [xi, ri, self](Tape& tp) {
      const DenseMatrix& G = tp.node(self).grad;
      if (tp.node(xi).requires_grad) {
        DenseMatrix& dX = tp.node(xi).grad;
        for (std::size_t i = 0; i < G.size(); ++i) dX[i] += G[i];
      }
      if (tp.node(ri).requires_grad) {
        DenseMatrix& dR = tp.node(ri).grad;
        for (std::size_t i = 0; i < G.rows(); ++i)
          for (std::size_t j = 0; j < G.cols(); ++j) dR(0, j) += G(i, j);
      }
    };
  }
  return v;
}

/// Row-wise affine map: out_i = x_i . W + b.
inline Var affine(Var x, Var W, Var b) { return add_row_broadcast(matmul(x, W), b); }

/// Multiply by a compile-time-known constant scalar.
inline Var scale(Var x, double c) {
  Tape& t = detail::tape_of(x);
  DenseMatrix out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  out.check_finite("scale");
  bool rg = t.node(x.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, xi = x.idx;
    t.node(self).backprop = [xi, self, c](Tape& tp) {
      const DenseMatrix& G = tp.node(self).grad;
      DenseMatrix& dX = tp.node(xi).grad;
      for (std::size_t i = 0; i < G.size(); ++i) dX[i] += c * G[i];
    };
  }
  return v;
}

inline Var relu(Var x) {
  Tape& t = detail::tape_of(x);
  DenseMatrix out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  bool rg = t.node(x.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, xi = x.idx;
    t.node(self).backprop = [xi, self](Tape& tp) {
      const DenseMatrix& G = tp.node(self).grad;
      const DenseMatrix& X = tp.node(xi).value;
      DenseMatrix& dX = tp.node(xi).grad;
      for (std::size_t i = 0; i < G.size(); ++i)
        if (X[i] > 0.0) dX[i] += G[i];
    };
  }
  return v;
}

namespace detail {
inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

inline Var sigmoid(Var x) {
  Tape& t = detail::tape_of(x);
  DenseMatrix out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::stable_sigmoid(out[i]);
  bool rg = t.node(x.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, xi = x.idx;
    t.node(self).backprop = [xi, self](Tape& tp) {
      const DenseMatrix& G = tp.node(self).grad;
      const DenseMatrix& S = tp.node(self).value;
      DenseMatrix& dX = tp.node(xi).grad;
      for (std::size_t i = 0; i < G.size(); ++i) dX[i] += G[i] * S[i] * (1.0 - S[i]);
    };
  }
  return v;
}

inline Var hadamard(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const DenseMatrix& A = a.value();
  const DenseMatrix& B = b.value();
  require_same_shape(A, B, "hadamard");
  DenseMatrix out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  out.check_finite("hadamard");
  bool rg = t.node(a.idx).requires_grad || t.node(b.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, ai = a.idx, bi = b.idx;
    t.node(self).backprop = [ai, bi, self](Tape& tp) {
      const DenseMatrix& G = tp.node(self).grad;
      const DenseMatrix& A2 = tp.node(ai).value;
      const DenseMatrix& B2 = tp.node(bi).value;
      if (tp.node(ai).requires_grad) {
        DenseMatrix& dA = tp.node(ai).grad;
        for (std::size_t i = 0; i < G.size(); ++i) dA[i] += G[i] * B2[i];
      }
      if (tp.node(bi).requires_grad) {
        DenseMatrix& dB = tp.node(bi).grad;
        for (std::size_t i = 0; i < G.size(); ++i) dB[i] += G[i] * A2[i];
      }
    };
  }
  return v;
}

/// Sum of all entries -> 1x1.
inline Var sum_all(Var x) {
  Tape& t = detail::tape_of(x);
  double s = 0.0;
  const DenseMatrix& X = x.value();
  for (std::size_t i = 0; i < X.size(); ++i) s += X[i];
  DenseMatrix out(1, 1, s);
  out.check_finite("sum_all");
  bool rg = t.node(x.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, xi = x.idx;
    t.node(self).backprop = [xi, self](Tape& tp) {
      const double g = tp.node(self).grad[0];
      DenseMatrix& dX = tp.node(xi).grad;
      for (std::size_t i = 0; i < dX.size(); ++i) dX[i] += g;
    };
  }
  return v;
}

/// Per-row sum over columns: NxC -> Nx1.
inline Var row_sum(Var x) {
  Tape& t = detail::tape_of(x);
  const DenseMatrix& X = x.value();
  DenseMatrix out(X.rows(), 1);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < X.cols(); ++j) s += X(i, j);
    out(i, 0) = s;
  }
  out.check_finite("row_sum");
  bool rg = t.node(x.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, xi = x.idx;
    t.node(self).backprop = [xi, self](Tape& tp) {
      const DenseMatrix& G = tp.node(self).grad;
      DenseMatrix& dX = tp.node(xi).grad;
      for (std::size_t i = 0; i < dX.rows(); ++i)
        for (std::size_t j = 0; j < dX.cols(); ++j) dX(i, j) += G(i, 0);
    };
  }
  return v;
}

/// Column-wise concatenation of two matrices with equal row counts.
inline Var concat_cols(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const DenseMatrix& A = a.value();
  const DenseMatrix& B = b.value();
  if (A.rows() != B.rows())
    throw DimensionError("concat_cols: row mismatch " + A.shape_str() + " vs " + B.shape_str());
  DenseMatrix out(A.rows(), A.cols() + B.cols());
  for (std::size_t i = 0; i < A.rows(); ++i) {
    for (std::size_t j = 0; j < A.cols(); ++j) out(i, j) = A(i, j);
    for (std::size_t j = 0; j < B.cols(); ++j) out(i, A.cols() + j) = B(i, j);
  }
  bool rg = t.node(a.idx).requires_grad || t.node(b.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, ai = a.idx, bi = b.idx;
    t.node(self).backprop = [ai, bi, self](Tape& tp) {
      const DenseMatrix& G = tp.node(self).grad;
      const std::size_t ac = tp.node(ai).value.cols();
      if (tp.node(ai).requires_grad) {
        DenseMatrix& dA = tp.node(ai).grad;
        for (std::size_t i = 0; i < dA.rows(); ++i)
          for (std::size_t j = 0; j < ac; ++j) dA(i, j) += G(i, j);
      }
      if (tp.node(bi).requires_grad) {
        DenseMatrix& dB = tp.node(bi).grad;
        for (std::size_t i = 0; i < dB.rows(); ++i)
          for (std::size_t j = 0; j < dB.cols(); ++j) dB(i, j) += G(i, ac + j);
      }
    };
  }
  return v;
}

/// Mean of a list of 1xD rows. The empty list yields the zero vector, which
/// is the aggregation used for isolated graph nodes.
inline Var mean_rows(Tape& t, const std::vector<Var>& rows, std::size_t cols) {
  if (rows.empty()) return t.constant(DenseMatrix(1, cols));
  DenseMatrix out(1, cols);
  bool rg = false;
  for (Var r : rows) {
    const DenseMatrix& R = r.value();
    if (R.rows() != 1 || R.cols() != cols)
      throw DimensionError("mean_rows: expected 1x" + std::to_string(cols) + ", got " + R.shape_str());
    if (r.tape != &t) throw ContractError("mean_rows: row from a different tape");
    for (std::size_t j = 0; j < cols; ++j) out(0, j) += R(0, j);
    rg = rg || t.node(r.idx).requires_grad;
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (std::size_t j = 0; j < cols; ++j) out(0, j) *= inv;
  out.check_finite("mean_rows");
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::vector<std::size_t> in;
    in.reserve(rows.size());
    for (Var r : rows) in.push_back(r.idx);
    std::size_t self = v.idx;
    t.node(self).backprop = [in, self, inv](Tape& tp) {
      const DenseMatrix& G = tp.node(self).grad;
      for (std::size_t ri : in) {
        if (!tp.node(ri).requires_grad) continue;
        DenseMatrix& dR = tp.node(ri).grad;
        for (std::size_t j = 0; j < G.cols(); ++j) dR(0, j) += inv * G(0, j);
      }
    };
  }
  return v;
}

/// Gathers rows of x into a new matrix; indices may repeat.
inline Var gather_rows(Var x, std::vector<std::size_t> indices) {
  Tape& t = detail::tape_of(x);
  const DenseMatrix& X = x.value();
  DenseMatrix out(indices.size(), X.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= X.rows()) throw ContractError("gather_rows: index out of range");
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) = X(indices[i], j);
  }
  bool rg = t.node(x.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, xi = x.idx;
    t.node(self).backprop = [xi, self, idx = std::move(indices)](Tape& tp) {
      const DenseMatrix& G = tp.node(self).grad;
      DenseMatrix& dX = tp.node(xi).grad;
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < G.cols(); ++j) dX(idx[i], j) += G(i, j);
    };
  }
  return v;
}

/// Extracts one row as 1xC.
inline Var row(Var x, std::size_t i) { return gather_rows(x, {i}); }

/// Vertical stack of blocks with equal column counts.
inline Var vstack(Tape& t, const std::vector<Var>& blocks) {
  if (blocks.empty()) throw ContractError("vstack: empty block list");
  std::size_t cols = blocks.front().cols();
  std::size_t rows = 0;
  bool rg = false;
  for (Var b : blocks) {
    if (b.tape != &t) throw ContractError("vstack: block from a different tape");
    if (b.cols() != cols) throw DimensionError("vstack: column mismatch");
    rows += b.rows();
    rg = rg || t.node(b.idx).requires_grad;
  }
  DenseMatrix out(rows, cols);
  std::size_t r0 = 0;
  for (Var b : blocks) {
    const DenseMatrix& B = b.value();
    for (std::size_t i = 0; i < B.rows(); ++i)
      for (std::size_t j = 0; j < cols; ++j) out(r0 + i, j) = B(i, j);
    r0 += B.rows();
  }
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::vector<std::size_t> in;
    in.reserve(blocks.size());
    for (Var b : blocks) in.push_back(b.idx);
    std::size_t self = v.idx;
    t.node(self).backprop = [in, self](Tape& tp) {
      const DenseMatrix& G = tp.node(self).grad;
      std::size_t r = 0;
      for (std::size_t bi : in) {
        Tape::Node& n = tp.node(bi);
        if (n.requires_grad) {
          for (std::size_t i = 0; i < n.value.rows(); ++i)
            for (std::size_t j = 0; j < G.cols(); ++j) n.grad(i, j) += G(r + i, j);
        }
        r += n.value.rows();
      }
    };
  }
  return v;
}

/// Per-segment mean of rows of x: output row s = mean of x rows listed in
/// segments[s], or zero when the segment is empty.
inline Var segment_mean(Var x, std::vector<std::vector<std::size_t>> segments) {
  Tape& t = detail::tape_of(x);
  const DenseMatrix& X = x.value();
  DenseMatrix out(segments.size(), X.cols());
  for (std::size_t s = 0; s < segments.size(); ++s) {
    if (segments[s].empty()) continue;
    for (std::size_t r : segments[s]) {
      if (r >= X.rows()) throw ContractError("segment_mean: index out of range");
      for (std::size_t j = 0; j < X.cols(); ++j) out(s, j) += X(r, j);
    }
    const double inv = 1.0 / static_cast<double>(segments[s].size());
    for (std::size_t j = 0; j < X.cols(); ++j) out(s, j) *= inv;
  }
  out.check_finite("segment_mean");
  bool rg = t.node(x.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, xi = x.idx;
    t.node(self).backprop = [xi, self, segs = std::move(segments)](Tape& tp) {
      const DenseMatrix& G = tp.node(self).grad;
      DenseMatrix& dX = tp.node(xi).grad;
      for (std::size_t s = 0; s < segs.size(); ++s) {
        if (segs[s].empty()) continue;
        const double inv = 1.0 / static_cast<double>(segs[s].size());
        for (std::size_t r : segs[s])
          for (std::size_t j = 0; j < G.cols(); ++j) dX(r, j) += inv * G(s, j);
      }
    };
  }
  return v;
}

/// Mean binary cross-entropy with logits over masked positions, in the
/// numerically stable form max(l,0) - l*t + log(1 + exp(-|l|)).
inline Var bce_with_logits(Var logits, const std::vector<double>& targets,
                           const std::vector<double>& mask) {
  Tape& t = detail::tape_of(logits);
  const DenseMatrix& L = logits.value();
  if (L.rows() != 1 && L.cols() != 1)
    throw DimensionError("bce_with_logits: logits must be a vector, got " + L.shape_str());
  const std::size_t n = L.size();
  if (targets.size() != n || mask.size() != n)
    throw DimensionError("bce_with_logits: lengths differ (logits " + std::to_string(n) +
                         ", targets " + std::to_string(targets.size()) + ", mask " +
                         std::to_string(mask.size()) + ")");
  double count = 0.0;
  for (double m : mask) count += (m != 0.0) ? 1.0 : 0.0;
  if (count == 0.0) throw ContractError("bce_with_logits: empty mask, loss undefined");
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] == 0.0) continue;
    const double l = L[i];
    const double term = std::max(l, 0.0) - l * targets[i] + std::log1p(std::exp(-std::abs(l)));
    loss += term;
  }
  loss /= count;
  DenseMatrix out(1, 1, loss);
  out.check_finite("bce_with_logits");
  bool rg = t.node(logits.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, li = logits.idx;
    t.node(self).backprop = [li, self, targets, mask, count](Tape& tp) {
      const double g = tp.node(self).grad[0];
      const DenseMatrix& L2 = tp.node(li).value;
      DenseMatrix& dL = tp.node(li).grad;
      for (std::size_t i = 0; i < L2.size(); ++i) {
        if (mask[i] == 0.0) continue;
        dL[i] += g * (detail::stable_sigmoid(L2[i]) - targets[i]) / count;
      }
    };
  }
  return v;
}

/// -log softmax(logits)[target_index] for a logit vector.
inline Var softmax_ce(Var logits, std::size_t target_index) {
  Tape& t = detail::tape_of(logits);
  const DenseMatrix& L = logits.value();
  if (L.rows() != 1 && L.cols() != 1)
    throw DimensionError("softmax_ce: logits must be a vector, got " + L.shape_str());
  const std::size_t n = L.size();
  if (target_index >= n) throw ContractError("softmax_ce: target index out of range");
  double mx = L[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, L[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(L[i] - mx);
  const double logz = mx + std::log(z);
  DenseMatrix out(1, 1, logz - L[target_index]);
  out.check_finite("softmax_ce");
  bool rg = t.node(logits.idx).requires_grad;
  Var v = t.push(std::move(out), rg, {});
  if (rg) {
    std::size_t self = v.idx, li = logits.idx;
    t.node(self).backprop = [li, self, target_index, logz](Tape& tp) {
      const double g = tp.node(self).grad[0];
      const DenseMatrix& L2 = tp.node(li).value;
      DenseMatrix& dL = tp.node(li).grad;
      for (std::size_t i = 0; i < L2.size(); ++i) {
        const double p = std::exp(L2[i] - logz);
        dL[i] += g * (p - (i == target_index ? 1.0 : 0.0));
      }
    };
  }
  return v;
}

}  // namespace metalink
