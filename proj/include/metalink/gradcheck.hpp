#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "metalink/optim.hpp"
#include "metalink/tape.hpp"

namespace metalink {

/// Builds a scalar loss on the given tape from the given parameters. Must be
/// deterministic: the same parameters must produce the same loss.
using LossBuilder = std::function<Var(Tape&, const ParamMap&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

/// Compares reverse-mode gradients against central finite differences
/// (f(p+eps) - f(p-eps)) / (2 eps), coordinate by coordinate. Returns the
/// max of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline GradCheckReport grad_check_report(ParamMap params, const LossBuilder& build_loss,
                                         double eps = 1e-5) {
  if (eps <= 0.0) throw ContractError("grad_check: eps must be > 0");

  auto eval = [&](const ParamMap& p) -> double {
    Tape t;
    Var loss = build_loss(t, p);
    const DenseMatrix& L = t.value(loss);
    if (L.rows() != 1 || L.cols() != 1) throw ContractError("grad_check: loss must be scalar");
    return L[0];
  };

  const double f0 = eval(params);
  if (eval(params) != f0)
    throw ContractError("grad_check: loss is not deterministic under identical parameters");

  ParamMap analytic;
  {
    Tape t;
    Var loss = build_loss(t, params);
    t.backward(loss);
    for (const auto& [name, value] : params) {
      // A parameter the builder never binds contributes a zero gradient.
      if (t.registry().count(name))
        analytic.emplace(name, t.gradient(name));
      else
        analytic.emplace(name, DenseMatrix(value.rows(), value.cols()));
    }
  }

  GradCheckReport report;
  for (auto& [name, p] : params) {
    const DenseMatrix& a = analytic.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + eps;
      const double fp = eval(params);
      p[i] = orig - eps;
      const double fm = eval(params);
      p[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double denom = std::max({std::abs(a[i]), std::abs(numeric), 1e-8});
      const double rel = std::abs(a[i] - numeric) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

inline double grad_check(ParamMap params, const LossBuilder& build_loss, double eps = 1e-5) {
  return grad_check_report(std::move(params), build_loss, eps).max_rel_err;
}

}  // namespace metalink
