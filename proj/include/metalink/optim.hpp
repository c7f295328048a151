#pragma once

#include <cmath>
#include <map>
#include <string>

#include "metalink/errors.hpp"
#include "metalink/matrix.hpp"

namespace metalink {

using ParamMap = std::map<std::string, DenseMatrix>;

/// Adam first/second moment accumulators plus the step counter.
struct OptimizerState {
  ParamMap m;
  ParamMap v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update across all named parameters. Weight decay
/// is classic L2 (added to the gradient).
inline void adam_step(ParamMap& params, const ParamMap& grads, OptimizerState& state, double lr,
                      double weight_decay = 0.0) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw ContractError("adam_step: missing gradient for '" + name + "'");
    const DenseMatrix& g = git->second;
    require_same_shape(p, g, "adam_step");
    DenseMatrix& m = state.m.try_emplace(name, p.rows(), p.cols()).first->second;
    DenseMatrix& v = state.v.try_emplace(name, p.rows(), p.cols()).first->second;
    require_same_shape(p, m, "adam_step moment");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] + weight_decay * p[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    p.check_finite("adam_step '" + name + "'");
  }
}

/// Cosine learning-rate schedule: base_lr * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
  if (total_steps < 1) throw ContractError("cosine_lr: total_steps must be >= 1");
  if (step > total_steps)
    throw ContractError("cosine_lr: step " + std::to_string(step) + " > total_steps " +
                        std::to_string(total_steps));
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * (1.0 + std::cos(3.14159265358979323846 * frac)) / 2.0;
}

}  // namespace metalink
