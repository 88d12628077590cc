#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "d2v/errors.hpp"
#include "d2v/tensor.hpp"

namespace d2v {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/**
 * Compares reverse-mode gradients of `loss_fn` against central differences.
 *
 * Every coordinate of every listed tensor is perturbed in place by +/-eps and
 * restored. The reported error per coordinate is
 * |analytic - numeric| / max(1, |analytic|).
 */
template <class Real, class LossFn>
GradCheckResult grad_check_params(LossFn&& loss_fn, NamedTensors<Real> params, Real eps) {
  if (!(eps > 0)) throw ConfigError("grad_check: eps must be positive");
  for (auto& [name, t] : params) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  {
    Graph<Real> graph;
    GraphScope<Real> scope(graph);
    Tensor<Real> loss = loss_fn();
    graph.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : params) {
    std::vector<double> g(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), g.begin());
    for (double v : g)
      if (!std::isfinite(v)) throw NumericError("grad_check: non-finite analytic gradient in " + name);
    analytic.push_back(std::move(g));
  }

  NoGradScope<Real> no_grad;
  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& t = params[p].second;
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Real original = values[i];
      values[i] = original + eps;
      const double up = static_cast<double>(loss_fn().item());
      values[i] = original - eps;
      const double down = static_cast<double>(loss_fn().item());
      values[i] = original;
      const double numeric = (up - down) / (2.0 * static_cast<double>(eps));
      if (!std::isfinite(numeric))
        throw NumericError("grad_check: non-finite numeric gradient in " + params[p].first);
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++result.coordinates;
      if (result.worst_param.empty() || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = params[p].first;
        result.worst_index = i;
      }
    }
  }
  for (auto& [name, t] : params) t.zero_grad();
  return result;
}

/// Single-tensor form: f maps x to a scalar tensor.
template <class Real, class F>
double grad_check(F&& f, const Tensor<Real>& x, Real eps) {
  Tensor<Real> leaf(x.shape(), x.values(), true);
  return grad_check_params<Real>([&] { return f(leaf); }, NamedTensors<Real>{{"x", leaf}}, eps).max_rel_error;
}

}  // namespace d2v
