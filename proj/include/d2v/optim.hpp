#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "d2v/errors.hpp"
#include "d2v/tensor.hpp"

namespace d2v {

enum class LrKind { TriStage, Cosine };

/// Phase fractions are of the total update count. Cosine uses only `warmup`.
struct LrSchedule {
  LrKind kind = LrKind::TriStage;
  double peak = 5e-4;
  double warmup = 0.03;
  double hold = 0.90;
  double decay = 0.07;

  void validate() const {
    if (!(peak > 0)) throw ConfigError("lr.peak must be positive");
    if (warmup < 0 || hold < 0 || decay < 0) throw ConfigError("lr phase fractions must be non-negative");
    if (kind == LrKind::TriStage && std::abs(warmup + hold + decay - 1.0) > 1e-9)
      throw ConfigError("lr: tri_stage fractions warmup + hold + decay must sum to 1");
    if (kind == LrKind::Cosine && warmup >= 1.0) throw ConfigError("lr: cosine warmup fraction must be < 1");
  }
  bool operator==(const LrSchedule&) const = default;
};

inline double lr_at(std::size_t step, const LrSchedule& s, std::size_t total_steps) {
  if (total_steps == 0) return s.peak;
  const double t = static_cast<double>(std::min(step, total_steps));
  const double total = static_cast<double>(total_steps);
  const double warm = s.warmup * total;
  if (t < warm) return s.peak * t / warm;
  if (s.kind == LrKind::Cosine) {
    const double span = total - warm;
    return span <= 0 ? s.peak : 0.5 * s.peak * (1.0 + std::cos(std::numbers::pi * (t - warm) / span));
  }
  const double hold_end = warm + s.hold * total;
  if (t < hold_end) return s.peak;
  const double decay = s.decay * total;
  if (decay <= 0 || t >= total) return 0.0;
  return s.peak * std::max(0.0, 1.0 - (t - hold_end) / decay);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 0.0;  // 0 disables clipping

  void validate() const {
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("optim: betas must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("optim.eps must be positive");
    if (weight_decay < 0 || clip_norm < 0) throw ConfigError("optim: weight_decay and clip_norm must be >= 0");
  }
  bool operator==(const AdamConfig&) const = default;
};

/// First and second moments, in double, parallel to the parameter list.
struct AdamMoments {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;
};

/// Global L2 norm of all gradients; missing gradients count as zero.
template <class Real>
double grad_norm(const NamedTensors<Real>& params) {
  double acc = 0;
  for (const auto& [name, p] : params)
    if (p.has_grad())
      for (Real g : p.grad()) acc += static_cast<double>(g) * g;
  return std::sqrt(acc);
}

/**
 * Bias-corrected Adam with decoupled weight decay on matrices (rank >= 2).
 * Gradients are validated before any parameter is touched, so a non-finite
 * gradient aborts the step with state unchanged. Returns the pre-clip norm.
 */
template <class Real>
double adam_step(const NamedTensors<Real>& params, AdamMoments& moments, double lr, const AdamConfig& cfg) {
  for (const auto& [name, p] : params)
    if (p.has_grad())
      for (Real g : p.grad())
        if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in " + name);
  if (moments.m.empty()) {
    for (const auto& [name, p] : params) {
      moments.m.emplace_back(p.numel(), 0.0);
      moments.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (moments.m.size() != params.size()) throw StateError("adam_step: moment count differs from parameter count");

  const double norm = grad_norm(params);
  const double clip = (cfg.clip_norm > 0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;
  moments.t += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(moments.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(moments.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Real> p = params[i].second;
    auto values = p.mutable_data();
    auto& m = moments.m[i];
    auto& v = moments.v[i];
    if (m.size() != values.size()) throw StateError("adam_step: moment shape mismatch for " + params[i].first);
    const bool decay = p.rank() >= 2;
    const bool has_grad = p.has_grad();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = has_grad ? static_cast<double>(p.grad()[j]) * clip : 0.0;
      double w = values[j];
      if (decay) w *= 1.0 - lr * cfg.weight_decay;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      w -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
      values[j] = static_cast<Real>(w);
    }
  }
  return norm;
}

}  // namespace d2v
