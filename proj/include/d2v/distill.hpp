#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "d2v/encoder.hpp"
#include "d2v/errors.hpp"
#include "d2v/ops.hpp"
#include "d2v/tensor.hpp"

namespace d2v {

// ---------------------------------------------------------------- EMA teacher

struct EmaSchedule {
  double tau0 = 0.999;
  double tau_e = 0.9999;
  std::size_t tau_n = 30000;  // 0 means constant tau_e

  void validate() const {
    if (!(0.0 <= tau0 && tau0 <= tau_e && tau_e <= 1.0))
      throw ConfigError("ema: require 0 <= tau0 <= tau_e <= 1");
  }
  bool operator==(const EmaSchedule&) const = default;
};

/// Linear ramp from tau0 to tau_e over the first tau_n updates, then constant.
inline double tau_at(std::size_t step, const EmaSchedule& s) {
  if (s.tau_n == 0 || step >= s.tau_n) return s.tau_e;
  return s.tau0 + (s.tau_e - s.tau0) * static_cast<double>(step) / static_cast<double>(s.tau_n);
}

/**
 * Teacher transformer parameters tracked as an exponential moving average of
 * the student. The running average is held in double regardless of the
 * model precision; the teacher tensors are a rounded copy of it.
 */
template <class Real>
class EmaTeacher {
 public:
  EmaTeacher() = default;
  explicit EmaTeacher(const EncoderParams<Real>& student) { reset_to(student); }

  void reset_to(const EncoderParams<Real>& student) {
    params_ = student.clone(false);
    accum_.clear();
    for (const auto& [name, t] : student.parameters()) accum_.emplace_back(t.data().begin(), t.data().end());
  }

  const EncoderParams<Real>& params() const { return params_; }
  const std::vector<std::vector<double>>& accumulators() const { return accum_; }

  /// Replaces the running averages (checkpoint restore) and refreshes the teacher tensors.
  void load_accumulators(std::vector<std::vector<double>> accum) {
    auto named = params_.parameters();
    if (accum.size() != named.size()) throw StateError("ema: accumulator count mismatch");
    for (std::size_t i = 0; i < named.size(); ++i)
      if (accum[i].size() != named[i].second.numel())
        throw StateError("ema: accumulator size mismatch for " + named[i].first);
    accum_ = std::move(accum);
    refresh();
  }

  /// Delta <- tau * Delta + (1 - tau) * theta, element-wise.
  void update(const EncoderParams<Real>& student, double tau) {
    const auto s = student.parameters();
    const auto t = params_.parameters();
    if (s.size() != t.size()) throw StateError("ema_update: parameter sets differ in size");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i].first != t[i].first || s[i].second.shape() != t[i].second.shape())
        throw StateError("ema_update: parameter mismatch at " + s[i].first + " vs " + t[i].first);
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto theta = s[i].second.data();
      auto& acc = accum_[i];
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] = tau * acc[j] + (1.0 - tau) * static_cast<double>(theta[j]);
    }
    refresh();
  }

 private:
  void refresh() {
    auto named = params_.parameters();
    for (std::size_t i = 0; i < named.size(); ++i) {
      auto dst = named[i].second.mutable_data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<Real>(accum_[i][j]);
    }
  }

  EncoderParams<Real> params_;
  std::vector<std::vector<double>> accum_;
};

template <class Real>
void ema_update(EmaTeacher<Real>& teacher, const EncoderParams<Real>& student, double tau) {
  teacher.update(student, tau);
}

// ---------------------------------------------------------------- targets

/// InstanceFree: per feature over time. LayerFree: per position over features.
enum class TargetNorm { InstanceFree, LayerFree, None };

struct TargetConfig {
  std::size_t k = 1;
  TapSite site = TapSite::FfnOut;
  TargetNorm norm = TargetNorm::InstanceFree;
  /// Strict mode rejects zero-variance blocks instead of adding epsilon.
  bool strict = false;

  bool operator==(const TargetConfig&) const = default;
};

inline constexpr double kTargetNormEps = 1e-6;

template <class Real>
Tensor<Real> normalize_block(const Tensor<Real>& a, TargetNorm mode, bool strict = false) {
  if (a.rank() != 2) throw ConfigError("normalize_block: expected [T, H], got " + shape_str(a.shape()));
  const Real eps = strict ? Real(0) : static_cast<Real>(kTargetNormEps);
  switch (mode) {
    case TargetNorm::InstanceFree: return normalize(a, 0, eps);
    case TargetNorm::LayerFree: return normalize(a, 1, eps);
    case TargetNorm::None: return a;
  }
  return a;
}

template <class Real>
struct TargetBatch {
  std::vector<std::size_t> positions;
  Tensor<Real> targets;  // [|positions|, H], never tracked
};

/**
 * Average of the normalized site activations of the top K teacher blocks,
 * restricted to the masked positions. The averaging runs over full
 * sequences before the gather.
 */
template <class Real>
TargetBatch<Real> build_targets(const ActivationTaps<Real>& teacher_taps, const TargetConfig& cfg,
                                std::span<const std::size_t> masked) {
  const std::size_t layers = teacher_taps.blocks();
  if (cfg.k < 1 || cfg.k > layers)
    throw ConfigError("build_targets: K=" + std::to_string(cfg.k) + " outside [1, " + std::to_string(layers) + "]");
  NoGradScope<Real> no_grad;
  Tensor<Real> total;
  for (std::size_t l = layers - cfg.k; l < layers; ++l) {
    auto normalized = normalize_block(teacher_taps.site(cfg.site, l).detach(), cfg.norm, cfg.strict);
    total = total.defined() ? add(total, normalized) : normalized.detach();
  }
  auto averaged = scale(total, Real(1) / static_cast<Real>(cfg.k));
  TargetBatch<Real> out;
  out.positions.assign(masked.begin(), masked.end());
  out.targets = gather_rows(averaged, masked).detach();
  return out;
}

// ---------------------------------------------------------------- objective

enum class LossKind { SmoothL1, L2 };

struct LossConfig {
  LossKind kind = LossKind::SmoothL1;
  double beta = 1.0;

  void validate() const {
    if (kind == LossKind::SmoothL1 && !(beta > 0)) throw ConfigError("loss.beta must be positive for smooth_l1");
  }
  bool operator==(const LossConfig&) const = default;
};

template <class Real>
Tensor<Real> regression_loss(const Tensor<Real>& pred, const Tensor<Real>& target, const LossConfig& cfg) {
  if (pred.shape() != target.shape())
    throw StateError("regression_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  switch (cfg.kind) {
    case LossKind::SmoothL1: return smooth_l1_loss(pred, target, static_cast<Real>(cfg.beta));
    case LossKind::L2: return l2_loss(pred, target);
  }
  throw ConfigError("unknown loss kind");
}

template <class Real>
struct ProjectionHead {
  Tensor<Real> weight;  // [H, H]
  Tensor<Real> bias;    // [H]

  static ProjectionHead init(std::size_t hidden, Rng rng) {
    return {init_weight<Real>({hidden, hidden}, rng), Tensor<Real>::zeros({hidden}, true)};
  }

  NamedTensors<Real> parameters() const { return {{"weight", weight}, {"bias", bias}}; }
};

/// Masked rows of the student output through the single linear head.
template <class Real>
Tensor<Real> student_predict(const Tensor<Real>& student_final, std::span<const std::size_t> masked,
                             const ProjectionHead<Real>& head) {
  return linear(gather_rows(student_final, masked), head.weight, head.bias);
}

}  // namespace d2v
