#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2v/distill.hpp"
#include "d2v/masking.hpp"
#include "d2v/model.hpp"
#include "d2v/optim.hpp"
#include "d2v/run_config.hpp"

namespace d2v {

// ---------------------------------------------------------------- collapse

struct CollapseReport {
  double target_std = 0.0;
  double pred_std = 0.0;
  bool sufficient = false;  // at least two masked positions
  bool target_below = false;
  bool pred_below = false;
};

/// Standard deviation of each column over rows, averaged over columns.
template <class Real>
double mean_column_std(const Tensor<Real>& a) {
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  double total = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    double mu = 0, var = 0;
    for (std::size_t i = 0; i < rows; ++i) mu += a.at(i, j);
    mu /= static_cast<double>(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      const double d = a.at(i, j) - mu;
      var += d * d;
    }
    total += std::sqrt(var / static_cast<double>(rows));
  }
  return total / static_cast<double>(cols);
}

template <class Real>
CollapseReport collapse_report(const Tensor<Real>& targets, const Tensor<Real>& preds, double threshold) {
  CollapseReport r;
  if (!targets.defined() || targets.rank() != 2 || targets.dim(0) < 2) return r;
  r.sufficient = true;
  r.target_std = mean_column_std(targets);
  r.pred_std = preds.defined() && preds.shape() == targets.shape() ? mean_column_std(preds) : 0.0;
  r.target_below = r.target_std < threshold;
  r.pred_below = r.pred_std < threshold;
  return r;
}

/// Fires once the target std stays below threshold for `window` consecutive
/// sufficient steps; stays fired afterwards.
struct CollapseTracker {
  std::size_t run = 0;
  std::optional<std::size_t> fired_at;

  bool fired() const { return fired_at.has_value(); }

  void observe(const CollapseReport& r, std::size_t step, const CollapseConfig& cfg) {
    if (!r.sufficient) return;
    run = r.target_below ? run + 1 : 0;
    if (!fired_at && run >= cfg.window) fired_at = step;
  }
};

// ---------------------------------------------------------------- state

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0, lr = 0, tau = 0;
  double target_std = 0, pred_std = 0;
  double grad_norm = 0;
  double wall_ms = 0;
  std::size_t masked = 0;
  bool collapsed = false;
};

inline nlohmann::json to_json(const StepMetrics& m) {
  return {{"step", m.step},           {"loss", m.loss},         {"lr", m.lr},
          {"tau", m.tau},             {"target_std", m.target_std}, {"pred_std", m.pred_std},
          {"grad_norm", m.grad_norm}, {"masked", m.masked},     {"collapsed", m.collapsed},
          {"wall_ms", m.wall_ms}};
}

/// Every metric except wall time, for reproducibility comparisons.
inline bool same_metrics(const StepMetrics& a, const StepMetrics& b) {
  return a.step == b.step && a.loss == b.loss && a.lr == b.lr && a.tau == b.tau && a.target_std == b.target_std &&
         a.pred_std == b.pred_std && a.grad_norm == b.grad_norm && a.masked == b.masked && a.collapsed == b.collapsed;
}

template <class Real>
struct TrainState {
  RunConfig cfg;
  Model<Real> model;
  EmaTeacher<Real> teacher;
  AdamMoments adam;
  CollapseTracker collapse;
  std::size_t step = 0;
  Rng root;

  static TrainState create(const RunConfig& cfg) {
    cfg.validate();
    TrainState s;
    s.cfg = cfg;
    s.root = Rng(cfg.seed);
    s.model = Model<Real>::init(cfg.encoder, cfg.frontend, s.root.split("init"));
    s.teacher.reset_to(s.model.encoder);
    return s;
  }

  /// Steps since the last schedule restart (teacher reset hook).
  std::size_t phase_step() const {
    return cfg.reset_teacher_at > 0 && step >= cfg.reset_teacher_at ? step - cfg.reset_teacher_at : step;
  }
  std::size_t phase_total() const {
    return cfg.reset_teacher_at > 0 && step >= cfg.reset_teacher_at && cfg.total_steps > cfg.reset_teacher_at
               ? cfg.total_steps - cfg.reset_teacher_at
               : cfg.total_steps;
  }
};

inline MaskContext mask_context(const RunConfig& cfg, std::size_t length) {
  MaskContext ctx;
  ctx.length = length;
  if (cfg.modality == Modality::Image) ctx.grid_h = ctx.grid_w = cfg.frontend.image.grid();
  if (cfg.modality == Modality::Text) {
    ctx.random_lo = cfg.frontend.text.vocab.first_regular();
    ctx.random_hi = static_cast<int>(cfg.frontend.text.vocab.size());
  }
  return ctx;
}

/**
 * Teacher targets for every position of one sequence. The teacher sees only
 * the unmasked embedding; masked rows are gathered afterwards.
 */
template <class Real>
Tensor<Real> teacher_sequence_targets(const TrainState<Real>& s, const Tensor<Real>& embedded,
                                      const Tensor<Real>& positions) {
  NoGradScope<Real> off;
  auto res = encode(s.teacher.params(), s.model.encoder_cfg, embedded, positions, true);
  std::vector<std::size_t> rows(embedded.dim(0));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return build_targets(res.taps, s.cfg.target, rows).targets;
}

/// A sample that drew a non-empty plan, with its (fixed) teacher targets.
template <class Real>
struct MaskedSample {
  std::size_t index = 0;
  MaskPlan plan;
  Tensor<Real> targets;  // [masked, H], no gradient
};

/// Mask plans for `step` and teacher targets on the unmasked embeddings.
template <class Real>
std::vector<MaskedSample<Real>> teacher_pass(const TrainState<Real>& s, const std::vector<Tensor<Real>>& embedded,
                                             std::size_t step) {
  std::vector<MaskedSample<Real>> out;
  const Rng mask_root = s.root.split("mask").split(step);
  for (std::size_t i = 0; i < embedded.size(); ++i) {
    const std::size_t length = embedded[i].dim(0);
    Rng mask_rng = mask_root.split(i);
    MaskPlan plan = make_plan(s.cfg.masking, mask_context(s.cfg, length), mask_rng);
    if (plan.empty()) continue;
    auto full = teacher_sequence_targets(s, embedded[i], s.model.position_rows(length));
    NoGradScope<Real> off;
    auto targets = gather_rows(full, plan.masked);
    out.push_back({i, std::move(plan), std::move(targets)});
  }
  return out;
}

template <class Real>
struct StudentPass {
  Tensor<Real> loss;
  Tensor<Real> predictions, targets;  // undefined when nothing was masked
  std::size_t masked = 0;
};

/// Student forward on the masked inputs and the regression loss against fixed targets.
template <class Real>
StudentPass<Real> student_pass(const TrainState<Real>& s, const std::vector<Sample>& batch,
                               const std::vector<Tensor<Real>>& embedded, const std::vector<MaskedSample<Real>>& work,
                               std::size_t step) {
  const RunConfig& cfg = s.cfg;
  StudentPass<Real> out;
  if (work.empty()) {
    out.loss = Tensor<Real>::scalar(Real(0));
    return out;
  }
  const Rng drop_root = s.root.split("dropout").split(step);
  std::vector<Tensor<Real>> preds, targets;
  for (const auto& w : work) {
    Tensor<Real> student_in = embedded[w.index];
    if (cfg.modality == Modality::Text) {
      Sample corrupted = batch[w.index];
      corrupted.tokens = apply_random_tokens(batch[w.index].tokens, w.plan);
      if (corrupted.tokens != batch[w.index].tokens) student_in = s.model.frontend->embed(corrupted);
    }
    student_in = substitute_mask_token(student_in, w.plan, s.model.mask_embedding);
    Rng drop_rng = drop_root.split(w.index);
    auto res = encode(s.model.encoder, s.model.encoder_cfg, student_in, s.model.position_rows(student_in.dim(0)), false,
                      {true, &drop_rng});
    preds.push_back(student_predict(res.final, w.plan.masked, s.model.head));
    targets.push_back(w.targets);
    out.masked += w.plan.count();
  }
  out.predictions = preds.size() == 1 ? preds.front() : concat(preds, 0);
  {
    NoGradScope<Real> off;
    out.targets = targets.size() == 1 ? targets.front() : concat(targets, 0);
  }
  out.loss = regression_loss(out.predictions, out.targets, cfg.loss);
  return out;
}

/**
 * One update: frontend, teacher targets on the clean input, student on the
 * masked input, regression loss over masked positions, Adam on the student
 * (including the shared frontend), then the EMA update with the fresh
 * student weights.
 */
template <class Real>
StepMetrics train_step(TrainState<Real>& s, const std::vector<Sample>& batch) {
  const auto start = std::chrono::steady_clock::now();
  const RunConfig& cfg = s.cfg;
  if (batch.empty()) throw InputError("train_step: empty batch");
  if (cfg.reset_teacher_at > 0 && s.step == cfg.reset_teacher_at) s.teacher.reset_to(s.model.encoder);

  StepMetrics m;
  m.step = s.step;
  m.lr = lr_at(s.phase_step(), cfg.lr, s.phase_total());
  m.tau = tau_at(s.phase_step(), cfg.ema);

  auto params = s.model.parameters();
  for (auto& [name, p] : params) p.zero_grad();
  Graph<Real> graph;
  CollapseReport report;
  try {
    GraphScope<Real> scope(graph);
    std::vector<Tensor<Real>> embedded;
    embedded.reserve(batch.size());
    for (const auto& sample : batch) embedded.push_back(s.model.frontend->embed(sample));
    const auto work = teacher_pass(s, embedded, s.step);
    auto pass = student_pass(s, batch, embedded, work, s.step);
    if (pass.predictions.defined()) report = collapse_report(pass.targets, pass.predictions, cfg.collapse.threshold);
    m.masked = pass.masked;
    m.loss = static_cast<double>(pass.loss.item());
    graph.backward(pass.loss);
    m.grad_norm = adam_step(params, s.adam, m.lr, cfg.optim);
  } catch (const NumericError& e) {
    throw NumericError("step " + std::to_string(s.step) + ": " + e.what());
  }

  s.teacher.update(s.model.encoder, m.tau);
  s.collapse.observe(report, s.step, cfg.collapse);
  m.target_std = report.target_std;
  m.pred_std = report.pred_std;
  m.collapsed = s.collapse.fired();
  ++s.step;
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return m;
}

}  // namespace d2v
