#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "d2v/dataset.hpp"
#include "d2v/probe.hpp"
#include "d2v/trainer.hpp"

namespace d2v {

/// Pretraining batches and labelled probe splits, either generated or read from disk.
class DataSource {
 public:
  explicit DataSource(const RunConfig& cfg) : cfg_(cfg) {
    if (cfg.data.source == "toy") {
      task_ = std::make_unique<ToyTask>(cfg.modality, cfg.data.toy, cfg.frontend);
    } else {
      corpus_ = load_corpus(cfg.data.train, cfg.frontend);
    }
  }

  /// Batch for `step`; depends only on the seed and step, never on the model.
  std::vector<Sample> batch(std::size_t step) const {
    const Rng rng = Rng(cfg_.seed).split("data").split(step);
    if (task_) return task_->batch(cfg_.batch_size, rng);
    std::vector<Sample> out;
    Rng pick = rng;
    for (std::size_t i = 0; i < cfg_.batch_size; ++i) out.push_back(corpus_[pick.below(corpus_.size())]);
    return out;
  }

  struct Split {
    std::vector<Sample> train, test;
  };

  /// Probe sets are tied to the seed so random-init and pretrained models see the same data.
  Split probe_split() const {
    const Rng rng = Rng(cfg_.seed).split("probe");
    Split s;
    if (task_) {
      s.train = task_->labelled_set(cfg_.probe.train_samples, rng.split("train"));
      s.test = task_->labelled_set(cfg_.probe.test_samples, rng.split("test"));
      return s;
    }
    if (cfg_.data.probe.empty() || cfg_.data.probe_labels.empty())
      throw ConfigError("probe: data.probe and data.probe_labels are required when data.source = files");
    auto all = load_labelled(cfg_.data.probe, cfg_.data.probe_labels, cfg_.frontend);
    Rng shuffle = rng.split("shuffle");
    for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[shuffle.below(i)]);
    const auto n_train = static_cast<std::size_t>(cfg_.probe.train_fraction * static_cast<double>(all.size()));
    if (n_train == 0 || n_train == all.size()) throw InputError("probe: too few labelled samples to split");
    s.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
    return s;
  }

 private:
  RunConfig cfg_;
  std::unique_ptr<ToyTask> task_;
  std::vector<Sample> corpus_;
};

template <class Real>
FeatureRows representations(const Model<Real>& model, const std::vector<Sample>& samples, std::vector<int>& labels) {
  FeatureRows rows;
  labels.clear();
  for (const auto& s : samples) {
    const auto r = extract_representation(model, s);
    rows.emplace_back(r.data().begin(), r.data().end());
    labels.push_back(s.label);
  }
  return rows;
}

template <class Real>
ProbeResult probe_model(const Model<Real>& model, const RunConfig& cfg, const DataSource& data,
                        const std::string& fingerprint) {
  const auto split = data.probe_split();
  std::vector<int> ytr, yte;
  const auto xtr = representations(model, split.train, ytr);
  const auto xte = representations(model, split.test, yte);
  auto r = linear_probe(xtr, ytr, xte, yte, {cfg.probe.iterations, cfg.probe.learning_rate, cfg.probe.l2});
  r.seed = cfg.seed;
  r.fingerprint = fingerprint;
  return r;
}

using MetricsSink = std::function<void(const StepMetrics&)>;

/// Runs train_step until cfg.total_steps.
template <class Real>
void pretrain(TrainState<Real>& s, const DataSource& data, const MetricsSink& sink = {}) {
  while (s.step < s.cfg.total_steps) {
    const auto m = train_step(s, data.batch(s.step));
    if (sink) sink(m);
  }
}

struct RunOutcome {
  ProbeResult initial;  // random-init probe (same seed, same probe data)
  ProbeResult final;
  bool collapsed = false;
  double last_loss = 0;
};

/// Random-init probe, full pretraining, final probe.
template <class Real>
RunOutcome pretrain_and_probe(const RunConfig& cfg, const std::string& fingerprint, bool probe_initial = true) {
  DataSource data(cfg);
  auto s = TrainState<Real>::create(cfg);
  RunOutcome out;
  if (probe_initial) out.initial = probe_model(s.model, cfg, data, fingerprint);
  pretrain(s, data, [&](const StepMetrics& m) { out.last_loss = m.loss; });
  out.collapsed = s.collapse.fired();
  out.final = probe_model(s.model, cfg, data, fingerprint);
  return out;
}

inline RunOutcome pretrain_and_probe(const RunConfig& cfg, const std::string& fingerprint, bool probe_initial = true) {
  return cfg.precision == Precision::Wide ? pretrain_and_probe<double>(cfg, fingerprint, probe_initial)
                                          : pretrain_and_probe<float>(cfg, fingerprint, probe_initial);
}

}  // namespace d2v
