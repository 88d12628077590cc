#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "d2v/distill.hpp"
#include "d2v/encoder.hpp"
#include "d2v/errors.hpp"
#include "d2v/frontends.hpp"
#include "d2v/masking.hpp"
#include "d2v/optim.hpp"
#include "d2v/toy_data.hpp"

namespace d2v {

enum class Precision { Standard, Wide };

struct CollapseConfig {
  double threshold = 0.01;
  std::size_t window = 50;
  bool operator==(const CollapseConfig&) const = default;
};

struct DataConfig {
  std::string source = "toy";  // toy | files
  std::string train;           // pretraining corpus (files)
  std::string probe;           // labelled probe corpus (files)
  std::string probe_labels;    // one integer label per probe sample
  ToyTaskConfig toy;
  bool operator==(const DataConfig&) const = default;
};

struct ProbeConfig {
  std::size_t train_samples = 300;  // toy only
  std::size_t test_samples = 300;   // toy only
  double train_fraction = 0.5;      // files only
  std::size_t iterations = 400;
  double learning_rate = 0.5;
  double l2 = 1e-4;
  bool operator==(const ProbeConfig&) const = default;
};

/// Everything one experiment needs; produced by parse_config.
struct RunConfig {
  Modality modality = Modality::Speech;
  Precision precision = Precision::Standard;
  std::size_t total_steps = 1000;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string out_dir = "runs";

  EncoderConfig encoder;
  FrontendSpec frontend;
  std::string vocab_path;  // empty: generated toy vocabulary
  MaskingSpec masking;
  EmaSchedule ema;
  std::size_t reset_teacher_at = 0;  // 0 disables
  TargetConfig target;
  LossConfig loss;
  LrSchedule lr;
  AdamConfig optim;
  CollapseConfig collapse;
  DataConfig data;
  ProbeConfig probe;

  /// Sequence length of a toy sample (files: the longest the model accepts).
  std::size_t toy_sequence_length() const {
    switch (modality) {
      case Modality::Image: return frontend.image.sequence_length();
      case Modality::Speech: return frontend.audio.output_length(data.toy.length * data.toy.samples_per_symbol);
      case Modality::Text: return data.toy.length;
    }
    return 0;
  }

  void validate() const {
    encoder.validate();
    if (frontend.modality != modality) throw ConfigError("run.modality disagrees with the frontend modality");
    switch (modality) {
      case Modality::Image:
        frontend.image.validate();
        if (masking.kind != MaskKind::Block) throw ConfigError("masking.kind must be block for image runs");
        break;
      case Modality::Speech:
        frontend.audio.validate();
        if (masking.kind != MaskKind::Span) throw ConfigError("masking.kind must be span for speech runs");
        break;
      case Modality::Text:
        if (masking.kind != MaskKind::Token && masking.kind != MaskKind::SpanToken)
          throw ConfigError("masking.kind must be token or span_token for text runs");
        if (frontend.text.vocab.size() == 0) throw ConfigError("frontend.vocab: no vocabulary loaded");
        break;
    }
    if (target.k < 1 || target.k > encoder.layers)
      throw ConfigError("target.k=" + std::to_string(target.k) + " violates 1 <= K <= encoder.layers=" +
                        std::to_string(encoder.layers));
    if (masking.kind == MaskKind::Block) {
      if (!(masking.ratio > 0 && masking.ratio < 1)) throw ConfigError("masking.ratio must lie in (0, 1)");
      if (masking.min_block == 0 || masking.min_block > frontend.image.sequence_length())
        throw ConfigError("masking.min_block must lie in [1, grid cells]");
      if (!(masking.min_aspect > 0 && masking.min_aspect <= 1)) throw ConfigError("masking.min_aspect must lie in (0, 1]");
    }
    if (masking.kind == MaskKind::Span || masking.kind == MaskKind::SpanToken) {
      if (!(masking.p >= 0 && masking.p <= 1)) throw ConfigError("masking.p must lie in [0, 1]");
      if (masking.span == 0) throw ConfigError("masking.span must be positive");
    }
    if (masking.kind == MaskKind::Token) {
      if (!(masking.rate >= 0 && masking.rate <= 1)) throw ConfigError("masking.rate must lie in [0, 1]");
      double total = 0;
      for (double a : masking.action_probs) {
        if (a < 0) throw ConfigError("masking action probabilities must be >= 0");
        total += a;
      }
      if (std::abs(total - 1.0) > 1e-9) throw ConfigError("masking.replace_prob + keep_prob + random_prob must equal 1");
    }
    ema.validate();
    loss.validate();
    lr.validate();
    optim.validate();
    if (collapse.threshold < 0 || collapse.window == 0) throw ConfigError("collapse: threshold >= 0 and window >= 1");
    if (batch_size == 0) throw ConfigError("run.batch_size must be positive");
    if (seeds.empty()) throw ConfigError("run.seeds must list at least one seed");
    if (data.source != "toy" && data.source != "files") throw ConfigError("data.source must be toy or files");
    if (data.source == "toy") {
      data.toy.validate();
      const std::size_t t = toy_sequence_length();
      if (t == 0) throw ConfigError("data: toy samples are shorter than the speech receptive field");
      if (t > encoder.max_positions)
        throw ConfigError("data: toy sequence length " + std::to_string(t) + " exceeds encoder.max_positions");
      if ((masking.kind == MaskKind::Span || masking.kind == MaskKind::SpanToken) && t < masking.span)
        throw ConfigError("data: toy sequence length shorter than masking.span");
    } else if (data.train.empty()) {
      throw ConfigError("data.train is required when data.source = files");
    }
    if (!(probe.train_fraction > 0 && probe.train_fraction < 1)) throw ConfigError("probe.train_fraction must lie in (0, 1)");
    if (probe.iterations == 0 || !(probe.learning_rate > 0)) throw ConfigError("probe: iterations and learning_rate must be positive");
  }
};

}  // namespace d2v
