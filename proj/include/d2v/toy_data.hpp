#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "d2v/errors.hpp"
#include "d2v/frontends.hpp"
#include "d2v/rng.hpp"

namespace d2v {

/**
 * Synthetic classification tasks where each class is its own Markov chain:
 * a symbol repeats its neighbour with a class-specific probability and is
 * otherwise drawn uniformly. Symbol frequencies are uniform for every class,
 * so only context reveals the label.
 */
struct ToyTaskConfig {
  std::size_t classes = 3;
  std::size_t symbols = 8;
  std::size_t length = 32;              // symbols per text/speech sample
  double follow = 0.8;                  // persistence of the last class
  double noise = 0.5;                   // additive noise for speech and images
  std::size_t samples_per_symbol = 640; // speech

  void validate() const {
    if (classes < 2) throw ConfigError("data.classes must be >= 2");
    if (symbols < 3) throw ConfigError("data.symbols must be >= 3");
    if (length < 2) throw ConfigError("data.length must be >= 2");
    if (!(follow > 0.0 && follow <= 1.0)) throw ConfigError("data.follow must lie in (0, 1]");
    if (noise < 0) throw ConfigError("data.noise must be >= 0");
    if (samples_per_symbol == 0) throw ConfigError("data.samples_per_symbol must be positive");
  }
  bool operator==(const ToyTaskConfig&) const = default;
};

/// Repeat probability of class `label`: evenly spaced over [0, follow].
inline double toy_persistence(std::size_t label, const ToyTaskConfig& cfg) {
  return cfg.follow * static_cast<double>(label) / static_cast<double>(cfg.classes - 1);
}

inline std::vector<int> toy_symbols(std::size_t label, const ToyTaskConfig& cfg, Rng& rng) {
  const double keep = toy_persistence(label, cfg);
  std::vector<int> s(cfg.length);
  s[0] = static_cast<int>(rng.below(cfg.symbols));
  for (std::size_t t = 1; t < cfg.length; ++t)
    s[t] = rng.bernoulli(keep) ? s[t - 1] : static_cast<int>(rng.below(cfg.symbols));
  return s;
}

/// Raster-ordered g x g grid; a cell copies its left or upper neighbour
/// (chosen at random) with the class persistence, giving blobs whose size
/// depends on the label.
inline std::vector<int> toy_symbol_grid(std::size_t label, std::size_t g, const ToyTaskConfig& cfg, Rng& rng) {
  const double keep = toy_persistence(label, cfg);
  std::vector<int> s(g * g);
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t c = 0; c < g; ++c) {
      const bool up = rng.bernoulli(0.5);
      const bool has_parent = up ? r > 0 : c > 0;
      const bool copy = rng.bernoulli(keep);
      if (has_parent && copy)
        s[r * g + c] = up ? s[(r - 1) * g + c] : s[r * g + c - 1];
      else
        s[r * g + c] = static_cast<int>(rng.below(cfg.symbols));
    }
  return s;
}

inline Vocabulary toy_vocabulary(std::size_t symbols) {
  std::vector<std::string> tokens{Vocabulary::kPad, Vocabulary::kMask};
  for (std::size_t i = 0; i < symbols; ++i) tokens.push_back("s" + std::to_string(i));
  return Vocabulary(std::move(tokens));
}

/// Fixed per-symbol pixel prototypes, identical for every seed.
inline std::vector<std::vector<float>> toy_prototypes(const ImageSpec& spec, std::size_t symbols) {
  Rng rng = Rng(0x70797079).split("prototypes");
  std::vector<std::vector<float>> out(symbols, std::vector<float>(spec.patch_dim()));
  for (auto& p : out)
    for (auto& v : p) v = static_cast<float>(rng.normal());
  return out;
}

/// Each symbol occupies its own frequency band; a segment is a sum of a few
/// sinusoids with random frequencies inside the band and random phases.
inline std::vector<float> render_speech(const std::vector<int>& symbols, const ToyTaskConfig& cfg,
                                        const AudioSpec& audio, Rng& rng) {
  const double nyquist = 0.5 * static_cast<double>(audio.sample_rate);
  const double band = 0.8 * nyquist / static_cast<double>(cfg.symbols);
  std::vector<float> wave;
  wave.reserve(symbols.size() * cfg.samples_per_symbol);
  for (int sym : symbols) {
    const double lo = 0.1 * nyquist + band * sym;
    std::array<double, 4> freq{}, phase{};
    for (std::size_t k = 0; k < freq.size(); ++k) {
      freq[k] = rng.uniform(lo, lo + 0.7 * band);
      phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    for (std::size_t n = 0; n < cfg.samples_per_symbol; ++n) {
      const double t = static_cast<double>(wave.size()) / static_cast<double>(audio.sample_rate);
      double v = 0;
      for (std::size_t k = 0; k < freq.size(); ++k) v += std::sin(2.0 * std::numbers::pi * freq[k] * t + phase[k]);
      wave.push_back(static_cast<float>(0.5 * v + cfg.noise * rng.normal()));
    }
  }
  return normalize_waveform(std::span<const float>(wave));
}

inline std::vector<float> render_image(const std::vector<int>& grid, const ToyTaskConfig& cfg, const ImageSpec& spec,
                                       const std::vector<std::vector<float>>& prototypes, Rng& rng) {
  std::vector<float> patches;
  patches.reserve(grid.size() * spec.patch_dim());
  for (int sym : grid)
    for (float v : prototypes.at(static_cast<std::size_t>(sym)))
      patches.push_back(static_cast<float>(v + cfg.noise * rng.normal()));
  return assemble_patches(patches, spec);
}

/// Generates labelled toy samples for one modality.
class ToyTask {
 public:
  ToyTask(Modality modality, ToyTaskConfig cfg, FrontendSpec frontend)
      : modality_(modality), cfg_(cfg), frontend_(std::move(frontend)) {
    cfg_.validate();
    if (modality_ == Modality::Image) prototypes_ = toy_prototypes(frontend_.image, cfg_.symbols);
    if (modality_ == Modality::Text && frontend_.text.vocab.size() < cfg_.symbols + 2)
      throw ConfigError("toy text task needs a vocabulary with at least data.symbols regular tokens");
  }

  Sample sample(std::size_t label, Rng rng) const {
    Sample s;
    s.label = static_cast<int>(label);
    switch (modality_) {
      case Modality::Text: {
        const int offset = frontend_.text.vocab.first_regular();
        for (int sym : toy_symbols(label, cfg_, rng)) s.tokens.push_back(offset + sym);
        break;
      }
      case Modality::Speech: s.values = render_speech(toy_symbols(label, cfg_, rng), cfg_, frontend_.audio, rng); break;
      case Modality::Image: {
        const auto grid = toy_symbol_grid(label, frontend_.image.grid(), cfg_, rng);
        s.values = render_image(grid, cfg_, frontend_.image, prototypes_, rng);
        break;
      }
    }
    return s;
  }

  /// Uniformly drawn label per sample.
  std::vector<Sample> batch(std::size_t size, Rng rng) const {
    std::vector<Sample> out;
    out.reserve(size);
    for (std::size_t i = 0; i < size; ++i) {
      Rng r = rng.split(i);
      const std::size_t label = r.below(cfg_.classes);
      out.push_back(sample(label, r.split("sample")));
    }
    return out;
  }

  /// Class-balanced labelled set (label = index mod classes).
  std::vector<Sample> labelled_set(std::size_t size, Rng rng) const {
    std::vector<Sample> out;
    out.reserve(size);
    for (std::size_t i = 0; i < size; ++i) out.push_back(sample(i % cfg_.classes, rng.split(i)));
    return out;
  }

  const ToyTaskConfig& config() const { return cfg_; }

 private:
  Modality modality_;
  ToyTaskConfig cfg_;
  FrontendSpec frontend_;
  std::vector<std::vector<float>> prototypes_;
};

}  // namespace d2v
