#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "d2v/encoder.hpp"
#include "d2v/errors.hpp"
#include "d2v/ops.hpp"
#include "d2v/rng.hpp"
#include "d2v/tensor.hpp"

namespace d2v {

enum class Modality { Image, Speech, Text };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::Image: return "image";
    case Modality::Speech: return "speech";
    case Modality::Text: return "text";
  }
  return "?";
}

/// One raw training example. Images and audio use `values`, text uses `tokens`.
struct Sample {
  std::vector<float> values;
  std::vector<int> tokens;
  int label = -1;
};

// ---------------------------------------------------------------- specs

struct ImageSpec {
  std::size_t side = 32;
  std::size_t patch = 4;
  std::size_t channels = 3;

  std::size_t grid() const { return side / patch; }
  std::size_t sequence_length() const { return grid() * grid(); }
  std::size_t patch_dim() const { return channels * patch * patch; }

  void validate() const {
    if (side == 0 || patch == 0 || channels == 0) throw ConfigError("frontend: image side/patch/channels must be positive");
    if (side % patch != 0) throw ConfigError("frontend.image_side must be divisible by frontend.patch");
  }
  bool operator==(const ImageSpec&) const = default;
};

struct AudioSpec {
  std::size_t sample_rate = 16000;
  std::size_t channels = 64;
  std::vector<std::size_t> strides{5, 2, 2, 2, 2, 2, 2};
  std::vector<std::size_t> kernels{10, 3, 3, 3, 3, 2, 2};

  std::size_t total_stride() const {
    return std::accumulate(strides.begin(), strides.end(), std::size_t{1}, std::multiplies<>());
  }

  /// Input samples seen by one output frame.
  std::size_t receptive_field() const {
    std::size_t field = 1, jump = 1;
    for (std::size_t l = 0; l < kernels.size(); ++l) {
      field += (kernels[l] - 1) * jump;
      jump *= strides[l];
    }
    return field;
  }

  std::size_t output_length(std::size_t samples) const {
    for (std::size_t l = 0; l < kernels.size(); ++l) samples = conv_out_length(samples, kernels[l], strides[l]);
    return samples;
  }

  void validate() const {
    if (strides.empty() || strides.size() != kernels.size())
      throw ConfigError("frontend: conv strides and kernels must be non-empty and of equal length");
    for (std::size_t l = 0; l < strides.size(); ++l)
      if (strides[l] == 0 || kernels[l] == 0) throw ConfigError("frontend: conv strides and kernels must be positive");
    if (channels == 0) throw ConfigError("frontend.conv_channels must be positive");
  }
  bool operator==(const AudioSpec&) const = default;
};

/**
 * Token table loaded from a vocab file, one token per line, id = line number.
 * Lines 0 and 1 are the reserved <pad> and <mask> tokens; an optional <unk>
 * may follow at line 2. Every later id is a regular token.
 */
class Vocabulary {
 public:
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kMask = "<mask>";
  static constexpr const char* kUnk = "<unk>";

  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 3 || tokens_[0] != kPad || tokens_[1] != kMask)
      throw ConfigError("vocab: first two entries must be <pad> and <mask> followed by at least one token");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
        throw ConfigError("vocab: duplicate token '" + tokens_[i] + "'");
    }
    first_regular_ = tokens_[2] == kUnk ? 3 : 2;
    if (first_regular_ >= static_cast<int>(tokens_.size())) throw ConfigError("vocab: no regular tokens");
  }

  static Vocabulary from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("vocab: cannot open " + path);
    std::vector<std::string> tokens;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return Vocabulary(std::move(tokens));
  }

  int pad_id() const { return 0; }
  int mask_id() const { return 1; }
  int unk_id() const { return first_regular_ == 3 ? 2 : -1; }
  int first_regular() const { return first_regular_; }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int find(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? -1 : it->second;
  }

  /// Whitespace split; unknown words fall back to per-character tokens, then <unk>.
  std::vector<int> tokenize(const std::string& line) const {
    std::vector<int> ids;
    std::istringstream words(line);
    for (std::string word; words >> word;) {
      if (int id = find(word); id >= 0) {
        ids.push_back(id);
        continue;
      }
      for (char c : word) {
        int id = find(std::string(1, c));
        if (id < 0) id = unk_id();
        if (id < 0) throw InputError("vocab: no token for character '" + std::string(1, c) + "' in '" + word + "'");
        ids.push_back(id);
      }
    }
    return ids;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int first_regular_ = 2;
};

struct TextSpec {
  Vocabulary vocab;
  std::size_t max_len = 512;
  bool operator==(const TextSpec&) const = default;
};

// ---------------------------------------------------------------- pure helpers

/// Rows of the result are flattened (channel, row, col) patches in raster order.
inline std::vector<float> extract_patches(std::span<const float> image, const ImageSpec& spec) {
  spec.validate();
  const std::size_t s = spec.side, p = spec.patch, g = spec.grid(), c = spec.channels;
  if (image.size() != c * s * s)
    throw ConfigError("patchify: image has " + std::to_string(image.size()) + " values, expected " +
                      std::to_string(c * s * s));
  std::vector<float> out(spec.sequence_length() * spec.patch_dim());
  std::size_t k = 0;
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) out[k++] = image[(ch * s + gy * p + y) * s + gx * p + x];
  return out;
}

inline std::vector<float> assemble_patches(std::span<const float> patches, const ImageSpec& spec) {
  spec.validate();
  const std::size_t s = spec.side, p = spec.patch, g = spec.grid(), c = spec.channels;
  if (patches.size() != spec.sequence_length() * spec.patch_dim())
    throw ConfigError("assemble_patches: wrong patch buffer size");
  std::vector<float> image(c * s * s);
  std::size_t k = 0;
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) image[(ch * s + gy * p + y) * s + gx * p + x] = patches[k++];
  return image;
}

/// Zero mean, unit (population) variance.
template <class Real>
Tensor<Real> normalize_waveform(const Tensor<Real>& waveform) {
  const auto v = waveform.data();
  if (v.size() < 2) throw InputError("normalize_waveform: need at least two samples");
  double mu = 0;
  for (Real x : v) mu += x;
  mu /= static_cast<double>(v.size());
  double var = 0;
  for (Real x : v) var += (x - mu) * (x - mu);
  var /= static_cast<double>(v.size());
  if (!(var > 0)) throw InputError("normalize_waveform: constant input has zero variance");
  const double inv = 1.0 / std::sqrt(var);
  std::vector<Real> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<Real>((v[i] - mu) * inv);
  return Tensor<Real>(waveform.shape(), std::move(out));
}

inline std::vector<float> normalize_waveform(std::span<const float> waveform) {
  auto t = normalize_waveform(Tensor<double>({waveform.size()}, std::vector<double>(waveform.begin(), waveform.end())));
  return std::vector<float>(t.data().begin(), t.data().end());
}

// ---------------------------------------------------------------- frontends

/// Modality encoder; its parameters are shared by student and teacher.
template <class Real>
class Frontend {
 public:
  virtual ~Frontend() = default;
  virtual Modality modality() const = 0;
  /// Maps one raw sample to a [T, H] embedding sequence.
  virtual Tensor<Real> embed(const Sample& sample) const = 0;
  virtual std::size_t sequence_length(const Sample& sample) const = 0;
  virtual NamedTensors<Real> parameters() const = 0;
};

template <class Real>
Tensor<Real> patchify(const Tensor<Real>& image, const ImageSpec& spec, const Tensor<Real>& proj_w,
                      const Tensor<Real>& proj_b) {
  if (image.shape() != Shape{spec.channels, spec.side, spec.side})
    throw ConfigError("patchify: image " + shape_str(image.shape()) + " does not match spec [" +
                      std::to_string(spec.channels) + "," + std::to_string(spec.side) + "," +
                      std::to_string(spec.side) + "]");
  std::vector<float> raw(image.data().begin(), image.data().end());
  const auto rows = extract_patches(raw, spec);
  Tensor<Real> patches({spec.sequence_length(), spec.patch_dim()}, std::vector<Real>(rows.begin(), rows.end()));
  return linear(patches, proj_w, proj_b);
}

template <class Real>
class ImageFrontend final : public Frontend<Real> {
 public:
  ImageFrontend(ImageSpec spec, std::size_t hidden, Rng rng) : spec_(spec) {
    spec_.validate();
    proj_w_ = init_weight<Real>({spec_.patch_dim(), hidden}, rng);
    proj_b_ = Tensor<Real>::zeros({hidden}, true);
  }

  Modality modality() const override { return Modality::Image; }

  Tensor<Real> embed(const Sample& sample) const override {
    Tensor<Real> image({spec_.channels, spec_.side, spec_.side}, to_real(sample.values));
    return patchify(image, spec_, proj_w_, proj_b_);
  }

  std::size_t sequence_length(const Sample&) const override { return spec_.sequence_length(); }

  NamedTensors<Real> parameters() const override { return {{"patch_w", proj_w_}, {"patch_b", proj_b_}}; }

  const ImageSpec& spec() const { return spec_; }

 private:
  std::vector<Real> to_real(const std::vector<float>& v) const {
    if (v.size() != spec_.channels * spec_.side * spec_.side)
      throw ConfigError("patchify: image has " + std::to_string(v.size()) + " values, expected " +
                        std::to_string(spec_.channels * spec_.side * spec_.side));
    return std::vector<Real>(v.begin(), v.end());
  }

  ImageSpec spec_;
  Tensor<Real> proj_w_, proj_b_;
};

/**
 * Strided convolution stack over a normalized waveform (valid convolutions,
 * GELU after every layer, single-group norm after the first), followed by a
 * layer norm and a linear projection to the model width.
 */
template <class Real>
class SpeechFrontend final : public Frontend<Real> {
 public:
  SpeechFrontend(AudioSpec spec, std::size_t hidden, Rng rng) : spec_(std::move(spec)) {
    spec_.validate();
    const std::size_t c = spec_.channels;
    std::size_t in = 1;
    for (std::size_t l = 0; l < spec_.kernels.size(); ++l) {
      const double std = std::sqrt(2.0 / static_cast<double>(spec_.kernels[l] * in));
      Rng r = rng.split(l);
      std::vector<Real> w(spec_.kernels[l] * in * c);
      for (auto& x : w) x = static_cast<Real>(r.normal() * std);
      conv_w_.emplace_back(Shape{spec_.kernels[l], in, c}, std::move(w), true);
      conv_b_.push_back(Tensor<Real>::zeros({c}, true));
      in = c;
    }
    norm_gain_ = Tensor<Real>::full({c}, Real(1), true);
    norm_shift_ = Tensor<Real>::zeros({c}, true);
    ln_gain_ = Tensor<Real>::full({c}, Real(1), true);
    ln_shift_ = Tensor<Real>::zeros({c}, true);
    Rng r = rng.split("proj");
    proj_w_ = init_weight<Real>({c, hidden}, r);
    proj_b_ = Tensor<Real>::zeros({hidden}, true);
  }

  Modality modality() const override { return Modality::Speech; }

  Tensor<Real> embed(const Sample& sample) const override {
    return encode_waveform(Tensor<Real>({sample.values.size()}, std::vector<Real>(sample.values.begin(), sample.values.end())));
  }

  /// waveform[N] -> [T, H]; expects an already normalized waveform.
  Tensor<Real> encode_waveform(const Tensor<Real>& waveform) const {
    const std::size_t n = waveform.numel();
    if (n < spec_.receptive_field())
      throw InputError("speech_encode: " + std::to_string(n) + " samples is below the receptive field of " +
                       std::to_string(spec_.receptive_field()));
    auto x = reshape(waveform, Shape{n, 1});
    for (std::size_t l = 0; l < conv_w_.size(); ++l) {
      x = conv1d(x, conv_w_[l], conv_b_[l], spec_.strides[l]);
      if (l == 0) {
        const Shape shape = x.shape();
        x = reshape(normalize(reshape(x, Shape{1, numel(shape)}), 1, Real(1e-5)), shape);
        x = add(mul(x, norm_gain_), norm_shift_);
      }
      x = gelu(x);
    }
    return linear(layer_norm(x, ln_gain_, ln_shift_), proj_w_, proj_b_);
  }

  std::size_t sequence_length(const Sample& sample) const override { return spec_.output_length(sample.values.size()); }

  NamedTensors<Real> parameters() const override {
    NamedTensors<Real> out;
    for (std::size_t l = 0; l < conv_w_.size(); ++l) {
      out.emplace_back("conv" + std::to_string(l) + "_w", conv_w_[l]);
      out.emplace_back("conv" + std::to_string(l) + "_b", conv_b_[l]);
    }
    out.emplace_back("norm_gain", norm_gain_);
    out.emplace_back("norm_shift", norm_shift_);
    out.emplace_back("ln_gain", ln_gain_);
    out.emplace_back("ln_shift", ln_shift_);
    out.emplace_back("proj_w", proj_w_);
    out.emplace_back("proj_b", proj_b_);
    return out;
  }

  const AudioSpec& spec() const { return spec_; }

 private:
  AudioSpec spec_;
  std::vector<Tensor<Real>> conv_w_, conv_b_;
  Tensor<Real> norm_gain_, norm_shift_, ln_gain_, ln_shift_, proj_w_, proj_b_;
};

template <class Real>
class TextFrontend final : public Frontend<Real> {
 public:
  TextFrontend(TextSpec spec, std::size_t hidden, Rng rng) : spec_(std::move(spec)) {
    table_ = init_weight<Real>({spec_.vocab.size(), hidden}, rng);
  }

  Modality modality() const override { return Modality::Text; }

  Tensor<Real> embed(const Sample& sample) const override {
    if (sample.tokens.empty()) throw InputError("text_embed: empty token sequence");
    if (sample.tokens.size() > spec_.max_len)
      throw InputError("text_embed: " + std::to_string(sample.tokens.size()) + " tokens exceed max_len " +
                       std::to_string(spec_.max_len));
    return embedding(table_, std::span<const int>(sample.tokens));
  }

  std::size_t sequence_length(const Sample& sample) const override { return sample.tokens.size(); }

  NamedTensors<Real> parameters() const override { return {{"token_table", table_}}; }

  const TextSpec& spec() const { return spec_; }
  const Tensor<Real>& table() const { return table_; }

 private:
  TextSpec spec_;
  Tensor<Real> table_;
};

struct FrontendSpec {
  Modality modality = Modality::Speech;
  ImageSpec image;
  AudioSpec audio;
  TextSpec text;
};

template <class Real>
std::unique_ptr<Frontend<Real>> make_frontend(const FrontendSpec& spec, std::size_t hidden, Rng rng) {
  switch (spec.modality) {
    case Modality::Image: return std::make_unique<ImageFrontend<Real>>(spec.image, hidden, rng);
    case Modality::Speech: return std::make_unique<SpeechFrontend<Real>>(spec.audio, hidden, rng);
    case Modality::Text: return std::make_unique<TextFrontend<Real>>(spec.text, hidden, rng);
  }
  throw ConfigError("unknown modality");
}

}  // namespace d2v
