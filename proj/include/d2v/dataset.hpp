#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "d2v/errors.hpp"
#include "d2v/frontends.hpp"

namespace d2v {

/*
 * On-disk corpora.
 *   text   plain UTF-8, one sample per non-empty line, tokenized with the vocab
 *   speech manifest of paths (relative to the manifest), each a headerless
 *          little-endian f32 mono PCM file with a "<path>.rate" sidecar
 *   image  "D2VT" container: magic, u32 rank, u64 dims, f32 values; shape
 *          [N, C, S, S] (or [C, S, S] for a single image)
 *   labels one integer per line, aligned with the samples
 */

namespace fs = std::filesystem;

inline constexpr char kTensorMagic[4] = {'D', '2', 'V', 'T'};

struct TensorFile {
  std::vector<std::uint64_t> shape;
  std::vector<float> values;
};

inline void write_tensor_file(const fs::path& path, const TensorFile& t) {
  std::size_t n = 1;
  for (auto d : t.shape) n *= d;
  if (n != t.values.size()) throw InputError("tensor file: shape does not match value count");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("tensor file: cannot write " + path.string());
  out.write(kTensorMagic, 4);
  const auto rank = static_cast<std::uint32_t>(t.shape.size());
  out.write(reinterpret_cast<const char*>(&rank), 4);
  out.write(reinterpret_cast<const char*>(t.shape.data()), static_cast<std::streamsize>(8 * t.shape.size()));
  out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(4 * t.values.size()));
  if (!out) throw InputError("tensor file: short write to " + path.string());
}

inline TensorFile read_tensor_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("tensor file: cannot open " + path.string());
  char magic[4];
  std::uint32_t rank = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&rank), 4);
  if (!in || std::memcmp(magic, kTensorMagic, 4) != 0) throw InputError("tensor file: bad magic in " + path.string());
  if (rank == 0 || rank > 8) throw InputError("tensor file: unsupported rank " + std::to_string(rank));
  TensorFile t;
  t.shape.resize(rank);
  in.read(reinterpret_cast<char*>(t.shape.data()), 8 * rank);
  std::uint64_t n = 1;
  for (auto d : t.shape) {
    if (d == 0 || d > (std::uint64_t{1} << 32)) throw InputError("tensor file: bad dimension in " + path.string());
    n *= d;
  }
  const auto here = in.tellg();
  in.seekg(0, std::ios::end);
  if (!in || static_cast<std::uint64_t>(in.tellg() - here) != 4 * n)
    throw InputError("tensor file: payload size does not match shape in " + path.string());
  in.seekg(here);
  t.values.resize(n);
  in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(4 * n));
  if (!in) throw InputError("tensor file: truncated payload in " + path.string());
  return t;
}

inline std::vector<std::string> read_lines(const fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw InputError(std::string(what) + ": cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    lines.push_back(line);
  }
  return lines;
}

inline std::vector<Sample> load_text(const fs::path& path, const Vocabulary& vocab) {
  std::vector<Sample> out;
  for (const auto& line : read_lines(path, "text corpus")) {
    Sample s;
    s.tokens = vocab.tokenize(line);
    if (!s.tokens.empty()) out.push_back(std::move(s));
  }
  if (out.empty()) throw InputError("text corpus: no samples in " + path.string());
  return out;
}

inline std::vector<float> read_pcm(const fs::path& path, std::size_t expected_rate) {
  const fs::path rate_path = path.string() + ".rate";
  std::ifstream rate_in(rate_path);
  std::size_t rate = 0;
  if (!rate_in || !(rate_in >> rate)) throw InputError("audio: missing or unreadable rate file " + rate_path.string());
  if (rate != expected_rate)
    throw InputError("audio: " + path.string() + " has rate " + std::to_string(rate) + ", expected " +
                     std::to_string(expected_rate));
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw InputError("audio: cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % 4 != 0) throw InputError("audio: " + path.string() + " is not a whole number of f32 samples");
  std::vector<float> v(bytes / 4);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  for (float x : v)
    if (!std::isfinite(x)) throw InputError("audio: non-finite sample in " + path.string());
  return v;
}

inline std::vector<Sample> load_audio(const fs::path& manifest, const AudioSpec& spec) {
  std::vector<Sample> out;
  for (const auto& line : read_lines(manifest, "audio manifest")) {
    fs::path p = line;
    if (p.is_relative()) p = manifest.parent_path() / p;
    Sample s;
    s.values = normalize_waveform(std::span<const float>(read_pcm(p, spec.sample_rate)));
    if (s.values.size() < spec.receptive_field())
      throw InputError("audio: " + p.string() + " is shorter than the receptive field");
    out.push_back(std::move(s));
  }
  if (out.empty()) throw InputError("audio manifest: no entries in " + manifest.string());
  return out;
}

inline std::vector<Sample> load_images(const fs::path& path, const ImageSpec& spec) {
  auto t = read_tensor_file(path);
  if (t.shape.size() == 3) t.shape.insert(t.shape.begin(), 1);
  if (t.shape.size() != 4 || t.shape[1] != spec.channels || t.shape[2] != spec.side || t.shape[3] != spec.side)
    throw InputError("images: " + path.string() + " must have shape [N," + std::to_string(spec.channels) + "," +
                     std::to_string(spec.side) + "," + std::to_string(spec.side) + "]");
  const std::size_t per = spec.channels * spec.side * spec.side;
  std::vector<Sample> out(t.shape[0]);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].values.assign(t.values.begin() + static_cast<std::ptrdiff_t>(i * per),
                         t.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    for (float x : out[i].values)
      if (!std::isfinite(x)) throw InputError("images: non-finite value in " + path.string());
  }
  return out;
}

inline std::vector<int> load_labels(const fs::path& path) {
  std::vector<int> out;
  for (const auto& line : read_lines(path, "labels")) {
    std::istringstream in(line);
    int v = 0;
    std::string rest;
    if (!(in >> v) || (in >> rest) || v < 0) throw InputError("labels: bad line '" + line + "' in " + path.string());
    out.push_back(v);
  }
  return out;
}

inline std::vector<Sample> load_corpus(const fs::path& path, const FrontendSpec& fe) {
  switch (fe.modality) {
    case Modality::Text: return load_text(path, fe.text.vocab);
    case Modality::Speech: return load_audio(path, fe.audio);
    case Modality::Image: return load_images(path, fe.image);
  }
  throw ConfigError("unknown modality");
}

inline std::vector<Sample> load_labelled(const fs::path& path, const fs::path& labels, const FrontendSpec& fe) {
  auto samples = load_corpus(path, fe);
  const auto y = load_labels(labels);
  if (y.size() != samples.size())
    throw InputError("labels: " + std::to_string(y.size()) + " labels for " + std::to_string(samples.size()) + " samples");
  for (std::size_t i = 0; i < y.size(); ++i) samples[i].label = y[i];
  return samples;
}

}  // namespace d2v
