#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2v/trainer.hpp"

namespace d2v {

static_assert(std::endian::native == std::endian::little, "checkpoints are written in host order");

/*
 * Layout: "D2VCKPT1", u64 header length, JSON header, then the tensors listed
 * in header["tensors"] back to back as raw little-endian f32/f64 values.
 */
inline constexpr char kCheckpointMagic[8] = {'D', '2', 'V', 'C', 'K', 'P', 'T', '1'};

struct CheckpointTensor {
  std::string name;
  Shape shape;
  bool wide = false;  // f64 when true
  std::vector<double> values;
};

struct CheckpointFile {
  nlohmann::json header;
  std::map<std::string, CheckpointTensor> tensors;

  const CheckpointTensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw StateError("checkpoint: missing tensor '" + name + "'");
    return it->second;
  }
};

inline nlohmann::json encoder_to_json(const EncoderConfig& c) {
  return {{"layers", c.layers},   {"hidden", c.hidden},   {"heads", c.heads},
          {"ffn_mult", c.ffn_mult}, {"dropout", c.dropout}, {"stochastic_depth", c.stochastic_depth},
          {"max_positions", c.max_positions}};
}

inline EncoderConfig encoder_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.layers = j.at("layers");
  c.hidden = j.at("hidden");
  c.heads = j.at("heads");
  c.ffn_mult = j.at("ffn_mult");
  c.dropout = j.at("dropout");
  c.stochastic_depth = j.at("stochastic_depth");
  c.max_positions = j.at("max_positions");
  return c;
}

inline void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& file) {
  nlohmann::json header = file.header;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : file.tensors)
    header["tensors"].push_back({{"name", name}, {"shape", t.shape}, {"dtype", t.wide ? "f64" : "f32"}});
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("checkpoint: cannot write " + tmp);
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : file.tensors) {
      if (t.wide) {
        out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * 8));
      } else {
        std::vector<float> narrow(t.values.begin(), t.values.end());
        out.write(reinterpret_cast<const char*>(narrow.data()), static_cast<std::streamsize>(narrow.size() * 4));
      }
    }
    if (!out) throw InputError("checkpoint: short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw InputError("checkpoint: " + path.string() + " is not a checkpoint file");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (std::uint64_t{1} << 32)) throw InputError("checkpoint: corrupt header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw InputError("checkpoint: truncated header");

  CheckpointFile file;
  try {
    file.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("checkpoint: bad header: ") + e.what());
  }
  for (const auto& entry : file.header.at("tensors")) {
    CheckpointTensor t;
    t.name = entry.at("name");
    t.shape = entry.at("shape").get<Shape>();
    t.wide = entry.at("dtype") == "f64";
    std::size_t n = 1;
    for (auto d : t.shape) n *= d;
    if (t.wide) {
      t.values.resize(n);
      in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * 8));
    } else {
      std::vector<float> narrow(n);
      in.read(reinterpret_cast<char*>(narrow.data()), static_cast<std::streamsize>(n * 4));
      t.values.assign(narrow.begin(), narrow.end());
    }
    if (!in) throw InputError("checkpoint: truncated tensor " + t.name);
    file.tensors.emplace(t.name, std::move(t));
  }
  file.header.erase("tensors");
  return file;
}

namespace detail {

template <class Real>
void put(CheckpointFile& f, const std::string& name, const Tensor<Real>& t) {
  f.tensors[name] = {name, t.shape(), std::is_same_v<Real, double>, std::vector<double>(t.data().begin(), t.data().end())};
}

inline void put(CheckpointFile& f, const std::string& name, const std::vector<double>& v) {
  f.tensors[name] = {name, Shape{v.size()}, true, v};
}

template <class Real>
void take(const CheckpointFile& f, const std::string& name, Tensor<Real> t) {
  const auto& src = f.at(name);
  if (src.shape != t.shape()) throw StateError("checkpoint: shape mismatch for '" + name + "'");
  if (src.wide != std::is_same_v<Real, double>) throw StateError("checkpoint: precision mismatch for '" + name + "'");
  auto dst = t.mutable_data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(src.values[i]);
}

inline std::vector<double> take(const CheckpointFile& f, const std::string& name, std::size_t n) {
  const auto& src = f.at(name);
  if (src.values.size() != n) throw StateError("checkpoint: size mismatch for '" + name + "'");
  return src.values;
}

}  // namespace detail

/// Student, teacher (tensors plus f64 running averages), Adam moments and
/// collapse tracker, enough to continue a run bit for bit.
template <class Real>
CheckpointFile snapshot(const TrainState<Real>& s, const std::string& fingerprint) {
  CheckpointFile f;
  f.header = {{"format", 1},
              {"encoder", encoder_to_json(s.cfg.encoder)},
              {"modality", to_string(s.cfg.modality)},
              {"precision", std::is_same_v<Real, double> ? "wide" : "standard"},
              {"seed", s.cfg.seed},
              {"step", s.step},
              {"fingerprint", fingerprint},
              {"adam_t", s.adam.t},
              {"collapse_run", s.collapse.run},
              {"collapse_fired_at", s.collapse.fired_at ? nlohmann::json(*s.collapse.fired_at) : nlohmann::json()}};
  const auto params = s.model.parameters();
  for (const auto& [name, t] : params) detail::put(f, "student/" + name, t);
  const auto teacher = s.teacher.params().parameters();
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    detail::put(f, "teacher/encoder/" + teacher[i].first, teacher[i].second);
    detail::put(f, "teacher_ema/" + teacher[i].first, s.teacher.accumulators()[i]);
  }
  if (!s.adam.m.empty())
    for (std::size_t i = 0; i < params.size(); ++i) {
      detail::put(f, "adam/m/" + params[i].first, s.adam.m[i]);
      detail::put(f, "adam/v/" + params[i].first, s.adam.v[i]);
    }
  return f;
}

template <class Real>
void save_checkpoint(const std::filesystem::path& path, const TrainState<Real>& s, const std::string& fingerprint) {
  write_checkpoint(path, snapshot(s, fingerprint));
}

/// Rebuilds a TrainState for `cfg` and overwrites it from the file; the
/// encoder geometry and precision must match.
template <class Real>
TrainState<Real> restore(const CheckpointFile& f, const RunConfig& cfg) {
  if (f.header.value("format", 0) != 1) throw StateError("checkpoint: unsupported format");
  if (encoder_from_json(f.header.at("encoder")) != cfg.encoder)
    throw StateError("checkpoint: encoder configuration differs from the run config");
  if (f.header.at("modality") != to_string(cfg.modality)) throw StateError("checkpoint: modality differs from the run config");
  auto s = TrainState<Real>::create(cfg);
  const auto params = s.model.parameters();
  for (const auto& [name, t] : params) detail::take(f, "student/" + name, t);

  const auto teacher = s.teacher.params().parameters();
  std::vector<std::vector<double>> accum;
  for (const auto& [name, t] : teacher) accum.push_back(detail::take(f, "teacher_ema/" + name, t.numel()));
  s.teacher.load_accumulators(std::move(accum));

  s.adam = {};
  s.adam.t = f.header.at("adam_t");
  if (s.adam.t > 0)
    for (const auto& [name, t] : params) {
      s.adam.m.push_back(detail::take(f, "adam/m/" + name, t.numel()));
      s.adam.v.push_back(detail::take(f, "adam/v/" + name, t.numel()));
    }
  s.step = f.header.at("step");
  s.collapse.run = f.header.at("collapse_run");
  const auto& fired = f.header.at("collapse_fired_at");
  if (!fired.is_null()) s.collapse.fired_at = fired.get<std::size_t>();
  return s;
}

template <class Real>
TrainState<Real> load_checkpoint(const std::filesystem::path& path, const RunConfig& cfg) {
  return restore<Real>(read_checkpoint(path), cfg);
}

}  // namespace d2v
