#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "d2v/run_config.hpp"

extern char** environ;

namespace d2v {

/*
 * INI run configuration. Every key lives in a fixed table below; anything
 * else is rejected. Environment variables D2V_<SECTION>_<KEY> override the
 * file. Relative paths resolve against the config file's directory.
 */

namespace config_detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::uint64_t to_u64(const std::string& name, const std::string& v) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(name + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline std::size_t to_size(const std::string& name, const std::string& v) { return static_cast<std::size_t>(to_u64(name, v)); }

inline double to_double(const std::string& name, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(out)) throw ConfigError(name + ": expected a number, got '" + v + "'");
  return out;
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream in(v);
  for (std::string item; std::getline(in, item, ',');)
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

inline std::vector<std::size_t> to_sizes(const std::string& name, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(v)) out.push_back(to_size(name, item));
  if (out.empty()) throw ConfigError(name + ": expected a comma-separated list");
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream out;
  for (std::size_t i = 0; i < v.size(); ++i) out << (i ? "," : "") << v[i];
  return out.str();
}

inline std::string num(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

template <class E>
E to_enum(const std::string& name, const std::string& v, const std::vector<std::pair<std::string, E>>& options) {
  for (const auto& [text, value] : options)
    if (lower(v) == text) return value;
  std::string allowed;
  for (const auto& [text, value] : options) allowed += (allowed.empty() ? "" : "|") + text;
  throw ConfigError(name + ": '" + v + "' is not one of " + allowed);
}

template <class E>
std::string from_enum(E v, const std::vector<std::pair<std::string, E>>& options) {
  for (const auto& [text, value] : options)
    if (value == v) return text;
  return "?";
}

inline const std::vector<std::pair<std::string, Modality>> kModality{
    {"image", Modality::Image}, {"speech", Modality::Speech}, {"text", Modality::Text}};
inline const std::vector<std::pair<std::string, Precision>> kPrecision{{"standard", Precision::Standard},
                                                                       {"wide", Precision::Wide}};
inline const std::vector<std::pair<std::string, MaskKind>> kMaskKind{
    {"block", MaskKind::Block}, {"span", MaskKind::Span}, {"token", MaskKind::Token}, {"span_token", MaskKind::SpanToken}};
inline const std::vector<std::pair<std::string, TapSite>> kSite{
    {"ffn_out", TapSite::FfnOut}, {"attn_out", TapSite::AttnOut}, {"block_out", TapSite::BlockOut}};
inline const std::vector<std::pair<std::string, TargetNorm>> kNorm{
    {"instance", TargetNorm::InstanceFree}, {"layer", TargetNorm::LayerFree}, {"none", TargetNorm::None}};
inline const std::vector<std::pair<std::string, LossKind>> kLoss{{"smooth_l1", LossKind::SmoothL1}, {"l2", LossKind::L2}};
inline const std::vector<std::pair<std::string, LrKind>> kLr{{"tri_stage", LrKind::TriStage}, {"cosine", LrKind::Cosine}};

/// Parsed-but-unresolved values that need the config directory or other keys.
struct Pending {
  std::string vocab = "toy";
  bool clip_given = false;
  bool beta_given = false;
};

struct Field {
  std::string section, key;
  bool required;
  std::function<void(RunConfig&, Pending&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
  bool fingerprinted = true;

  std::string name() const { return section + "." + key; }
};

#define D2V_SIZE(sec, k, req, member)                                                                            \
  Field{sec, k, req, [](RunConfig& c, Pending&, const std::string& v) { c.member = to_size(sec "." k, v); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }}
#define D2V_REAL(sec, k, req, member)                                                                              \
  Field{sec, k, req, [](RunConfig& c, Pending&, const std::string& v) { c.member = to_double(sec "." k, v); }, \
        [](const RunConfig& c) { return num(c.member); }}
#define D2V_ENUM(sec, k, req, member, table)                                                                             \
  Field{sec, k, req, [](RunConfig& c, Pending&, const std::string& v) { c.member = to_enum(sec "." k, v, table); }, \
        [](const RunConfig& c) { return from_enum(c.member, table); }}
#define D2V_TEXT(sec, k, req, member)                                                               \
  Field{sec, k, req, [](RunConfig& c, Pending&, const std::string& v) { c.member = v; }, \
        [](const RunConfig& c) { return c.member; }}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> t{
        D2V_ENUM("run", "modality", true, modality, kModality),
        D2V_ENUM("run", "precision", false, precision, kPrecision),
        D2V_SIZE("run", "total_steps", true, total_steps),
        D2V_SIZE("run", "batch_size", false, batch_size),
        Field{"run", "seed", false,
              [](RunConfig& c, Pending&, const std::string& v) { c.seed = to_u64("run.seed", v); },
              [](const RunConfig& c) { return std::to_string(c.seed); }},
        Field{"run", "seeds", false,
              [](RunConfig& c, Pending&, const std::string& v) {
                c.seeds.clear();
                for (const auto& s : split_list(v)) c.seeds.push_back(to_u64("run.seeds", s));
              },
              [](const RunConfig& c) { return join(c.seeds); }},
        D2V_TEXT("run", "out_dir", false, out_dir),
        D2V_SIZE("run", "reset_teacher_at", false, reset_teacher_at),

        D2V_SIZE("encoder", "layers", true, encoder.layers),
        D2V_SIZE("encoder", "hidden", true, encoder.hidden),
        D2V_SIZE("encoder", "heads", true, encoder.heads),
        D2V_SIZE("encoder", "ffn_mult", false, encoder.ffn_mult),
        D2V_REAL("encoder", "dropout", false, encoder.dropout),
        D2V_REAL("encoder", "stochastic_depth", false, encoder.stochastic_depth),
        D2V_SIZE("encoder", "max_positions", false, encoder.max_positions),

        D2V_SIZE("frontend", "image_side", false, frontend.image.side),
        D2V_SIZE("frontend", "patch", false, frontend.image.patch),
        D2V_SIZE("frontend", "image_channels", false, frontend.image.channels),
        D2V_SIZE("frontend", "sample_rate", false, frontend.audio.sample_rate),
        D2V_SIZE("frontend", "conv_channels", false, frontend.audio.channels),
        Field{"frontend", "strides", false,
              [](RunConfig& c, Pending&, const std::string& v) { c.frontend.audio.strides = to_sizes("frontend.strides", v); },
              [](const RunConfig& c) { return join(c.frontend.audio.strides); }},
        Field{"frontend", "kernels", false,
              [](RunConfig& c, Pending&, const std::string& v) { c.frontend.audio.kernels = to_sizes("frontend.kernels", v); },
              [](const RunConfig& c) { return join(c.frontend.audio.kernels); }},
        Field{"frontend", "vocab", false, [](RunConfig&, Pending& p, const std::string& v) { p.vocab = v; },
              [](const RunConfig& c) { return c.vocab_path.empty() ? std::string("toy") : c.vocab_path; }},
        D2V_SIZE("frontend", "max_len", false, frontend.text.max_len),

        D2V_ENUM("masking", "kind", true, masking.kind, kMaskKind),
        D2V_REAL("masking", "ratio", false, masking.ratio),
        D2V_SIZE("masking", "min_block", false, masking.min_block),
        D2V_REAL("masking", "min_aspect", false, masking.min_aspect),
        D2V_REAL("masking", "p", false, masking.p),
        D2V_SIZE("masking", "span", false, masking.span),
        D2V_REAL("masking", "rate", false, masking.rate),
        D2V_REAL("masking", "replace_prob", false, masking.action_probs[0]),
        D2V_REAL("masking", "keep_prob", false, masking.action_probs[1]),
        D2V_REAL("masking", "random_prob", false, masking.action_probs[2]),

        D2V_REAL("ema", "tau0", true, ema.tau0),
        D2V_REAL("ema", "tau_end", true, ema.tau_e),
        D2V_SIZE("ema", "tau_steps", true, ema.tau_n),

        D2V_SIZE("target", "k", true, target.k),
        D2V_ENUM("target", "site", false, target.site, kSite),
        D2V_ENUM("target", "norm", false, target.norm, kNorm),

        D2V_ENUM("loss", "kind", true, loss.kind, kLoss),
        Field{"loss", "beta", false,
              [](RunConfig& c, Pending& p, const std::string& v) {
                c.loss.beta = to_double("loss.beta", v);
                p.beta_given = true;
              },
              [](const RunConfig& c) { return c.loss.kind == LossKind::SmoothL1 ? num(c.loss.beta) : std::string(); }},

        D2V_ENUM("lr", "kind", true, lr.kind, kLr),
        D2V_REAL("lr", "peak", true, lr.peak),
        D2V_REAL("lr", "warmup", false, lr.warmup),
        D2V_REAL("lr", "hold", false, lr.hold),
        D2V_REAL("lr", "decay", false, lr.decay),

        D2V_REAL("optim", "beta1", false, optim.beta1),
        D2V_REAL("optim", "beta2", false, optim.beta2),
        D2V_REAL("optim", "eps", false, optim.eps),
        D2V_REAL("optim", "weight_decay", false, optim.weight_decay),
        Field{"optim", "clip_norm", false,
              [](RunConfig& c, Pending& p, const std::string& v) {
                c.optim.clip_norm = to_double("optim.clip_norm", v);
                p.clip_given = true;
              },
              [](const RunConfig& c) { return num(c.optim.clip_norm); }},

        D2V_REAL("collapse", "threshold", false, collapse.threshold),
        D2V_SIZE("collapse", "window", false, collapse.window),

        D2V_TEXT("data", "source", false, data.source),
        D2V_TEXT("data", "train", false, data.train),
        D2V_TEXT("data", "probe", false, data.probe),
        D2V_TEXT("data", "probe_labels", false, data.probe_labels),
        D2V_SIZE("data", "classes", false, data.toy.classes),
        D2V_SIZE("data", "symbols", false, data.toy.symbols),
        D2V_SIZE("data", "length", false, data.toy.length),
        D2V_REAL("data", "follow", false, data.toy.follow),
        D2V_REAL("data", "noise", false, data.toy.noise),
        D2V_SIZE("data", "samples_per_symbol", false, data.toy.samples_per_symbol),

        D2V_SIZE("probe", "train_samples", false, probe.train_samples),
        D2V_SIZE("probe", "test_samples", false, probe.test_samples),
        D2V_REAL("probe", "train_fraction", false, probe.train_fraction),
        D2V_SIZE("probe", "iterations", false, probe.iterations),
        D2V_REAL("probe", "learning_rate", false, probe.learning_rate),
        D2V_REAL("probe", "l2", false, probe.l2),
    };
    for (auto& f : t)
      if (f.section == "run" && f.key == "out_dir") f.fingerprinted = false;
    return t;
  }();
  return table;
}

#undef D2V_SIZE
#undef D2V_REAL
#undef D2V_ENUM
#undef D2V_TEXT

inline const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

inline std::string resolve_path(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return p;
  std::filesystem::path path(p);
  return (path.is_relative() ? base / path : path).lexically_normal().string();
}

}  // namespace config_detail

/// section.key -> raw value
using RawConfig = std::map<std::string, std::string>;

inline RawConfig read_ini(const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    if (!std::filesystem::exists(path)) throw InputError("config: cannot open " + path.string());
    throw ConfigError(std::string("config: ") + e.what());
  }
  RawConfig raw;
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) throw ConfigError("config: key '" + section + "' must live inside a [section]");
    for (const auto& [key, value] : body) {
      if (!config_detail::find_field(section, key)) throw ConfigError("config: unknown key " + section + "." + key);
      raw[section + "." + key] = config_detail::trim(value.data());
    }
  }
  return raw;
}

/// Applies D2V_<SECTION>_<KEY> variables; variables naming an unknown key of a
/// known section are rejected so typos do not pass silently.
inline void apply_env_overrides(RawConfig& raw) {
  using namespace config_detail;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry = *e;
    if (entry.rfind("D2V_", 0) != 0) continue;
    const auto eq = entry.find('=');
    const std::string name = entry.substr(0, eq), value = eq == std::string::npos ? "" : entry.substr(eq + 1);
    bool matched = false, section_known = false;
    for (const auto& f : fields()) {
      const std::string prefix = "D2V_" + upper(f.section) + "_";
      if (name.rfind(prefix, 0) != 0) continue;
      section_known = true;
      if (name == prefix + upper(f.key)) {
        raw[f.name()] = trim(value);
        matched = true;
      }
    }
    if (section_known && !matched) throw ConfigError("config: environment variable " + name + " names no config key");
  }
}

/// Builds and validates a RunConfig from raw values. `base` anchors relative paths.
inline RunConfig build_config(const RawConfig& raw, const std::filesystem::path& base) {
  using namespace config_detail;
  RunConfig cfg;
  Pending pending;
  // Modality first: it decides a few defaults.
  for (const auto& f : fields()) {
    auto it = raw.find(f.name());
    if (it == raw.end()) {
      if (f.required) throw ConfigError("config: missing required key " + f.name());
      continue;
    }
    if (f.name() == "loss.beta") continue;  // handled after loss.kind is known
    f.set(cfg, pending, it->second);
  }
  cfg.frontend.modality = cfg.modality;

  if (auto it = raw.find("loss.beta"); it != raw.end()) {
    if (cfg.loss.kind != LossKind::SmoothL1) throw ConfigError("config: loss.beta is only allowed with loss.kind = smooth_l1");
    find_field("loss", "beta")->set(cfg, pending, it->second);
  } else if (cfg.loss.kind == LossKind::SmoothL1) {
    throw ConfigError("config: missing required key loss.beta (loss.kind = smooth_l1)");
  }
  if (!pending.clip_given) cfg.optim.clip_norm = cfg.modality == Modality::Speech ? 2.0 : 0.0;

  cfg.data.train = resolve_path(base, cfg.data.train);
  cfg.data.probe = resolve_path(base, cfg.data.probe);
  cfg.data.probe_labels = resolve_path(base, cfg.data.probe_labels);
  if (cfg.modality == Modality::Text) {
    if (pending.vocab == "toy") {
      cfg.frontend.text.vocab = toy_vocabulary(cfg.data.toy.symbols);
    } else {
      cfg.vocab_path = resolve_path(base, pending.vocab);
      cfg.frontend.text.vocab = Vocabulary::from_file(cfg.vocab_path);
    }
  }
  cfg.validate();
  return cfg;
}

inline RunConfig parse_config(const std::filesystem::path& path) {
  RawConfig raw = read_ini(path);
  apply_env_overrides(raw);
  return build_config(raw, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

/// Every key with its effective value, sections in table order. Re-parsable.
inline std::string canonical_dump(const RunConfig& cfg, bool for_fingerprint = false) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : config_detail::fields()) {
    if (for_fingerprint && !f.fingerprinted) continue;
    const std::string value = f.get(cfg);
    if (value.empty()) continue;
    if (f.section != section) {
      out << (section.empty() ? "" : "\n") << "[" << f.section << "]\n";
      section = f.section;
    }
    out << f.key << " = " << value << "\n";
  }
  if (for_fingerprint && cfg.modality == Modality::Text) {
    out << "\n# vocab";
    for (const auto& t : cfg.frontend.text.vocab.tokens()) out << " " << t;
    out << "\n";
  }
  return out.str();
}

inline std::string sha256_hex(const std::string& text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw StateError("sha256: digest failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return out.str();
}

/// Content hash of the effective configuration (output directory excluded).
inline std::string config_fingerprint(const RunConfig& cfg) { return sha256_hex(canonical_dump(cfg, true)); }

}  // namespace d2v
