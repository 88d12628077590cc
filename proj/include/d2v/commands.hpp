#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2v/checkpoint.hpp"
#include "d2v/config.hpp"
#include "d2v/eval.hpp"
#include "d2v/grad_check.hpp"
#include "d2v/pipeline.hpp"

namespace d2v {

struct CommandOptions {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::filesystem::path checkpoint;  // probe: defaults to <out>/checkpoint.d2v
  std::string axis;                  // ablate: k | site
  std::string values;                // ablate: comma-separated axis values
  bool quiet = false;
};

inline RunConfig load_run_config(const CommandOptions& opt) {
  RunConfig cfg = parse_config(opt.config);
  if (opt.seed) cfg.seed = *opt.seed;
  if (opt.out) cfg.out_dir = *opt.out;
  cfg.validate();
  return cfg;
}

inline std::filesystem::path prepare_out_dir(const RunConfig& cfg) {
  std::filesystem::path dir = cfg.out_dir;
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

inline void write_resolved_config(const std::filesystem::path& dir, const RunConfig& cfg, const std::string& fp) {
  write_text(dir / "config.resolved.ini", "# fingerprint " + fp + "\n" + canonical_dump(cfg));
}

// ---------------------------------------------------------------- pretrain

template <class Real>
int pretrain_command(const RunConfig& cfg, const CommandOptions& opt) {
  const std::string fp = config_fingerprint(cfg);
  const auto dir = prepare_out_dir(cfg);
  write_resolved_config(dir, cfg, fp);
  DataSource data(cfg);
  auto s = TrainState<Real>::create(cfg);
  std::ofstream metrics(dir / "metrics.jsonl");
  if (!metrics) throw InputError("cannot write " + (dir / "metrics.jsonl").string());
  metrics << nlohmann::json{{"record", "header"}, {"fingerprint", fp}, {"modality", to_string(cfg.modality)},
                            {"seed", cfg.seed}, {"total_steps", cfg.total_steps}}.dump()
          << "\n";
  bool warned = false;
  pretrain(s, data, [&](const StepMetrics& m) {
    auto rec = to_json(m);
    rec["record"] = "step";
    rec["fingerprint"] = fp;
    metrics << rec.dump() << "\n";
    if (m.collapsed && !warned) {
      std::cerr << "warning: representation collapse flagged at step " << *s.collapse.fired_at << "\n";
      warned = true;
    }
    if (!opt.quiet && (m.step % 100 == 0 || m.step + 1 == cfg.total_steps))
      std::cerr << "step " << m.step << " loss " << m.loss << " lr " << m.lr << " tau " << m.tau << " target_std "
                << m.target_std << "\n";
  });
  save_checkpoint(dir / "checkpoint.d2v", s, fp);
  if (!opt.quiet) std::cerr << "wrote " << (dir / "checkpoint.d2v").string() << "\n";
  return 0;
}

inline int cmd_pretrain(const CommandOptions& opt) {
  const auto cfg = load_run_config(opt);
  return cfg.precision == Precision::Wide ? pretrain_command<double>(cfg, opt) : pretrain_command<float>(cfg, opt);
}

// ---------------------------------------------------------------- probe

template <class Real>
int probe_command(const RunConfig& cfg, const CommandOptions& opt) {
  const std::string fp = config_fingerprint(cfg);
  const auto dir = prepare_out_dir(cfg);
  const auto ckpt_path = opt.checkpoint.empty() ? dir / "checkpoint.d2v" : opt.checkpoint;
  const auto file = read_checkpoint(ckpt_path);
  const auto s = restore<Real>(file, cfg);
  DataSource data(cfg);
  const auto r = probe_model(s.model, cfg, data, fp);
  const nlohmann::json out{{"accuracy", r.accuracy},
                           {"train_accuracy", r.train_accuracy},
                           {"chance", 1.0 / static_cast<double>(cfg.data.toy.classes)},
                           {"seed", r.seed},
                           {"fingerprint", r.fingerprint},
                           {"checkpoint", ckpt_path.string()},
                           {"checkpoint_fingerprint", file.header.value("fingerprint", "")},
                           {"checkpoint_step", s.step}};
  write_text(dir / "probe.json", out.dump(2) + "\n");
  std::cout << out.dump() << "\n";
  return 0;
}

inline int cmd_probe(const CommandOptions& opt) {
  const auto cfg = load_run_config(opt);
  return cfg.precision == Precision::Wide ? probe_command<double>(cfg, opt) : probe_command<float>(cfg, opt);
}

// ---------------------------------------------------------------- ablate

inline int cmd_ablate(const CommandOptions& opt) {
  const auto cfg = load_run_config(opt);
  const auto items = config_detail::split_list(opt.values);
  if (items.empty()) throw ConfigError("ablate: --values must list at least one value");
  AblationTable table;
  if (opt.axis == "k") {
    std::vector<std::size_t> ks;
    for (const auto& v : items) ks.push_back(config_detail::to_size("ablate k", v));
    table = ablate_layers(ks, cfg, cfg.seeds);
  } else if (opt.axis == "site") {
    std::vector<TapSite> sites;
    for (const auto& v : items) sites.push_back(config_detail::to_enum("ablate site", v, config_detail::kSite));
    table = ablate_feature_site(sites, cfg, cfg.seeds);
  } else {
    throw ConfigError("ablate: --axis must be k or site");
  }
  const auto dir = prepare_out_dir(cfg);
  write_ablation_csv(table, dir / ("ablation_" + opt.axis + ".csv"));
  std::cout << ablation_csv(table);
  for (const auto& row : table.rows)
    for (const auto& c : row.cells)
      if (c.failed) std::cerr << "cell " << table.axis << "=" << row.value << " seed " << c.seed << " failed: " << c.error << "\n";
  return 0;
}

// ---------------------------------------------------------------- check

/// The run config shrunk to a width where finite differences over every
/// parameter are affordable. Masking is loosened so every sample masks something.
inline RunConfig tiny_config(RunConfig cfg) {
  cfg.encoder.layers = std::min<std::size_t>(cfg.encoder.layers, 2);
  cfg.encoder.hidden = 8;
  cfg.encoder.heads = 2;
  cfg.encoder.ffn_mult = 2;
  cfg.encoder.dropout = 0;
  cfg.encoder.stochastic_depth = 0;
  cfg.encoder.max_positions = 16;
  cfg.target.k = std::min(cfg.target.k, cfg.encoder.layers);
  cfg.batch_size = 2;
  cfg.data.source = "toy";
  cfg.data.toy.symbols = 4;
  cfg.data.toy.classes = 2;
  switch (cfg.modality) {
    case Modality::Image:
      cfg.frontend.image = {8, 4, 3};
      cfg.masking.min_block = 1;
      cfg.masking.ratio = 0.5;
      break;
    case Modality::Speech:
      cfg.frontend.audio.channels = 4;
      cfg.data.toy.length = 3;
      cfg.data.toy.samples_per_symbol = 460;  // 1380 samples -> 4 frames
      cfg.masking.span = 2;
      cfg.masking.p = 0.3;
      break;
    case Modality::Text:
      cfg.frontend.text.vocab = toy_vocabulary(cfg.data.toy.symbols);
      cfg.data.toy.length = 6;
      if (cfg.masking.kind == MaskKind::SpanToken) {
        cfg.masking.span = 2;
        cfg.masking.p = 0.3;
      } else {
        cfg.masking.rate = 0.5;
      }
      break;
  }
  cfg.validate();
  return cfg;
}

/// Central-difference check of the full student loss (teacher targets held
/// fixed, as they carry no gradient).
template <class Real>
GradCheckResult check_full_loss(const RunConfig& cfg, Real eps) {
  auto s = TrainState<Real>::create(cfg);
  DataSource data(cfg);
  // Advance the teacher away from the student so the targets are not a copy.
  for (int i = 0; i < 2; ++i) train_step(s, data.batch(s.step));

  const auto batch = data.batch(s.step);
  std::vector<MaskedSample<Real>> work;
  std::size_t step = s.step;
  for (; step < s.step + 200; ++step) {
    NoGradScope<Real> off;
    std::vector<Tensor<Real>> embedded;
    for (const auto& x : batch) embedded.push_back(s.model.frontend->embed(x));
    work = teacher_pass(s, embedded, step);
    if (work.size() == batch.size()) break;
  }
  if (work.size() != batch.size()) throw StateError("check: could not draw a non-empty mask for every sample");

  auto loss_fn = [&] {
    std::vector<Tensor<Real>> embedded;
    for (const auto& x : batch) embedded.push_back(s.model.frontend->embed(x));
    return student_pass(s, batch, embedded, work, step).loss;
  };
  return grad_check_params<Real>(loss_fn, s.model.parameters(), eps);
}

struct CheckReport {
  GradCheckResult standard, wide;
  bool ok = false;
};

inline constexpr double kCheckTolStandard = 1e-4;
inline constexpr double kCheckTolWide = 1e-6;

inline CheckReport run_check(const RunConfig& cfg) {
  const auto tiny = tiny_config(cfg);
  CheckReport r;
  r.standard = check_full_loss<float>(tiny, 1e-2f);
  r.wide = check_full_loss<double>(tiny, 1e-6);
  r.ok = r.standard.max_rel_error < kCheckTolStandard && r.wide.max_rel_error < kCheckTolWide;
  return r;
}

inline int cmd_check(const CommandOptions& opt) {
  const auto cfg = load_run_config(opt);
  const auto r = run_check(cfg);
  const nlohmann::json out{
      {"fingerprint", config_fingerprint(cfg)},
      {"standard", {{"max_rel_error", r.standard.max_rel_error}, {"worst", r.standard.worst_param}, {"tolerance", kCheckTolStandard}}},
      {"wide", {{"max_rel_error", r.wide.max_rel_error}, {"worst", r.wide.worst_param}, {"tolerance", kCheckTolWide}}},
      {"coordinates", r.wide.coordinates},
      {"ok", r.ok}};
  std::cout << out.dump() << "\n";
  if (!r.ok) throw NumericError("check: gradient mismatch beyond tolerance");
  return 0;
}

}  // namespace d2v
