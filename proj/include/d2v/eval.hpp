#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "d2v/config.hpp"
#include "d2v/pipeline.hpp"

namespace d2v {

struct AblationCell {
  std::uint64_t seed = 0;
  double accuracy = 0;
  bool collapsed = false;
  bool failed = false;
  std::string error;
};

struct AblationRow {
  std::string value;
  std::vector<AblationCell> cells;
  double mean = 0, stddev = 0;  // over successful cells
};

struct AblationTable {
  std::string axis;
  std::string fingerprint;  // base config
  std::vector<AblationRow> rows;

  const AblationRow& row(const std::string& value) const {
    for (const auto& r : rows)
      if (r.value == value) return r;
    throw StateError("ablation: no row '" + value + "' on axis " + axis);
  }
};

namespace eval_detail {

inline void summarize(AblationRow& row) {
  std::vector<double> acc;
  for (const auto& c : row.cells)
    if (!c.failed) acc.push_back(c.accuracy);
  if (acc.empty()) return;
  double mu = 0;
  for (double a : acc) mu += a;
  mu /= static_cast<double>(acc.size());
  double var = 0;
  for (double a : acc) var += (a - mu) * (a - mu);
  row.mean = mu;
  row.stddev = acc.size() > 1 ? std::sqrt(var / static_cast<double>(acc.size() - 1)) : 0.0;
}

/// Every cell starts from the same base config and seed, so data order and
/// mask draws agree across the axis; only `apply` differs.
inline AblationTable sweep(const std::string& axis, const std::vector<std::string>& values, const RunConfig& base,
                           const std::vector<std::uint64_t>& seeds,
                           const std::function<void(RunConfig&, const std::string&)>& apply) {
  if (seeds.empty()) throw ConfigError("ablation: no seeds");
  AblationTable table;
  table.axis = axis;
  table.fingerprint = config_fingerprint(base);
  for (const auto& value : values) {
    AblationRow row;
    row.value = value;
    for (auto seed : seeds) {
      AblationCell cell;
      cell.seed = seed;
      try {
        RunConfig cfg = base;
        cfg.seed = seed;
        apply(cfg, value);
        cfg.validate();
        const auto out = pretrain_and_probe(cfg, config_fingerprint(cfg), false);
        cell.accuracy = out.final.accuracy;
        cell.collapsed = out.collapsed;
      } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
      }
      row.cells.push_back(cell);
    }
    summarize(row);
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace eval_detail

inline AblationTable ablate_layers(const std::vector<std::size_t>& ks, const RunConfig& base,
                                   const std::vector<std::uint64_t>& seeds) {
  std::vector<std::string> values;
  for (auto k : ks) {
    if (k < 1 || k > base.encoder.layers)
      throw ConfigError("ablate_layers: K=" + std::to_string(k) + " violates 1 <= K <= encoder.layers=" +
                        std::to_string(base.encoder.layers));
    values.push_back(std::to_string(k));
  }
  return eval_detail::sweep("k", values, base, seeds,
                            [](RunConfig& cfg, const std::string& v) { cfg.target.k = std::stoul(v); });
}

inline AblationTable ablate_feature_site(const std::vector<TapSite>& sites, const RunConfig& base,
                                         const std::vector<std::uint64_t>& seeds) {
  std::vector<std::string> values;
  for (auto s : sites) values.push_back(config_detail::from_enum(s, config_detail::kSite));
  return eval_detail::sweep("site", values, base, seeds, [](RunConfig& cfg, const std::string& v) {
    cfg.target.site = config_detail::to_enum("site", v, config_detail::kSite);
  });
}

inline std::string ablation_csv(const AblationTable& t) {
  std::ostringstream out;
  out << "# fingerprint " << t.fingerprint << "\n";
  out << t.axis << ",mean_accuracy,std_accuracy,seeds,collapsed,failed\n";
  for (const auto& r : t.rows) {
    std::size_t collapsed = 0, failed = 0;
    for (const auto& c : r.cells) {
      collapsed += c.collapsed;
      failed += c.failed;
    }
    out << r.value << "," << config_detail::num(r.mean) << "," << config_detail::num(r.stddev) << "," << r.cells.size()
        << "," << collapsed << "," << failed << "\n";
  }
  return out.str();
}

inline void write_ablation_csv(const AblationTable& t, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("ablation: cannot write " + path.string());
  out << ablation_csv(t);
}

}  // namespace d2v
