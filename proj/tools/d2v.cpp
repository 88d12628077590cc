#include <iostream>

#include "CLI11.hpp"

#include "d2v/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"masked self-distillation at desk scale"};
  app.require_subcommand(1);
  d2v::CommandOptions opt;
  std::uint64_t seed = 0;
  std::string out;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "INI run configuration")->required();
    sub->add_option("--seed", seed, "override run.seed");
    sub->add_option("--out", out, "override run.out_dir");
    sub->add_flag("--quiet", opt.quiet, "no progress on stderr");
  };
  auto* pretrain = app.add_subcommand("pretrain", "train and write metrics.jsonl + checkpoint.d2v");
  auto* probe = app.add_subcommand("probe", "linear probe on a checkpoint");
  auto* ablate = app.add_subcommand("ablate", "sweep K or the target site over run.seeds");
  auto* check = app.add_subcommand("check", "finite-difference check of the full loss at tiny width");
  for (auto* sub : {pretrain, probe, ablate, check}) common(sub);
  probe->add_option("--checkpoint", opt.checkpoint, "checkpoint file (default <out>/checkpoint.d2v)");
  ablate->add_option("--axis", opt.axis, "k or site")->required();
  ablate->add_option("--values", opt.values, "comma-separated values, e.g. 1,4 or ffn_out,attn_out")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return d2v::exit_code(d2v::ErrorKind::Config);
  }
  if (!app.get_subcommands().front()->get_option("--seed")->empty()) opt.seed = seed;
  if (!app.get_subcommands().front()->get_option("--out")->empty()) opt.out = out;

  try {
    if (*pretrain) return d2v::cmd_pretrain(opt);
    if (*probe) return d2v::cmd_probe(opt);
    if (*ablate) return d2v::cmd_ablate(opt);
    if (*check) return d2v::cmd_check(opt);
  } catch (const d2v::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return d2v::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
