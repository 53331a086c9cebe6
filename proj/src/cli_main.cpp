#include <iostream>

#include <CLI11.hpp>

#include "gift/cli.hpp"

namespace gift::cli {

int main(int argc, char** argv) {
  CLI::App app{"gift: bi-level immunization experiments on 2-D concept data"};
  app.require_subcommand(1);

  CommandOptions opts;
  std::string config, dataset, out_dir = ".";
  std::uint64_t seed = 0;
  const char* commands[][2] = {
      {"make-data", "sample a concept dataset"},
      {"pretrain", "train the undefended model"},
      {"immunize", "run GIFT (or the naive ablation) on a checkpoint"},
      {"attack", "fine-tune a checkpoint on the attack split or a safe concept"},
      {"eval", "metrics for one or more checkpoints"},
      {"analyze", "gradient checks and the Taylor-residual probe"},
  };
  std::vector<CLI::App*> subs;
  std::vector<CLI::Option*> seed_opts;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--dataset", dataset, "dataset file")->check(CLI::ExistingFile);
    sub->add_option("--checkpoint", opts.checkpoints, "checkpoint path, or label=path; repeatable");
    sub->add_option("--out-dir", out_dir, "output directory");
    seed_opts.push_back(sub->add_option("--seed", seed, "override the config seed"));
    sub->add_option("--threads", opts.threads, "worker threads")->check(CLI::PositiveNumber);
    subs.push_back(sub);
  }
  std::string manifest;
  CLI::App* replay = app.add_subcommand("replay", "re-run a recorded command and compare its outputs");
  replay->add_option("manifest", manifest, "manifest.json of the original run")->required()->check(CLI::ExistingFile);
  replay->add_option("--out-dir", out_dir, "output directory for the re-run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (replay->parsed()) {
      const ReplayResult res = cmd_replay(manifest, out_dir);
      if (res.identical()) {
        std::cout << "replay identical: " << res.rerun.outputs.size() << " outputs\n";
        return kOk;
      }
      for (const auto& m : res.mismatched) std::cerr << "replay differs: " << m << '\n';
      return kNumerical;
    }
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      opts.config = config;
      if (!dataset.empty()) opts.dataset = dataset;
      opts.out_dir = out_dir;
      if (seed_opts[i]->count() > 0) opts.seed = seed;
      const RunManifest m = run_command(subs[i]->get_name(), opts);
      std::cout << m.command << ": " << m.outputs.size() << " outputs in " << out_dir << " (config " << m.config_hash
                << ", " << m.wall_time << " s)\n";
    }
    return kOk;
  } catch (...) {
    return exit_code_for_current_exception();
  }
}

}  // namespace gift::cli
