#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "saga/error.hpp"
#include "saga/pipeline.hpp"

namespace {

using saga::pipeline::RunConfig;

struct Common {
  std::string config;
  std::string manifest;
  std::string mode;
  std::vector<std::string> extractors;
  std::string out;
  std::optional<int> workers;
  std::optional<std::uint64_t> seed;
  bool live = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run configuration (JSON)");
  cmd->add_option("--manifest", c.manifest, "manifest of image/target pairs (JSON lines)");
  cmd->add_option("--mode", c.mode, "saga | random | coldspot")->check(CLI::IsMember({"saga", "random", "coldspot"}));
  cmd->add_option("--extractor", c.extractors, "attention extractor id(s); several are averaged")->delimiter(',');
  cmd->add_option("--out", c.out, "output root");
  cmd->add_option("--workers", c.workers, "parallel pairs")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", c.seed, "root seed");
  cmd->add_flag("--live", c.live, "use the remote endpoints of the config (credentials from the environment)");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) {
    cfg = saga::pipeline::load_config(c.config);
  } else {
    cfg.surrogates = saga::pipeline::default_surrogates();
  }
  if (cfg.live && !c.live) throw saga::Error(saga::ErrorCode::InvalidConfig, "config enables live mode; pass --live to confirm");
  cfg.live = c.live;
  if (!c.manifest.empty()) cfg.manifest = c.manifest;
  if (!c.mode.empty()) cfg.mode = saga::pipeline::attack_mode_from_string(c.mode);
  if (!c.extractors.empty()) cfg.extractors = c.extractors;
  if (!c.out.empty()) cfg.output_root = c.out;
  if (c.workers) cfg.workers = *c.workers;
  if (c.seed) cfg.attack.seed = *c.seed;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SAGA: stage-wise attention-guided adversarial attacks on vision-language models"};
  app.require_subcommand(1);

  Common attack_opts, analyze_opts, eval_opts;
  auto* attack = app.add_subcommand("attack", "run the attack over a manifest");
  add_common(attack, attack_opts);

  std::string kind;
  auto* analyze = app.add_subcommand("analyze", "run an analysis over a manifest or a finished attack tree");
  add_common(analyze, analyze_opts);
  analyze->add_option("--kind", kind, "correlation | redistribution | saturation | attention-shift")
      ->required()
      ->check(CLI::IsMember({"correlation", "redistribution", "saturation", "attention-shift"}));

  auto* evaluate = app.add_subcommand("evaluate", "caption, judge and score an attack tree");
  add_common(evaluate, eval_opts);

  std::string plot_kind, plot_out = "figures";
  std::vector<std::string> records;
  auto* plot = app.add_subcommand("plot", "render SVG figures from record files");
  plot->add_option("--kind", plot_kind, "saturation | shift | correlation | redistribution")
      ->required()
      ->check(CLI::IsMember({"saturation", "shift", "correlation", "redistribution"}));
  plot->add_option("--records", records, "record files")->required();
  plot->add_option("--out", plot_out, "output directory");

  std::string demo_dir = "demo";
  int demo_pairs = 10;
  std::uint64_t demo_seed = 0;
  auto* demo = app.add_subcommand("make-demo", "write synthetic images, a manifest, caption fixtures and a config");
  demo->add_option("--dir", demo_dir, "destination directory");
  demo->add_option("--pairs", demo_pairs, "number of pairs")->check(CLI::PositiveNumber);
  demo->add_option("--seed", demo_seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (attack->parsed()) {
      auto summary = saga::pipeline::cmd_attack(resolve(attack_opts), std::cout);
      return summary.aborted() > 0 ? 1 : 0;
    }
    if (analyze->parsed()) {
      saga::pipeline::cmd_analyze(kind, resolve(analyze_opts), std::cout);
      return 0;
    }
    if (evaluate->parsed()) {
      saga::pipeline::cmd_evaluate(resolve(eval_opts), std::cout);
      return 0;
    }
    if (plot->parsed()) {
      std::vector<std::filesystem::path> files(records.begin(), records.end());
      std::cout << saga::pipeline::cmd_plot(plot_kind, files, plot_out).string() << '\n';
      return 0;
    }
    if (demo->parsed()) {
      saga::pipeline::make_demo(demo_dir, demo_pairs, demo_seed);
      std::cout << "wrote " << demo_dir << "/{manifest.jsonl,captions.jsonl,config.json,images/}\n";
      return 0;
    }
  } catch (const saga::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
