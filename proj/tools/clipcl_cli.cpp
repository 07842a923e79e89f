#include "clipcl/config.hpp"
#include "clipcl/experiments.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace fs = std::filesystem;
using namespace clipcl;

namespace {

fs::path output_root(const std::string& flag, const ExperimentConfig* cfg) {
  if (!flag.empty()) return flag;
  if (cfg && !cfg->output_dir.empty()) return cfg->output_dir;
  if (const char* env = std::getenv("CLIPCL_OUT"); env && *env) return env;
  return "clipcl_out";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual-learning lab for dual-encoder image-text models on a synthetic world"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out;
  std::vector<std::uint64_t> seeds;
  bool force = false;
  int jobs = 1;
  std::string axis;
  std::string checkpoint;
  std::vector<std::string> records;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config (JSON)")->required();
    cmd->add_option("--seed", seeds, "seed; repeatable, overrides the config's seed list");
    cmd->add_option("--out", out, "output root (default: config output_dir, then $CLIPCL_OUT)");
  };
  auto* run = app.add_subcommand("run", "pretrain (cached) and run one protocol per seed");
  common(run);
  run->add_flag("--force", force, "recompute even when outputs exist");
  run->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  auto* matrix = app.add_subcommand("matrix", "run the method x option comparison matrix");
  common(matrix);
  matrix->add_flag("--force", force, "recompute even when outputs exist");
  matrix->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  auto* ablate = app.add_subcommand("ablate", "sweep one VR-LwF replay parameter");
  common(ablate);
  ablate->add_option("--axis", axis, "M, K_s or replay_source")->required();
  ablate->add_flag("--force", force, "recompute even when outputs exist");
  ablate->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  auto* curves = app.add_subcommand("curves", "per-session accuracy CSV from MST run records");
  curves->add_option("records", records, "run_record.json files")->required()->check(CLI::ExistingFile);
  curves->add_option("--out", out, "output directory");
  auto* evaluate = app.add_subcommand("evaluate", "metrics and shuffle probe of a checkpoint");
  common(evaluate);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  auto* validate = app.add_subcommand("validate-config", "check a config and print its normalized form");
  validate->add_option("--config", config_path, "experiment config (JSON)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? exit_code::kOk : exit_code::kConfig;
  }

  try {
    RunOptions opts;
    opts.force = force;
    opts.jobs = jobs;
    opts.log = &std::cerr;
    if (curves->parsed()) {
      opts.out = output_root(out, nullptr);
      std::vector<fs::path> paths(records.begin(), records.end());
      return cmd_curves(paths, opts);
    }
    ExperimentConfig cfg = load_config(config_path);
    if (validate->parsed()) {
      nlohmann::json j = {{"config", to_json(cfg)}, {"pretrain_hash", pretrain_hash(cfg)}, {"run_hash", run_hash(cfg)}};
      std::cout << j.dump(2) << "\n";
      return exit_code::kOk;
    }
    opts.out = output_root(out, &cfg);
    auto use_seeds = effective_seeds(cfg, seeds);
    if (run->parsed()) return cmd_run(cfg, use_seeds, opts);
    if (matrix->parsed()) return cmd_matrix(cfg, use_seeds, opts);
    if (ablate->parsed()) return cmd_ablate(cfg, use_seeds, axis, opts);
    if (evaluate->parsed()) return cmd_evaluate(cfg, use_seeds, checkpoint, opts);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return exit_code::kConfig;
  } catch (const PretrainQualityError& e) {
    std::cerr << "quality gate: " << e.what() << "\n";
    return exit_code::kGate;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code::kUnexpected;
  }
  return exit_code::kUnexpected;
}
