// dwmr: discrete world-model laboratory.
//
//   dwmr gen-data --config cfg.json --out data/
//   dwmr train    --config cfg.json --data data/ --out runs/a
//   dwmr eval     --config cfg.json --data data/ --out runs/a
//   dwmr sweep    --config cfg.json --data data/ --out runs/sweep
//   dwmr ablate   --config cfg.json --data data/ --out runs/ablate
//   dwmr report   --out runs/
//
// Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dwmr/config.hpp"
#include "dwmr/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"discrete Boolean world-model laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", data_dir;
  std::vector<std::string> overrides;
  long long seed = -1;

  app.add_option("--config", config_path, "JSON config file (flat dotted keys)");
  app.add_option("--set", overrides, "override as key=value; repeatable")->take_all();
  app.add_option("--seed", seed, "config seed override");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--data", data_dir, "dataset directory (overrides DWMR_DATA_DIR)");

  CLI::App* cmd_gen = app.add_subcommand("gen-data", "generate the train/val/test datasets");
  CLI::App* cmd_train = app.add_subcommand("train", "train a model");
  CLI::App* cmd_eval = app.add_subcommand("eval", "probe a checkpoint: encoding + imagination");
  CLI::App* cmd_sweep = app.add_subcommand("sweep", "random search selected on validation");
  CLI::App* cmd_ablate = app.add_subcommand("ablate", "drop objective components one at a time");
  CLI::App* cmd_report = app.add_subcommand("report", "aggregate eval reports into a table");
  for (CLI::App* sub : {cmd_gen, cmd_train, cmd_eval, cmd_sweep, cmd_ablate, cmd_report})
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  dwmr::Config cfg;
  try {
    if (!config_path.empty()) cfg.apply_file(config_path);
    for (const std::string& kv : overrides) cfg.apply_override(kv);
    if (seed >= 0) cfg.set("seed", seed);
    if (!data_dir.empty()) cfg.set("data.dir", data_dir);
    cfg.finalize();
  } catch (const dwmr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (cmd_gen->parsed()) {
      // default the dataset output to the data dir unless --out was given
      const std::string dest = app.count("--out") > 0 ? out_dir : cfg.data_dir();
      dwmr::generate_datasets(cfg, dest);
    } else if (cmd_train->parsed()) {
      dwmr::run_train(cfg, out_dir, cfg.data_dir());
    } else if (cmd_eval->parsed()) {
      dwmr::run_eval(cfg, out_dir, cfg.data_dir());
    } else if (cmd_sweep->parsed()) {
      dwmr::run_sweep(cfg, out_dir, cfg.data_dir());
    } else if (cmd_ablate->parsed()) {
      dwmr::run_ablate(cfg, out_dir, cfg.data_dir());
    } else if (cmd_report->parsed()) {
      dwmr::run_report(cfg, out_dir);
    }
  } catch (const dwmr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
