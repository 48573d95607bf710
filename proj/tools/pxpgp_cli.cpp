#include <CLI11.hpp>

#include <iostream>

#include "pxpgp/evalcli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Distributed GP hyperparameter training experiments"};
  app.require_subcommand(1);

  std::string config_path;
  int jobs = 1;
  bool quiet = false;
  std::string report_dir;

  CLI::App* gen = app.add_subcommand("gen", "write the datasets of a config");
  gen->add_option("--config", config_path, "experiment config")->required();

  CLI::App* run = app.add_subcommand("run", "run every (method, M, seed) cell");
  run->add_option("--config", config_path, "experiment config")->required();
  run->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  run->add_flag("--quiet", quiet, "no progress lines on stderr");

  CLI::App* report = app.add_subcommand("report", "aggregate metrics.csv into report.csv");
  report->add_option("--dir", report_dir, "experiment output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const std::int64_t offset = pxpgp::seed_offset_from_env();
    if (gen->parsed()) {
      pxpgp::generate_datasets(pxpgp::load_config(config_path), offset);
      return 0;
    }
    if (run->parsed()) {
      pxpgp::RunOptions options;
      options.jobs = jobs;
      options.seed_offset = offset;
      options.log = quiet ? nullptr : &std::cerr;
      return pxpgp::run_experiment(config_path, options, std::cerr);
    }
    pxpgp::write_report(report_dir);
    return 0;
  } catch (const pxpgp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
