// Pipeline driver: corpus generation, training, operator estimation, sweeps,
// projections, and report emission from one JSON configuration file.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lrel/config.hpp"
#include "lrel/parallel.hpp"
#include "lrel/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"lrel: linear relational approximators of a toy transformer"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  int workers = 0;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "JSON run configuration")->required();
    cmd->add_option("--set", overrides, "dotted-key override, e.g. train.steps=500");
    cmd->add_option("--workers", workers, "worker count (default: LREL_WORKERS or OpenMP)");
  };

  CLI::App* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus and relations");
  CLI::App* train = app.add_subcommand("train", "train the model on the generated corpus");
  CLI::App* estimate = app.add_subcommand("estimate", "estimate and save relational operators");
  CLI::App* sweep = app.add_subcommand("sweep", "layer sweep with best-layer averaging");
  CLI::App* project = app.add_subcommand("project", "2-D projections and beta sweep");
  CLI::App* report = app.add_subcommand("report", "collate sweep CSVs into a summary table");
  for (CLI::App* cmd : {gen, train, estimate, sweep, project, report}) add_common(cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    if (workers > 0) lrel::par::set_workers(workers);
    const lrel::RunConfig config = lrel::load_run_config(config_path, overrides);
    if (gen->parsed()) lrel::cmd_gen_corpus(config);
    if (train->parsed()) lrel::cmd_train(config);
    if (estimate->parsed()) lrel::cmd_estimate(config);
    if (sweep->parsed()) lrel::cmd_sweep(config);
    if (project->parsed()) lrel::cmd_project(config);
    if (report->parsed()) lrel::cmd_report(config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
