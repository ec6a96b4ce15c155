// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// conflictlens <stage> --config <path> [--set key=value]... [--threads N]

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "conflictlens/harness.hpp"

namespace cl = conflictlens;

int main(int argc, char** argv) {
  CLI::App app{"Modality-conflict workbench for toy vision-language transformers"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::vector<std::string> overrides;
  std::size_t threads = 1;
  bool quiet = false;
  for (const auto& [stage, name] : cl::stage_names()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " stage");
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--set", overrides, "override a config key (dotted.key=value)");
    sub->add_option("--threads", threads, "worker threads for the sweep")->check(CLI::PositiveNumber);
    sub->add_flag("-q,--quiet", quiet, "suppress progress lines");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const std::string stage_name = app.get_subcommands().front()->get_name();
  try {
    auto cfg = cl::ExperimentConfig::load(config_path);
    for (const auto& o : overrides) cfg.apply_override(o);
    cfg.apply_environment();
    cfg.validate();
    cl::RunOptions opt;
    opt.threads = threads;
    opt.log = quiet ? nullptr : &std::cerr;
    auto res = cl::run_stage(cl::stage_from_string(stage_name), cfg, opt);
    for (const auto& p : res.outputs) std::cout << p.string() << '\n';
    if (!quiet) std::cerr << stage_name << ": done in " << res.wall_seconds << " s (run " << cl::run_id(cfg) << ")\n";
    return 0;
  } catch (const cl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const cl::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << '\n';
    return 3;
  } catch (const cl::TrainingError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const cl::DegenerateDataError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
