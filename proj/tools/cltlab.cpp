#include <CLI11.hpp>

#include <iostream>

#include "cltlab/harness.hpp"

int main(int argc, char** argv) {
  using namespace cltlab::harness;
  CLI::App app{"cltlab: empirical normal-approximation rates under dependence"};
  app.set_version_flag("--version", std::string(CLTLAB_VERSION));
  app.require_subcommand(1);

  std::string config_path, out_dir, report_dir;
  std::uint64_t seed = 0;
  double budget = 0.0;
  unsigned threads = 0;

  auto* run_cmd = app.add_subcommand("run", "run the experiment described by a JSON config");
  run_cmd->add_option("config", config_path, "config file")->required()->check(CLI::ExistingFile);
  auto* seed_opt = run_cmd->add_option("--seed", seed, "override the master seed");
  auto* budget_opt = run_cmd->add_option("--budget-secs", budget, "wall-clock budget in seconds (0 = none)")->check(CLI::NonNegativeNumber);
  auto* threads_opt = run_cmd->add_option("--threads", threads, "worker threads (0 = CLT_LAB_THREADS or hardware)");
  auto* out_opt = run_cmd->add_option("--out", out_dir, "override the output directory");

  auto* report_cmd = app.add_subcommand("report", "tabulate results.json files in a directory and its subdirectories");
  report_cmd->add_option("dir", report_dir, "results directory")->required();

  std::uint64_t selftest_seed = 20240601;
  auto* selftest_cmd = app.add_subcommand("selftest", "quick internal consistency checks");
  selftest_cmd->add_option("--seed", selftest_seed, "seed for the random instances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kValidation;
  }

  if (*run_cmd) {
    Overrides ov;
    if (*seed_opt) ov.seed = seed;
    if (*budget_opt) ov.budget_secs = budget;
    if (*threads_opt) ov.threads = threads;
    if (*out_opt) ov.out_dir = out_dir;
    return run(config_path, ov, std::cout, std::cerr);
  }
  if (*report_cmd) return report(report_dir, std::cout, std::cerr);
  return selftest(selftest_seed, std::cout);
}
