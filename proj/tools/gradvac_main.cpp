#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>

#include "gradvac/errors.hpp"
#include "gradvac/experiment.hpp"
#include "gradvac/version.hpp"

namespace {

// "A:B" -> (A, B); throws ConfigError on anything else.
std::pair<std::string, std::string> split_pair(const std::string& s,
                                               const std::string& what) {
  const auto pos = s.find(':');
  if (pos == std::string::npos || pos == 0 || pos + 1 == s.size()) {
    throw gradvac::ConfigError(what + " must look like A:B");
  }
  return {s.substr(0, pos), s.substr(pos + 1)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-task gradient combination toolkit"};
  app.set_version_flag("--version", std::string(gradvac::kVersion));
  app.require_subcommand(1);

  gradvac::SimulateOptions sim;
  std::uint64_t sim_seed = 0;
  std::string sim_mode;
  auto* simulate =
      app.add_subcommand("simulate", "run a synthetic experiment, write records");
  simulate->add_option("--config", sim.config_path, "experiment config JSON")
      ->required();
  simulate->add_option("--out", sim.out_dir, "output directory")->required();
  auto* sim_seed_opt = simulate->add_option(
      "--seed", sim_seed, "override surgery and sampler seeds");
  simulate->add_option("--mode", sim_mode,
                       "override surgery mode "
                       "(gradvac|pcgrad|fixed_target|sum_baseline)");

  gradvac::CombineOptions comb;
  std::uint64_t comb_seed = 0;
  std::string comb_mode;
  auto* combine =
      app.add_subcommand("combine", "one surgery sweep over a gradient dump");
  combine->add_option("dump", comb.dump_path, "gradient dump JSON")->required();
  combine->add_option("--config", comb.config_path, "vaccine config JSON")
      ->required();
  combine->add_option("--out", comb.out_path, "combined gradient output")
      ->required();
  combine->add_option("--report", comb.report_path, "surgery report output");
  combine->add_option("--ema-in", comb.ema_in, "EMA snapshot to start from");
  combine->add_option("--ema-out", comb.ema_out,
                      "updated EMA destination (defaults to --ema-in)");
  auto* comb_seed_opt =
      combine->add_option("--seed", comb_seed, "override surgery seed");
  combine->add_option("--mode", comb_mode, "override surgery mode");

  gradvac::AnalyzeOptions ana;
  std::string ana_steps;
  std::string ana_contrast;
  auto* analyze =
      app.add_subcommand("analyze", "aggregate records written by simulate");
  analyze->add_option("records", ana.records_dir, "directory from simulate")
      ->required();
  analyze->add_option("--out", ana.out_dir, "output directory")->required();
  analyze->add_option("--window", ana.window, "trailing activity window")
      ->capture_default_str();
  analyze->add_option("--steps", ana_steps, "inclusive step range A:B");
  analyze->add_option("--contrast", ana_contrast,
                      "emit contrast between two groups, GA:GB");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (simulate->parsed()) {
      if (sim_seed_opt->count() > 0) sim.seed_override = sim_seed;
      if (!sim_mode.empty()) sim.mode_override = sim_mode;
      return gradvac::run_simulate(sim);
    }
    if (combine->parsed()) {
      if (comb_seed_opt->count() > 0) comb.seed_override = comb_seed;
      if (!comb_mode.empty()) comb.mode_override = comb_mode;
      return gradvac::run_combine(comb);
    }
    if (!ana_steps.empty()) {
      const auto [a, b] = split_pair(ana_steps, "--steps");
      ana.steps = {std::stoll(a), std::stoll(b)};
    }
    if (!ana_contrast.empty()) ana.contrast = split_pair(ana_contrast, "--contrast");
    return gradvac::run_analyze(ana);
  } catch (const gradvac::ValidationError& e) {
    std::cerr << "gradvac: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "gradvac: " << e.what() << "\n";
    return 2;
  }
}
