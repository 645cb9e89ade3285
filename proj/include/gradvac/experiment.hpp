#pragma once

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "gradvac/synthetic.hpp"

namespace gradvac {

/// Config-side description of a hand-built quadratic problem.
struct QuadraticSpec {
  struct Task {
    std::string name;
    std::uint64_t size = 1;
    Eigen::VectorXd center;
    // identity | scaled_identity | factor
    std::string curvature_kind = "identity";
    double scale = 1.0;
    Eigen::MatrixXd factor;
  };

  std::size_t dimension = 0;
  std::vector<Task> tasks;
  Eigen::VectorXd initial;  // zeros when the config omits it
  GroupPartition partition;
};

struct ExperimentConfig {
  std::variant<QuadraticSpec, FamilyProblemSpec, LayeredLinearSpec> problem;
  TrainConfig train;

  static ExperimentConfig from_json(const nlohmann::json& j);

  /// Canonical resolved form: every default materialized. Feeding the
  /// result back through from_json yields the same config, and its dump
  /// is the hashing input.
  nlohmann::json to_json() const;
};

std::unique_ptr<SyntheticProblem> build_problem(const ExperimentConfig& cfg);

/// FNV-1a over the canonical serialized config, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

nlohmann::json vaccine_config_to_json(const VaccineConfig& cfg);
VaccineConfig vaccine_config_from_json(const nlohmann::json& j,
                                       const std::string& path);

// --- CLI entry points ----------------------------------------------------
// Each returns a process exit code: 0 success, 2 validation failure,
// 3 divergence or numerical failure. Errors are printed to stderr.

struct SimulateOptions {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed_override;   // vaccine + sampler seeds
  std::optional<std::string> mode_override;
};

struct CombineOptions {
  std::string dump_path;
  std::string config_path;
  std::string out_path;
  std::string report_path;  // optional
  std::string ema_in;       // optional
  std::string ema_out;      // optional; defaults to ema_in
  std::optional<std::uint64_t> seed_override;
  std::optional<std::string> mode_override;
};

struct AnalyzeOptions {
  std::string records_dir;
  std::string out_dir;
  int window = 10;
  std::optional<std::pair<std::int64_t, std::int64_t>> steps;
  std::optional<std::pair<std::string, std::string>> contrast;
};

int run_simulate(const SimulateOptions& opts);
int run_combine(const CombineOptions& opts);
int run_analyze(const AnalyzeOptions& opts);

}  // namespace gradvac
