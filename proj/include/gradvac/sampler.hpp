#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "gradvac/rng.hpp"

namespace gradvac {

// Temperature-scaled size-proportional sampling:
//   P_i proportional to (L_i / sum_j L_j)^(1/T).
// T = 1 reproduces the data distribution exactly; larger T flattens it
// toward uniform.
struct SamplerConfig {
  double temperature = 5.0;
  std::map<int, std::uint64_t> task_sizes;  // all positive
  std::uint64_t seed = 0;

  void validate() const;  // ConfigError
};

std::map<int, double> sampling_distribution(const SamplerConfig& cfg);

class TaskSampler {
 public:
  explicit TaskSampler(SamplerConfig cfg);

  // batch_tasks i.i.d. draws in draw order (duplicates possible).
  std::vector<int> sample_minibatch(int batch_tasks);

  const std::map<int, double>& distribution() const { return probs_; }

 private:
  SamplerConfig cfg_;
  std::map<int, double> probs_;
  std::vector<int> ids_;          // ascending
  std::vector<double> cumulative_;
  Rng rng_;
};

}  // namespace gradvac
