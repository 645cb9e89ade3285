#include "gradvac/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "gradvac/errors.hpp"

namespace gradvac {

void SamplerConfig::validate() const {
  if (!(temperature >= 1.0) || !std::isfinite(temperature)) {
    throw ConfigError("sampler temperature must be finite and >= 1");
  }
  if (task_sizes.empty()) throw ConfigError("sampler needs at least one task");
  for (const auto& [id, size] : task_sizes) {
    if (size == 0) {
      throw ConfigError("task " + std::to_string(id) + " has zero size");
    }
  }
}

std::map<int, double> sampling_distribution(const SamplerConfig& cfg) {
  cfg.validate();

  double total = 0.0;
  for (const auto& [_, size] : cfg.task_sizes) total += static_cast<double>(size);

  std::map<int, double> probs;
  if (cfg.temperature == 1.0) {
    // Exact proportionality, no pow round-trip.
    for (const auto& [id, size] : cfg.task_sizes) {
      probs[id] = static_cast<double>(size) / total;
    }
    return probs;
  }

  const double inv_t = 1.0 / cfg.temperature;
  double norm = 0.0;
  for (const auto& [id, size] : cfg.task_sizes) {
    const double w = std::pow(static_cast<double>(size) / total, inv_t);
    probs[id] = w;
    norm += w;
  }
  for (auto& [_, p] : probs) p /= norm;
  return probs;
}

TaskSampler::TaskSampler(SamplerConfig cfg)
    : cfg_(std::move(cfg)),
      probs_(sampling_distribution(cfg_)),
      rng_(mix64(cfg_.seed)) {
  double acc = 0.0;
  for (const auto& [id, p] : probs_) {
    ids_.push_back(id);
    acc += p;
    cumulative_.push_back(acc);
  }
  cumulative_.back() = 1.0;  // absorb rounding in the final bin
}

std::vector<int> TaskSampler::sample_minibatch(int batch_tasks) {
  if (batch_tasks < 1) throw ConfigError("batch_tasks must be >= 1");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(batch_tasks));
  for (int n = 0; n < batch_tasks; ++n) {
    const double u = uniform_unit(rng_);
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    const std::size_t idx = std::min(
        static_cast<std::size_t>(it - cumulative_.begin()), ids_.size() - 1);
    out.push_back(ids_[idx]);
  }
  return out;
}

}  // namespace gradvac
