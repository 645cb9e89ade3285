#include "gradvac/engine.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "gradvac/errors.hpp"

namespace gradvac {

void GroupPartition::validate() const {
  if (groups.empty()) throw ValidationError("partition has no groups");
  std::set<std::string> seen;
  std::size_t expect = 0;
  for (const auto& g : groups) {
    if (g.name.empty()) throw ValidationError("partition group with empty name");
    if (!seen.insert(g.name).second) {
      throw ValidationError("duplicate partition group '" + g.name + "'");
    }
    if (g.length == 0) {
      throw ValidationError("partition group '" + g.name + "' has zero length");
    }
    if (g.offset != expect) {
      throw ValidationError("partition group '" + g.name +
                            "' breaks contiguity (offset " +
                            std::to_string(g.offset) + ", expected " +
                            std::to_string(expect) + ")");
    }
    expect += g.length;
  }
}

std::size_t GroupPartition::total_parameters() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.length;
  return n;
}

const ParameterGroup* GroupPartition::find(const std::string& name) const {
  for (const auto& g : groups) {
    if (g.name == name) return &g;
  }
  return nullptr;
}

GroupPartition GroupPartition::whole_model(std::size_t dim) {
  if (dim == 0) throw ValidationError("whole_model partition needs dim >= 1");
  GroupPartition p;
  p.groups.push_back({"model", 0, dim});
  p.granularity_label = "whole_model";
  return p;
}

std::vector<int> GradientBundle::task_ids() const {
  std::vector<int> ids;
  ids.reserve(per_task.size());
  for (const auto& [id, _] : per_task) ids.push_back(id);
  return ids;
}

void GradientBundle::validate_against(const GroupPartition& partition) const {
  partition.validate();
  for (const auto& [id, groups] : per_task) {
    const std::string who = "task " + std::to_string(id);
    if (groups.size() != partition.groups.size()) {
      throw ValidationError(who + " carries " + std::to_string(groups.size()) +
                            " groups, partition has " +
                            std::to_string(partition.groups.size()));
    }
    for (const auto& pg : partition.groups) {
      auto it = groups.find(pg.name);
      if (it == groups.end()) {
        throw ValidationError(who + " is missing group '" + pg.name + "'");
      }
      if (it->second.values.size() != pg.length) {
        throw DimensionError(who + " group '" + pg.name + "' has length " +
                             std::to_string(it->second.values.size()) +
                             ", partition says " + std::to_string(pg.length));
      }
      if (it->second.group_id != pg.name) {
        throw ValidationError(who + " group '" + pg.name +
                              "' carries mismatched id '" +
                              it->second.group_id + "'");
      }
    }
  }
}

EmaStore::EmaStore(double beta) : beta_(beta) {
  if (!(beta > 0.0) || !(beta <= 1.0)) {
    throw ConfigError("ema beta must be in (0, 1]");
  }
}

double EmaStore::get(int i, int j, const std::string& group) const {
  const auto it = values_.find(std::make_tuple(i, j, group));
  return it == values_.end() ? 0.0 : it->second;
}

void EmaStore::update(int i, int j, const std::string& group, double observed) {
  if (!(observed >= -1.0 && observed <= 1.0)) {
    throw ValidationError("ema observation outside [-1, 1]");
  }
  double& slot = values_[std::make_tuple(i, j, group)];
  // Convex combination of in-range values; the clamp only absorbs the last
  // rounding step.
  slot = std::clamp((1.0 - beta_) * slot + beta_ * observed, -1.0, 1.0);
}

void EmaStore::set(int i, int j, const std::string& group, double value) {
  if (!(value >= -1.0 && value <= 1.0)) {
    throw ValidationError("ema value outside [-1, 1]");
  }
  values_[std::make_tuple(i, j, group)] = value;
}

std::vector<EmaStore::Entry> EmaStore::entries() const {
  std::vector<Entry> out;
  out.reserve(values_.size());
  for (const auto& [key, value] : values_) {
    out.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), value});
  }
  return out;
}

double ema_closed_form(const std::vector<double>& history, double beta) {
  if (!(beta > 0.0) || !(beta <= 1.0)) {
    throw ConfigError("ema beta must be in (0, 1]");
  }
  long double acc = 0.0L;
  long double weight = beta;
  const long double decay = 1.0L - static_cast<long double>(beta);
  for (std::size_t k = history.size(); k > 0; --k) {
    acc += weight * static_cast<long double>(history[k - 1]);
    weight *= decay;
  }
  return static_cast<double>(acc);
}

const char* to_string(SurgeryMode mode) {
  switch (mode) {
    case SurgeryMode::gradvac: return "gradvac";
    case SurgeryMode::pcgrad: return "pcgrad";
    case SurgeryMode::fixed_target: return "fixed_target";
    case SurgeryMode::sum_baseline: return "sum_baseline";
  }
  return "unknown";
}

const char* to_string(TaskSubset subset) {
  switch (subset) {
    case TaskSubset::all_task: return "all_task";
    case TaskSubset::explicit_set: return "explicit";
    case TaskSubset::hrl_only: return "hrl_only";
    case TaskSubset::lrl_only: return "lrl_only";
  }
  return "unknown";
}

SurgeryMode surgery_mode_from_string(const std::string& s) {
  if (s == "gradvac") return SurgeryMode::gradvac;
  if (s == "pcgrad") return SurgeryMode::pcgrad;
  if (s == "fixed_target") return SurgeryMode::fixed_target;
  if (s == "sum_baseline") return SurgeryMode::sum_baseline;
  throw ConfigError("unknown surgery mode '" + s + "'");
}

TaskSubset task_subset_from_string(const std::string& s) {
  if (s == "all_task") return TaskSubset::all_task;
  if (s == "explicit") return TaskSubset::explicit_set;
  if (s == "hrl_only") return TaskSubset::hrl_only;
  if (s == "lrl_only") return TaskSubset::lrl_only;
  throw ConfigError("unknown task subset '" + s + "'");
}

void VaccineConfig::validate() const {
  if (!(beta > 0.0) || !(beta <= 1.0)) {
    throw ConfigError("vaccine beta must be in (0, 1]");
  }
  if (mode == SurgeryMode::fixed_target &&
      !(fixed_target >= -1.0 && fixed_target <= 1.0)) {
    throw ConfigError("fixed_target must lie in [-1, 1]");
  }
  if (task_subset == TaskSubset::explicit_set && explicit_subset.empty()) {
    throw ConfigError("explicit task subset is empty");
  }
  if (!(norm_tolerance > 0.0) || !std::isfinite(norm_tolerance)) {
    throw ConfigError("norm_tolerance must be positive and finite");
  }
  if (!(target_clamp > 0.0) || !(target_clamp < 1.0)) {
    throw ConfigError("target_clamp must lie in (0, 1)");
  }
}

std::set<int> resolve_task_subset(const VaccineConfig& cfg,
                                  const std::map<int, std::uint64_t>& task_sizes) {
  std::set<int> out;
  switch (cfg.task_subset) {
    case TaskSubset::all_task:
      for (const auto& [id, _] : task_sizes) out.insert(id);
      break;
    case TaskSubset::explicit_set:
      for (int id : cfg.explicit_subset) {
        if (task_sizes.find(id) == task_sizes.end()) {
          throw ConfigError("explicit task subset references unknown task id " +
                            std::to_string(id));
        }
        out.insert(id);
      }
      break;
    case TaskSubset::hrl_only:
      for (const auto& [id, size] : task_sizes) {
        if (size >= cfg.hrl_threshold) out.insert(id);
      }
      break;
    case TaskSubset::lrl_only:
      for (const auto& [id, size] : task_sizes) {
        if (size < cfg.hrl_threshold) out.insert(id);
      }
      break;
  }
  if (out.empty()) {
    throw ConfigError("resolved task subset '" +
                      std::string(to_string(cfg.task_subset)) + "' is empty");
  }
  return out;
}

namespace {

GradVector sum_over_tasks(const GradientBundle& bundle,
                          const std::map<int, GradVector>* working,
                          const ParameterGroup& group) {
  std::vector<double> acc(group.length, 0.0);
  for (const auto& [id, groups] : bundle.per_task) {
    const GradVector& v =
        working != nullptr ? working->at(id) : groups.at(group.name);
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += v.values[k];
  }
  return GradVector(std::move(acc), group.name);
}

}  // namespace

CombineResult combine_step(const GradientBundle& bundle,
                           const GroupPartition& partition, EmaStore& ema,
                           const VaccineConfig& cfg,
                           const std::set<int>& surgery_tasks, Rng& rng) {
  cfg.validate();
  bundle.validate_against(partition);
  if (bundle.per_task.empty()) throw ValidationError("gradient bundle is empty");
  if (ema.beta() != cfg.beta) {
    throw ConfigError("ema store beta does not match config beta");
  }

  const std::uint64_t stream_seed = rng();

  CombineResult result{{}, {}};
  result.report.step = bundle.step;
  result.report.mode = cfg.mode;

  if (cfg.mode == SurgeryMode::sum_baseline) {
    for (const auto& group : partition.groups) {
      result.combined.emplace(group.name,
                              sum_over_tasks(bundle, nullptr, group));
    }
    return result;
  }

  const std::vector<int> batch = bundle.task_ids();

  for (const auto& group : partition.groups) {
    // Per-group substream: results are invariant under reordering of the
    // partition itself.
    Rng group_rng = substream(stream_seed, group.name);

    std::map<int, GradVector> working;
    for (int id : batch) {
      working.emplace(id, bundle.per_task.at(id).at(group.name));
    }

    for (int i : batch) {
      if (surgery_tasks.find(i) == surgery_tasks.end()) continue;

      std::vector<int> partners;
      partners.reserve(batch.size() - 1);
      for (int j : batch) {
        if (j != i) partners.push_back(j);
      }
      fisher_yates(partners, group_rng);

      for (int j : partners) {
        const GradVector& orig_j = bundle.per_task.at(j).at(group.name);
        GradVector& g_i = working.at(i);

        SurgeryEntry entry;
        entry.task_i = i;
        entry.task_j = j;
        entry.group = group.name;

        const CosineResult c = cosine(g_i, orig_j, cfg.norm_tolerance);
        if (c.degenerate) {
          entry.skipped = true;
          result.report.entries.push_back(std::move(entry));
          continue;
        }

        result.report.eligible_total++;
        entry.observed_phi = c.value;

        double target = 0.0;
        if (cfg.mode == SurgeryMode::gradvac) {
          target = ema.get(i, j, group.name);
        } else if (cfg.mode == SurgeryMode::fixed_target) {
          target = cfg.fixed_target;
        }
        entry.ema_before = target;
        entry.fired = c.value < target;

        if (entry.fired) {
          const double pre_norm = g_i.norm();
          AlignResult aligned =
              cfg.mode == SurgeryMode::pcgrad
                  ? pcgrad_project(g_i, orig_j, cfg.norm_tolerance)
                  : vaccine_align(g_i, orig_j, target, cfg.norm_tolerance,
                                  cfg.target_clamp);
          entry.target_clamped = aligned.target_clamped;
          if (cfg.preserve_norm && !aligned.skipped) {
            aligned = rescale_to_norm(aligned.gradient, pre_norm,
                                      cfg.norm_tolerance);
          }
          working.at(i) = std::move(aligned.gradient);
          result.report.fired_total++;
        }

        if (cfg.mode == SurgeryMode::gradvac && !cfg.freeze_ema) {
          ema.update(i, j, group.name, c.value);
        }
        result.report.entries.push_back(std::move(entry));
      }
    }

    result.combined.emplace(group.name, sum_over_tasks(bundle, &working, group));
  }

  return result;
}

}  // namespace gradvac
