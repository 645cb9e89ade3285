#include "gradvac/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "gradvac/errors.hpp"

namespace gradvac {

namespace {
constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
}

TaskMatrix::TaskMatrix(std::vector<int> ids) : task_ids(std::move(ids)) {
  if (task_ids.empty()) throw ValidationError("task matrix with no tasks");
  if (!std::is_sorted(task_ids.begin(), task_ids.end()) ||
      std::adjacent_find(task_ids.begin(), task_ids.end()) != task_ids.end()) {
    throw ValidationError("task matrix ids must be strictly ascending");
  }
  values.assign(task_ids.size() * task_ids.size(), kMissing);
  counts.assign(task_ids.size() * task_ids.size(), 0);
}

std::size_t TaskMatrix::index_of(int task) const {
  const auto it = std::lower_bound(task_ids.begin(), task_ids.end(), task);
  if (it == task_ids.end() || *it != task) {
    throw ValidationError("task " + std::to_string(task) + " not in matrix");
  }
  return static_cast<std::size_t>(it - task_ids.begin());
}

double TaskMatrix::at(std::size_t r, std::size_t c) const {
  return values[r * n() + c];
}

std::int64_t TaskMatrix::count_at(std::size_t r, std::size_t c) const {
  return counts[r * n() + c];
}

bool TaskMatrix::missing(std::size_t r, std::size_t c) const {
  return counts[r * n() + c] == 0;
}

void TaskMatrix::put(std::size_t r, std::size_t c, double value) {
  values[r * n() + c] = value;
  counts[r * n() + c] = 1;
}

SimilarityRecord record_similarities(const GradientBundle& bundle,
                                     const GroupPartition& partition,
                                     double norm_tolerance) {
  bundle.validate_against(partition);
  if (bundle.per_task.empty()) throw ValidationError("gradient bundle is empty");

  SimilarityRecord rec;
  rec.step = bundle.step;
  const std::vector<int> ids = bundle.task_ids();

  for (const auto& group : partition.groups) {
    TaskMatrix m(ids);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const GradVector& a = bundle.per_task.at(ids[r]).at(group.name);
      if (a.norm() < norm_tolerance) continue;  // row stays missing
      m.put(r, r, 1.0);
      for (std::size_t c = r + 1; c < ids.size(); ++c) {
        const GradVector& b = bundle.per_task.at(ids[c]).at(group.name);
        const CosineResult cr = cosine(a, b, norm_tolerance);
        if (cr.degenerate) continue;
        m.put(r, c, cr.value);
        m.put(c, r, cr.value);
      }
    }
    rec.per_group.emplace(group.name, std::move(m));
  }
  return rec;
}

namespace {

bool in_range(std::int64_t step, const StepRange& range) {
  return step >= range.first && step <= range.last;
}

// Union of task ids over records that hold `group` within the range.
std::vector<int> union_tasks(const std::vector<SimilarityRecord>& records,
                             const std::string& group, const StepRange& range) {
  std::set<int> ids;
  for (const auto& rec : records) {
    if (!in_range(rec.step, range)) continue;
    const auto it = rec.per_group.find(group);
    if (it == rec.per_group.end()) continue;
    ids.insert(it->second.task_ids.begin(), it->second.task_ids.end());
  }
  if (ids.empty()) {
    throw ValidationError("no record carries group '" + group +
                          "' in the requested step range");
  }
  return {ids.begin(), ids.end()};
}

}  // namespace

TaskMatrix aggregate_over_steps(const std::vector<SimilarityRecord>& records,
                                const std::string& group, StepRange range) {
  if (records.empty()) throw ValidationError("no similarity records");
  TaskMatrix out(union_tasks(records, group, range));
  const std::size_t n = out.n();
  std::vector<double> sums(n * n, 0.0);
  std::vector<std::int64_t> cnt(n * n, 0);

  for (const auto& rec : records) {
    if (!in_range(rec.step, range)) continue;
    const auto it = rec.per_group.find(group);
    if (it == rec.per_group.end()) continue;
    const TaskMatrix& m = it->second;
    for (std::size_t r = 0; r < m.n(); ++r) {
      const std::size_t R = out.index_of(m.task_ids[r]);
      for (std::size_t c = 0; c < m.n(); ++c) {
        if (m.missing(r, c)) continue;
        const std::size_t C = out.index_of(m.task_ids[c]);
        sums[R * n + C] += m.at(r, c);
        cnt[R * n + C] += 1;
      }
    }
  }

  for (std::size_t k = 0; k < n * n; ++k) {
    if (cnt[k] > 0) {
      out.values[k] = sums[k] / static_cast<double>(cnt[k]);
      out.counts[k] = cnt[k];
    }
  }
  return out;
}

TaskMatrix group_contrast(const std::vector<SimilarityRecord>& records,
                          const std::string& group_a, const std::string& group_b,
                          StepRange range) {
  const TaskMatrix a = aggregate_over_steps(records, group_a, range);
  const TaskMatrix b = aggregate_over_steps(records, group_b, range);

  std::set<int> ids(a.task_ids.begin(), a.task_ids.end());
  ids.insert(b.task_ids.begin(), b.task_ids.end());
  TaskMatrix out(std::vector<int>(ids.begin(), ids.end()));

  for (std::size_t r = 0; r < out.n(); ++r) {
    for (std::size_t c = 0; c < out.n(); ++c) {
      const int ti = out.task_ids[r];
      const int tj = out.task_ids[c];
      const auto cell = [&](const TaskMatrix& m) -> const double* {
        const auto it = std::lower_bound(m.task_ids.begin(), m.task_ids.end(), ti);
        const auto jt = std::lower_bound(m.task_ids.begin(), m.task_ids.end(), tj);
        if (it == m.task_ids.end() || *it != ti) return nullptr;
        if (jt == m.task_ids.end() || *jt != tj) return nullptr;
        const std::size_t R = static_cast<std::size_t>(it - m.task_ids.begin());
        const std::size_t C = static_cast<std::size_t>(jt - m.task_ids.begin());
        return m.missing(R, C) ? nullptr : &m.values[R * m.n() + C];
      };
      const double* va = cell(a);
      const double* vb = cell(b);
      if (va != nullptr && vb != nullptr) out.put(r, c, *va - *vb);
    }
  }
  return out;
}

ClusteringScore clustering_score(const TaskMatrix& aggregate,
                                 const std::map<int, int>& family_of) {
  for (int id : aggregate.task_ids) {
    if (family_of.find(id) == family_of.end()) {
      throw ValidationError("task " + std::to_string(id) +
                            " has no family assignment");
    }
  }

  std::map<int, int> family_sizes;
  for (int id : aggregate.task_ids) family_sizes[family_of.at(id)]++;
  const bool any_pair = std::any_of(
      family_sizes.begin(), family_sizes.end(),
      [](const auto& kv) { return kv.second >= 2; });
  if (!any_pair) {
    throw ConfigError("all families are singletons; no within-family cells");
  }

  ClusteringScore score;
  double within_sum = 0.0;
  double cross_sum = 0.0;
  for (std::size_t r = 0; r < aggregate.n(); ++r) {
    for (std::size_t c = 0; c < aggregate.n(); ++c) {
      if (r == c || aggregate.missing(r, c)) continue;
      const bool same = family_of.at(aggregate.task_ids[r]) ==
                        family_of.at(aggregate.task_ids[c]);
      if (same) {
        within_sum += aggregate.at(r, c);
        score.within_cells++;
      } else {
        cross_sum += aggregate.at(r, c);
        score.cross_cells++;
      }
    }
  }
  if (score.within_cells == 0) {
    throw ValidationError("no non-missing within-family cells");
  }
  if (score.cross_cells == 0) {
    throw ValidationError("no non-missing cross-family cells");
  }
  score.within_mean = within_sum / static_cast<double>(score.within_cells);
  score.cross_mean = cross_sum / static_cast<double>(score.cross_cells);
  score.margin = score.within_mean - score.cross_mean;
  return score;
}

std::map<std::string, ActivitySeries> activity_counts(
    const std::vector<SurgeryReport>& reports, int window) {
  if (window < 1) throw ConfigError("activity window must be >= 1");

  std::map<std::string, ActivitySeries> out;
  for (const auto& rep : reports) {
    ActivitySeries& series = out[to_string(rep.mode)];
    series.steps.push_back(rep.step);
    series.fired.push_back(rep.fired_total);
  }
  for (auto& [_, series] : out) {
    series.windowed.resize(series.fired.size());
    for (std::size_t k = 0; k < series.fired.size(); ++k) {
      const std::size_t lo = k + 1 >= static_cast<std::size_t>(window)
                                 ? k + 1 - static_cast<std::size_t>(window)
                                 : 0;
      std::int64_t sum = 0;
      for (std::size_t s = lo; s <= k; ++s) sum += series.fired[s];
      series.windowed[k] = sum;
    }
  }
  return out;
}

}  // namespace gradvac
