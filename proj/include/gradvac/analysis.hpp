#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "gradvac/engine.hpp"

namespace gradvac {

/// Square task-by-task matrix with missing-cell tracking. `values` is
/// row-major over `task_ids` (ascending); a cell with count 0 holds NaN.
struct TaskMatrix {
  std::vector<int> task_ids;
  std::vector<double> values;
  std::vector<std::int64_t> counts;

  explicit TaskMatrix(std::vector<int> ids);

  std::size_t index_of(int task) const;  // ValidationError when absent
  double at(std::size_t r, std::size_t c) const;
  std::int64_t count_at(std::size_t r, std::size_t c) const;
  bool missing(std::size_t r, std::size_t c) const;
  void put(std::size_t r, std::size_t c, double value);  // count 1
  std::size_t n() const { return task_ids.size(); }
};

/// Pairwise cosine matrices for one step, one matrix per group. Tasks with
/// degenerate gradients in a group leave their row/column missing.
struct SimilarityRecord {
  std::int64_t step = 0;
  std::map<std::string, TaskMatrix> per_group;
};

/// Pure observation of a bundle; no engine state is touched. The diagonal
/// holds 1 for non-degenerate gradients.
SimilarityRecord record_similarities(const GradientBundle& bundle,
                                     const GroupPartition& partition,
                                     double norm_tolerance = kNormTolerance);

/// Inclusive step filter; defaults cover everything.
struct StepRange {
  std::int64_t first = std::numeric_limits<std::int64_t>::min();
  std::int64_t last = std::numeric_limits<std::int64_t>::max();
};

/// Cell-wise mean over steps for one group. Task set is the union over the
/// selected records; counts report per-cell sample sizes, all-missing cells
/// stay missing. Throws when no selected record carries the group.
TaskMatrix aggregate_over_steps(const std::vector<SimilarityRecord>& records,
                                const std::string& group,
                                StepRange range = {});

/// Cell-wise mean(group_a) - mean(group_b); missing where either side is.
TaskMatrix group_contrast(const std::vector<SimilarityRecord>& records,
                          const std::string& group_a,
                          const std::string& group_b, StepRange range = {});

struct ClusteringScore {
  double within_mean = 0.0;
  double cross_mean = 0.0;
  double margin = 0.0;  // within_mean - cross_mean
  std::int64_t within_cells = 0;
  std::int64_t cross_cells = 0;
};

/// Off-diagonal cells of `aggregate` split by family co-membership. Every
/// task must be assigned; an all-singleton assignment (or one that leaves
/// no usable within cell) is an error.
ClusteringScore clustering_score(const TaskMatrix& aggregate,
                                 const std::map<int, int>& family_of);

struct ActivitySeries {
  std::vector<std::int64_t> steps;
  std::vector<std::int64_t> fired;
  std::vector<std::int64_t> windowed;  // trailing window sums
};

/// Fired counts per step keyed by mode name, plus trailing-window sums.
/// window >= 1.
std::map<std::string, ActivitySeries> activity_counts(
    const std::vector<SurgeryReport>& reports, int window);

}  // namespace gradvac
