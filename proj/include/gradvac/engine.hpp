#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "gradvac/geometry.hpp"
#include "gradvac/rng.hpp"

namespace gradvac {

/// Dense task identity. Ids run 0..n-1; names label exports.
struct TaskId {
  int id = 0;
  std::string name;
};

/// Contiguous slice of the flat parameter vector.
struct ParameterGroup {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
};

/// Disjoint, exhaustive split of the parameter vector. Groups are kept in
/// layout order; offsets are cumulative.
struct GroupPartition {
  std::vector<ParameterGroup> groups;
  // whole_model | enc_dec | all_layer | all_matrix | custom
  std::string granularity_label = "custom";

  /// Unique non-empty names, positive lengths, offsets tiling [0, total).
  void validate() const;
  std::size_t total_parameters() const;
  const ParameterGroup* find(const std::string& name) const;

  static GroupPartition whole_model(std::size_t dim);
};

/// Per-task, per-group gradients for one optimization step.
struct GradientBundle {
  std::int64_t step = 0;
  std::map<int, std::map<std::string, GradVector>> per_task;

  std::vector<int> task_ids() const;  // ascending

  /// Every task must carry exactly the partition's groups, with matching
  /// lengths and group ids. Throws ValidationError / DimensionError.
  void validate_against(const GroupPartition& partition) const;
};

/// Exponential moving average of observed pairwise cosines, keyed by the
/// DIRECTED pair (i, j) and group. (i, j) and (j, i) evolve independently
/// because they are observed at different points of the surgery sweep.
/// Absent keys read as 0. Stored values stay in [-1, 1].
class EmaStore {
 public:
  /// beta in (0, 1].
  explicit EmaStore(double beta);

  double beta() const { return beta_; }
  double get(int i, int j, const std::string& group) const;

  /// v <- (1 - beta) v + beta observed; observed must lie in [-1, 1].
  void update(int i, int j, const std::string& group, double observed);

  /// Restore path; value must lie in [-1, 1].
  void set(int i, int j, const std::string& group, double value);

  std::size_t size() const { return values_.size(); }

  struct Entry {
    int i = 0;
    int j = 0;
    std::string group;
    double value = 0.0;
  };
  std::vector<Entry> entries() const;  // sorted by (i, j, group)

 private:
  double beta_;
  std::map<std::tuple<int, int, std::string>, double> values_;
};

/// Reference value for EmaStore: beta * sum_s (1-beta)^(t-s) phi_s over the
/// full history, accumulated in extended precision. Kept deliberately
/// separate from the recursive update so the two can check each other.
double ema_closed_form(const std::vector<double>& history, double beta);

enum class SurgeryMode { gradvac, pcgrad, fixed_target, sum_baseline };
enum class TaskSubset { all_task, explicit_set, hrl_only, lrl_only };

const char* to_string(SurgeryMode mode);
const char* to_string(TaskSubset subset);
SurgeryMode surgery_mode_from_string(const std::string& s);   // ConfigError
TaskSubset task_subset_from_string(const std::string& s);     // ConfigError

struct VaccineConfig {
  SurgeryMode mode = SurgeryMode::gradvac;
  double fixed_target = 0.0;  // only read in fixed_target mode

  TaskSubset task_subset = TaskSubset::all_task;
  std::set<int> explicit_subset;            // for explicit_set
  std::uint64_t hrl_threshold = 10000000;   // size >= threshold is high-resource

  double beta = 0.01;
  std::uint64_t seed = 0;
  bool preserve_norm = false;
  bool freeze_ema = false;  // diagnostic: surgery runs but EMA is not advanced
  double norm_tolerance = kNormTolerance;
  double target_clamp = kTargetClamp;

  void validate() const;  // ConfigError
};

/// Tasks whose gradients get altered. Pairwise geometry still sees every
/// task in the batch; membership only gates the i side.
std::set<int> resolve_task_subset(const VaccineConfig& cfg,
                                  const std::map<int, std::uint64_t>& task_sizes);

/// One (i, j, group) visit during a surgery sweep. `ema_before` is the
/// firing threshold in effect: the stored EMA for gradvac, 0 for pcgrad,
/// the configured value for fixed_target.
struct SurgeryEntry {
  int task_i = 0;
  int task_j = 0;
  std::string group;
  double observed_phi = 0.0;
  double ema_before = 0.0;
  bool fired = false;
  bool skipped = false;          // degenerate pair, nothing observed
  bool target_clamped = false;
};

struct SurgeryReport {
  std::int64_t step = 0;
  SurgeryMode mode = SurgeryMode::gradvac;
  std::vector<SurgeryEntry> entries;
  std::int64_t fired_total = 0;
  std::int64_t eligible_total = 0;  // visits that produced a usable cosine
};

struct CombineResult {
  std::map<std::string, GradVector> combined;  // one vector per group
  SurgeryReport report;
};

/// One full surgery sweep over the batch.
///
/// Per group, every task starts from a working copy of its gradient. Tasks
/// in `surgery_tasks` are visited in ascending id order; for each, the
/// other batch members are visited in a freshly shuffled order drawn from
/// a per-group substream of `rng` (so group results do not depend on group
/// iteration order). The observed cosine is taken between the task's
/// RUNNING working copy and the partner's ORIGINAL gradient; surgery fires
/// strictly below the threshold. In gradvac mode the EMA advances with the
/// observed value whether or not surgery fired (unless frozen). Degenerate
/// pairs are recorded as skipped and leave the EMA untouched.
///
/// sum_baseline bypasses the sweep entirely: plain per-group sums, empty
/// report entries. Inputs are validated before any state is mutated;
/// on throw, `ema` is unchanged. `rng` advances exactly once per call.
CombineResult combine_step(const GradientBundle& bundle,
                           const GroupPartition& partition, EmaStore& ema,
                           const VaccineConfig& cfg,
                           const std::set<int>& surgery_tasks, Rng& rng);

}  // namespace gradvac
