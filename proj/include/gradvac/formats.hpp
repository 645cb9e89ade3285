#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gradvac/analysis.hpp"
#include "gradvac/engine.hpp"

namespace gradvac {

// Every artifact this project reads or writes goes through this module.
// JSON objects serialize with sorted keys and shortest round-trip floats,
// so a given in-memory state always produces the same bytes.

/// Parses text, rethrowing syntax errors as ValidationError with the
/// offending line number and the origin label (usually a file name).
nlohmann::json parse_json_text(const std::string& text,
                               const std::string& origin);

/// Task and group names end up in CSV columns, so they are restricted to
/// [A-Za-z0-9_.:-]+, non-empty. Throws ValidationError.
void validate_identifier(const std::string& name, const std::string& what);

// --- EMA snapshots -------------------------------------------------------

nlohmann::json ema_snapshot_to_json(const EmaStore& store);
EmaStore ema_snapshot_from_json(const nlohmann::json& j);

// --- Gradient dumps ------------------------------------------------------

/// On-disk form of one step's per-task gradients. Task ids are assigned by
/// array position; the partition carries lengths only and offsets are
/// rebuilt cumulatively.
struct GradientDump {
  std::int64_t step = 0;
  GroupPartition partition;
  std::vector<TaskId> tasks;
  std::map<int, std::uint64_t> sizes;
  GradientBundle bundle;
};

nlohmann::json dump_to_json(const GradientDump& dump);
GradientDump dump_from_json(const nlohmann::json& j);

// --- Surgery reports -----------------------------------------------------

nlohmann::json report_to_json(const SurgeryReport& report,
                              const std::map<int, std::string>& names);

// --- CSV artifacts -------------------------------------------------------

/// step,joint,<task name per column>. One row per recorded point.
std::string loss_csv(const std::vector<double>& joint,
                     const std::vector<std::vector<double>>& per_task,
                     const std::vector<TaskId>& tasks);

/// step,group,task_i,task_j,cosine; upper triangle including the diagonal,
/// missing cells simply absent.
std::string similarity_csv(const std::vector<SimilarityRecord>& records,
                           const std::map<int, std::string>& names);

/// Inverse of similarity_csv. `name_to_id` decides matrix ordering and must
/// cover every name in the file.
std::vector<SimilarityRecord> parse_similarity_csv(
    const std::string& text, const std::map<std::string, int>& name_to_id);

/// step,mode,group,task_i,task_j,observed_phi,ema_before,fired,skipped,
/// target_clamped. One row per surgery visit.
std::string surgery_csv(const std::vector<SurgeryReport>& reports,
                        const std::map<int, std::string>& names);

std::vector<SurgeryReport> parse_surgery_csv(
    const std::string& text, const std::map<std::string, int>& name_to_id);

/// step,mode,fired,windowed.
std::string activity_csv(const std::map<std::string, ActivitySeries>& series);

/// step,p0,...,p{d-1}; one row per recorded parameter snapshot.
std::string parameters_csv(const std::vector<Eigen::VectorXd>& snapshots);

// --- Analysis exports ----------------------------------------------------

/// Matrix with explicit task-name ordering header; missing cells are null.
nlohmann::json task_matrix_to_json(const TaskMatrix& matrix,
                                   const std::map<int, std::string>& names,
                                   const std::string& label);

nlohmann::json clustering_to_json(
    const std::map<std::string, ClusteringScore>& per_group);

}  // namespace gradvac
