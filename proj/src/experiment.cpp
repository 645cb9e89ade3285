#include "gradvac/experiment.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "gradvac/errors.hpp"
#include "gradvac/formats.hpp"
#include "gradvac/log.hpp"
#include "gradvac/numfmt.hpp"
#include "gradvac/version.hpp"
#include "json_util.hpp"

namespace gradvac {

namespace fs = std::filesystem;
using nlohmann::json;
namespace ju = jsonutil;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw ValidationError("error while reading '" + path + "'");
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out << content;
  out.flush();
  if (!out) throw ValidationError("error while writing '" + path.string() + "'");
}

std::string json_text(const json& j) { return j.dump(1) + "\n"; }

Eigen::VectorXd vector_from_json(const json& j, const std::string& path) {
  const json& arr = ju::as_array(j, path);
  if (arr.empty()) ju::fail(path, "empty vector");
  Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
  Eigen::Index k = 0;
  for (const auto& x : arr) v(k++) = ju::as_double(x, path);
  return v;
}

json vector_to_json(const Eigen::VectorXd& v) {
  json arr = json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k) arr.push_back(v(k));
  return arr;
}

Eigen::MatrixXd matrix_from_json(const json& j, const std::string& path) {
  const json& rows = ju::as_array(j, path);
  if (rows.empty()) ju::fail(path, "empty matrix");
  Eigen::MatrixXd m;
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    const Eigen::VectorXd v = vector_from_json(row, path);
    if (r == 0) {
      m.resize(static_cast<Eigen::Index>(rows.size()), v.size());
    } else if (v.size() != m.cols()) {
      ju::fail(path, "ragged matrix rows");
    }
    m.row(r++) = v.transpose();
  }
  return m;
}

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    rows.push_back(vector_to_json(m.row(r).transpose()));
  }
  return rows;
}

GroupPartition partition_from_json(const json* j, std::size_t dimension,
                                   const std::string& path) {
  if (j == nullptr) return GroupPartition::whole_model(dimension);
  ju::check_keys(*j, {"granularity", "groups"}, path);
  const std::string granularity = ju::as_string(
      ju::member(*j, "granularity", path), path + ".granularity");
  const json* groups = ju::opt_member(*j, "groups", path);
  if (groups == nullptr) {
    if (granularity != "whole_model") {
      ju::fail(path, "granularity '" + granularity + "' needs explicit groups");
    }
    return GroupPartition::whole_model(dimension);
  }
  GroupPartition partition;
  partition.granularity_label = granularity;
  std::size_t offset = 0;
  std::size_t idx = 0;
  for (const auto& g : ju::as_array(*groups, path + ".groups")) {
    const std::string gpath = path + ".groups[" + std::to_string(idx++) + "]";
    ju::check_keys(g, {"name", "length"}, gpath);
    const std::string name =
        ju::as_string(ju::member(g, "name", gpath), gpath + ".name");
    validate_identifier(name, gpath + ".name");
    const std::uint64_t length =
        ju::as_uint(ju::member(g, "length", gpath), gpath + ".length");
    if (length == 0) ju::fail(gpath + ".length", "must be >= 1");
    partition.groups.push_back({name, offset, static_cast<std::size_t>(length)});
    offset += static_cast<std::size_t>(length);
  }
  partition.validate();
  if (partition.total_parameters() != dimension) {
    ju::fail(path, "group lengths sum to " +
                       std::to_string(partition.total_parameters()) +
                       ", dimension is " + std::to_string(dimension));
  }
  return partition;
}

json partition_to_json(const GroupPartition& partition) {
  json groups = json::array();
  for (const auto& g : partition.groups) {
    groups.push_back(json{{"name", g.name}, {"length", g.length}});
  }
  return json{{"granularity", partition.granularity_label},
              {"groups", std::move(groups)}};
}

QuadraticSpec quadratic_from_json(const json& j, const std::string& path) {
  ju::check_keys(j, {"type", "dimension", "tasks", "initial_point", "partition"},
                 path);
  QuadraticSpec spec;
  spec.dimension = static_cast<std::size_t>(
      ju::as_uint(ju::member(j, "dimension", path), path + ".dimension"));
  if (spec.dimension == 0) ju::fail(path + ".dimension", "must be >= 1");

  const json& tasks = ju::as_array(ju::member(j, "tasks", path), path + ".tasks");
  if (tasks.empty()) ju::fail(path + ".tasks", "no tasks");
  std::size_t idx = 0;
  for (const auto& t : tasks) {
    const std::string tpath = path + ".tasks[" + std::to_string(idx++) + "]";
    ju::check_keys(t, {"name", "size", "center", "curvature"}, tpath);
    QuadraticSpec::Task task;
    task.name = ju::as_string(ju::member(t, "name", tpath), tpath + ".name");
    validate_identifier(task.name, tpath + ".name");
    task.size = ju::as_uint(ju::member(t, "size", tpath), tpath + ".size");
    if (task.size == 0) ju::fail(tpath + ".size", "must be >= 1");
    task.center =
        vector_from_json(ju::member(t, "center", tpath), tpath + ".center");
    if (static_cast<std::size_t>(task.center.size()) != spec.dimension) {
      ju::fail(tpath + ".center", "wrong dimension");
    }

    const json& cur = ju::member(t, "curvature", tpath);
    const std::string cpath = tpath + ".curvature";
    task.curvature_kind =
        ju::as_string(ju::member(cur, "kind", cpath), cpath + ".kind");
    if (task.curvature_kind == "identity") {
      ju::check_keys(cur, {"kind"}, cpath);
      task.scale = 1.0;
    } else if (task.curvature_kind == "scaled_identity") {
      ju::check_keys(cur, {"kind", "scale"}, cpath);
      task.scale = ju::as_double(ju::member(cur, "scale", cpath), cpath + ".scale");
      if (!(task.scale >= 0.0)) ju::fail(cpath + ".scale", "must be >= 0");
    } else if (task.curvature_kind == "factor") {
      ju::check_keys(cur, {"kind", "rows"}, cpath);
      task.factor =
          matrix_from_json(ju::member(cur, "rows", cpath), cpath + ".rows");
      if (static_cast<std::size_t>(task.factor.cols()) != spec.dimension) {
        ju::fail(cpath + ".rows", "factor columns must match dimension");
      }
    } else {
      ju::fail(cpath + ".kind",
               "unknown curvature kind '" + task.curvature_kind + "'");
    }
    spec.tasks.push_back(std::move(task));
  }

  const json* initial = ju::opt_member(j, "initial_point", path);
  spec.initial = initial != nullptr
                     ? vector_from_json(*initial, path + ".initial_point")
                     : Eigen::VectorXd::Zero(spec.dimension).eval();
  if (static_cast<std::size_t>(spec.initial.size()) != spec.dimension) {
    ju::fail(path + ".initial_point", "wrong dimension");
  }

  spec.partition = partition_from_json(ju::opt_member(j, "partition", path),
                                       spec.dimension, path + ".partition");
  return spec;
}

json quadratic_to_json(const QuadraticSpec& spec) {
  json tasks = json::array();
  for (const auto& t : spec.tasks) {
    json cur;
    if (t.curvature_kind == "identity") {
      cur = json{{"kind", "identity"}};
    } else if (t.curvature_kind == "scaled_identity") {
      cur = json{{"kind", "scaled_identity"}, {"scale", t.scale}};
    } else {
      cur = json{{"kind", "factor"}, {"rows", matrix_to_json(t.factor)}};
    }
    tasks.push_back(json{{"name", t.name},
                         {"size", t.size},
                         {"center", vector_to_json(t.center)},
                         {"curvature", std::move(cur)}});
  }
  return json{{"type", "quadratic"},
              {"dimension", spec.dimension},
              {"initial_point", vector_to_json(spec.initial)},
              {"partition", partition_to_json(spec.partition)},
              {"tasks", std::move(tasks)}};
}

FamilyProblemSpec family_from_json(const json& j, const std::string& path) {
  ju::check_keys(j,
                 {"type", "num_families", "tasks_per_family", "dimension",
                  "cross_family_angle_deg", "within_family_noise",
                  "center_radius", "layout", "curvature_scale",
                  "construction_seed", "task_sizes", "initial_point"},
                 path);
  FamilyProblemSpec spec;
  spec.num_families = static_cast<int>(ju::as_int(
      ju::member(j, "num_families", path), path + ".num_families"));
  spec.tasks_per_family = static_cast<int>(ju::as_int(
      ju::member(j, "tasks_per_family", path), path + ".tasks_per_family"));
  spec.dimension = static_cast<std::size_t>(
      ju::as_uint(ju::member(j, "dimension", path), path + ".dimension"));
  if (const json* v = ju::opt_member(j, "cross_family_angle_deg", path)) {
    spec.cross_family_angle_deg = ju::as_double(*v, path + ".cross_family_angle_deg");
  }
  if (const json* v = ju::opt_member(j, "within_family_noise", path)) {
    spec.within_family_noise = ju::as_double(*v, path + ".within_family_noise");
  }
  if (const json* v = ju::opt_member(j, "center_radius", path)) {
    spec.center_radius = ju::as_double(*v, path + ".center_radius");
  }
  if (const json* v = ju::opt_member(j, "layout", path)) {
    spec.layout = ju::as_string(*v, path + ".layout");
  }
  if (const json* v = ju::opt_member(j, "curvature_scale", path)) {
    spec.curvature_scale = ju::as_double(*v, path + ".curvature_scale");
  }
  if (const json* v = ju::opt_member(j, "construction_seed", path)) {
    spec.construction_seed = ju::as_uint(*v, path + ".construction_seed");
  }
  if (const json* v = ju::opt_member(j, "task_sizes", path)) {
    for (const auto& s : ju::as_array(*v, path + ".task_sizes")) {
      spec.task_sizes.push_back(ju::as_uint(s, path + ".task_sizes"));
    }
  }
  if (const json* v = ju::opt_member(j, "initial_point", path)) {
    spec.initial_point = vector_from_json(*v, path + ".initial_point");
  }
  spec.validate();
  return spec;
}

json family_to_json(const FamilyProblemSpec& spec) {
  json sizes = json::array();
  const std::size_t total = static_cast<std::size_t>(spec.num_families) *
                            static_cast<std::size_t>(spec.tasks_per_family);
  for (std::size_t k = 0; k < total; ++k) {
    sizes.push_back(spec.task_sizes.empty() ? kDefaultTaskSize
                                            : spec.task_sizes[k]);
  }
  const Eigen::VectorXd initial = spec.initial_point.has_value()
                                      ? *spec.initial_point
                                      : family_default_initial(spec);
  return json{{"type", "family"},
              {"num_families", spec.num_families},
              {"tasks_per_family", spec.tasks_per_family},
              {"dimension", spec.dimension},
              {"cross_family_angle_deg", spec.cross_family_angle_deg},
              {"within_family_noise", spec.within_family_noise},
              {"center_radius", spec.center_radius},
              {"layout", spec.layout},
              {"curvature_scale", spec.curvature_scale},
              {"construction_seed", spec.construction_seed},
              {"task_sizes", std::move(sizes)},
              {"initial_point", vector_to_json(initial)}};
}

LayeredLinearSpec layered_from_json(const json& j, const std::string& path) {
  ju::check_keys(j,
                 {"type", "layer_dims", "num_tasks", "data_seed", "granularity",
                  "init_scale", "task_sizes"},
                 path);
  LayeredLinearSpec spec;
  for (const auto& d : ju::as_array(ju::member(j, "layer_dims", path),
                                    path + ".layer_dims")) {
    spec.layer_dims.push_back(
        static_cast<int>(ju::as_int(d, path + ".layer_dims")));
  }
  spec.num_tasks = static_cast<int>(
      ju::as_int(ju::member(j, "num_tasks", path), path + ".num_tasks"));
  if (const json* v = ju::opt_member(j, "data_seed", path)) {
    spec.data_seed = ju::as_uint(*v, path + ".data_seed");
  }
  if (const json* v = ju::opt_member(j, "granularity", path)) {
    spec.granularity = ju::as_string(*v, path + ".granularity");
  }
  if (const json* v = ju::opt_member(j, "init_scale", path)) {
    spec.init_scale = ju::as_double(*v, path + ".init_scale");
  }
  if (const json* v = ju::opt_member(j, "task_sizes", path)) {
    for (const auto& s : ju::as_array(*v, path + ".task_sizes")) {
      spec.task_sizes.push_back(ju::as_uint(s, path + ".task_sizes"));
    }
  }
  spec.validate();
  return spec;
}

json layered_to_json(const LayeredLinearSpec& spec) {
  json sizes = json::array();
  for (int k = 0; k < spec.num_tasks; ++k) {
    sizes.push_back(spec.task_sizes.empty()
                        ? kDefaultTaskSize
                        : spec.task_sizes[static_cast<std::size_t>(k)]);
  }
  return json{{"type", "layered_linear"},
              {"layer_dims", spec.layer_dims},
              {"num_tasks", spec.num_tasks},
              {"data_seed", spec.data_seed},
              {"granularity", spec.granularity},
              {"init_scale", spec.init_scale},
              {"task_sizes", std::move(sizes)}};
}

}  // namespace

VaccineConfig vaccine_config_from_json(const json& j, const std::string& path) {
  ju::check_keys(j,
                 {"mode", "fixed_target", "task_subset", "hrl_threshold",
                  "beta", "seed", "preserve_norm", "freeze_ema",
                  "norm_tolerance", "target_clamp"},
                 path);
  VaccineConfig cfg;
  if (const json* v = ju::opt_member(j, "mode", path)) {
    cfg.mode = surgery_mode_from_string(ju::as_string(*v, path + ".mode"));
  }
  if (const json* v = ju::opt_member(j, "fixed_target", path)) {
    cfg.fixed_target = ju::as_double(*v, path + ".fixed_target");
  }
  if (const json* v = ju::opt_member(j, "task_subset", path)) {
    if (v->is_string()) {
      cfg.task_subset =
          task_subset_from_string(ju::as_string(*v, path + ".task_subset"));
      if (cfg.task_subset == TaskSubset::explicit_set) {
        ju::fail(path + ".task_subset",
                 "explicit subset needs {\"explicit\": [ids]}");
      }
    } else {
      ju::check_keys(*v, {"explicit"}, path + ".task_subset");
      cfg.task_subset = TaskSubset::explicit_set;
      for (const auto& id : ju::as_array(ju::member(*v, "explicit", path),
                                         path + ".task_subset.explicit")) {
        cfg.explicit_subset.insert(
            static_cast<int>(ju::as_int(id, path + ".task_subset.explicit")));
      }
    }
  }
  if (const json* v = ju::opt_member(j, "hrl_threshold", path)) {
    cfg.hrl_threshold = ju::as_uint(*v, path + ".hrl_threshold");
  }
  if (const json* v = ju::opt_member(j, "beta", path)) {
    cfg.beta = ju::as_double(*v, path + ".beta");
  }
  if (const json* v = ju::opt_member(j, "seed", path)) {
    cfg.seed = ju::as_uint(*v, path + ".seed");
  }
  if (const json* v = ju::opt_member(j, "preserve_norm", path)) {
    cfg.preserve_norm = ju::as_bool(*v, path + ".preserve_norm");
  }
  if (const json* v = ju::opt_member(j, "freeze_ema", path)) {
    cfg.freeze_ema = ju::as_bool(*v, path + ".freeze_ema");
  }
  if (const json* v = ju::opt_member(j, "norm_tolerance", path)) {
    cfg.norm_tolerance = ju::as_double(*v, path + ".norm_tolerance");
  }
  if (const json* v = ju::opt_member(j, "target_clamp", path)) {
    cfg.target_clamp = ju::as_double(*v, path + ".target_clamp");
  }
  cfg.validate();
  return cfg;
}

json vaccine_config_to_json(const VaccineConfig& cfg) {
  json subset;
  if (cfg.task_subset == TaskSubset::explicit_set) {
    subset = json{{"explicit", std::vector<int>(cfg.explicit_subset.begin(),
                                                cfg.explicit_subset.end())}};
  } else {
    subset = to_string(cfg.task_subset);
  }
  return json{{"mode", to_string(cfg.mode)},
              {"fixed_target", cfg.fixed_target},
              {"task_subset", std::move(subset)},
              {"hrl_threshold", cfg.hrl_threshold},
              {"beta", cfg.beta},
              {"seed", cfg.seed},
              {"preserve_norm", cfg.preserve_norm},
              {"freeze_ema", cfg.freeze_ema},
              {"norm_tolerance", cfg.norm_tolerance},
              {"target_clamp", cfg.target_clamp}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  const std::string path = "config";
  ju::check_keys(j, {"spec_version", "problem", "train", "sampler", "vaccine"},
                 path);
  const auto version = ju::as_int(ju::member(j, "spec_version", path),
                                  path + ".spec_version");
  if (version != kSpecVersion) {
    ju::fail(path + ".spec_version",
             "unsupported version " + std::to_string(version));
  }

  ExperimentConfig cfg;

  const json& problem = ju::member(j, "problem", path);
  const std::string type = ju::as_string(
      ju::member(problem, "type", path + ".problem"), path + ".problem.type");
  if (type == "quadratic") {
    cfg.problem = quadratic_from_json(problem, path + ".problem");
  } else if (type == "family") {
    cfg.problem = family_from_json(problem, path + ".problem");
  } else if (type == "layered_linear") {
    cfg.problem = layered_from_json(problem, path + ".problem");
  } else {
    ju::fail(path + ".problem.type", "unknown problem type '" + type + "'");
  }

  const json& train = ju::member(j, "train", path);
  const std::string tpath = path + ".train";
  ju::check_keys(train,
                 {"step_size", "max_steps", "batch_tasks", "record_every",
                  "record_parameters", "divergence_threshold"},
                 tpath);
  cfg.train.step_size =
      ju::as_double(ju::member(train, "step_size", tpath), tpath + ".step_size");
  cfg.train.max_steps = static_cast<int>(
      ju::as_int(ju::member(train, "max_steps", tpath), tpath + ".max_steps"));
  if (const json* v = ju::opt_member(train, "batch_tasks", tpath)) {
    cfg.train.batch_tasks = static_cast<int>(ju::as_int(*v, tpath + ".batch_tasks"));
  }
  if (const json* v = ju::opt_member(train, "record_every", tpath)) {
    cfg.train.record_every = static_cast<int>(ju::as_int(*v, tpath + ".record_every"));
  }
  if (const json* v = ju::opt_member(train, "record_parameters", tpath)) {
    cfg.train.record_parameters = ju::as_bool(*v, tpath + ".record_parameters");
  }
  if (const json* v = ju::opt_member(train, "divergence_threshold", tpath)) {
    cfg.train.divergence_threshold =
        ju::as_double(*v, tpath + ".divergence_threshold");
  }

  if (const json* sampler = ju::opt_member(j, "sampler", path)) {
    const std::string spath = path + ".sampler";
    ju::check_keys(*sampler, {"temperature", "seed"}, spath);
    if (const json* v = ju::opt_member(*sampler, "temperature", spath)) {
      cfg.train.sampler_temperature = ju::as_double(*v, spath + ".temperature");
    }
    if (const json* v = ju::opt_member(*sampler, "seed", spath)) {
      cfg.train.sampler_seed = ju::as_uint(*v, spath + ".seed");
    }
  }

  if (const json* vaccine = ju::opt_member(j, "vaccine", path)) {
    cfg.train.vaccine = vaccine_config_from_json(*vaccine, path + ".vaccine");
  }

  cfg.train.validate();
  return cfg;
}

json ExperimentConfig::to_json() const {
  json problem;
  if (const auto* q = std::get_if<QuadraticSpec>(&this->problem)) {
    problem = quadratic_to_json(*q);
  } else if (const auto* f = std::get_if<FamilyProblemSpec>(&this->problem)) {
    problem = family_to_json(*f);
  } else {
    problem = layered_to_json(std::get<LayeredLinearSpec>(this->problem));
  }
  return json{
      {"spec_version", kSpecVersion},
      {"problem", std::move(problem)},
      {"train", json{{"step_size", train.step_size},
                     {"max_steps", train.max_steps},
                     {"batch_tasks", train.batch_tasks},
                     {"record_every", train.record_every},
                     {"record_parameters", train.record_parameters},
                     {"divergence_threshold", train.divergence_threshold}}},
      {"sampler", json{{"temperature", train.sampler_temperature},
                       {"seed", train.sampler_seed}}},
      {"vaccine", vaccine_config_to_json(train.vaccine)}};
}

std::unique_ptr<SyntheticProblem> build_problem(const ExperimentConfig& cfg) {
  if (const auto* q = std::get_if<QuadraticSpec>(&cfg.problem)) {
    std::vector<QuadraticTask> objectives;
    std::vector<std::string> names;
    std::vector<std::uint64_t> sizes;
    for (const auto& t : q->tasks) {
      if (t.curvature_kind == "identity") {
        objectives.push_back(QuadraticTask::isotropic(t.center, 1.0));
      } else if (t.curvature_kind == "scaled_identity") {
        objectives.push_back(QuadraticTask::isotropic(t.center, t.scale));
      } else {
        objectives.push_back(QuadraticTask::from_factor(t.factor, t.center));
      }
      names.push_back(t.name);
      sizes.push_back(t.size);
    }
    return std::make_unique<QuadraticProblem>(std::move(objectives),
                                              std::move(names), std::move(sizes),
                                              q->initial, q->partition);
  }
  if (const auto* f = std::get_if<FamilyProblemSpec>(&cfg.problem)) {
    return std::make_unique<FamilyTaskSet>(*f);
  }
  return std::make_unique<LayeredLinearModel>(
      std::get<LayeredLinearSpec>(cfg.problem));
}

std::string config_hash(const ExperimentConfig& cfg) {
  return format_hex64(fnv1a64(cfg.to_json().dump()));
}

namespace {

std::map<int, std::string> task_names(const SyntheticProblem& problem) {
  std::map<int, std::string> names;
  for (const auto& t : problem.tasks()) names[t.id] = t.name;
  return names;
}

void write_run_artifacts(const fs::path& out_dir, const ExperimentConfig& cfg,
                         const SyntheticProblem& problem, const TrainRun& run) {
  const auto names = task_names(problem);

  fs::create_directories(out_dir);
  write_file(out_dir / "loss.csv",
             loss_csv(run.losses, run.task_losses, problem.tasks()));
  write_file(out_dir / "similarity.csv", similarity_csv(run.similarities, names));
  write_file(out_dir / "surgery.csv", surgery_csv(run.reports, names));
  write_file(out_dir / "ema.json", json_text(ema_snapshot_to_json(run.ema)));
  if (!run.parameters.empty()) {
    write_file(out_dir / "params.csv", parameters_csv(run.parameters));
  }

  std::int64_t fired = 0;
  std::int64_t eligible = 0;
  for (const auto& rep : run.reports) {
    fired += rep.fired_total;
    eligible += rep.eligible_total;
  }
  double max_a = 0.0;
  for (double a : run.max_alignment) max_a = std::max(max_a, a);

  const auto* families = problem.family_assignment();
  json tasks = json::array();
  for (const auto& t : problem.tasks()) {
    json entry{{"id", t.id},
               {"name", t.name},
               {"size", problem.task_sizes().at(t.id)}};
    if (families != nullptr) entry["family"] = families->at(t.id);
    tasks.push_back(std::move(entry));
  }

  json groups = json::array();
  for (const auto& g : problem.partition().groups) groups.push_back(g.name);

  const auto optimum = problem.closed_form_optimum();

  json meta{
      {"kind", "gradvac.run_meta"},
      {"spec_version", kSpecVersion},
      {"version", kVersion},
      {"rng_algorithm", std::string(kRngAlgorithm)},
      {"config", cfg.to_json()},
      {"config_hash", config_hash(cfg)},
      {"tasks", std::move(tasks)},
      {"groups", std::move(groups)},
      {"granularity", problem.partition().granularity_label},
      {"surgery_tasks",
       std::vector<int>(run.surgery_tasks.begin(), run.surgery_tasks.end())},
      {"lipschitz", run.lipschitz ? json(*run.lipschitz) : json(nullptr)},
      {"optimum_loss",
       optimum ? json(problem.joint_loss(*optimum)) : json(nullptr)},
      {"final_loss", run.losses.back()},
      {"steps", cfg.train.max_steps},
      {"fired_total", fired},
      {"eligible_total", eligible},
      {"max_alignment", max_a}};
  write_file(out_dir / "meta.json", json_text(meta));
}

int guard(const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const DivergenceError& e) {
    std::cerr << "gradvac: divergence: " << e.what() << "\n";
    return 3;
  } catch (const ValidationError& e) {
    std::cerr << "gradvac: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "gradvac: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "gradvac: internal error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int run_simulate(const SimulateOptions& opts) {
  return guard([&] {
    const json j = parse_json_text(read_file(opts.config_path), opts.config_path);
    ExperimentConfig cfg = ExperimentConfig::from_json(j);
    if (opts.seed_override.has_value()) {
      cfg.train.vaccine.seed = *opts.seed_override;
      cfg.train.sampler_seed = *opts.seed_override;
    }
    if (opts.mode_override.has_value()) {
      cfg.train.vaccine.mode = surgery_mode_from_string(*opts.mode_override);
    }

    const auto problem = build_problem(cfg);
    log(LogLevel::info, "simulate: " + std::to_string(problem->tasks().size()) +
                            " tasks, dim " + std::to_string(problem->dimension()));
    const TrainRun run = train(*problem, cfg.train);
    write_run_artifacts(opts.out_dir, cfg, *problem, run);
    std::cout << "ok: " << opts.out_dir
              << " final_loss=" << format_double(run.losses.back()) << "\n";
  });
}

int run_combine(const CombineOptions& opts) {
  return guard([&] {
    const GradientDump dump = dump_from_json(
        parse_json_text(read_file(opts.dump_path), opts.dump_path));

    const json cj = parse_json_text(read_file(opts.config_path), opts.config_path);
    ju::check_keys(cj, {"spec_version", "vaccine"}, "config");
    const auto version =
        ju::as_int(ju::member(cj, "spec_version", "config"), "config.spec_version");
    if (version != kSpecVersion) {
      ju::fail("config.spec_version", "unsupported version " + std::to_string(version));
    }
    VaccineConfig vcfg =
        vaccine_config_from_json(ju::member(cj, "vaccine", "config"), "config.vaccine");
    if (opts.seed_override.has_value()) vcfg.seed = *opts.seed_override;
    if (opts.mode_override.has_value()) {
      vcfg.mode = surgery_mode_from_string(*opts.mode_override);
    }
    vcfg.validate();

    EmaStore ema = opts.ema_in.empty()
                       ? EmaStore(vcfg.beta)
                       : ema_snapshot_from_json(
                             parse_json_text(read_file(opts.ema_in), opts.ema_in));
    if (ema.beta() != vcfg.beta) {
      throw ConfigError("ema snapshot beta does not match config beta");
    }
    for (const auto& e : ema.entries()) {
      if (dump.partition.find(e.group) == nullptr) {
        throw ValidationError("ema entry references group '" + e.group +
                              "' not present in the dump partition");
      }
      if (dump.sizes.find(e.i) == dump.sizes.end() ||
          dump.sizes.find(e.j) == dump.sizes.end()) {
        throw ValidationError("ema entry references a task id outside the dump");
      }
    }

    const std::set<int> surgery = resolve_task_subset(vcfg, dump.sizes);
    Rng rng(mix64(vcfg.seed));
    const CombineResult res =
        combine_step(dump.bundle, dump.partition, ema, vcfg, surgery, rng);

    GradientDump out;
    out.step = dump.step;
    out.partition = dump.partition;
    out.tasks = {{0, "combined"}};
    out.sizes[0] = 0;
    out.bundle.step = dump.step;
    out.bundle.per_task.emplace(0, res.combined);
    write_file(opts.out_path, json_text(dump_to_json(out)));

    std::map<int, std::string> names;
    for (const auto& t : dump.tasks) names[t.id] = t.name;
    if (!opts.report_path.empty()) {
      write_file(opts.report_path, json_text(report_to_json(res.report, names)));
    }
    const std::string ema_out = opts.ema_out.empty() ? opts.ema_in : opts.ema_out;
    if (!ema_out.empty()) {
      write_file(ema_out, json_text(ema_snapshot_to_json(ema)));
    }
    std::cout << "ok: " << opts.out_path
              << " fired=" << format_int(res.report.fired_total)
              << " eligible=" << format_int(res.report.eligible_total) << "\n";
  });
}

int run_analyze(const AnalyzeOptions& opts) {
  return guard([&] {
    if (opts.window < 1) throw ConfigError("window must be >= 1");
    const fs::path dir(opts.records_dir);

    const json meta =
        parse_json_text(read_file((dir / "meta.json").string()), "meta.json");
    std::map<std::string, int> name_to_id;
    std::map<int, std::string> id_to_name;
    std::map<int, int> families;
    bool families_complete = true;
    for (const auto& t : ju::as_array(ju::member(meta, "tasks", "meta"),
                                      "meta.tasks")) {
      const int id = static_cast<int>(
          ju::as_int(ju::member(t, "id", "meta.tasks"), "meta.tasks.id"));
      const std::string name =
          ju::as_string(ju::member(t, "name", "meta.tasks"), "meta.tasks.name");
      name_to_id[name] = id;
      id_to_name[id] = name;
      if (const json* fam = ju::opt_member(t, "family", "meta.tasks")) {
        families[id] = static_cast<int>(ju::as_int(*fam, "meta.tasks.family"));
      } else {
        families_complete = false;
      }
    }
    if (name_to_id.empty()) throw ValidationError("meta.json lists no tasks");

    const auto records = parse_similarity_csv(
        read_file((dir / "similarity.csv").string()), name_to_id);
    const auto reports =
        parse_surgery_csv(read_file((dir / "surgery.csv").string()), name_to_id);

    StepRange range;
    if (opts.steps.has_value()) {
      range.first = opts.steps->first;
      range.last = opts.steps->second;
      if (range.first > range.last) {
        throw ConfigError("step range start exceeds end");
      }
    }

    std::set<std::string> groups;
    for (const auto& rec : records) {
      for (const auto& [g, _] : rec.per_group) groups.insert(g);
    }

    const fs::path out_dir(opts.out_dir);
    fs::create_directories(out_dir);

    std::map<std::string, ClusteringScore> scores;
    for (const auto& g : groups) {
      const TaskMatrix agg = aggregate_over_steps(records, g, range);
      write_file(out_dir / ("aggregate_" + g + ".json"),
                 json_text(task_matrix_to_json(agg, id_to_name, g)));
      if (families_complete && !families.empty()) {
        scores[g] = clustering_score(agg, families);
      }
    }
    if (!scores.empty()) {
      write_file(out_dir / "clustering.json", json_text(clustering_to_json(scores)));
    }

    if (opts.contrast.has_value()) {
      const auto& [ga, gb] = *opts.contrast;
      const TaskMatrix con = group_contrast(records, ga, gb, range);
      write_file(out_dir / ("contrast_" + ga + "_" + gb + ".json"),
                 json_text(task_matrix_to_json(con, id_to_name, ga + "-" + gb)));
    }

    write_file(out_dir / "activity.csv",
               activity_csv(activity_counts(reports, opts.window)));
    std::cout << "ok: " << opts.out_dir << " groups=" << groups.size() << "\n";
  });
}

}  // namespace gradvac
