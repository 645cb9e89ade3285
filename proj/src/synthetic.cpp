#include "gradvac/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "gradvac/errors.hpp"
#include "gradvac/sampler.hpp"

namespace gradvac {

QuadraticTask QuadraticTask::from_factor(const Eigen::MatrixXd& factor,
                                         Eigen::VectorXd center) {
  if (factor.cols() != center.size()) {
    throw ValidationError("curvature factor columns must match center size");
  }
  if (!factor.allFinite() || !center.allFinite()) {
    throw ValidationError("quadratic task with non-finite parameters");
  }
  QuadraticTask t;
  t.center = std::move(center);
  t.curvature = factor.transpose() * factor;
  return t;
}

QuadraticTask QuadraticTask::isotropic(Eigen::VectorXd center, double scale) {
  if (!(scale >= 0.0) || !std::isfinite(scale)) {
    throw ValidationError("isotropic curvature scale must be >= 0");
  }
  if (!center.allFinite()) {
    throw ValidationError("quadratic task with non-finite center");
  }
  QuadraticTask t;
  t.curvature =
      scale * Eigen::MatrixXd::Identity(center.size(), center.size());
  t.center = std::move(center);
  return t;
}

double QuadraticTask::loss(const Eigen::VectorXd& theta) const {
  const Eigen::VectorXd d = theta - center;
  return 0.5 * d.dot(curvature * d);
}

Eigen::VectorXd QuadraticTask::gradient(const Eigen::VectorXd& theta) const {
  return curvature * (theta - center);
}

double SyntheticProblem::joint_loss(const Eigen::VectorXd& theta) const {
  double total = 0.0;
  for (const auto& t : tasks()) total += task_loss(t.id, theta);
  return total;
}

QuadraticProblem::QuadraticProblem(std::vector<QuadraticTask> task_objectives,
                                   std::vector<std::string> names,
                                   std::vector<std::uint64_t> sizes,
                                   Eigen::VectorXd initial,
                                   GroupPartition partition)
    : objectives_(std::move(task_objectives)),
      initial_(std::move(initial)),
      partition_(std::move(partition)) {
  if (objectives_.empty()) throw ValidationError("problem with no tasks");
  if (names.size() != objectives_.size() || sizes.size() != objectives_.size()) {
    throw ValidationError("task names/sizes do not match task count");
  }
  dim_ = static_cast<std::size_t>(objectives_.front().center.size());
  for (const auto& t : objectives_) {
    if (static_cast<std::size_t>(t.center.size()) != dim_ ||
        static_cast<std::size_t>(t.curvature.rows()) != dim_ ||
        static_cast<std::size_t>(t.curvature.cols()) != dim_) {
      throw ValidationError("task dimensions disagree");
    }
  }
  if (static_cast<std::size_t>(initial_.size()) != dim_) {
    throw ValidationError("initial point has wrong dimension");
  }
  if (!initial_.allFinite()) {
    throw ValidationError("initial point has non-finite components");
  }
  partition_.validate();
  if (partition_.total_parameters() != dim_) {
    throw ValidationError("partition does not cover the parameter vector");
  }
  std::set<std::string> seen;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].empty()) throw ValidationError("task with empty name");
    if (!seen.insert(names[i]).second) {
      throw ValidationError("duplicate task name '" + names[i] + "'");
    }
    if (sizes[i] == 0) {
      throw ValidationError("task '" + names[i] + "' has zero size");
    }
    tasks_.push_back({static_cast<int>(i), names[i]});
    sizes_[static_cast<int>(i)] = sizes[i];
  }
}

const QuadraticTask& QuadraticProblem::objective(int task) const {
  if (task < 0 || static_cast<std::size_t>(task) >= objectives_.size()) {
    throw ValidationError("unknown task id " + std::to_string(task));
  }
  return objectives_[static_cast<std::size_t>(task)];
}

void QuadraticProblem::assign_families(std::map<int, int> families) {
  for (const auto& t : tasks_) {
    if (families.find(t.id) == families.end()) {
      throw ValidationError("family assignment misses task " + t.name);
    }
  }
  families_ = std::move(families);
}

double QuadraticProblem::task_loss(int task, const Eigen::VectorXd& theta) const {
  return objective(task).loss(theta);
}

Eigen::VectorXd QuadraticProblem::task_gradient(
    int task, const Eigen::VectorXd& theta) const {
  return objective(task).gradient(theta);
}

std::optional<double> QuadraticProblem::lipschitz_constant() const {
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(dim_, dim_);
  for (const auto& t : objectives_) total += t.curvature;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(total);
  if (solver.info() != Eigen::Success) return std::nullopt;
  return solver.eigenvalues().maxCoeff();
}

std::optional<Eigen::VectorXd> QuadraticProblem::closed_form_optimum() const {
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(dim_, dim_);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim_);
  for (const auto& t : objectives_) {
    total += t.curvature;
    rhs += t.curvature * t.center;
  }
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(total);
  if (ldlt.info() != Eigen::Success) return std::nullopt;
  const Eigen::VectorXd theta = ldlt.solve(rhs);
  // Reject singular summed curvature (solution not unique / inconsistent).
  if ((total * theta - rhs).norm() > 1e-9 * (1.0 + rhs.norm())) {
    return std::nullopt;
  }
  return theta;
}

void FamilyProblemSpec::validate() const {
  if (num_families < 2) throw ConfigError("need at least two families");
  if (tasks_per_family < 2) {
    throw ConfigError("need at least two tasks per family");
  }
  if (dimension < static_cast<std::size_t>(num_families) + 1) {
    throw ConfigError("family construction needs dimension >= num_families + 1");
  }
  if (!(cross_family_angle_deg >= 0.0) || !(cross_family_angle_deg <= 90.0)) {
    throw ConfigError("cross_family_angle_deg must lie in [0, 90]");
  }
  if (!(within_family_noise >= 0.0) || !std::isfinite(within_family_noise)) {
    throw ConfigError("within_family_noise must be >= 0");
  }
  if (!(center_radius > 0.0) || !std::isfinite(center_radius)) {
    throw ConfigError("center_radius must be positive");
  }
  if (layout != "radial" && layout != "shared_center") {
    throw ConfigError("unknown family layout '" + layout + "'");
  }
  if (!(curvature_scale > 0.0) || !(curvature_scale <= 2.0)) {
    throw ConfigError("curvature_scale must lie in (0, 2]");
  }
  const std::size_t total =
      static_cast<std::size_t>(num_families) *
      static_cast<std::size_t>(tasks_per_family);
  if (!task_sizes.empty() && task_sizes.size() != total) {
    throw ConfigError("task_sizes must match num_families * tasks_per_family");
  }
  if (initial_point.has_value() &&
      static_cast<std::size_t>(initial_point->size()) != dimension) {
    throw ConfigError("initial_point has wrong dimension");
  }
}

namespace {

struct FamilyDirections {
  std::vector<Eigen::VectorXd> bases;       // one per family
  std::vector<Eigen::VectorXd> directions;  // one per task
};

// Base direction f is sqrt(w) e_0 + sqrt(1-w) e_{1+f} with
// w = cos(cross angle): unit length, pairwise dot exactly w. Task
// directions add isotropic noise and renormalize.
FamilyDirections build_directions(const FamilyProblemSpec& spec) {
  FamilyDirections out;
  double w = std::cos(spec.cross_family_angle_deg * std::numbers::pi / 180.0);
  if (std::abs(w) < 1e-12) w = 0.0;  // 90 degrees means exactly orthogonal
  const double shared = std::sqrt(std::max(w, 0.0));
  const double apart = std::sqrt(1.0 - std::max(w, 0.0));

  for (int f = 0; f < spec.num_families; ++f) {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(spec.dimension);
    b(0) = shared;
    b(1 + f) = apart;
    out.bases.push_back(std::move(b));
  }

  Rng rng = substream(spec.construction_seed, "family_directions");
  for (int f = 0; f < spec.num_families; ++f) {
    for (int t = 0; t < spec.tasks_per_family; ++t) {
      Eigen::VectorXd d = out.bases[static_cast<std::size_t>(f)];
      if (spec.within_family_noise > 0.0) {
        for (;;) {
          Eigen::VectorXd noisy = out.bases[static_cast<std::size_t>(f)];
          for (Eigen::Index k = 0; k < noisy.size(); ++k) {
            noisy(k) += spec.within_family_noise * gaussian(rng);
          }
          if (noisy.norm() > 1e-9) {
            d = noisy.normalized();
            break;
          }
        }
      }
      out.directions.push_back(std::move(d));
    }
  }
  return out;
}

QuadraticProblem build_family_base(const FamilyProblemSpec& spec) {
  spec.validate();
  const FamilyDirections dirs = build_directions(spec);
  const std::size_t total = dirs.directions.size();

  std::vector<QuadraticTask> objectives;
  std::vector<std::string> names;
  std::vector<std::uint64_t> sizes;
  std::map<int, int> families;

  for (std::size_t i = 0; i < total; ++i) {
    const int f = static_cast<int>(i) / spec.tasks_per_family;
    const int t = static_cast<int>(i) % spec.tasks_per_family;
    const Eigen::VectorXd& d = dirs.directions[i];
    if (spec.layout == "radial") {
      objectives.push_back(QuadraticTask::isotropic(-spec.center_radius * d));
    } else {
      const double alpha = std::sqrt(1.0 + spec.curvature_scale) - 1.0;
      const Eigen::MatrixXd factor =
          Eigen::MatrixXd::Identity(spec.dimension, spec.dimension) +
          alpha * (d * d.transpose());
      objectives.push_back(QuadraticTask::from_factor(
          factor, Eigen::VectorXd::Zero(spec.dimension)));
    }
    names.push_back("f" + std::to_string(f) + "_t" + std::to_string(t));
    sizes.push_back(spec.task_sizes.empty() ? kDefaultTaskSize
                                            : spec.task_sizes[i]);
    families[static_cast<int>(i)] = f;
  }

  Eigen::VectorXd initial = spec.initial_point.has_value()
                                ? *spec.initial_point
                                : family_default_initial(spec);

  QuadraticProblem base(std::move(objectives), std::move(names),
                        std::move(sizes), std::move(initial),
                        GroupPartition::whole_model(spec.dimension));
  base.assign_families(std::move(families));
  return base;
}

}  // namespace

Eigen::VectorXd family_default_initial(const FamilyProblemSpec& spec) {
  if (spec.layout == "radial") {
    return Eigen::VectorXd::Zero(spec.dimension);
  }
  return spec.center_radius * Eigen::VectorXd::Ones(spec.dimension).normalized();
}

FamilyTaskSet::FamilyTaskSet(const FamilyProblemSpec& spec)
    : QuadraticProblem(build_family_base(spec)), spec_(spec) {
  FamilyDirections dirs = build_directions(spec_);
  bases_ = std::move(dirs.bases);
  directions_ = std::move(dirs.directions);
}

void LayeredLinearSpec::validate() const {
  if (layer_dims.size() < 3) {
    throw ConfigError("layered model needs at least two weight matrices");
  }
  for (int d : layer_dims) {
    if (d < 1) throw ConfigError("layer dimensions must be >= 1");
  }
  if (num_tasks < 2) throw ConfigError("layered model needs >= 2 tasks");
  if (!(init_scale > 0.0) || !std::isfinite(init_scale)) {
    throw ConfigError("init_scale must be positive");
  }
  if (granularity != "whole_model" && granularity != "enc_dec" &&
      granularity != "all_layer" && granularity != "all_matrix") {
    throw ConfigError("unknown granularity '" + granularity + "'");
  }
  if (!task_sizes.empty() &&
      task_sizes.size() != static_cast<std::size_t>(num_tasks)) {
    throw ConfigError("task_sizes must match num_tasks");
  }
}

LayeredLinearModel::LayeredLinearModel(const LayeredLinearSpec& spec)
    : spec_(spec) {
  spec_.validate();
  const std::size_t num_layers = spec_.layer_dims.size() - 1;

  std::vector<std::size_t> layer_sizes;
  for (std::size_t l = 0; l < num_layers; ++l) {
    layer_sizes.push_back(static_cast<std::size_t>(spec_.layer_dims[l + 1]) *
                          static_cast<std::size_t>(spec_.layer_dims[l]));
    dim_ += layer_sizes.back();
  }

  // One matrix per layer, so all_matrix and all_layer coincide here.
  partition_.granularity_label = spec_.granularity;
  if (spec_.granularity == "whole_model") {
    partition_.groups.push_back({"model", 0, dim_});
  } else if (spec_.granularity == "enc_dec") {
    const std::size_t enc_layers = (num_layers + 1) / 2;
    std::size_t enc_len = 0;
    for (std::size_t l = 0; l < enc_layers; ++l) enc_len += layer_sizes[l];
    partition_.groups.push_back({"encoder", 0, enc_len});
    partition_.groups.push_back({"decoder", enc_len, dim_ - enc_len});
  } else {
    std::size_t offset = 0;
    for (std::size_t l = 0; l < num_layers; ++l) {
      partition_.groups.push_back(
          {"layer" + std::to_string(l + 1), offset, layer_sizes[l]});
      offset += layer_sizes[l];
    }
  }
  partition_.validate();

  Rng init_rng = substream(spec_.data_seed, "init");
  initial_ = Eigen::VectorXd(dim_);
  for (std::size_t k = 0; k < dim_; ++k) {
    initial_(static_cast<Eigen::Index>(k)) = spec_.init_scale * gaussian(init_rng);
  }

  Rng data_rng = substream(spec_.data_seed, "task_data");
  for (int i = 0; i < spec_.num_tasks; ++i) {
    Eigen::VectorXd x(spec_.layer_dims.front());
    for (Eigen::Index k = 0; k < x.size(); ++k) x(k) = gaussian(data_rng);
    Eigen::VectorXd y(spec_.layer_dims.back());
    for (Eigen::Index k = 0; k < y.size(); ++k) y(k) = gaussian(data_rng);
    inputs_.push_back(std::move(x));
    targets_.push_back(std::move(y));
    tasks_.push_back({i, "task" + std::to_string(i)});
    sizes_[i] = spec_.task_sizes.empty()
                    ? kDefaultTaskSize
                    : spec_.task_sizes[static_cast<std::size_t>(i)];
  }
}

std::vector<Eigen::MatrixXd> LayeredLinearModel::unpack(
    const Eigen::VectorXd& theta) const {
  if (static_cast<std::size_t>(theta.size()) != dim_) {
    throw DimensionError("parameter vector has wrong dimension");
  }
  std::vector<Eigen::MatrixXd> weights;
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < spec_.layer_dims.size(); ++l) {
    const int rows = spec_.layer_dims[l + 1];
    const int cols = spec_.layer_dims[l];
    Eigen::MatrixXd w(rows, cols);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        w(r, c) = theta(static_cast<Eigen::Index>(
            offset + static_cast<std::size_t>(r * cols + c)));
      }
    }
    offset += static_cast<std::size_t>(rows * cols);
    weights.push_back(std::move(w));
  }
  return weights;
}

double LayeredLinearModel::task_loss(int task,
                                     const Eigen::VectorXd& theta) const {
  if (task < 0 || task >= spec_.num_tasks) {
    throw ValidationError("unknown task id " + std::to_string(task));
  }
  const auto weights = unpack(theta);
  Eigen::VectorXd h = inputs_[static_cast<std::size_t>(task)];
  for (const auto& w : weights) h = w * h;
  return 0.5 * (h - targets_[static_cast<std::size_t>(task)]).squaredNorm();
}

Eigen::VectorXd LayeredLinearModel::task_gradient(
    int task, const Eigen::VectorXd& theta) const {
  if (task < 0 || task >= spec_.num_tasks) {
    throw ValidationError("unknown task id " + std::to_string(task));
  }
  const auto weights = unpack(theta);

  std::vector<Eigen::VectorXd> acts;  // h_0 .. h_L
  acts.push_back(inputs_[static_cast<std::size_t>(task)]);
  for (const auto& w : weights) acts.push_back(w * acts.back());

  Eigen::VectorXd delta = acts.back() - targets_[static_cast<std::size_t>(task)];

  std::vector<Eigen::MatrixXd> grads(weights.size());
  for (std::size_t l = weights.size(); l > 0; --l) {
    grads[l - 1] = delta * acts[l - 1].transpose();
    if (l > 1) delta = weights[l - 1].transpose() * delta;
  }

  Eigen::VectorXd flat(dim_);
  std::size_t offset = 0;
  for (const auto& g : grads) {
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        flat(static_cast<Eigen::Index>(offset) + r * g.cols() + c) = g(r, c);
      }
    }
    offset += static_cast<std::size_t>(g.size());
  }
  return flat;
}

GradientBundle task_gradients(const SyntheticProblem& problem,
                              const Eigen::VectorXd& theta,
                              const std::vector<int>& batch,
                              std::int64_t step) {
  if (static_cast<std::size_t>(theta.size()) != problem.dimension()) {
    throw DimensionError("theta has wrong dimension");
  }
  if (batch.empty()) throw ValidationError("empty task batch");

  const std::set<int> unique(batch.begin(), batch.end());
  const int num_tasks = static_cast<int>(problem.tasks().size());

  GradientBundle bundle;
  bundle.step = step;
  for (int id : unique) {
    if (id < 0 || id >= num_tasks) {
      throw ValidationError("batch references unknown task id " +
                            std::to_string(id));
    }
    const Eigen::VectorXd flat = problem.task_gradient(id, theta);
    std::map<std::string, GradVector> groups;
    for (const auto& g : problem.partition().groups) {
      std::vector<double> vals(g.length);
      for (std::size_t k = 0; k < g.length; ++k) {
        vals[k] = flat(static_cast<Eigen::Index>(g.offset + k));
      }
      groups.emplace(g.name, GradVector(std::move(vals), g.name));
    }
    bundle.per_task.emplace(id, std::move(groups));
  }
  return bundle;
}

void TrainConfig::validate() const {
  if (!(step_size > 0.0) || !std::isfinite(step_size)) {
    throw ConfigError("step_size must be positive");
  }
  if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
  if (batch_tasks < 0) throw ConfigError("batch_tasks must be >= 0");
  if (record_every < 0) throw ConfigError("record_every must be >= 0");
  if (!(divergence_threshold > 0.0)) {
    throw ConfigError("divergence_threshold must be positive");
  }
  if (!(sampler_temperature >= 1.0) || !std::isfinite(sampler_temperature)) {
    throw ConfigError("sampler_temperature must be >= 1");
  }
  vaccine.validate();
}

TrainRun train(const SyntheticProblem& problem, const TrainConfig& cfg) {
  cfg.validate();
  const GroupPartition& partition = problem.partition();
  const auto& sizes = problem.task_sizes();

  TrainRun run(cfg.vaccine.beta);
  run.surgery_tasks = resolve_task_subset(cfg.vaccine, sizes);
  run.lipschitz = problem.lipschitz_constant();

  Rng vac_rng(mix64(cfg.vaccine.seed));
  std::optional<TaskSampler> sampler;
  if (cfg.batch_tasks > 0) {
    sampler.emplace(
        SamplerConfig{cfg.sampler_temperature, sizes, cfg.sampler_seed});
  }

  const int num_tasks = static_cast<int>(problem.tasks().size());
  Eigen::VectorXd theta = problem.initial_point();

  const auto record_losses = [&](const Eigen::VectorXd& point) {
    std::vector<double> per(static_cast<std::size_t>(num_tasks));
    double joint = 0.0;
    for (int i = 0; i < num_tasks; ++i) {
      per[static_cast<std::size_t>(i)] = problem.task_loss(i, point);
      joint += per[static_cast<std::size_t>(i)];
    }
    run.task_losses.push_back(std::move(per));
    run.losses.push_back(joint);
    return joint;
  };

  record_losses(theta);
  if (cfg.record_parameters) run.parameters.push_back(theta);

  std::vector<int> all_tasks(static_cast<std::size_t>(num_tasks));
  std::iota(all_tasks.begin(), all_tasks.end(), 0);

  for (int step = 0; step < cfg.max_steps; ++step) {
    const std::vector<int> batch =
        sampler ? sampler->sample_minibatch(cfg.batch_tasks) : all_tasks;
    const GradientBundle bundle = task_gradients(problem, theta, batch, step);

    if (cfg.record_every > 0 && step % cfg.record_every == 0) {
      run.similarities.push_back(
          record_similarities(bundle, partition, cfg.vaccine.norm_tolerance));
    }

    double raw_sq = 0.0;
    for (const auto& g : partition.groups) {
      std::vector<double> acc(g.length, 0.0);
      for (const auto& [id, groups] : bundle.per_task) {
        const auto& v = groups.at(g.name).values;
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += v[k];
      }
      for (double v : acc) raw_sq += v * v;
    }
    run.raw_grad_sqnorm.push_back(raw_sq);

    CombineResult res = combine_step(bundle, partition, run.ema, cfg.vaccine,
                                     run.surgery_tasks, vac_rng);

    double max_a = 0.0;
    for (const auto& e : res.report.entries) {
      if (!e.fired) continue;
      const double t = std::clamp(e.ema_before, -cfg.vaccine.target_clamp,
                                  cfg.vaccine.target_clamp);
      max_a = std::max(max_a, alignment_coefficient(e.observed_phi, t));
    }
    run.max_alignment.push_back(max_a);
    run.reports.push_back(std::move(res.report));

    Eigen::VectorXd delta(static_cast<Eigen::Index>(problem.dimension()));
    for (const auto& g : partition.groups) {
      const auto& v = res.combined.at(g.name).values;
      for (std::size_t k = 0; k < g.length; ++k) {
        delta(static_cast<Eigen::Index>(g.offset + k)) = v[k];
      }
    }
    theta -= cfg.step_size * delta;

    const double joint = record_losses(theta);
    if (cfg.record_parameters) run.parameters.push_back(theta);
    if (!std::isfinite(joint) || joint > cfg.divergence_threshold) {
      throw DivergenceError("joint loss " + std::to_string(joint) +
                            " after step " + std::to_string(step + 1));
    }
  }

  run.final_parameters = std::move(theta);
  return run;
}

}  // namespace gradvac
