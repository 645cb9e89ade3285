#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gradvac/analysis.hpp"
#include "gradvac/engine.hpp"

namespace gradvac {

inline constexpr std::uint64_t kDefaultTaskSize = 1000000;

/// Quadratic bowl L(theta) = 1/2 (theta - c)^T A (theta - c). The curvature
/// is always assembled as F^T F, which keeps it symmetric PSD by
/// construction rather than by later checking.
struct QuadraticTask {
  Eigen::VectorXd center;
  Eigen::MatrixXd curvature;

  static QuadraticTask from_factor(const Eigen::MatrixXd& factor,
                                   Eigen::VectorXd center);
  static QuadraticTask isotropic(Eigen::VectorXd center, double scale = 1.0);

  double loss(const Eigen::VectorXd& theta) const;
  Eigen::VectorXd gradient(const Eigen::VectorXd& theta) const;
};

/// A fixed multi-task optimization problem: per-task losses and gradients
/// over one shared flat parameter vector.
class SyntheticProblem {
 public:
  virtual ~SyntheticProblem() = default;

  virtual std::size_t dimension() const = 0;
  virtual const GroupPartition& partition() const = 0;
  virtual const std::vector<TaskId>& tasks() const = 0;
  virtual const std::map<int, std::uint64_t>& task_sizes() const = 0;
  virtual const Eigen::VectorXd& initial_point() const = 0;

  virtual double task_loss(int task, const Eigen::VectorXd& theta) const = 0;
  virtual Eigen::VectorXd task_gradient(int task,
                                        const Eigen::VectorXd& theta) const = 0;

  double joint_loss(const Eigen::VectorXd& theta) const;

  /// Lipschitz constant of the summed gradient, when known in closed form.
  virtual std::optional<double> lipschitz_constant() const { return std::nullopt; }
  /// Minimizer of the summed loss, when known in closed form.
  virtual std::optional<Eigen::VectorXd> closed_form_optimum() const {
    return std::nullopt;
  }
  /// Family label per task id, for problems built from task families.
  virtual const std::map<int, int>* family_assignment() const { return nullptr; }
};

/// Sum of quadratic tasks. Lipschitz constant and optimum come from the
/// summed curvature (largest eigenvalue; one linear solve).
class QuadraticProblem : public SyntheticProblem {
 public:
  QuadraticProblem(std::vector<QuadraticTask> task_objectives,
                   std::vector<std::string> names,
                   std::vector<std::uint64_t> sizes, Eigen::VectorXd initial,
                   GroupPartition partition);

  std::size_t dimension() const override { return dim_; }
  const GroupPartition& partition() const override { return partition_; }
  const std::vector<TaskId>& tasks() const override { return tasks_; }
  const std::map<int, std::uint64_t>& task_sizes() const override {
    return sizes_;
  }
  const Eigen::VectorXd& initial_point() const override { return initial_; }
  double task_loss(int task, const Eigen::VectorXd& theta) const override;
  Eigen::VectorXd task_gradient(int task,
                                const Eigen::VectorXd& theta) const override;
  std::optional<double> lipschitz_constant() const override;
  std::optional<Eigen::VectorXd> closed_form_optimum() const override;
  const std::map<int, int>* family_assignment() const override {
    return families_.empty() ? nullptr : &families_;
  }

  const QuadraticTask& objective(int task) const;
  void assign_families(std::map<int, int> families);

 private:
  std::size_t dim_;
  std::vector<QuadraticTask> objectives_;
  std::vector<TaskId> tasks_;
  std::map<int, std::uint64_t> sizes_;
  Eigen::VectorXd initial_;
  GroupPartition partition_;
  std::map<int, int> families_;
};

/// Families of related quadratic tasks. Each family f gets a unit base
/// direction b_f, pairs of which meet at `cross_family_angle_deg`; task
/// directions are noisy copies d_i = normalize(b_f + noise * xi_i).
///
/// layout "radial": isotropic bowls with centers c_i = -radius * d_i, so at
/// the origin task gradients are exactly radius * d_i.
/// layout "shared_center": all bowls share the origin as center and the
/// direction enters the curvature, A_i = I + curvature_scale * d_i d_i^T;
/// pairwise gradient cosines then stay positive everywhere along a descent
/// trajectory (for curvature_scale <= 2).
struct FamilyProblemSpec {
  int num_families = 3;
  int tasks_per_family = 3;
  std::size_t dimension = 8;  // needs >= num_families + 1
  double cross_family_angle_deg = 60.0;
  double within_family_noise = 0.1;
  double center_radius = 10.0;
  std::string layout = "radial";
  double curvature_scale = 1.0;
  std::uint64_t construction_seed = 0;
  std::vector<std::uint64_t> task_sizes;       // optional; default 1e6 each
  std::optional<Eigen::VectorXd> initial_point;  // optional layout default

  void validate() const;
};

/// Initial point a family spec falls back to when it does not pin one:
/// the origin for "radial" (gradients there are exactly radius * d_i),
/// distance radius from the shared center along (1,...,1) otherwise.
Eigen::VectorXd family_default_initial(const FamilyProblemSpec& spec);

class FamilyTaskSet : public QuadraticProblem {
 public:
  explicit FamilyTaskSet(const FamilyProblemSpec& spec);

  const FamilyProblemSpec& spec() const { return spec_; }
  const std::vector<Eigen::VectorXd>& base_directions() const { return bases_; }
  const std::vector<Eigen::VectorXd>& task_directions() const {
    return directions_;
  }

 private:
  FamilyProblemSpec spec_;
  std::vector<Eigen::VectorXd> bases_;
  std::vector<Eigen::VectorXd> directions_;
};

/// Deep linear network h = W_L ... W_1 x with per-task regression targets;
/// task i's loss is 1/2 |W_L...W_1 x_i - y_i|^2. Parameters are the
/// flattened weight matrices (row-major, layer 1 first), which gives the
/// partition real layer structure to group over.
struct LayeredLinearSpec {
  std::vector<int> layer_dims;  // [d_0, ..., d_L], L >= 2 matrices
  int num_tasks = 4;
  std::uint64_t data_seed = 0;
  // whole_model | enc_dec | all_layer | all_matrix
  std::string granularity = "all_layer";
  double init_scale = 0.5;
  std::vector<std::uint64_t> task_sizes;  // optional; default 1e6 each

  void validate() const;
};

class LayeredLinearModel : public SyntheticProblem {
 public:
  explicit LayeredLinearModel(const LayeredLinearSpec& spec);

  std::size_t dimension() const override { return dim_; }
  const GroupPartition& partition() const override { return partition_; }
  const std::vector<TaskId>& tasks() const override { return tasks_; }
  const std::map<int, std::uint64_t>& task_sizes() const override {
    return sizes_;
  }
  const Eigen::VectorXd& initial_point() const override { return initial_; }
  double task_loss(int task, const Eigen::VectorXd& theta) const override;
  Eigen::VectorXd task_gradient(int task,
                                const Eigen::VectorXd& theta) const override;

  const LayeredLinearSpec& spec() const { return spec_; }

 private:
  std::vector<Eigen::MatrixXd> unpack(const Eigen::VectorXd& theta) const;

  LayeredLinearSpec spec_;
  std::size_t dim_ = 0;
  GroupPartition partition_;
  std::vector<TaskId> tasks_;
  std::map<int, std::uint64_t> sizes_;
  Eigen::VectorXd initial_;
  std::vector<Eigen::VectorXd> inputs_;   // x_i
  std::vector<Eigen::VectorXd> targets_;  // y_i
};

/// Slices per-task flat gradients into the partition's groups. `batch` may
/// contain duplicates; they collapse to one entry per task.
GradientBundle task_gradients(const SyntheticProblem& problem,
                              const Eigen::VectorXd& theta,
                              const std::vector<int>& batch, std::int64_t step);

struct TrainConfig {
  double step_size = 0.01;
  int max_steps = 100;
  int batch_tasks = 0;    // 0: every task every step; else sampled draws
  int record_every = 1;   // similarity cadence; 0 disables recording
  bool record_parameters = false;
  double divergence_threshold = 1e12;
  VaccineConfig vaccine;
  double sampler_temperature = 5.0;
  std::uint64_t sampler_seed = 0;

  void validate() const;
};

/// Everything a run produces, in memory. Artifact writing happens at the
/// experiment layer so that the trainer itself never touches the
/// filesystem.
struct TrainRun {
  explicit TrainRun(double beta) : ema(beta) {}

  // Joint and per-task losses at theta_0..theta_T (max_steps + 1 rows).
  std::vector<double> losses;
  std::vector<std::vector<double>> task_losses;
  std::vector<SimilarityRecord> similarities;  // pre-surgery, cadence-gated
  std::vector<SurgeryReport> reports;          // every step
  std::vector<Eigen::VectorXd> parameters;     // only when requested
  Eigen::VectorXd final_parameters;
  EmaStore ema;
  std::set<int> surgery_tasks;
  // Per step: squared norm of the raw (pre-surgery) summed gradient, and
  // the largest alignment coefficient among fired pairs (0 when none).
  std::vector<double> raw_grad_sqnorm;
  std::vector<double> max_alignment;
  std::optional<double> lipschitz;
};

/// Plain gradient descent on the combined gradient. Throws DivergenceError
/// when the joint loss leaves the finite range or crosses the threshold.
TrainRun train(const SyntheticProblem& problem, const TrainConfig& cfg);

}  // namespace gradvac
