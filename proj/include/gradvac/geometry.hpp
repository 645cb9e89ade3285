#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace gradvac {

// Gradient kernels operate under two numerical guards.
//
// A vector whose Euclidean norm is below the norm tolerance is treated as
// degenerate: kernels return the input unchanged instead of dividing by a
// vanishing norm, and report the skip to the caller.
//
// Similarity targets are clamped to [-clamp, clamp] before use because the
// alignment update carries a 1 / sqrt(1 - target^2) factor.
inline constexpr double kNormTolerance = 1e-12;
inline constexpr double kTargetClamp = 0.99;

/// Flat gradient slice for one task restricted to one parameter group.
/// Components are finite and the vector is non-empty; the constructor
/// enforces both and every kernel may rely on it.
struct GradVector {
  std::vector<double> values;
  std::string group_id;

  GradVector(std::vector<double> vals, std::string group);

  std::size_t size() const { return values.size(); }
  double norm() const;

  /// Throws DimensionError when lengths differ.
  double dot(const GradVector& other) const;
};

/// Cosine similarity plus a degeneracy flag. When either operand's norm is
/// below the tolerance the value is 0 and `degenerate` is set; consumers
/// must not feed such a value into an EMA.
struct CosineResult {
  double value = 0.0;
  bool degenerate = false;
};

CosineResult cosine(const GradVector& a, const GradVector& b,
                    double norm_tolerance = kNormTolerance);

/// Result of a surgery kernel. `gradient` is a fresh vector in the same
/// group; inputs are never mutated.
struct AlignResult {
  GradVector gradient;
  bool skipped = false;         // degenerate operand, input returned as-is
  bool target_clamped = false;  // requested target exceeded the clamp
};

/// Removes from g_i its projection onto g_j when the two conflict:
///   g_i' = g_i - (g_i . g_j / |g_j|^2) g_j
/// The caller decides *whether* to project (sign test on the cosine); the
/// kernel applies the formula unconditionally.
AlignResult pcgrad_project(const GradVector& g_i, const GradVector& g_j,
                           double norm_tolerance = kNormTolerance);

/// Rotates g_i inside span{g_i, g_j} so that its cosine with g_j becomes
/// `target`:
///   g_i' = g_i + a2 g_j,
///   a2 = |g_i| (target sqrt(1-phi^2) - phi sqrt(1-target^2))
///        / (|g_j| sqrt(1-target^2))
/// where phi is the current cosine. With target = 0 this reduces exactly to
/// pcgrad_project. The target is clamped as described above.
AlignResult vaccine_align(const GradVector& g_i, const GradVector& g_j,
                          double target,
                          double norm_tolerance = kNormTolerance,
                          double target_clamp = kTargetClamp);

/// Dimensionless rotation magnitude a = a2 |g_j| / |g_i|; also the
/// coefficient that enters the step-size bound of the descent analysis.
/// `target` must already be clamped away from +-1.
double alignment_coefficient(double phi, double target);

/// Scales g to the requested Euclidean norm; degenerate input is returned
/// unchanged with `skipped` set. `norm` must be non-negative.
AlignResult rescale_to_norm(const GradVector& g, double norm,
                            double norm_tolerance = kNormTolerance);

}  // namespace gradvac
