#include "gradvac/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "gradvac/errors.hpp"

namespace gradvac {

namespace {

void check_same_length(const GradVector& a, const GradVector& b) {
  if (a.values.size() != b.values.size()) {
    throw DimensionError("gradient length mismatch: " +
                         std::to_string(a.values.size()) + " vs " +
                         std::to_string(b.values.size()));
  }
}

double clamp_unit(double x) { return std::clamp(x, -1.0, 1.0); }

}  // namespace

GradVector::GradVector(std::vector<double> vals, std::string group)
    : values(std::move(vals)), group_id(std::move(group)) {
  if (values.empty()) {
    throw ValidationError("gradient vector for group '" + group_id +
                          "' is empty");
  }
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw ValidationError("gradient vector for group '" + group_id +
                            "' has a non-finite component");
    }
  }
}

double GradVector::norm() const {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

double GradVector::dot(const GradVector& other) const {
  check_same_length(*this, other);
  double s = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) s += values[k] * other.values[k];
  return s;
}

CosineResult cosine(const GradVector& a, const GradVector& b,
                    double norm_tolerance) {
  const double d = a.dot(b);
  const double na = a.norm();
  const double nb = b.norm();
  if (std::min(na, nb) < norm_tolerance) return {0.0, true};
  // Rounding can push |d| a hair past na*nb; clamp so downstream
  // sqrt(1 - phi^2) stays real.
  return {clamp_unit(d / (na * nb)), false};
}

AlignResult pcgrad_project(const GradVector& g_i, const GradVector& g_j,
                           double norm_tolerance) {
  check_same_length(g_i, g_j);
  // Squared norm taken directly, not via norm()^2: the sqrt round-trip
  // would cost the exact cancellation on axis-aligned inputs.
  double nj_sq = 0.0;
  for (double v : g_j.values) nj_sq += v * v;
  if (g_i.norm() < norm_tolerance || std::sqrt(nj_sq) < norm_tolerance) {
    return {g_i, true, false};
  }
  const double coeff = g_i.dot(g_j) / nj_sq;
  std::vector<double> out(g_i.values.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = g_i.values[k] - coeff * g_j.values[k];
  }
  return {GradVector(std::move(out), g_i.group_id), false, false};
}

double alignment_coefficient(double phi, double target) {
  const double sin_phi = std::sqrt(1.0 - phi * phi);
  const double sin_target = std::sqrt(1.0 - target * target);
  return (target * sin_phi - phi * sin_target) / sin_target;
}

AlignResult vaccine_align(const GradVector& g_i, const GradVector& g_j,
                          double target, double norm_tolerance,
                          double target_clamp) {
  check_same_length(g_i, g_j);
  const double ni = g_i.norm();
  const double nj = g_j.norm();
  if (ni < norm_tolerance || nj < norm_tolerance) {
    return {g_i, true, false};
  }

  bool clamped = false;
  double t = target;
  if (t > target_clamp) {
    t = target_clamp;
    clamped = true;
  } else if (t < -target_clamp) {
    t = -target_clamp;
    clamped = true;
  }

  const double phi = clamp_unit(g_i.dot(g_j) / (ni * nj));
  const double a2 = ni / nj * alignment_coefficient(phi, t);

  std::vector<double> out(g_i.values.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = g_i.values[k] + a2 * g_j.values[k];
  }
  return {GradVector(std::move(out), g_i.group_id), false, clamped};
}

AlignResult rescale_to_norm(const GradVector& g, double norm,
                            double norm_tolerance) {
  if (!(norm >= 0.0)) {
    throw ValidationError("rescale target norm must be non-negative");
  }
  const double n = g.norm();
  if (n < norm_tolerance) return {g, true, false};
  const double scale = norm / n;
  std::vector<double> out(g.values.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = scale * g.values[k];
  return {GradVector(std::move(out), g.group_id), false, false};
}

}  // namespace gradvac
