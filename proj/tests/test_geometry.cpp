#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradvac/errors.hpp"
#include "gradvac/geometry.hpp"
#include "gradvac/rng.hpp"

using namespace gradvac;

namespace {

GradVector vec(std::vector<double> v, std::string group = "g") {
  return GradVector(std::move(v), std::move(group));
}

GradVector random_vec(Rng& rng, std::size_t dim, const std::string& group = "g") {
  std::vector<double> v(dim);
  for (auto& x : v) x = 2.0 * uniform_unit(rng) - 1.0;
  return GradVector(std::move(v), group);
}

}  // namespace

TEST_CASE("grad vector validation") {
  CHECK_THROWS_AS(vec({}), ValidationError);
  CHECK_THROWS_AS(vec({1.0, std::nan("")}), ValidationError);
  CHECK_THROWS_AS(vec({std::numeric_limits<double>::infinity()}), ValidationError);
  CHECK_THROWS_AS(vec({1.0, 2.0}).dot(vec({1.0})), DimensionError);
  CHECK(vec({3.0, 4.0}).norm() == 5.0);
}

TEST_CASE("cosine known values") {
  CHECK(cosine(vec({3.0, 4.0}), vec({3.0, 4.0})).value == 1.0);
  CHECK(cosine(vec({1.0, 0.0}), vec({0.0, 1.0})).value == 0.0);

  const CosineResult r = cosine(vec({1.0, 0.0}), vec({-1.0, 1.0}));
  CHECK(r.value == doctest::Approx(-1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK_FALSE(r.degenerate);

  const CosineResult anti = cosine(vec({2.0, 0.0}), vec({-3.0, 0.0}));
  CHECK(anti.value == -1.0);
}

TEST_CASE("cosine degenerate guard") {
  const CosineResult r = cosine(vec({0.0, 0.0}), vec({1.0, 0.0}));
  CHECK(r.degenerate);
  CHECK(r.value == 0.0);

  // Just under the tolerance on either side.
  const CosineResult tiny = cosine(vec({1e-13, 0.0}), vec({1.0, 0.0}));
  CHECK(tiny.degenerate);
  const CosineResult ok = cosine(vec({1e-11, 0.0}), vec({1.0, 0.0}));
  CHECK_FALSE(ok.degenerate);
  CHECK(ok.value == 1.0);
}

TEST_CASE("cosine symmetry, bounds, scale invariance") {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t dim = 2 + trial % 7;
    const GradVector a = random_vec(rng, dim);
    const GradVector b = random_vec(rng, dim);
    const CosineResult ab = cosine(a, b);
    const CosineResult ba = cosine(b, a);
    if (ab.degenerate) continue;
    CHECK(ab.value == ba.value);
    CHECK(ab.value >= -1.0);
    CHECK(ab.value <= 1.0);

    const double s = 0.5 + 3.0 * uniform_unit(rng);
    std::vector<double> scaled = a.values;
    for (auto& x : scaled) x *= s;
    const CosineResult sab = cosine(vec(std::move(scaled), "g"), b);
    CHECK(sab.value == doctest::Approx(ab.value).epsilon(1e-12));
  }
}

TEST_CASE("projection known values") {
  const AlignResult r = pcgrad_project(vec({1.0, 0.0}), vec({-1.0, 1.0}));
  CHECK(r.gradient.values[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r.gradient.values[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_FALSE(r.skipped);
  CHECK(r.gradient.dot(vec({-1.0, 1.0})) == 0.0);

  // Orthogonal partner leaves the vector untouched.
  const AlignResult o = pcgrad_project(vec({1.0, 0.0}), vec({0.0, 1.0}));
  CHECK(o.gradient.values == std::vector<double>{1.0, 0.0});

  // Exactly opposed vectors annihilate.
  const AlignResult z = pcgrad_project(vec({2.0, 0.0}), vec({-1.0, 0.0}));
  CHECK(z.gradient.values == std::vector<double>{0.0, 0.0});
}

TEST_CASE("projection orthogonality property") {
  Rng rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t dim = 2 + trial % 6;
    const GradVector gi = random_vec(rng, dim);
    const GradVector gj = random_vec(rng, dim);
    if (gi.norm() < 1e-6 || gj.norm() < 1e-6) continue;
    const AlignResult r = pcgrad_project(gi, gj);
    REQUIRE_FALSE(r.skipped);
    CHECK(std::abs(r.gradient.dot(gj)) <= 1e-10 * gi.norm() * gj.norm());
  }
}

TEST_CASE("projection degenerate partner skips") {
  const GradVector gi = vec({1.0, 2.0});
  const AlignResult r = pcgrad_project(gi, vec({0.0, 0.0}));
  CHECK(r.skipped);
  CHECK(r.gradient.values == gi.values);
}

TEST_CASE("alignment known value") {
  const AlignResult r = vaccine_align(vec({1.0, 0.0}), vec({0.0, 1.0}), 0.6);
  CHECK(r.gradient.values[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(r.gradient.values[1] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK_FALSE(r.target_clamped);
  CHECK(cosine(r.gradient, vec({0.0, 1.0})).value ==
        doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("alignment with zero target matches projection") {
  Rng rng(31337);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t dim = 2 + trial % 5;
    const GradVector gi = random_vec(rng, dim);
    const GradVector gj = random_vec(rng, dim);
    if (gi.norm() < 1e-6 || gj.norm() < 1e-6) continue;
    const AlignResult a = vaccine_align(gi, gj, 0.0);
    const AlignResult p = pcgrad_project(gi, gj);
    for (std::size_t k = 0; k < dim; ++k) {
      CHECK(std::abs(a.gradient.values[k] - p.gradient.values[k]) <=
            1e-10 * (1.0 + gi.norm()));
    }
  }
}

TEST_CASE("alignment reaches the requested cosine") {
  Rng rng(99);
  int checked = 0;
  while (checked < 250) {
    const std::size_t dim = 2 + static_cast<std::size_t>(checked) % 6;
    const GradVector gi = random_vec(rng, dim);
    const GradVector gj = random_vec(rng, dim);
    if (gi.norm() < 1e-3 || gj.norm() < 1e-3) continue;
    const CosineResult phi = cosine(gi, gj);
    if (std::abs(phi.value) > 0.95) continue;
    const double target = 1.8 * uniform_unit(rng) - 0.9;
    const AlignResult r = vaccine_align(gi, gj, target);
    REQUIRE_FALSE(r.skipped);
    CHECK(std::abs(cosine(r.gradient, gj).value - target) <= 1e-8);
    ++checked;
  }
}

TEST_CASE("alignment at the current cosine is a no-op") {
  const GradVector gi = vec({2.0, 0.0});
  const GradVector gj = vec({0.0, 3.0});
  const AlignResult r = vaccine_align(gi, gj, 0.0);  // phi is exactly 0
  CHECK(r.gradient.values == gi.values);
}

TEST_CASE("alignment result stays in the operand span") {
  Rng rng(5150);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t dim = 3 + trial % 5;
    const GradVector gi = random_vec(rng, dim);
    const GradVector gj = random_vec(rng, dim);
    if (gi.norm() < 1e-3 || gj.norm() < 1e-3) continue;
    const double target = 1.6 * uniform_unit(rng) - 0.8;
    const AlignResult r = vaccine_align(gi, gj, target);
    if (r.skipped) continue;

    // result - g_i must be a multiple of g_j
    std::size_t pivot = 0;
    for (std::size_t k = 1; k < dim; ++k) {
      if (std::abs(gj.values[k]) > std::abs(gj.values[pivot])) pivot = k;
    }
    const double ratio =
        (r.gradient.values[pivot] - gi.values[pivot]) / gj.values[pivot];
    double residual = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      const double d = r.gradient.values[k] - gi.values[k] - ratio * gj.values[k];
      residual += d * d;
    }
    CHECK(std::sqrt(residual) <= 1e-10 * (1.0 + r.gradient.norm()));
  }
}

TEST_CASE("alignment clamps extreme targets") {
  const GradVector gi = vec({1.0, 0.0});
  const GradVector gj = vec({0.0, 1.0});
  const AlignResult hi = vaccine_align(gi, gj, 0.9999);
  CHECK(hi.target_clamped);
  CHECK(cosine(hi.gradient, gj).value == doctest::Approx(0.99).epsilon(1e-8));

  const AlignResult lo = vaccine_align(gi, gj, -1.0);
  CHECK(lo.target_clamped);
  CHECK(cosine(lo.gradient, gj).value == doctest::Approx(-0.99).epsilon(1e-8));

  const AlignResult in_range = vaccine_align(gi, gj, 0.5);
  CHECK_FALSE(in_range.target_clamped);
}

TEST_CASE("alignment degenerate operands skip") {
  const GradVector gi = vec({1.0, 2.0});
  const AlignResult a = vaccine_align(gi, vec({0.0, 0.0}), 0.5);
  CHECK(a.skipped);
  CHECK(a.gradient.values == gi.values);

  const AlignResult b = vaccine_align(vec({0.0, 0.0}), gi, 0.5);
  CHECK(b.skipped);
  CHECK(b.gradient.values == std::vector<double>{0.0, 0.0});
}

TEST_CASE("alignment coefficient closed form") {
  CHECK(alignment_coefficient(0.5, 0.0) == -0.5);
  CHECK(alignment_coefficient(0.0, 0.0) == 0.0);
  // positive whenever phi < target
  Rng rng(808);
  for (int trial = 0; trial < 200; ++trial) {
    const double phi = 1.8 * uniform_unit(rng) - 0.9;
    const double target = 1.8 * uniform_unit(rng) - 0.9;
    if (phi >= target) continue;
    CHECK(alignment_coefficient(phi, target) > 0.0);
  }
}

TEST_CASE("rescale known values") {
  const AlignResult unit = rescale_to_norm(vec({3.0, 4.0}), 1.0);
  CHECK(unit.gradient.values[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(unit.gradient.values[1] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(unit.gradient.norm() == doctest::Approx(1.0).epsilon(1e-15));

  const AlignResult doubled =
      rescale_to_norm(vec({1.0, 1.0}), 2.0 * std::sqrt(2.0));
  CHECK(doubled.gradient.values == std::vector<double>{2.0, 2.0});

  const AlignResult zero = rescale_to_norm(vec({0.0, 0.0}), 5.0);
  CHECK(zero.skipped);
  CHECK(zero.gradient.values == std::vector<double>{0.0, 0.0});

  CHECK_THROWS_AS(rescale_to_norm(vec({1.0}), -1.0), ValidationError);
}

TEST_CASE("kernels are pure and deterministic") {
  const GradVector gi = vec({0.3, -1.7, 2.2});
  const GradVector gj = vec({-0.4, 0.9, 1.1});
  const std::vector<double> gi_before = gi.values;
  const std::vector<double> gj_before = gj.values;

  const AlignResult first = vaccine_align(gi, gj, 0.25);
  const AlignResult second = vaccine_align(gi, gj, 0.25);
  CHECK(first.gradient.values == second.gradient.values);
  CHECK(gi.values == gi_before);
  CHECK(gj.values == gj_before);

  const AlignResult p1 = pcgrad_project(gi, gj);
  const AlignResult p2 = pcgrad_project(gi, gj);
  CHECK(p1.gradient.values == p2.gradient.values);
}
