#include "jmflow/horofunction.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "jmflow/action.hpp"
#include "jmflow/integrate.hpp"
#include "jmflow/phi_cache.hpp"

namespace jmflow {
namespace {

MassSystem two_equal() { return make_mass_system({1.0, 1.0}, 2); }

Vec config(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  int i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

PhiCache& shared_cache() {
  static PhiCache cache;
  return cache;
}

// Radial two-body escape at h = 0.5: bodies separate along the x axis, so the
// ray direction is exactly constant and Busemann truncations settle quickly.
const double kEnergy = 0.5;

const Trajectory& escape_ray() {
  static const Trajectory ray = [] {
    const MassSystem ms = two_equal();
    const PhaseState s0{config({-1.0, 0.0, 1.0, 0.0}), config({-1.0, 0.0, 1.0, 0.0})};
    IntegrationResult res = integrate(ms, s0, 0.0, 330.0);
    EXPECT_TRUE(res.ok());
    EXPECT_NEAR(res.trajectory.h0, kEnergy, 1e-12);
    return res.trajectory;
  }();
  return ray;
}

Mat probe_grid() {
  Mat grid(5, 4);
  grid.row(0).setZero();
  grid.row(1) = config({-1.0, 0.0, 1.0, 0.0}).transpose();
  grid.row(2) = config({-1.0, 0.1, 1.0, -0.1}).transpose();
  grid.row(3) = config({-2.0, 0.0, 2.0, 0.0}).transpose();
  grid.row(4) = escape_ray().state_at(3.0).q.transpose();
  return grid;
}

const HorofunctionField& main_field() {
  static const HorofunctionField field = [] {
    BusemannOptions opts;
    return busemann_estimate(two_equal(), escape_ray(), kEnergy, probe_grid(), opts,
                             &shared_cache());
  }();
  return field;
}

TEST(Busemann, AnchorValueIsExactlyZero) {
  const HorofunctionField& f = main_field();
  ASSERT_EQ(f.points(), 5);
  EXPECT_TRUE(f.excluded.empty());
  EXPECT_EQ(f.values[0], 0.0);
}

TEST(Busemann, IncrementsDecayBelowTolerance) {
  const HorofunctionField& f = main_field();
  ASSERT_GE(f.increment_history.size(), 2u);
  EXPECT_TRUE(f.converged);
  EXPECT_LE(f.increment_history.back(), 1e-4);
  EXPECT_LT(f.increment_history.back(), f.increment_history.front());
  for (double inc : f.increment_history) EXPECT_GE(inc, 0.0);
}

TEST(Busemann, RayIdentityMatchesShiftedAction) {
  const HorofunctionField& f = main_field();
  const double along = escape_ray().shifted_action_between(0.0, 3.0, kEnergy);
  EXPECT_NEAR(f.values[4] - f.values[1], along, 1e-3);
}

TEST(Busemann, ValuesIncreaseAlongEscapeDirection) {
  const HorofunctionField& f = main_field();
  EXPECT_GT(f.values[1], f.values[0]);
  EXPECT_GT(f.values[3], f.values[1]);
  EXPECT_GT(f.values[4], f.values[1]);
}

TEST(Busemann, DominationHoldsOnSampledPairs) {
  const MassSystem ms = two_equal();
  const HorofunctionField& f = main_field();
  EXPECT_LE(domination_check(ms, f, {{1, 1}}, {}, &shared_cache()), 1e-9);
  const double ray_gap = domination_check(ms, f, {{1, 4}}, {}, &shared_cache());
  EXPECT_LE(std::abs(f.values[4] - f.values[1] -
                     phi_free(ms, kEnergy, probe_grid().row(1).transpose(),
                              probe_grid().row(4).transpose(), {}, &shared_cache())
                         .value),
            1e-3);
  EXPECT_LE(ray_gap, 1e-3);
  const double worst =
      domination_check(ms, f, {{0, 2}, {2, 3}, {3, 1}, {2, 4}, {4, 0}}, {}, &shared_cache());
  EXPECT_LE(worst, 1e-3);
}

TEST(Busemann, RejectsShortRay) {
  const MassSystem ms = two_equal();
  const PhaseState s0{config({-1.0, 0.0, 1.0, 0.0}), config({-1.0, 0.0, 1.0, 0.0})};
  IntegrationResult res = integrate(ms, s0, 0.0, 7.0);
  ASSERT_TRUE(res.ok());
  EXPECT_THROW(busemann_estimate(ms, res.trajectory, kEnergy, probe_grid()),
               std::invalid_argument);
}

TEST(Busemann, RejectsGridRowNearBinaryCollision) {
  const MassSystem ms3 = make_mass_system({1.0, 1.0, 1.0}, 2);
  Mat grid(1, 6);
  grid.row(0) = config({0.0, 0.0, 1e-13, 0.0, 1.0, 1.0}).transpose();
  Mat p(1, 6);
  p.row(0) = config({-3.0, 0.0, 3.0, 0.0, 0.0, 4.0}).transpose();
  EXPECT_THROW(horofunction_from_sequence(ms3, {kEnergy}, p, grid), std::invalid_argument);
}

TEST(HorofunctionSequence, FixedRayPointsReproduceBusemannEstimate) {
  const MassSystem ms = two_equal();
  const HorofunctionField& ref = main_field();
  const int n = static_cast<int>(ref.truncations.size());
  ASSERT_GE(n, 2);
  Mat p(n, 4);
  std::vector<double> hs(n, kEnergy);
  for (int k = 0; k < n; ++k) {
    p.row(k) = escape_ray().state_at(ref.truncations[k]).q.transpose();
  }
  BusemannOptions opts;
  const HorofunctionField seq =
      horofunction_from_sequence(ms, hs, p, probe_grid(), opts, &shared_cache());
  ASSERT_TRUE(seq.excluded.empty());
  EXPECT_TRUE(seq.converged);
  for (int i = 0; i < ref.points(); ++i) {
    EXPECT_NEAR(seq.values[i], ref.values[i], 1e-6);
  }
}

TEST(HorofunctionSequence, DecreasingEnergiesStayAnchoredAndFinite) {
  const MassSystem ms = two_equal();
  Mat p(3, 4);
  std::vector<double> hs;
  for (int k = 0; k < 3; ++k) {
    const double t = 40.0 * std::pow(2.0, k);
    p.row(k) = escape_ray().state_at(t).q.transpose();
    hs.push_back(kEnergy + 1.0 / (k + 2.0));
  }
  Mat grid(3, 4);
  grid.row(0).setZero();
  grid.row(1) = config({-1.0, 0.0, 1.0, 0.0}).transpose();
  grid.row(2) = config({-1.0, 0.1, 1.0, -0.1}).transpose();
  const HorofunctionField f =
      horofunction_from_sequence(ms, hs, p, grid, {}, &shared_cache());
  ASSERT_TRUE(f.excluded.empty());
  EXPECT_EQ(f.values[0], 0.0);
  EXPECT_EQ(f.increment_history.size(), 2u);
  for (int i = 1; i < 3; ++i) EXPECT_TRUE(std::isfinite(f.values[i]));
}

TEST(HorofunctionSequence, RequiresGrowingNorms) {
  const MassSystem ms = two_equal();
  Mat p(2, 4);
  p.row(0) = config({-4.0, 0.0, 4.0, 0.0}).transpose();
  p.row(1) = config({-4.0, 0.0, 4.0, 0.0}).transpose();
  Mat grid(1, 4);
  grid.row(0).setZero();
  EXPECT_THROW(horofunction_from_sequence(ms, {0.5, 0.5}, p, grid), std::invalid_argument);
}

LatticeSpec small_lattice() {
  LatticeSpec lat;
  lat.origin = config({-1.02, -0.02, 1.02, 0.02});
  const double step = 0.01 / std::sqrt(2.0);
  lat.axes = Mat(4, 2);
  lat.axes.col(0) = step * config({-1.0, 0.0, 1.0, 0.0});
  lat.axes.col(1) = step * config({0.0, -1.0, 0.0, 1.0});
  lat.shape = {5, 5};
  return lat;
}

HorofunctionField synthetic_field(const LatticeSpec& lat, const Vec& values) {
  HorofunctionField f;
  f.lattice = lat;
  f.grid = lattice_points(lat);
  f.values = values;
  f.h = kEnergy;
  f.converged = true;
  return f;
}

TEST(LatticeField, MultilinearInterpolationReproducesAffineValues) {
  const MassSystem ms = two_equal();
  const LatticeSpec lat = small_lattice();
  const Mat grid = lattice_points(lat);
  const Vec c = config({0.3, -0.2, 0.5, 0.1});
  Vec values(grid.rows());
  for (int r = 0; r < grid.rows(); ++r) {
    values[r] = 2.0 + mass_inner(ms, c, grid.row(r).transpose());
  }
  const HorofunctionField f = synthetic_field(lat, values);
  const Vec x = lat.origin + 0.3 * lat.axes.col(0) + 1.7 * lat.axes.col(1);
  const auto v = f.value_at(x);
  ASSERT_TRUE(v.has_value());
  EXPECT_NEAR(*v, 2.0 + mass_inner(ms, c, x), 1e-9);

  EXPECT_FALSE(f.value_at(lat.origin - 0.5 * lat.axes.col(0)).has_value());
  EXPECT_FALSE(f.value_at(Vec(x + 0.1 * config({1.0, 0.0, 1.0, 0.0}))).has_value());

  HorofunctionField holed = f;
  holed.excluded = {lat.flat({1, 1})};
  const Vec inside = lat.origin + 0.5 * lat.axes.col(0) + 0.5 * lat.axes.col(1);
  EXPECT_FALSE(holed.value_at(inside).has_value());
  EXPECT_TRUE(holed.value_at(Vec(inside + 2.0 * lat.axes.col(0))).has_value());

  const auto eval = field_evaluator(f);
  EXPECT_EQ(eval(x), f.value_at(x));
}

TEST(LatticeField, ExactRowMatchWithoutLattice) {
  HorofunctionField f;
  f.grid = Mat(2, 4);
  f.grid.row(0) = config({-1.0, 0.0, 1.0, 0.0}).transpose();
  f.grid.row(1) = config({-2.0, 0.0, 2.0, 0.0}).transpose();
  f.values = config({0.25, 0.75});
  const auto v = f.value_at(f.grid.row(1).transpose());
  ASSERT_TRUE(v.has_value());
  EXPECT_EQ(*v, 0.75);
  EXPECT_FALSE(f.value_at(config({0.0, 5.0, 0.0, -5.0})).has_value());
  f.excluded = {1};
  EXPECT_FALSE(f.value_at(f.grid.row(1).transpose()).has_value());
}

TEST(Viscosity, ConstantFieldRecoversPotentialPlusEnergy) {
  const MassSystem ms = two_equal();
  const LatticeSpec lat = small_lattice();
  const HorofunctionField f =
      synthetic_field(lat, Vec::Constant(lat.points(), 0.7));
  const ViscosityReport rep = viscosity_residual(ms, f, kEnergy);
  ASSERT_EQ(rep.point_index.size(), 9u);
  EXPECT_EQ(rep.evaluated, 9);
  for (std::size_t r = 0; r < rep.point_index.size(); ++r) {
    EXPECT_FALSE(rep.masked[r]);
    EXPECT_EQ(rep.gradient_norm[static_cast<int>(r)], 0.0);
    const double u = potential(ms, f.grid.row(rep.point_index[r]).transpose());
    EXPECT_NEAR(rep.residual[static_cast<int>(r)], -(u + kEnergy), 1e-12);
  }
}

TEST(Viscosity, LinearFieldMatchesHandComputedGradient) {
  const MassSystem ms = two_equal();
  const LatticeSpec lat = small_lattice();
  const Vec c = 30.0 * lat.axes.col(0) + 10.0 * lat.axes.col(1);
  Vec values(lat.points());
  const Mat grid = lattice_points(lat);
  for (int r = 0; r < grid.rows(); ++r) {
    values[r] = -mass_inner(ms, c, grid.row(r).transpose());
  }
  const HorofunctionField f = synthetic_field(lat, values);
  const ViscosityReport rep = viscosity_residual(ms, f, kEnergy);
  ASSERT_EQ(rep.evaluated, 9);
  const double cnorm = mass_norm(ms, c);
  for (std::size_t r = 0; r < rep.point_index.size(); ++r) {
    EXPECT_NEAR(rep.gradient_norm[static_cast<int>(r)], cnorm, 1e-10);
    const double u = potential(ms, f.grid.row(rep.point_index[r]).transpose());
    EXPECT_NEAR(rep.residual[static_cast<int>(r)], 0.5 * cnorm * cnorm - u - kEnergy, 1e-10);
  }
}

TEST(Viscosity, SpikeGetsMaskedOut) {
  const MassSystem ms = two_equal();
  const LatticeSpec lat = small_lattice();
  const Vec c = 30.0 * lat.axes.col(0) + 10.0 * lat.axes.col(1);
  const Mat grid = lattice_points(lat);
  Vec values(lat.points());
  for (int r = 0; r < grid.rows(); ++r) {
    values[r] = -mass_inner(ms, c, grid.row(r).transpose());
  }
  values[lat.flat({2, 2})] += 5.0;
  const HorofunctionField f = synthetic_field(lat, values);
  const ViscosityReport rep = viscosity_residual(ms, f, kEnergy);
  int masked = 0;
  for (bool m : rep.masked) masked += m ? 1 : 0;
  EXPECT_EQ(masked, 4);
  EXPECT_EQ(rep.evaluated, 5);
  const double cnorm = mass_norm(ms, c);
  for (std::size_t r = 0; r < rep.point_index.size(); ++r) {
    if (rep.masked[r]) continue;
    const double u = potential(ms, f.grid.row(rep.point_index[r]).transpose());
    EXPECT_NEAR(rep.residual[static_cast<int>(r)], 0.5 * cnorm * cnorm - u - kEnergy, 1e-10);
  }
}

TEST(Viscosity, RequiresLatticeMetadataAndDepth) {
  const MassSystem ms = two_equal();
  HorofunctionField bare;
  bare.grid = Mat::Zero(1, 4);
  bare.values = Vec::Zero(1);
  EXPECT_THROW(viscosity_residual(ms, bare, kEnergy), std::invalid_argument);

  LatticeSpec thin = small_lattice();
  thin.shape = {2, 5};
  const HorofunctionField f = synthetic_field(thin, Vec::Zero(thin.points()));
  EXPECT_THROW(viscosity_residual(ms, f, kEnergy), std::invalid_argument);
}

TEST(Viscosity, BusemannFieldSatisfiesEikonalEquation) {
  const MassSystem ms = two_equal();
  const LatticeSpec lat = small_lattice();
  BusemannOptions opts;
  HorofunctionField f =
      busemann_estimate(ms, escape_ray(), kEnergy, lattice_points(lat), opts, &shared_cache());
  ASSERT_TRUE(f.excluded.empty());
  EXPECT_TRUE(f.converged);
  f.lattice = lat;
  const ViscosityReport rep = viscosity_residual(ms, f, kEnergy);
  ASSERT_GE(rep.evaluated, 5);
  EXPECT_LE(rep.median_abs_residual, 5e-3);
  EXPECT_LE(rep.q90_abs_residual, 5e-2);
}

}  // namespace
}  // namespace jmflow
