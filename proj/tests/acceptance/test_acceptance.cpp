// Acceptance gate: one test per criterion, one summary line each.
// Tolerances are pinned here and nowhere else.
#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "jmflow/action.hpp"
#include "jmflow/horofunction.hpp"
#include "jmflow/integrate.hpp"
#include "jmflow/nbody.hpp"
#include "jmflow/rays.hpp"
#include "jmflow/shape.hpp"
#include "jmflow/slice.hpp"
#include "scenario.hpp"

namespace fs = std::filesystem;
using namespace jmflow;

namespace {

constexpr double kPeriodRelTol = 1e-6;
constexpr double kDriftTol = 1e-8;
constexpr double kDynamicsBudget = 5.0;

constexpr int kMetricTriples = 50;
constexpr double kSymmetryRelTol = 1e-5;
constexpr double kTriangleAbsTol = 1e-4;
constexpr double kIdentityTol = 1e-6;
constexpr double kMetricBudget = 600.0;

constexpr double kResidualOrderMin = 1.8;
constexpr double kAdditivityRelTol = 1e-4;

constexpr int kValidationPairs = 102;
constexpr double kModulusSlack = 1e-6;

constexpr double kIncrementTol = 1e-4;
constexpr double kDominationTol = 1e-3;
constexpr double kRayIdentityTol = 1e-3;

constexpr double kViscosityHalvingRatio = 0.6;
constexpr double kViscosityFloor = 5e-3;

constexpr double kEnergyGapC = 0.2;
constexpr double kSupDiffSlack = 2e-3;
constexpr double kCalibrationTol = 2e-3;

constexpr double kShapeEnergyTol = 1e-4;
constexpr double kHyperbolicExponentMax = 2.0 / 3.0 + 0.15;
constexpr double kParabolicExponentTol = 0.05;

constexpr double kConvergedFraction = 0.95;
constexpr double kShootResidualTol = 1e-6;
constexpr double kFieldAgreementTol = 2e-3;

constexpr double kJacobianFloor = 1.0 - 1e-9;
constexpr double kSlopeTolPlanar = 0.3;
constexpr double kSlopeTolSpatial = 0.5;
constexpr double kMeasureBudget = 1800.0;

struct Criterion {
  int k;
  std::string what;
  std::string note;
  ~Criterion() {
    std::printf("[CRITERION %d] %s: %s%s%s\n", k,
                ::testing::Test::HasFailure() ? "FAIL" : "PASS", what.c_str(),
                note.empty() ? "" : " | ", note.c_str());
    std::fflush(stdout);
  }
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

PhiCache& cache() {
  static PhiCache c;
  return c;
}

MassSystem two_body() { return make_mass_system({1.0, 1.0}, 2); }
MassSystem three_body() { return make_mass_system({1.0, 1.0, 1.0}, 2); }

PhaseState kepler_escape() {
  PhaseState s{Vec(4), Vec(4)};
  s.q << -1.0, 0.0, 1.0, 0.0;
  s.v << -1.0, 0.0, 1.0, 0.0;
  return s;
}

std::string scenario_path(const std::string& name) {
  return std::string(JMFLOW_SCENARIO_DIR) + "/" + name;
}

Vec random_config(const MassSystem& ms, std::mt19937& rng, double box, double min_sep) {
  std::uniform_real_distribution<double> unif(-box, box);
  while (true) {
    Vec x(ms.coords());
    for (int i = 0; i < x.size(); ++i) x[i] = unif(rng);
    if (min_pairwise_distance(ms, x) >= min_sep) return x;
  }
}

// Rows copied bitwise from the stored samples nearest the target times, so
// exact-match field lookups along the trajectory succeed.
Mat rows_near(const Trajectory& tr, const std::vector<double>& targets) {
  Mat g(targets.size(), tr.q.front().size());
  for (size_t r = 0; r < targets.size(); ++r) {
    size_t best = 0;
    for (size_t i = 1; i < tr.samples(); ++i) {
      if (std::abs(tr.t[i] - targets[r]) < std::abs(tr.t[best] - targets[r])) best = i;
    }
    g.row(r) = tr.q[best].transpose();
  }
  return g;
}

const ActionBound& fitted_bound() {
  static const ActionBound bound = [] {
    MassSystem ms = two_body();
    std::mt19937 rng(404);
    std::vector<std::pair<Vec, Vec>> pairs;
    for (int i = 0; i < 12; ++i) {
      pairs.emplace_back(random_config(ms, rng, 2.0, 0.4), random_config(ms, rng, 2.0, 0.4));
    }
    return fit_action_bound(ms, pairs, {0.5, 1.0, 2.0, 4.0}, 2.0);
  }();
  return bound;
}

LatticeSpec escape_lattice(int per_axis, double spacing) {
  const double s = 1.0 / std::sqrt(2.0);
  LatticeSpec spec;
  spec.axes = Mat(4, 2);
  spec.axes.col(0) = spacing * (Vec(4) << -s, 0.0, s, 0.0).finished();
  spec.axes.col(1) = spacing * (Vec(4) << 0.0, -s, 0.0, s).finished();
  spec.shape = {per_axis, per_axis};
  Vec center = kepler_escape().q;
  spec.origin = center - 0.5 * (per_axis - 1) * (spec.axes.col(0) + spec.axes.col(1));
  return spec;
}

double viscosity_median_at(double spacing) {
  MassSystem ms = two_body();
  auto ray = integrate(ms, kepler_escape(), 0.0, 90.0);
  EXPECT_TRUE(ray.ok());
  LatticeSpec spec = escape_lattice(5, spacing);
  BusemannOptions bo;
  bo.t0 = 5.0;
  bo.max_truncations = 5;
  bo.buse_tol = 1e-6;
  HorofunctionField u = busemann_estimate(ms, ray.trajectory, 0.5, lattice_points(spec), bo,
                                          &cache());
  u.lattice = spec;
  return viscosity_residual(ms, u, 0.5).median_abs_residual;
}

}  // namespace

TEST(Acceptance, Criterion01DynamicsOracle) {
  Criterion c{1, "dynamics oracle: circular period and bundled-scenario drift"};
  const auto t0 = std::chrono::steady_clock::now();
  MassSystem ms = two_body();

  PhaseState circ{Vec(4), Vec(4)};
  circ.q << -0.5, 0.0, 0.5, 0.0;
  const double vcirc = std::sqrt(0.5);
  circ.v << 0.0, vcirc, 0.0, -vcirc;
  const double expected = M_PI * std::sqrt(2.0);
  auto orbit = integrate(ms, circ, 0.0, 1.2 * expected);
  ASSERT_TRUE(orbit.ok());

  double lo = expected - 0.4, hi = expected + 0.4;
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  auto dist2 = [&](double t) {
    Vec dq = orbit.trajectory.state_at(t).q - circ.q;
    return mass_inner(ms, dq, dq);
  };
  double a = hi - gr * (hi - lo), b = lo + gr * (hi - lo);
  double fa = dist2(a), fb = dist2(b);
  for (int it = 0; it < 60; ++it) {
    if (fa < fb) {
      hi = b; b = a; fb = fa;
      a = hi - gr * (hi - lo); fa = dist2(a);
    } else {
      lo = a; a = b; fa = fb;
      b = lo + gr * (hi - lo); fb = dist2(b);
    }
  }
  const double period = 0.5 * (lo + hi);
  EXPECT_LE(std::abs(period - expected) / expected, kPeriodRelTol);

  int states = 0, stopped = 0;
  for (const char* name :
       {"kepler-hyperbolic.json", "kepler-parabolic.json",
        "three-body-lagrange-expanding.json", "collision-headon.json"}) {
    const auto sc = harness::load_scenario(scenario_path(name));
    for (const auto& [sname, state] : sc.states) {
      auto res = integrate(sc.ms, state, 0.0, 100.0);
      EXPECT_LE(res.trajectory.max_drift, kDriftTol) << name << " state " << sname;
      if (res.ok()) {
        EXPECT_NEAR(res.trajectory.t_end(), 100.0, 1e-9) << name << " state " << sname;
      } else {
        ++stopped;
        EXPECT_EQ(res.singularity->kind, SingularityReport::Kind::collision_approach)
            << name << " state " << sname;
      }
      ++states;
    }
  }
  EXPECT_EQ(stopped, 1);  // only the head-on infall reaches a singularity

  const double elapsed = seconds_since(t0);
  EXPECT_LE(elapsed, kDynamicsBudget);
  c.note = fmt("period gap %.1e, %.0f states, %.1fs", std::abs(period - expected) / expected,
               states, elapsed);
}

TEST(Acceptance, Criterion02MetricAxioms) {
  Criterion c{2, "free-time potential is a distance on random triples"};
  const auto t0 = std::chrono::steady_clock::now();
  MassSystem ms = three_body();
  std::mt19937 rng(2026);

  double worst_sym = 0.0, worst_tri = -1e9, worst_id = 0.0;
  for (int trial = 0; trial < kMetricTriples; ++trial) {
    const Vec x = random_config(ms, rng, 1.5, 0.4);
    const Vec y = random_config(ms, rng, 1.5, 0.4);
    const Vec z = random_config(ms, rng, 1.5, 0.4);
    for (double h : {0.0, 0.5, 2.0}) {
      const double xy = phi_free(ms, h, x, y, {}, &cache()).value;
      const double yx = phi_free(ms, h, y, x, {}, &cache()).value;
      const double xz = phi_free(ms, h, x, z, {}, &cache()).value;
      const double yz = phi_free(ms, h, y, z, {}, &cache()).value;
      const double xx = phi_free(ms, h, x, x, {}, &cache()).value;
      worst_sym = std::max(worst_sym, std::abs(xy - yx) / xy);
      worst_tri = std::max(worst_tri, xz - xy - yz);
      worst_id = std::max(worst_id, xx);
    }
  }
  EXPECT_LE(worst_sym, kSymmetryRelTol);
  EXPECT_LE(worst_tri, kTriangleAbsTol);
  EXPECT_LE(worst_id, kIdentityTol);

  const double elapsed = seconds_since(t0);
  EXPECT_LE(elapsed, kMetricBudget);
  c.note = fmt("sym %.1e, tri %.1e, %.0fs", worst_sym, worst_tri, elapsed);
}

TEST(Acceptance, Criterion03MinimizerCorrectness) {
  Criterion c{3, "residual order under node doubling and geodesic additivity"};
  MassSystem ms = two_body();
  Vec x = kepler_escape().q;
  Vec y(4);
  y << -2.0, 0.5, 2.0, -0.5;

  double prev = 0.0, worst_order = 1e9;
  for (int nodes : {48, 96, 192}) {
    PhiOptions opts;
    opts.nodes = nodes;
    const auto res = phi_free(ms, 0.5, x, y, opts, &cache());
    const double r = euler_lagrange_residuals(ms, res.inner.minimizer).maxCoeff();
    if (prev > 0.0) worst_order = std::min(worst_order, std::log2(prev / r));
    prev = r;
  }
  EXPECT_GE(worst_order, kResidualOrderMin);

  auto ray = integrate(ms, kepler_escape(), 0.0, 12.0);
  ASSERT_TRUE(ray.ok());
  const Vec yend = ray.trajectory.final_state().q;
  const double whole = phi_free(ms, 0.5, x, yend, {}, &cache()).value;
  double worst_add = 0.0;
  for (double t : {2.0, 4.0, 6.0, 8.0, 10.0}) {
    const Vec mid = ray.trajectory.state_at(t).q;
    const double split = phi_free(ms, 0.5, x, mid, {}, &cache()).value +
                         phi_free(ms, 0.5, mid, yend, {}, &cache()).value;
    worst_add = std::max(worst_add, std::abs(split - whole) / whole);
  }
  EXPECT_LE(worst_add, kAdditivityRelTol);
  c.note = fmt("order %.2f, additivity %.1e", worst_order, worst_add);
}

TEST(Acceptance, Criterion04UniformModulus) {
  Criterion c{4, "fitted modulus dominates a disjoint validation family"};
  MassSystem ms = two_body();
  const ActionBound& bound = fitted_bound();
  ASSERT_GT(bound.alpha(), 0.0);
  ASSERT_GT(bound.beta(), 0.0);

  std::mt19937 rng(405);
  const double hs[] = {0.0, 1.0, 2.0};
  int violations = 0;
  double worst_margin = -1e9;
  for (int i = 0; i < kValidationPairs; ++i) {
    const Vec x = random_config(ms, rng, 2.0, 0.4);
    const Vec y = random_config(ms, rng, 2.0, 0.4);
    const double h = hs[i % 3];
    const double phi = phi_free(ms, h, x, y, {}, &cache()).value;
    const double mu = bound.modulus(mass_norm(ms, x - y));
    worst_margin = std::max(worst_margin, phi - mu);
    if (phi > mu + kModulusSlack) ++violations;
  }
  EXPECT_EQ(violations, 0);
  c.note = fmt("%.0f pairs, worst phi-mu %.2e", double(kValidationPairs), worst_margin);
}

TEST(Acceptance, Criterion05BusemannConvergenceAndDomination) {
  Criterion c{5, "near-axis Busemann increments, domination, ray identity"};
  MassSystem ms = two_body();
  const double h = 0.5;
  auto ray = integrate(ms, kepler_escape(), 0.0, 200.0);
  ASSERT_TRUE(ray.ok());

  const std::vector<double> targets{0.0, 1.0, 2.0};
  Mat on_ray = rows_near(ray.trajectory, targets);
  Mat grid(9, 4);
  int r = 0;
  for (int i = 0; i < 3; ++i) {
    for (double tr : {0.0, 0.04, 0.08}) {
      grid.row(r) = on_ray.row(i);
      grid(r, 1) += tr;
      grid(r, 3) -= tr;
      ++r;
    }
  }

  BusemannOptions bo;
  bo.t0 = 5.0;
  bo.max_truncations = 6;  // truncation times reach t = 160
  bo.buse_tol = kIncrementTol;
  const HorofunctionField u = busemann_estimate(ms, ray.trajectory, h, grid, bo, &cache());
  EXPECT_TRUE(u.converged);
  EXPECT_TRUE(u.excluded.empty());
  ASSERT_FALSE(u.increment_history.empty());
  EXPECT_LT(u.increment_history.back(), kIncrementTol);

  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 9; ++j)
      if (i != j) pairs.emplace_back(i, j);
  const double domination = domination_check(ms, u, pairs, {}, &cache());
  EXPECT_LE(domination, kDominationTol);

  double worst_identity = 0.0;
  std::vector<double> sample_times(targets.size());
  for (size_t i = 0; i < targets.size(); ++i) {
    size_t best = 0;
    for (size_t k = 1; k < ray.trajectory.samples(); ++k) {
      if (std::abs(ray.trajectory.t[k] - targets[i]) <
          std::abs(ray.trajectory.t[best] - targets[i]))
        best = k;
    }
    sample_times[i] = ray.trajectory.t[best];
  }
  for (size_t i = 1; i < targets.size(); ++i) {
    const double du = u.values[3 * i] - u.values[0];
    const double action =
        ray.trajectory.shifted_action_between(sample_times[0], sample_times[i], h);
    worst_identity = std::max(worst_identity, std::abs(du - action));
  }
  EXPECT_LE(worst_identity, kRayIdentityTol);
  c.note = fmt("last increment %.1e, domination %.1e, identity %.1e",
               u.increment_history.back(), domination, worst_identity);
}

TEST(Acceptance, Criterion06ViscosityResidual) {
  Criterion c{6, "Hamilton-Jacobi residual halves with spacing, small at 1e-2"};
  const double m32 = viscosity_median_at(0.32);
  const double m16 = viscosity_median_at(0.16);
  const double m08 = viscosity_median_at(0.08);
  const double fine = viscosity_median_at(0.01);
  EXPECT_LE(m16, kViscosityHalvingRatio * m32);
  EXPECT_LE(m08, kViscosityHalvingRatio * m16);
  EXPECT_LE(fine, kViscosityFloor);
  c.note = fmt("medians %.1e / %.1e / %.1e", m32, m16, m08) + fmt(", fine %.1e", fine);
}

TEST(Acceptance, Criterion07CompactnessExperiment) {
  Criterion c{7, "perturbed family: gaps, field Cauchy bound, limit calibration"};
  MassSystem ms = two_body();
  const PhaseState limit = kepler_escape();
  const double t_max = 8.0;

  const int ns[] = {1, 2, 4};
  std::vector<PhaseState> states;
  for (int n : ns) {
    PhaseState s = limit;
    s.q *= 1.0 + 0.2 / n;
    states.push_back(s);
  }
  states.push_back(limit);

  auto limit_traj = integrate(ms, limit, 0.0, t_max);
  ASSERT_TRUE(limit_traj.ok());
  const Mat grid = rows_near(limit_traj.trajectory, {0.0, 1.0, 2.0, 4.0});

  RayOptions ro;
  ro.t_max = t_max;
  ro.min_window = 0.5;
  ro.busemann.t0 = 2.0;
  ro.busemann.max_truncations = 3;
  const CompactnessReport rep = compactness_experiment(ms, states, grid, ro, &cache());

  ASSERT_EQ(rep.members.size(), 4u);
  EXPECT_TRUE(rep.potential_bound_ok);
  const double h_limit = rep.members.back().h;
  for (size_t i = 0; i < 3; ++i) {
    EXPECT_LE(std::abs(rep.members[i].h - h_limit) * ns[i], kEnergyGapC) << "member " << i;
    EXPECT_GE(rep.members[i].min_pairwise, 0.5 * rep.members.back().min_pairwise);
  }

  const double d01 = rep.sup_diff(0, 1), d12 = rep.sup_diff(1, 2);
  EXPECT_LE(d12, d01);
  const ActionBound& bound = fitted_bound();
  EXPECT_LE(d01, bound.modulus(mass_norm(ms, states[0].q - states[1].q)) + kSupDiffSlack);
  EXPECT_LE(d12, bound.modulus(mass_norm(ms, states[1].q - states[2].q)) + kSupDiffSlack);

  EXPECT_GE(rep.limit_calibration.times.size(), 3u);
  EXPECT_LE(rep.limit_calibration.max_residual, kCalibrationTol);
  c.note = fmt("sup diff %.2e -> %.2e, calibration %.1e", d01, d12,
               rep.limit_calibration.max_residual);
}

TEST(Acceptance, Criterion08ChazyAsymptotics) {
  Criterion c{8, "limit shape energy identity and remainder exponents"};
  {
    MassSystem ms = two_body();
    const auto est = limit_shape(ms, kepler_escape());
    const double half_a_sq = 0.5 * std::pow(mass_norm(ms, est.a), 2);
    EXPECT_LE(std::abs(half_a_sq - est.h), kShapeEnergyTol);
    ASSERT_TRUE(est.p.has_value());
    EXPECT_LE(*est.p, kHyperbolicExponentMax);
  }
  {
    const auto sc = harness::load_scenario(scenario_path("three-body-lagrange-expanding.json"));
    const auto est = limit_shape(sc.ms, sc.state("expanding"));
    const double half_a_sq = 0.5 * std::pow(mass_norm(sc.ms, est.a), 2);
    EXPECT_LE(std::abs(half_a_sq - est.h), kShapeEnergyTol);
    ASSERT_TRUE(est.p.has_value());
    EXPECT_LE(*est.p, kHyperbolicExponentMax);
  }
  double p_par = 0.0;
  {
    const auto sc = harness::load_scenario(scenario_path("kepler-parabolic.json"));
    ShapeFitOptions opts;
    opts.horizon = 400.0;
    const auto est = limit_shape(sc.ms, sc.state("escape"), opts);
    EXPECT_LE(0.5 * std::pow(mass_norm(sc.ms, est.a), 2), 1e-6);
    ASSERT_TRUE(est.p.has_value());
    p_par = *est.p;
    EXPECT_LE(std::abs(p_par - 2.0 / 3.0), kParabolicExponentTol);
  }
  c.note = fmt("parabolic exponent %.3f", p_par);
}

TEST(Acceptance, Criterion09FixedShapeSolve) {
  Criterion c{9, "cone lattice shooting and same-shape field agreement"};
  MassSystem ms = two_body();
  ConeSpec cone;
  cone.a = (Vec(4) << -1.0, 0.0, 1.0, 0.0).finished();
  cone.alpha = 0.9;
  cone.r = 2.0;
  const double h = 0.5 * std::pow(mass_norm(ms, cone.a), 2);

  Vec center(4);
  center << -4.5, 0.0, 4.5, 0.0;
  const SlicePatch patch = build_slice_patch(ms, cone, center, {5, 5}, 0.2);
  int converged = 0;
  double worst_res = 0.0;
  for (const auto& p : patch.points) {
    if (p.converged) {
      ++converged;
      worst_res = std::max(worst_res, p.residual);
    }
  }
  EXPECT_GE(converged, int(kConvergedFraction * patch.points.size()));
  EXPECT_LE(worst_res, kShootResidualTol);

  Vec x2(4);
  x2 << -4.2, 0.5, 4.2, -0.5;
  const auto s1 = solve_velocity_field(ms, cone, center);
  const auto s2 = solve_velocity_field(ms, cone, x2);
  ASSERT_EQ(s1.status, SolveStatus::converged);
  ASSERT_EQ(s2.status, SolveStatus::converged);

  auto r1 = integrate(ms, {center, s1.v}, 0.0, 680.0);
  auto r2 = integrate(ms, {x2, s2.v}, 0.0, 680.0);
  ASSERT_TRUE(r1.ok());
  ASSERT_TRUE(r2.ok());

  Mat grid(4, 4);
  grid << -3.0, 0.0, 3.0, 0.0,
          -3.3, 0.2, 3.3, -0.2,
          -2.7, -0.2, 2.7, 0.2,
          -3.0, 0.4, 3.0, -0.4;
  BusemannOptions bo;
  bo.t0 = 10.0;
  bo.max_truncations = 7;  // truncation times reach t = 640
  bo.buse_tol = 1e-6;
  const auto u1 = busemann_estimate(ms, r1.trajectory, h, grid, bo, &cache());
  const auto u2 = busemann_estimate(ms, r2.trajectory, h, grid, bo, &cache());
  const Vec d = u1.values - u2.values;
  const double spread = d.maxCoeff() - d.minCoeff();
  EXPECT_LE(spread, kFieldAgreementTol);
  c.note = fmt("%.0f/25 converged, field spread %.2e", double(converged), spread);
}

TEST(Acceptance, Criterion10GeometricMeasure) {
  Criterion c{10, "graph Jacobian, patch measure, slice cloud dimension"};
  const auto t0 = std::chrono::steady_clock::now();

  double slope2 = 0.0;
  {
    MassSystem ms = two_body();
    ConeSpec cone;
    cone.a = (Vec(4) << -1.0, 0.0, 1.0, 0.0).finished();
    cone.alpha = 0.9;
    cone.r = 2.0;
    Vec center(4);
    center << -4.5, 0.0, 4.5, 0.0;
    SlicePatch patch = build_slice_patch(ms, cone, center, {25, 25}, 0.08);
    differential_of_field(ms, patch);
    double min_j = 1e18, max_j = 0.0;
    for (const auto& p : patch.points) {
      if (!p.has_differential) continue;
      min_j = std::min(min_j, p.jacobian);
      max_j = std::max(max_j, p.jacobian);
    }
    EXPECT_GE(min_j, kJacobianFloor);
    const double cell = 0.08 * 0.08;
    const auto meas = hausdorff_measure_patch(patch, cell);
    EXPECT_FALSE(meas.unreliable);
    EXPECT_EQ(meas.dropped, 0);
    const double vol = meas.evaluated * cell;
    EXPECT_GE(meas.value, vol - 1e-12);
    EXPECT_LE(meas.value, max_j * vol + 1e-12);

    const auto sat = flow_saturate(ms, patch, 3);
    const auto dim = box_counting_dimension(sat.cloud);
    slope2 = dim.slope;
    EXPECT_LE(std::abs(dim.slope - 2.0), kSlopeTolPlanar);
  }

  double slope4 = 0.0;
  bool spatial_scales_ok = false;
  {
    MassSystem ms = three_body();
    Vec unitq(6);
    unitq << 0.0, 1.0, -0.8660254037844386, -0.5, 0.8660254037844386, -0.5;
    ConeSpec cone;
    cone.a = unitq;
    cone.alpha = 0.9;
    cone.r = 2.0;
    const Vec center = 3.0 * unitq;
    SlicePatch patch = build_slice_patch(ms, cone, center, {5, 5, 5, 5}, 0.1);
    int converged = 0;
    for (const auto& p : patch.points) converged += p.converged;
    EXPECT_GE(converged, int(kConvergedFraction * patch.points.size()));

    differential_of_field(ms, patch);
    double min_j = 1e18, max_j = 0.0;
    for (const auto& p : patch.points) {
      if (!p.has_differential) continue;
      min_j = std::min(min_j, p.jacobian);
      max_j = std::max(max_j, p.jacobian);
    }
    EXPECT_GE(min_j, kJacobianFloor);
    const double cell = std::pow(0.1, 4);
    const auto meas = hausdorff_measure_patch(patch, cell);
    const double vol = meas.evaluated * cell;
    EXPECT_GE(meas.value, vol - 1e-12);
    EXPECT_LE(meas.value, max_j * vol + 1e-12);

    const auto sat = flow_saturate(ms, patch, 3);
    try {
      const auto dim = box_counting_dimension(sat.cloud);
      slope4 = dim.slope;
      spatial_scales_ok = true;
      // Known shortfall: resolving four dimensions across four dyadic scales
      // needs on the order of 2 * 32^4 cloud rows; the desk-scale cloud has
      // a few thousand, and its backward-flow spread dominates the extent, so
      // the fitted slope reads the flow direction rather than the full slice.
      EXPECT_LE(std::abs(dim.slope - 4.0), kSlopeTolSpatial);
    } catch (const InsufficientScales& e) {
      ADD_FAILURE() << "spatial slice cloud too sparse for a slope: " << e.what();
    }
  }

  const double elapsed = seconds_since(t0);
  EXPECT_LE(elapsed, kMeasureBudget);
  c.note = fmt("planar slope %.3f, spatial slope %.3f, %.0fs", slope2,
               spatial_scales_ok ? slope4 : -1.0, elapsed);
}

TEST(Acceptance, Criterion11Determinism) {
  Criterion c{11, "verify-all twice with one seed is byte-identical"};
  const fs::path base = fs::current_path() / "acceptance_determinism";
  fs::remove_all(base);
  fs::create_directories(base);

  auto run = [&](const std::string& out) {
    std::string cmd = "env -u JMFLOW_CACHE_DIR " JMFLOW_CLI_PATH " --scenario " +
                      scenario_path("kepler-hyperbolic.json") + " --out " + out +
                      " --seed 7 verify-all > /dev/null";
    return std::system(cmd.c_str());
  };
  ASSERT_EQ(run((base / "a").string()), 0);
  ASSERT_EQ(run((base / "b").string()), 0);

  auto names = [](const fs::path& dir) {
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file()) out.push_back(e.path().filename().string());
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  const auto na = names(base / "a"), nb = names(base / "b");
  ASSERT_EQ(na, nb);
  ASSERT_GE(na.size(), 15u);

  auto bytes = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  int compared = 0;
  for (const auto& n : na) {
    if (n == "runs.jsonl") continue;
    EXPECT_EQ(bytes(base / "a" / n), bytes(base / "b" / n)) << n;
    ++compared;
  }
  EXPECT_GE(compared, 14);
  c.note = fmt("%.0f files byte-identical", double(compared));
}
