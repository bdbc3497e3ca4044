#include "jmflow/rays.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "jmflow/parallel.hpp"

namespace jmflow {

namespace {

// Reference window duration at which opts.phi.nodes is the right budget; the
// node count grows with the window so the time step stays bounded.
constexpr double kRefWindow = 5.0;

PhiOptions window_phi(const PhiOptions& base, double duration, int extra_factor) {
  PhiOptions po = base;
  double factor = std::max(1.0, duration / kRefWindow) * extra_factor;
  factor = std::min(factor, 512.0);
  po.nodes = static_cast<int>(std::lround(po.nodes * factor));
  return po;
}

double relative_gap(double action, double phi) {
  return std::abs(action - phi) / std::max(phi, 1e-12);
}

}  // namespace

const char* to_string(RayVerdict v) {
  switch (v) {
    case RayVerdict::minimizing:
      return "minimizing";
    case RayVerdict::non_minimizing:
      return "non_minimizing";
    default:
      return "inconclusive";
  }
}

std::vector<Window> dyadic_windows(double T, double min_window) {
  if (!(T > 0.0) || !(min_window > 0.0)) {
    throw std::invalid_argument("dyadic_windows: T and min_window must be positive");
  }
  std::vector<Window> out;
  out.push_back({0.0, T});
  for (double b = T; 0.5 * b >= min_window; b *= 0.5) {
    out.push_back({0.5 * b, b});
  }
  return out;
}

RayCertificate verify_minimizing(const MassSystem& ms, const Trajectory& traj, double h,
                                 const std::vector<Window>& windows, double gap_tol,
                                 const PhiOptions& phi, PhiCache* cache, int threads) {
  if (h < 0.0) throw std::invalid_argument("verify_minimizing: requires h >= 0");
  const double drift_tol = 1e-6 * (1.0 + std::abs(h)) + 10.0 * traj.max_drift;
  if (std::abs(traj.h0 - h) > drift_tol) {
    throw std::invalid_argument("verify_minimizing: h does not match the trajectory energy");
  }
  const double duration = traj.t_end() - traj.t_begin();
  for (const Window& w : windows) {
    if (!(w.a >= -1e-9) || !(w.b <= duration + 1e-9) || !(w.b > w.a)) {
      throw std::invalid_argument("verify_minimizing: window outside the trajectory span");
    }
  }

  RayCertificate cert;
  cert.t_max = duration;
  cert.windows.assign(windows.size(), WindowGap{});

  parallel_for(static_cast<int>(windows.size()), threads, [&](int i) {
    WindowGap& wg = cert.windows[i];
    wg.window = windows[i];
    const double ta = traj.t_begin() + windows[i].a;
    const double tb = traj.t_begin() + windows[i].b;
    wg.action = traj.shifted_action_between(ta, tb, h);
    try {
      const Vec qa = traj.state_at(ta).q;
      const Vec qb = traj.state_at(tb).q;
      wg.phi = phi_free(ms, h, qa, qb, window_phi(phi, windows[i].length(), 1), cache).value;
      wg.gap = relative_gap(wg.action, wg.phi);
      wg.evaluated = true;
    } catch (const AllStartsFailed&) {
      wg.evaluated = false;
    }
  });

  // Exceedances must survive a doubled-resolution recheck with the same sign.
  for (WindowGap& wg : cert.windows) {
    if (!wg.evaluated || wg.gap <= 10.0 * gap_tol) continue;
    try {
      const double ta = traj.t_begin() + wg.window.a;
      const double tb = traj.t_begin() + wg.window.b;
      const double phi2 = phi_free(ms, h, traj.state_at(ta).q, traj.state_at(tb).q,
                                   window_phi(phi, wg.window.length(), 2), cache)
                              .value;
      wg.refined_gap = relative_gap(wg.action, phi2);
      wg.stable = wg.refined_gap > 10.0 * gap_tol &&
                  (wg.action - phi2) * (wg.action - wg.phi) > 0.0;
    } catch (const AllStartsFailed&) {
      wg.evaluated = false;
    }
  }

  bool any_unevaluated = false;
  bool any_stable = false;
  bool all_small = true;
  for (const WindowGap& wg : cert.windows) {
    if (!wg.evaluated) {
      any_unevaluated = true;
      continue;
    }
    if (wg.stable) any_stable = true;
    if (wg.gap > gap_tol) all_small = false;
  }
  if (any_stable) {
    cert.verdict = RayVerdict::non_minimizing;
    cert.reason = "window action exceeds the free-time potential";
  } else if (any_unevaluated || cert.windows.empty()) {
    cert.verdict = RayVerdict::inconclusive;
    cert.reason = cert.windows.empty() ? "no windows" : "potential evaluation failed";
  } else if (all_small) {
    cert.verdict = RayVerdict::minimizing;
  } else {
    cert.verdict = RayVerdict::inconclusive;
    cert.reason = "gaps above tolerance but not refinement-stable";
  }
  return cert;
}

CalibrationReport calibration_check(const std::function<std::optional<double>(const Vec&)>& u,
                                    const Trajectory& traj, double h) {
  CalibrationReport rep;
  const std::size_t count = traj.t.size();
  const std::size_t stride = std::max<std::size_t>(1, count / 2000);

  int base = -1;
  double u_base = 0.0, t_base = 0.0;
  std::vector<double> res;
  for (std::size_t k = 0; k < count; k += stride) {
    const std::optional<double> uv = u(traj.q[k]);
    if (!uv) {
      rep.excluded_times.push_back(traj.t[k]);
      continue;
    }
    if (base < 0) {
      base = static_cast<int>(k);
      u_base = *uv;
      t_base = traj.t[k];
    }
    rep.times.push_back(traj.t[k]);
    res.push_back(std::abs(*uv - u_base - traj.shifted_action_between(t_base, traj.t[k], h)));
  }
  if (!res.empty()) {
    rep.residuals = Eigen::Map<const Vec>(res.data(), static_cast<Eigen::Index>(res.size()));
    rep.max_residual = rep.residuals.maxCoeff();
  }
  return rep;
}

CalibrationReport calibration_check(const HorofunctionField& u, const Trajectory& traj,
                                    double h) {
  return calibration_check(field_evaluator(u), traj, h);
}

RayCertificate geodesic_ray_membership(const MassSystem& ms, const PhaseState& s,
                                       const RayOptions& opts, PhiCache* cache) {
  const double cutoff = collision_cutoff(ms, s.q);
  if (!(min_pairwise_distance(ms, s.q) > cutoff)) {
    throw std::invalid_argument("geodesic_ray_membership: initial configuration collides");
  }
  const double h = energy(ms, s);
  if (h < -opts.h_slack) {
    throw std::invalid_argument("geodesic_ray_membership: energy below the nonnegative range");
  }

  IntegrationResult res = integrate(ms, s, 0.0, opts.t_max, opts.integrate);
  if (!res.ok()) {
    RayCertificate cert;
    cert.verdict = RayVerdict::non_minimizing;
    cert.reason = "collision-approach";
    cert.t_max = res.trajectory.t_end();
    return cert;
  }
  RayCertificate cert =
      verify_minimizing(ms, res.trajectory, std::max(h, 0.0),
                        dyadic_windows(opts.t_max, opts.min_window), opts.gap_tol, opts.phi,
                        cache, opts.threads);
  cert.t_max = opts.t_max;
  return cert;
}

CompactnessReport compactness_experiment(const MassSystem& ms,
                                         const std::vector<PhaseState>& states, const Mat& grid,
                                         const RayOptions& opts, PhiCache* cache) {
  if (states.empty()) {
    throw std::invalid_argument("compactness_experiment: empty sequence");
  }

  CompactnessReport rep;
  rep.members.resize(states.size());
  const int m = static_cast<int>(states.size());

  for (int i = 0; i < m; ++i) {
    CompactnessMember& mem = rep.members[i];
    try {
      mem.potential_at_x = potential(ms, states[i].q);
    } catch (const CollisionError&) {
      throw MemberRejected(i, "configuration at or inside the collision cutoff");
    }
    mem.min_pairwise = min_pairwise_distance(ms, states[i].q);
    mem.half_speed_sq = 0.5 * mass_inner(ms, states[i].v, states[i].v);
    mem.h = mem.half_speed_sq - mem.potential_at_x;
    if (mem.h < -opts.h_slack) {
      throw MemberRejected(i, "energy below the nonnegative range");
    }
    if (mem.potential_at_x > mem.half_speed_sq + opts.h_slack) {
      rep.potential_bound_ok = false;
    }
  }

  std::vector<Trajectory> trajectories(states.size());
  for (int i = 0; i < m; ++i) {
    IntegrationResult res = integrate(ms, states[i], 0.0, opts.t_max, opts.integrate);
    if (!res.ok()) {
      throw MemberRejected(i, "integration reached a singularity before t_max");
    }
    trajectories[i] = std::move(res.trajectory);
    rep.members[i].certificate = verify_minimizing(
        ms, trajectories[i], std::max(rep.members[i].h, 0.0),
        dyadic_windows(opts.t_max, opts.min_window), opts.gap_tol, opts.phi, cache,
        opts.threads);
    if (rep.members[i].certificate.verdict != RayVerdict::minimizing) {
      throw MemberRejected(i, std::string("membership proxy verdict: ") +
                                  to_string(rep.members[i].certificate.verdict));
    }
    rep.members[i].field = busemann_estimate(ms, trajectories[i],
                                             std::max(rep.members[i].h, 0.0), grid,
                                             opts.busemann, cache);
  }

  const double h_limit = rep.members.back().h;
  for (const CompactnessMember& mem : rep.members) {
    rep.energy_gaps.push_back(std::abs(mem.h - h_limit));
  }

  rep.sup_diff = Mat::Zero(m, m);
  for (int i = 0; i < m; ++i) {
    for (int j = i + 1; j < m; ++j) {
      double sup = 0.0;
      for (int r = 0; r < grid.rows(); ++r) {
        if (rep.members[i].field.is_excluded(r) || rep.members[j].field.is_excluded(r)) continue;
        sup = std::max(sup,
                       std::abs(rep.members[i].field.values[r] - rep.members[j].field.values[r]));
      }
      rep.sup_diff(i, j) = rep.sup_diff(j, i) = sup;
    }
  }

  rep.limit_calibration = calibration_check(rep.members.back().field, trajectories.back(),
                                            std::max(h_limit, 0.0));
  return rep;
}

}  // namespace jmflow
