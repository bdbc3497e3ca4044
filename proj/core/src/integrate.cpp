#include "jmflow/integrate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

namespace jmflow {

namespace {

// Dormand-Prince 5(4) pair, first-same-as-last.
constexpr double A21 = 1.0 / 5;
constexpr double A31 = 3.0 / 40, A32 = 9.0 / 40;
constexpr double A41 = 44.0 / 45, A42 = -56.0 / 15, A43 = 32.0 / 9;
constexpr double A51 = 19372.0 / 6561, A52 = -25360.0 / 2187, A53 = 64448.0 / 6561,
                 A54 = -212.0 / 729;
constexpr double A61 = 9017.0 / 3168, A62 = -355.0 / 33, A63 = 46732.0 / 5247, A64 = 49.0 / 176,
                 A65 = -5103.0 / 18656;
constexpr double B1 = 35.0 / 384, B3 = 500.0 / 1113, B4 = 125.0 / 192, B5 = -2187.0 / 6784,
                 B6 = 11.0 / 84;
constexpr double E1 = 71.0 / 57600, E3 = -71.0 / 16695, E4 = 71.0 / 1920, E5 = -17253.0 / 339200,
                 E6 = 22.0 / 525, E7 = -1.0 / 40;

struct PairScan {
  double potential{0.0};
  double min_distance{std::numeric_limits<double>::infinity()};
};

// Accelerations, potential, and min pair distance in one sweep.  No collision
// cutoff here: the step controller owns the near-collision policy.
PairScan rhs_scan(const MassSystem& ms, const double* q, double* accel) {
  const int n = ms.bodies();
  const int d = ms.dim;
  PairScan out;
  std::fill(accel, accel + n * d, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      double r2 = 0.0;
      for (int c = 0; c < d; ++c) {
        const double diff = q[j * d + c] - q[i * d + c];
        r2 += diff * diff;
      }
      const double r = std::sqrt(r2);
      out.min_distance = std::min(out.min_distance, r);
      out.potential += ms.masses[i] * ms.masses[j] / r;
      const double inv3 = 1.0 / (r2 * r);
      for (int c = 0; c < d; ++c) {
        const double diff = q[j * d + c] - q[i * d + c];
        accel[i * d + c] += ms.masses[j] * diff * inv3;
        accel[j * d + c] -= ms.masses[i] * diff * inv3;
      }
    }
  }
  if (n < 2) out.min_distance = std::numeric_limits<double>::infinity();
  return out;
}

// State layout: positions, velocities, accumulated action.
struct Deriv {
  Vec dy;
  PairScan scan;
};

Deriv eval_rhs(const MassSystem& ms, const Vec& y) {
  const int n = ms.coords();
  Deriv out;
  out.dy.resize(2 * n + 1);
  out.dy.segment(0, n) = y.segment(n, n);
  out.scan = rhs_scan(ms, y.data(), out.dy.data() + n);
  double kinetic = 0.0;
  for (int i = 0; i < ms.bodies(); ++i) {
    kinetic += 0.5 * ms.masses[i] * y.segment(n + i * ms.dim, ms.dim).squaredNorm();
  }
  out.dy[2 * n] = kinetic + out.scan.potential;
  return out;
}

double error_norm(const Vec& y, const Vec& ynew, const Vec& err, double atol, double rtol) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double sc = atol + rtol * std::max(std::abs(y[i]), std::abs(ynew[i]));
    const double e = err[i] / sc;
    acc += e * e;
  }
  return std::sqrt(acc / static_cast<double>(y.size()));
}

double max_pair_mass(const MassSystem& ms) {
  double best = 0.0;
  for (int i = 0; i < ms.bodies(); ++i)
    for (int j = i + 1; j < ms.bodies(); ++j) best = std::max(best, ms.masses[i] + ms.masses[j]);
  return std::max(best, 1e-300);
}

// Least-squares fit of d^(3/2) = a + b (t - t_last) over the terminal
// samples; the root gives the extrapolated vanishing time.  Times are
// centered on t_last, otherwise the normal equations cancel catastrophically
// when the window is a sliver of the total elapsed time.
std::optional<double> extrapolate_vanishing(const std::vector<double>& ts,
                                            const std::vector<double>& ds, double t_last) {
  const std::size_t n = ts.size();
  if (n < 3) return std::nullopt;
  double st = 0, sy = 0, stt = 0, sty = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double tt = ts[i] - t_last;
    const double y = std::pow(ds[i], 1.5);
    st += tt;
    sy += y;
    stt += tt * tt;
    sty += tt * y;
  }
  const double dn = static_cast<double>(n);
  const double denom = dn * stt - st * st;
  if (std::abs(denom) < 1e-300) return std::nullopt;
  const double b = (dn * sty - st * sy) / denom;
  const double a = (sy - b * st) / dn;
  if (b >= 0.0) return std::nullopt;
  return t_last - a / b;
}

struct AttemptResult {
  Trajectory traj;
  std::optional<SingularityReport> singularity;
};

AttemptResult integrate_attempt(const MassSystem& ms, const PhaseState& s0, double t0, double t1,
                                const IntegrateOptions& opts, double rtol, double atol) {
  const int n = ms.coords();
  const double direction = (t1 >= t0) ? 1.0 : -1.0;
  const double span = std::abs(t1 - t0);
  const double mu = max_pair_mass(ms);
  const double approach_radius = opts.approach_factor * max_pairwise_distance(ms, s0.q);

  Vec y(2 * n + 1);
  y.segment(0, n) = s0.q;
  y.segment(n, n) = s0.v;
  y[2 * n] = 0.0;

  AttemptResult out;
  Trajectory& traj = out.traj;
  traj.ms = ms;
  traj.opts = opts;
  traj.h0 = energy(ms, s0);

  Deriv k1 = eval_rhs(ms, y);
  auto push_sample = [&](double t, const Vec& state, const PairScan& scan) {
    traj.t.push_back(t);
    traj.q.push_back(state.segment(0, n));
    traj.v.push_back(state.segment(n, n));
    traj.action.push_back(state[2 * n]);
    double kinetic = 0.0;
    for (int i = 0; i < ms.bodies(); ++i) {
      kinetic += 0.5 * ms.masses[i] * state.segment(n + i * ms.dim, ms.dim).squaredNorm();
    }
    traj.energy.push_back(kinetic - scan.potential);
    traj.min_distance.push_back(scan.min_distance);
  };
  push_sample(t0, y, k1.scan);

  auto step_cap = [&](double dmin) {
    return opts.step_cap_coeff * std::sqrt(dmin * dmin * dmin / mu);
  };

  double t = t0;
  double h = std::min(0.01 * std::max(span, 1e-12), step_cap(k1.scan.min_distance));
  if (opts.max_step > 0.0) h = std::min(h, opts.max_step);
  h = std::max(h, 1e-14 * std::max(1.0, std::abs(t0)));

  Vec k2(2 * n + 1), k3(2 * n + 1), k4(2 * n + 1), k5(2 * n + 1), k6(2 * n + 1);
  Vec ytmp(2 * n + 1), ynew(2 * n + 1), errv(2 * n + 1);

  int shrinking_run = 0;
  std::size_t steps = 0;
  bool last_rejected = false;

  while (direction * (t1 - t) > 0.0) {
    if (steps++ > opts.max_steps) {
      out.singularity = SingularityReport{
          SingularityReport::Kind::step_failure, t, traj.min_distance.back(), std::nullopt,
          moment_of_inertia(ms, traj.q.back()), true, "step budget exhausted"};
      return out;
    }
    h = std::min(h, step_cap(k1.scan.min_distance));
    if (opts.max_step > 0.0) h = std::min(h, opts.max_step);
    const double floor = 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(t));
    if (h < floor) {
      const std::size_t m = traj.samples();
      const std::size_t win = std::min<std::size_t>(m, 12);
      std::vector<double> ts(traj.t.end() - win, traj.t.end());
      std::vector<double> ds(traj.min_distance.end() - win, traj.min_distance.end());
      out.singularity = SingularityReport{SingularityReport::Kind::step_failure,
                                          t,
                                          traj.min_distance.back(),
                                          extrapolate_vanishing(ts, ds, t),
                                          moment_of_inertia(ms, traj.q.back()),
                                          true,
                                          "step size underflow"};
      return out;
    }
    if (direction * (t + direction * h - t1) > 0.0) h = std::abs(t1 - t);
    const double hs = direction * h;

    ytmp = y + hs * A21 * k1.dy;
    Deriv d2 = eval_rhs(ms, ytmp);
    ytmp = y + hs * (A31 * k1.dy + A32 * d2.dy);
    Deriv d3 = eval_rhs(ms, ytmp);
    ytmp = y + hs * (A41 * k1.dy + A42 * d2.dy + A43 * d3.dy);
    Deriv d4 = eval_rhs(ms, ytmp);
    ytmp = y + hs * (A51 * k1.dy + A52 * d2.dy + A53 * d3.dy + A54 * d4.dy);
    Deriv d5 = eval_rhs(ms, ytmp);
    ytmp = y + hs * (A61 * k1.dy + A62 * d2.dy + A63 * d3.dy + A64 * d4.dy + A65 * d5.dy);
    Deriv d6 = eval_rhs(ms, ytmp);
    ynew = y + hs * (B1 * k1.dy + B3 * d3.dy + B4 * d4.dy + B5 * d5.dy + B6 * d6.dy);
    Deriv d7 = eval_rhs(ms, ynew);
    errv = hs * (E1 * k1.dy + E3 * d3.dy + E4 * d4.dy + E5 * d5.dy + E6 * d6.dy + E7 * d7.dy);

    const double err = error_norm(y, ynew, errv, atol, rtol);
    if (err <= 1.0) {
      const double dprev = traj.min_distance.back();
      t += hs;
      y = ynew;
      k1 = d7;  // first-same-as-last
      push_sample(t, y, d7.scan);

      const double dmin = d7.scan.min_distance;
      if (dmin < approach_radius && dmin < dprev) {
        ++shrinking_run;
      } else {
        shrinking_run = 0;
      }
      if (shrinking_run >= opts.approach_run) {
        const std::size_t win = static_cast<std::size_t>(opts.approach_run) + 1;
        std::vector<double> ts(traj.t.end() - win, traj.t.end());
        std::vector<double> ds(traj.min_distance.end() - win, traj.min_distance.end());
        const double i_now = moment_of_inertia(ms, traj.q.back());
        const double i_then = moment_of_inertia(ms, traj.q[traj.samples() - win]);
        out.singularity = SingularityReport{SingularityReport::Kind::collision_approach,
                                            t,
                                            dmin,
                                            extrapolate_vanishing(ts, ds, t),
                                            i_now,
                                            i_now <= 10.0 * std::max(i_then, 1e-300),
                                            "pairwise distance shrinking below approach radius"};
        return out;
      }

      double fac = 0.9 * std::pow(std::max(err, 1e-10), -0.2);
      fac = std::clamp(fac, 0.2, last_rejected ? 1.0 : 5.0);
      h *= fac;
      last_rejected = false;
    } else {
      h *= std::clamp(0.9 * std::pow(err, -0.2), 0.1, 0.9);
      last_rejected = true;
    }
  }
  return out;
}

}  // namespace

IntegrationResult integrate(const MassSystem& ms, const PhaseState& s0, double t0, double t1,
                            const IntegrateOptions& opts) {
  if (s0.q.size() != ms.coords() || s0.v.size() != ms.coords()) {
    throw std::invalid_argument("integrate: state size does not match the mass system");
  }
  if (ms.bodies() >= 2 && !collision_free(ms, s0.q)) {
    throw CollisionError("integrate: initial configuration within collision cutoff");
  }

  double rtol = opts.rtol;
  double atol = opts.atol;
  IntegrationResult result;
  for (int attempt = 0;; ++attempt) {
    AttemptResult att = integrate_attempt(ms, s0, t0, t1, opts, rtol, atol);
    result.trajectory = std::move(att.traj);
    result.singularity = att.singularity;

    Trajectory& traj = result.trajectory;
    const double scale = std::max(1.0, std::abs(traj.h0));
    traj.max_drift = 0.0;
    for (double e : traj.energy) {
      traj.max_drift = std::max(traj.max_drift, std::abs(e - traj.h0) / scale);
    }
    traj.valid = !result.singularity.has_value() && traj.max_drift <= opts.drift_bound;
    if (traj.valid || result.singularity.has_value() || attempt >= opts.drift_retries) break;
    rtol = std::max(rtol / 100.0, 5e-16);
    atol = std::max(atol / 100.0, 5e-16);
  }
  return result;
}

PhaseState flow_map(const MassSystem& ms, const PhaseState& s, double t,
                    const IntegrateOptions& opts) {
  if (t == 0.0) return s;
  IntegrationResult res = integrate(ms, s, 0.0, t, opts);
  if (res.singularity) throw FlowSingularity(*res.singularity);
  return res.trajectory.final_state();
}

PhaseState Trajectory::state_at(double time) const {
  if (samples() == 0) throw std::logic_error("state_at: empty trajectory");
  const double dir = (t.back() >= t.front()) ? 1.0 : -1.0;
  if (dir * (time - t.front()) < -1e-12 || dir * (time - t.back()) > 1e-12) {
    throw std::invalid_argument("state_at: time outside the trajectory span");
  }
  std::size_t lo = 0;
  for (std::size_t i = 0; i < samples(); ++i) {
    if (dir * (t[i] - time) <= 0.0) lo = i;
  }
  if (std::abs(t[lo] - time) <= 1e-13 * std::max(1.0, std::abs(time))) return state(lo);
  IntegrationResult res = integrate(ms, state(lo), t[lo], time, opts);
  if (res.singularity) throw FlowSingularity(*res.singularity);
  return res.trajectory.final_state();
}

double Trajectory::action_between(double a, double b) const {
  auto action_at = [&](double time) {
    const double dir = (t.back() >= t.front()) ? 1.0 : -1.0;
    if (dir * (time - t.front()) < -1e-12 || dir * (time - t.back()) > 1e-12) {
      throw std::invalid_argument("action_between: time outside the trajectory span");
    }
    std::size_t lo = 0;
    for (std::size_t i = 0; i < samples(); ++i) {
      if (dir * (t[i] - time) <= 0.0) lo = i;
    }
    if (std::abs(t[lo] - time) <= 1e-13 * std::max(1.0, std::abs(time))) return action[lo];
    IntegrationResult res = integrate(ms, state(lo), t[lo], time, opts);
    if (res.singularity) throw FlowSingularity(*res.singularity);
    return action[lo] + res.trajectory.action.back();
  };
  return action_at(b) - action_at(a);
}

double Trajectory::shifted_action_between(double a, double b, double h) const {
  return action_between(a, b) + h * (b - a);
}

std::vector<DependenceRow> continuous_dependence_probe(const MassSystem& ms,
                                                       const PhaseState& base,
                                                       const std::vector<PhaseState>& perturbed,
                                                       double T, int samples,
                                                       const IntegrateOptions& opts) {
  if (samples < 2) throw std::invalid_argument("continuous_dependence_probe: samples must be >= 2");
  IntegrationResult base_res = integrate(ms, base, 0.0, T, opts);
  if (base_res.singularity) {
    throw FlowSingularity(*base_res.singularity);
  }
  std::vector<DependenceRow> rows;
  rows.reserve(perturbed.size());
  for (const PhaseState& s : perturbed) {
    DependenceRow row;
    Vec dq0 = s.q - base.q;
    Vec dv0 = s.v - base.v;
    row.size = std::sqrt(mass_inner(ms, dq0, dq0) + mass_inner(ms, dv0, dv0));
    try {
      IntegrationResult res = integrate(ms, s, 0.0, T, opts);
      if (res.singularity) {
        row.note = "singularity: " + res.singularity->message;
        rows.push_back(row);
        continue;
      }
      for (int k = 0; k < samples; ++k) {
        const double time = T * static_cast<double>(k) / (samples - 1);
        const PhaseState a = base_res.trajectory.state_at(time);
        const PhaseState b = res.trajectory.state_at(time);
        row.sup_dq = std::max(row.sup_dq, mass_norm(ms, b.q - a.q));
        row.sup_dv = std::max(row.sup_dv, mass_norm(ms, b.v - a.v));
      }
      row.ok = true;
    } catch (const std::exception& err) {
      row.note = err.what();
    }
    rows.push_back(row);
  }
  return rows;
}

void export_trajectory_csv(const Trajectory& traj,
                           const std::optional<SingularityReport>& singularity,
                           const std::string& path, double sample_dt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("export_trajectory_csv: cannot open " + path);
  const int n = traj.ms.coords();
  const int d = traj.ms.dim;
  out << "t";
  for (int i = 0; i < traj.ms.bodies(); ++i)
    for (int c = 0; c < d; ++c) out << ",q" << i << "_" << c;
  for (int i = 0; i < traj.ms.bodies(); ++i)
    for (int c = 0; c < d; ++c) out << ",v" << i << "_" << c;
  out << ",energy\r\n";
  char buf[32];
  auto emit = [&](double x) {
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    out << buf;
  };
  double next_time = -std::numeric_limits<double>::infinity();
  const double dir = (traj.t.back() >= traj.t.front()) ? 1.0 : -1.0;
  for (std::size_t k = 0; k < traj.samples(); ++k) {
    if (sample_dt > 0.0 && k + 1 < traj.samples() && dir * traj.t[k] < next_time) continue;
    next_time = dir * traj.t[k] + sample_dt;
    emit(traj.t[k]);
    for (int i = 0; i < n; ++i) {
      out << ",";
      emit(traj.q[k][i]);
    }
    for (int i = 0; i < n; ++i) {
      out << ",";
      emit(traj.v[k][i]);
    }
    out << ",";
    emit(traj.energy[k]);
    out << "\r\n";
  }
  out.close();

  nlohmann::json meta;
  meta["samples"] = traj.samples();
  meta["t_begin"] = traj.t_begin();
  meta["t_end"] = traj.t_end();
  meta["energy"] = traj.h0;
  meta["max_drift"] = traj.max_drift;
  meta["valid"] = traj.valid;
  if (singularity) {
    meta["classification"] = singularity->kind == SingularityReport::Kind::collision_approach
                                 ? "collision-approach"
                                 : "step-failure";
    if (singularity->t_star) meta["t_star"] = *singularity->t_star;
    meta["min_distance"] = singularity->min_distance;
    meta["inertia_bounded"] = singularity->inertia_bounded;
  } else {
    meta["classification"] = "regular";
  }
  std::ofstream mout(path + ".meta.json", std::ios::binary);
  if (!mout) throw std::runtime_error("export_trajectory_csv: cannot open " + path + ".meta.json");
  mout << meta.dump(2) << "\n";
}

}  // namespace jmflow
