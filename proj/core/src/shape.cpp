#include "jmflow/shape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace jmflow {

namespace {

std::vector<double> log_spaced(double lo, double hi, int count) {
  std::vector<double> out(count);
  const double la = std::log(lo), lb = std::log(hi);
  for (int i = 0; i < count; ++i) {
    out[i] = std::exp(la + (lb - la) * i / (count - 1));
  }
  out.back() = hi;
  return out;
}

// Slope and rms misfit of y against x by ordinary least squares.
struct LineFit {
  double slope{0.0};
  double rms{0.0};
  bool ok{false};
};

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  LineFit fit;
  const int n = static_cast<int>(x.size());
  if (n < 4) return fit;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < n; ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double det = n * sxx - sx * sx;
  if (std::abs(det) < 1e-12 * n * std::max(1.0, sxx)) return fit;
  fit.slope = (n * sxy - sx * sy) / det;
  const double intercept = (sy - fit.slope * sx) / n;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e = y[i] - fit.slope * x[i] - intercept;
    acc += e * e;
  }
  fit.rms = std::sqrt(acc / n);
  fit.ok = true;
  return fit;
}

}  // namespace

LimitShapeEstimate limit_shape(const MassSystem& ms, const PhaseState& s,
                               const ShapeFitOptions& opts) {
  if (opts.horizon <= 0.0) throw std::invalid_argument("limit_shape: horizon must be positive");
  if (opts.samples < 8) throw std::invalid_argument("limit_shape: needs at least 8 fit samples");
  const double h = energy(ms, s);
  if (h < -1e-9) throw std::invalid_argument("limit_shape: requires energy h >= 0");

  IntegrationResult res = integrate(ms, s, 0.0, opts.horizon, opts.integrate);
  if (res.singularity) throw FlowSingularity(*res.singularity);
  const Trajectory& traj = res.trajectory;
  const double T = traj.t_end();

  LimitShapeEstimate est;
  est.horizon = T;
  est.h = h;
  const int n = ms.coords();

  const std::vector<double> times = log_spaced(0.5 * T, T, opts.samples);
  std::vector<Vec> qs(times.size()), vs(times.size());
  for (std::size_t i = 0; i < times.size(); ++i) {
    const PhaseState st = traj.state_at(times[i]);
    qs[i] = st.q;
    vs[i] = st.v;
  }

  if (h <= 1e-9) {
    // Parabolic regime: zero asymptotic velocity, sublinear expansion.
    est.a = Vec::Zero(n);
  } else {
    // v(t) = a + c1/t + c2 ln t / t^2 + c3 / t^2 + ...
    const int rows = static_cast<int>(times.size());
    Mat design(rows, 4);
    for (int i = 0; i < rows; ++i) {
      const double t = times[i];
      design(i, 0) = 1.0;
      design(i, 1) = 1.0 / t;
      design(i, 2) = std::log(t) / (t * t);
      design(i, 3) = 1.0 / (t * t);
    }
    Mat rhs(rows, n);
    for (int i = 0; i < rows; ++i) rhs.row(i) = vs[i];
    const auto qr = design.colPivHouseholderQr();
    if (qr.rank() < 4) {
      est.a = traj.final_state().q / T;
      return est;
    }
    Mat coef = qr.solve(rhs);
    est.a = coef.row(0).transpose();
    if (!est.a.allFinite()) {
      est.a = traj.final_state().q / T;
      return est;
    }
  }

  // Remainder exponent from first differences m(2t) - m(t), which cancel any
  // constant term in the remainder.
  std::vector<double> ms_norm(times.size());
  for (std::size_t i = 0; i < times.size(); ++i) {
    ms_norm[i] = mass_norm(ms, qs[i] - times[i] * est.a);
  }
  const double scale = 1.0 + mass_norm(ms, qs.back());
  const double floor = 1e-9 * scale;
  if (*std::max_element(ms_norm.begin(), ms_norm.end()) <= floor) {
    return est;  // remainder at the noise floor: exponent unresolvable
  }

  std::vector<double> lx, ly;
  const std::vector<double> pair_times = log_spaced(0.25 * T, 0.5 * T, opts.samples);
  for (double t : pair_times) {
    const Vec q1 = traj.state_at(t).q;
    const Vec q2 = traj.state_at(2.0 * t).q;
    const double diff =
        mass_norm(ms, q2 - 2.0 * t * est.a) - mass_norm(ms, q1 - t * est.a);
    if (diff > floor) {
      lx.push_back(std::log(t));
      ly.push_back(std::log(diff));
    }
  }
  const LineFit fit = fit_line(lx, ly);
  if (fit.ok) {
    est.p = fit.slope;
    est.fit_residual = fit.rms;
  }
  return est;
}

ConeCheck cone_contains(const MassSystem& ms, const ConeSpec& cone, const Vec& x) {
  ConeCheck check;
  const double nx = mass_norm(ms, x);
  const double na = mass_norm(ms, cone.a);
  if (nx <= 0.0 || na <= 0.0) {
    check.cosine_defined = false;
    return check;
  }
  check.cosine = mass_inner(ms, x, cone.a) / (nx * na);
  check.inside = check.cosine >= cone.alpha && nx > cone.r;
  return check;
}

const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::converged:
      return "converged";
    case SolveStatus::cone_exit:
      return "cone_exit";
    default:
      return "non_convergence";
  }
}

namespace {

std::optional<Vec> shape_of(const MassSystem& ms, const Vec& x, const Vec& v,
                            const ShapeFitOptions& fit) {
  try {
    return limit_shape(ms, {x, v}, fit).a;
  } catch (const FlowSingularity&) {
    return std::nullopt;
  } catch (const std::invalid_argument&) {
    return std::nullopt;  // guess drifted below h = 0
  }
}

}  // namespace

ShapeSolve solve_velocity_field(const MassSystem& ms, const ConeSpec& cone, const Vec& x,
                                const ShapeSolveOptions& opts) {
  if (!(mass_norm(ms, cone.a) > 0.0)) {
    throw std::invalid_argument("solve_velocity_field: hyperbolic regime needs a != 0");
  }
  if (!cone_contains(ms, cone, x).inside) {
    throw std::invalid_argument("solve_velocity_field: point outside the cone");
  }

  ShapeSolve out;
  out.x = x;
  out.v = opts.seed.value_or(cone.a);
  const int n = ms.coords();

  std::optional<Vec> shape = shape_of(ms, x, out.v, opts.fit);
  if (!shape) {
    out.energy = 0.5 * mass_inner(ms, out.v, out.v) - potential(ms, x);
    return out;
  }
  Vec F = *shape - cone.a;
  double res_norm = mass_norm(ms, F);

  for (int it = 1; it <= opts.max_iterations; ++it) {
    out.iterations = it;
    if (res_norm <= opts.shoot_tol) {
      out.status = SolveStatus::converged;
      break;
    }
    const double delta = opts.fd_step * (1.0 + mass_norm(ms, out.v));
    Mat J(n, n);
    bool jac_ok = true;
    for (int j = 0; j < n; ++j) {
      Vec vj = out.v;
      vj[j] += delta;
      const std::optional<Vec> sj = shape_of(ms, x, vj, opts.fit);
      if (!sj) {
        jac_ok = false;
        break;
      }
      J.col(j) = (*sj - cone.a - F) / delta;
    }
    if (!jac_ok) break;

    const Vec step = J.colPivHouseholderQr().solve(-F);
    if (!step.allFinite()) break;

    bool accepted = false;
    double lambda = 1.0;
    for (int half = 0; half < 8; ++half, lambda *= 0.5) {
      const Vec v_try = out.v + lambda * step;
      const std::optional<Vec> s_try = shape_of(ms, x, v_try, opts.fit);
      if (!s_try) continue;
      const Vec F_try = *s_try - cone.a;
      const double r_try = mass_norm(ms, F_try);
      if (r_try < res_norm * (1.0 - 1e-4 * lambda)) {
        out.v = v_try;
        F = F_try;
        res_norm = r_try;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
  }

  out.residual = res_norm;
  if (res_norm <= opts.shoot_tol) out.status = SolveStatus::converged;
  out.energy = 0.5 * mass_inner(ms, out.v, out.v) - potential(ms, x);

  if (out.status == SolveStatus::converged) {
    IntegrationResult res = integrate(ms, {x, out.v}, 0.0, opts.fit.horizon, opts.fit.integrate);
    if (res.singularity) {
      out.status = SolveStatus::cone_exit;
      return out;
    }
    for (int i = 0; i < opts.confinement_samples; ++i) {
      const double t = opts.fit.horizon * (i + 1.0) / opts.confinement_samples;
      if (!cone_contains(ms, cone, res.trajectory.state_at(t).q).inside) {
        out.status = SolveStatus::cone_exit;
        break;
      }
    }
  }
  return out;
}

double energy_consistency(const MassSystem& ms, const ShapeSolve& solve, const ConeSpec& cone) {
  return std::abs(solve.energy - 0.5 * mass_inner(ms, cone.a, cone.a));
}

}  // namespace jmflow
