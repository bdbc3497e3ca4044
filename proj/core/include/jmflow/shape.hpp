// Asymptotic limit shapes of escaping motions, cones around a shape, and the
// fixed-shape velocity field solved by shooting.
#pragma once

#include <optional>

#include "jmflow/integrate.hpp"
#include "jmflow/nbody.hpp"

namespace jmflow {

struct ShapeFitOptions {
  double horizon{200.0};
  // Log-spaced sample count over the trailing half of the horizon.
  int samples{33};
  IntegrateOptions integrate;
};

// Least-squares estimate of the asymptotic velocity a with gamma(t) = a t +
// remainder; p is the fitted growth exponent of the remainder norm.  The
// vector a is reported in full coordinates, so any center-of-mass drift of
// the datum ends up inside it; the bundled data are momentum-free.
struct LimitShapeEstimate {
  Vec a;
  std::optional<double> p;
  double fit_residual{0.0};
  double horizon{0.0};
  double h{0.0};
};

// Integrates the datum to the horizon and fits the trailing half.  For h > 0
// the velocity samples are fitted against {1, 1/t, ln t / t^2, 1/t^2}, which
// covers the two-body expansion of v(t) and converges much faster than
// gamma(T)/T; h = 0 forces a = 0 since the asymptotic kinetic energy equals
// h.  The exponent comes from regressing log(m(2t) - m(t)) on log t with
// m(t) = |gamma(t) - a t|, which cancels constant remainder terms.
LimitShapeEstimate limit_shape(const MassSystem& ms, const PhaseState& s,
                               const ShapeFitOptions& opts = {});

struct ConeSpec {
  Vec a;
  double alpha{0.9};
  double r{0.0};
};

struct ConeCheck {
  bool inside{false};
  double cosine{0.0};
  bool cosine_defined{true};
};

// x lies in the cone iff mass_inner(x, a) >= alpha |x| |a| and |x| > r.
ConeCheck cone_contains(const MassSystem& ms, const ConeSpec& cone, const Vec& x);

enum class SolveStatus { converged, non_convergence, cone_exit };
const char* to_string(SolveStatus s);

struct ShapeSolveOptions {
  double shoot_tol{1e-6};
  int max_iterations{40};
  // Relative finite-difference step for the shooting Jacobian.
  double fd_step{1e-6};
  int confinement_samples{33};
  std::optional<Vec> seed;  // defaults to the cone shape a
  ShapeFitOptions fit;
};

struct ShapeSolve {
  Vec x;
  Vec v;
  double residual{0.0};
  int iterations{0};
  SolveStatus status{SolveStatus::non_convergence};
  double energy{0.0};  // (1/2)|v|^2 - U(x) of the solved datum
};

// Damped quasi-Newton shooting for v with limit_shape(x, v).a = cone.a,
// seeded at v = a.  A converged solution whose trajectory leaves the cone
// before the fit horizon is reported as cone_exit and rejected.
ShapeSolve solve_velocity_field(const MassSystem& ms, const ConeSpec& cone, const Vec& x,
                                const ShapeSolveOptions& opts = {});

// |(1/2)|v|^2 - U(x) - (1/2)|a|^2|: the solved energy must match the energy
// of the target shape since the potential vanishes along the escape.
double energy_consistency(const MassSystem& ms, const ShapeSolve& solve, const ConeSpec& cone);

}  // namespace jmflow
