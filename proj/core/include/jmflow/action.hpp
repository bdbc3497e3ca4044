// Fixed-time and free-time action potentials by direct trajectory
// optimization: piecewise-linear curves, midpoint quadrature of the
// potential, damped-Newton inner solves, golden-section outer search in T.
#pragma once

#include <optional>
#include <vector>

#include "jmflow/nbody.hpp"
#include "jmflow/phi_cache.hpp"

namespace jmflow {

class AllStartsFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Piecewise-linear curve: node k lives at times[k], configuration nodes.row(k).
struct DiscreteCurve {
  Vec times;  // M+1 strictly increasing entries, times[0] = 0
  Mat nodes;  // (M+1) x coords

  int segments() const { return static_cast<int>(times.size()) - 1; }
  double duration() const { return times[times.size() - 1] - times[0]; }
  bool empty() const { return times.size() == 0; }
  // Linear interpolation at an interior time.
  Vec at(double t) const;
};

struct ActionValue {
  double value{0.0};
  bool barrier{false};  ///< some midpoint or node sat under the collision cutoff
};

// Quadrature of the h-shifted action along the curve; near-collision nodes
// yield a large finite barrier value, never NaN.
ActionValue discrete_action(const MassSystem& ms, const DiscreteCurve& curve, double h);

// Mass-metric norm of the discrete Euler-Lagrange residual (second difference
// against the acceleration field) per interior node.
Vec euler_lagrange_residuals(const MassSystem& ms, const DiscreteCurve& curve);

struct PhiOptions {
  int nodes{96};               ///< segment count of every inner solve
  double gtol{1e-6};           ///< force-scale gradient norm for "converged"
  int max_newton{80};
  int max_first_order{30};
  double golden_rel_tol{1e-4};  ///< relative width of the log-T golden bracket
  int bracket_points{7};
  int max_bracket_expansions{40};
  bool rebalance_times{true};  ///< re-equidistribute node times after converging
  double redistribution_h{0.0};  ///< energy used by the time rebalance
};

struct ActionResult {
  double value{0.0};
  DiscreteCurve minimizer;
  double gradient_norm{0.0};
  int refinement_level{0};
  enum class Status { converged, max_iter, near_collision } status{Status::converged};
};

// Fixed-time action potential phi(x, y, T): multi-start local minimization
// (straight line, two arcs, optional warm start) of the discrete action over
// interior nodes.  Throws AllStartsFailed when no start yields a finite value.
ActionResult phi_fixed_time(const MassSystem& ms, const Vec& x, const Vec& y, double T,
                            const PhiOptions& opts = {},
                            const DiscreteCurve* warm_start = nullptr);

struct ProbeRecord {
  double T{0.0};
  double value{0.0};  ///< phi(x,y,T) + h T at the probe resolution
};

struct FreeTimeResult {
  double value{0.0};                 ///< min over all probes, equals the best probe exactly
  double T_star{0.0};
  ActionResult inner;                ///< inner solve at T*; empty minimizer on cache hits
  std::vector<ProbeRecord> history;  ///< every probed T with its objective value
  bool bracket_fallback{false};      ///< grid-scan fallback after bracket failure
  bool cached{false};
};

// Free-time potential phi_h(x, y) = min over T of phi(x,y,T) + h T via
// bracketing plus golden section on log T.  x = y returns 0 with T* = 0.
FreeTimeResult phi_free(const MassSystem& ms, double h, const Vec& x, const Vec& y,
                        const PhiOptions& opts = {}, PhiCache* cache = nullptr);

// Equicontinuity modulus mu(r) = sqrt(alpha r + beta r^2).
double action_modulus(double alpha, double beta, double r);

// Fitted two-constant upper bound phi(x,y,t) <= c1 l^2/t + c2 t/l with
// l = |x-y|, and the derived equicontinuity modulus
// mu(r) = sqrt(alpha r + beta r^2), alpha = 4 c1 c2, beta = 4 c1 h_max.
struct ActionBound {
  double c1{0.0};
  double c2{0.0};
  double h_max{0.0};

  double alpha() const { return 4.0 * c1 * c2; }
  double beta() const { return 4.0 * c1 * h_max; }
  double modulus(double r) const;
  // The bound at separation l and time t.
  double time_bound(double l, double t) const { return c1 * l * l / t + c2 * t / l; }
};

// Least-squares fit of (c1, c2) over phi(x,y,T) samples on the given pairs
// and times, then scaled up so the bound dominates the calibration family
// with 5% headroom.
ActionBound fit_action_bound(const MassSystem& ms, const std::vector<std::pair<Vec, Vec>>& pairs,
                             const std::vector<double>& times, double h_max,
                             const PhiOptions& opts = {});

}  // namespace jmflow
