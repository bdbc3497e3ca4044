// Adaptive integration of Newton's equations with energy-drift accounting,
// close-approach step capping, and collision-approach diagnostics.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "jmflow/nbody.hpp"

namespace jmflow {

struct IntegrateOptions {
  double rtol{1e-12};
  double atol{1e-12};
  double drift_bound{1e-8};      ///< relative energy drift allowed on a valid trajectory
  double approach_factor{1e-8};  ///< approach radius as a fraction of the initial diameter
  int approach_run{10};          ///< consecutive shrinking steps that declare an approach
  double step_cap_coeff{0.05};   ///< caps dt at coeff * sqrt(dmin^3 / max pair mass)
  double max_step{0.0};          ///< 0 = unlimited
  std::size_t max_steps{4000000};
  int drift_retries{2};          ///< tighten rtol and rerun when drift exceeds the bound
};

// Sampled solution.  Arrays are parallel, one entry per accepted step,
// including the initial state.  `action` accumulates the integral of
// |v|^2/2 + U from the first sample.
struct Trajectory {
  MassSystem ms;
  IntegrateOptions opts;
  std::vector<double> t;
  std::vector<Vec> q;
  std::vector<Vec> v;
  std::vector<double> action;
  std::vector<double> energy;
  std::vector<double> min_distance;
  double h0{0.0};
  double max_drift{0.0};
  bool valid{false};

  std::size_t samples() const { return t.size(); }
  PhaseState state(std::size_t i) const { return {q[i], v[i]}; }
  PhaseState initial_state() const { return state(0); }
  PhaseState final_state() const { return state(samples() - 1); }
  double t_begin() const { return t.front(); }
  double t_end() const { return t.back(); }

  // Re-integrates from the nearest stored sample; exact at sample times.
  PhaseState state_at(double time) const;

  // Integral of |v|^2/2 + U over [a, b] along the trajectory.
  double action_between(double a, double b) const;

  // Action with the energy offset added: action_between(a,b) + h*(b-a).
  double shifted_action_between(double a, double b, double h) const;
};

struct SingularityReport {
  enum class Kind { collision_approach, step_failure };
  Kind kind{Kind::step_failure};
  double t_last{0.0};
  double min_distance{0.0};
  // Extrapolated vanishing time of the closest pair distance, when the
  // terminal samples fit d ~ C (t* - t)^(2/3).
  std::optional<double> t_star;
  // Terminal moment of inertia; a bounded value marks the collision branch
  // of the singularity dichotomy, a diverging one a pseudocollision.
  double inertia_last{0.0};
  bool inertia_bounded{true};
  std::string message;
};

struct IntegrationResult {
  Trajectory trajectory;
  std::optional<SingularityReport> singularity;
  bool ok() const { return !singularity.has_value(); }
};

// Integrates from s0 over [t0, t1]; t1 < t0 integrates backwards.
IntegrationResult integrate(const MassSystem& ms, const PhaseState& s0, double t0, double t1,
                            const IntegrateOptions& opts = {});

// Raised by flow_map when the flow runs into a singularity.
class FlowSingularity : public std::runtime_error {
 public:
  explicit FlowSingularity(const SingularityReport& rep)
      : std::runtime_error("flow_map: " + rep.message), report(rep) {}
  SingularityReport report;
};

PhaseState flow_map(const MassSystem& ms, const PhaseState& s, double t,
                    const IntegrateOptions& opts = {});

struct DependenceRow {
  double size{0.0};    ///< mass-metric size of the perturbation (q and v parts combined)
  double sup_dq{0.0};  ///< sup over samples of the configuration distance
  double sup_dv{0.0};
  bool ok{false};
  std::string note;
};

// Integrates the base state and each perturbed state over [0, T] and reports
// sup-distances on a shared sample grid.  Failed rows carry an error note.
std::vector<DependenceRow> continuous_dependence_probe(const MassSystem& ms,
                                                       const PhaseState& base,
                                                       const std::vector<PhaseState>& perturbed,
                                                       double T, int samples,
                                                       const IntegrateOptions& opts = {});

// Writes t, positions, velocities, energy per sample (RFC 4180 CSV) plus a
// JSON sidecar <path>.meta.json with drift, step count, and classification.
void export_trajectory_csv(const Trajectory& traj,
                           const std::optional<SingularityReport>& singularity,
                           const std::string& path, double sample_dt = 0.0);

}  // namespace jmflow
