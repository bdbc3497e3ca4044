// Free-time minimizer certificates along integrated trajectories, calibration
// residuals against horofunction fields, the numerical membership proxy for
// minimizing-ray initial data, and the compactness experiment.
#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "jmflow/action.hpp"
#include "jmflow/horofunction.hpp"
#include "jmflow/integrate.hpp"
#include "jmflow/nbody.hpp"

namespace jmflow {

struct Window {
  double a{0.0};
  double b{0.0};
  double length() const { return b - a; }
};

enum class RayVerdict { minimizing, non_minimizing, inconclusive };

const char* to_string(RayVerdict v);

struct WindowGap {
  Window window;
  double action{0.0};    ///< A_h of the trajectory over the window
  double phi{0.0};       ///< free-time potential between the window endpoints
  double gap{0.0};       ///< |action - phi| / phi
  double refined_gap{-1.0};  ///< recheck at doubled resolution; -1 if not run
  bool evaluated{false};
  bool stable{false};    ///< exceedance persisted under refinement
};

struct RayCertificate {
  std::vector<WindowGap> windows;
  RayVerdict verdict{RayVerdict::inconclusive};
  double t_max{0.0};
  std::string reason;
};

struct RayOptions {
  double gap_tol{1e-4};
  double min_window{0.5};
  double t_max{100.0};
  double h_slack{1e-9};
  PhiOptions phi;
  IntegrateOptions integrate;
  BusemannOptions busemann;
  int threads{1};
};

// {[0,T], [T/2,T], [T/4,T/2], ...} down to min_window.
std::vector<Window> dyadic_windows(double T, double min_window);

// Compares the trajectory's accumulated shifted action against the free-time
// potential on each window.  Windows are in time measured from the trajectory
// start.  phi failures leave individual windows unevaluated and the verdict
// inconclusive; an exceedance must survive a doubled-resolution recheck before
// it counts as non-minimizing.
RayCertificate verify_minimizing(const MassSystem& ms, const Trajectory& traj, double h,
                                 const std::vector<Window>& windows, double gap_tol,
                                 const PhiOptions& phi = {}, PhiCache* cache = nullptr,
                                 int threads = 1);

struct CalibrationReport {
  std::vector<double> times;           ///< included sample times
  Vec residuals;                       ///< |u(g(t)) - u(g(t1)) - A_h(g|[t1,t])|
  std::vector<double> excluded_times;  ///< samples where u was not evaluable
  double max_residual{0.0};
};

CalibrationReport calibration_check(const std::function<std::optional<double>(const Vec&)>& u,
                                    const Trajectory& traj, double h);
CalibrationReport calibration_check(const HorofunctionField& u, const Trajectory& traj,
                                    double h);

// Numerical membership proxy for initial data generating a minimizing ray:
// integrates to opts.t_max and certifies dyadic windows.  A singularity during
// integration yields a non-minimizing verdict with reason collision-approach.
RayCertificate geodesic_ray_membership(const MassSystem& ms, const PhaseState& s,
                                       const RayOptions& opts = {}, PhiCache* cache = nullptr);

struct MemberRejected : std::runtime_error {
  MemberRejected(int idx, const std::string& what)
      : std::runtime_error("member " + std::to_string(idx) + ": " + what), index(idx) {}
  int index;
};

struct CompactnessMember {
  double h{0.0};
  double min_pairwise{0.0};
  double potential_at_x{0.0};
  double half_speed_sq{0.0};
  RayCertificate certificate;
  HorofunctionField field;
};

struct CompactnessReport {
  std::vector<CompactnessMember> members;
  std::vector<double> energy_gaps;  ///< |h_n - h of the last member|
  Mat sup_diff;                     ///< pairwise sup over commonly usable grid rows
  CalibrationReport limit_calibration;
  bool potential_bound_ok{true};    ///< U(x_n) <= (1/2)|v_n|_m^2 for all members
};

// Convergence diagnostics for a sequence of minimizing-ray data: energies and
// their gaps to the last member, the potential bound keeping data away from
// collisions, pairwise sup differences of the Busemann fields over the grid,
// and the calibration residual of the last member against its own field.
// Throws MemberRejected (with the index) when any member fails the membership
// proxy.
CompactnessReport compactness_experiment(const MassSystem& ms,
                                         const std::vector<PhaseState>& states, const Mat& grid,
                                         const RayOptions& opts = {}, PhiCache* cache = nullptr);

}  // namespace jmflow
