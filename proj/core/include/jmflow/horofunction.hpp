// Normalized Busemann estimates along rays, horofunction grid fields, the
// domination inequality, and viscosity residuals of the stationary
// Hamilton-Jacobi equation.
#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "jmflow/action.hpp"
#include "jmflow/integrate.hpp"
#include "jmflow/nbody.hpp"

namespace jmflow {

// Regular lattice patch in configuration space: point (i_0, ..., i_{k-1})
// sits at origin + sum_a i_a * axes.col(a); rows are stored row-major.
struct LatticeSpec {
  Vec origin;
  Mat axes;
  std::vector<int> shape;

  int dims() const { return static_cast<int>(shape.size()); }
  int points() const;
  int flat(const std::vector<int>& idx) const;
  std::vector<int> unflat(int flat_index) const;
};

Mat lattice_points(const LatticeSpec& spec);

struct HorofunctionField {
  Mat grid;                    ///< one configuration per row
  Vec values;                  ///< normalized estimate per row
  double h{0.0};
  std::vector<double> truncations;       ///< times (or sequence indices) used
  Vec last_increment;                    ///< |last - previous| per point
  std::vector<double> increment_history; ///< sup-norm increment per iterate
  std::vector<int> excluded;             ///< rows where evaluation failed
  bool converged{false};
  std::optional<LatticeSpec> lattice;

  int points() const { return static_cast<int>(grid.rows()); }
  bool is_excluded(int row) const;
  // Multilinear interpolation inside the lattice when present, otherwise an
  // exact-match lookup; nullopt outside the grid or near excluded points.
  std::optional<double> value_at(const Vec& x) const;
};

// Adapter for callers that consume a plain evaluator.
std::function<std::optional<double>(const Vec&)> field_evaluator(const HorofunctionField& f);

struct BusemannOptions {
  double t0{5.0};           ///< first truncation time
  int max_truncations{7};   ///< schedule t0 * 2^k, k < max_truncations
  double buse_tol{1e-4};    ///< sup-norm increment declaring convergence
  PhiOptions phi;
  int threads{1};
  // Grow phi.nodes proportionally to the truncation horizon.  Keeping the
  // node spacing fixed keeps the quadrature bias consistent between
  // truncations, so it cancels in the Busemann differences instead of
  // polluting the increments.
  bool scale_nodes{true};
};

// Normalized Busemann estimate u_t(x) = phi_h(0, ray(t)) - phi_h(x, ray(t))
// along a geometric truncation schedule, stopping once the sup-norm increment
// falls under buse_tol.  The anchor is the total-collision origin.
HorofunctionField busemann_estimate(const MassSystem& ms, const Trajectory& ray, double h,
                                    const Mat& grid, const BusemannOptions& opts = {},
                                    PhiCache* cache = nullptr);

// Horofunction from a sequence (h_n, p_n): u_n(x) = phi_{h_n}(0, p_n) -
// phi_{h_n}(x, p_n), with Cauchy diagnostics over the grid.
HorofunctionField horofunction_from_sequence(const MassSystem& ms,
                                             const std::vector<double>& h_seq, const Mat& p_seq,
                                             const Mat& grid, const BusemannOptions& opts = {},
                                             PhiCache* cache = nullptr);

// Max over sampled grid-index pairs of value(y) - value(x) - phi_h(x, y);
// nonpositive up to tolerance when the field is dominated by the action.
double domination_check(const MassSystem& ms, const HorofunctionField& field,
                        const std::vector<std::pair<int, int>>& samples,
                        const PhiOptions& opts = {}, PhiCache* cache = nullptr);

struct ViscosityReport {
  std::vector<int> point_index;  ///< flat lattice index per evaluated point
  Vec residual;                  ///< (1/2)|Dw|_*^2 - U(x) - h, w = -value
  Vec gradient_norm;             ///< dual norm of the finite-difference Dw
  std::vector<bool> masked;      ///< spike-masked points, excluded from summaries
  double median_abs_residual{0.0};
  double q90_abs_residual{0.0};
  int evaluated{0};              ///< unmasked count
};

// Central-difference residual of the stationary Hamilton-Jacobi equation on
// the field's lattice; boundary points are skipped, and points whose gradient
// norm jumps by more than 3x against a neighbor are masked as singular.
ViscosityReport viscosity_residual(const MassSystem& ms, const HorofunctionField& field,
                                   double h);

}  // namespace jmflow
