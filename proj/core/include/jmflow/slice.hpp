// Geometric-measure experiments on a fixed-shape slice: lattice patches of
// the solved velocity field, finite-difference differentials and graph
// Jacobians, Hausdorff-measure sums, backward flow saturation, and
// box-counting dimension estimates.
#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "jmflow/horofunction.hpp"
#include "jmflow/nbody.hpp"
#include "jmflow/shape.hpp"

namespace jmflow {

struct SlicePoint {
  Vec x;
  Vec v;
  bool converged{false};
  int iterations{0};
  double residual{0.0};
  bool has_differential{false};
  Mat dv;             // k x k differential in reduced coordinates
  double jacobian{1.0};
  double asymmetry{0.0};  // max second-difference norm over axes, per unit step
  std::string drop_reason;
};

struct SlicePatch {
  ConeSpec cone;
  Mat basis;           // mass-orthonormal reduced basis spanning the lattice
  LatticeSpec lattice;  // axes are spacing * basis columns
  double spacing{0.0};
  std::vector<SlicePoint> points;  // flat lattice order

  int dims() const { return static_cast<int>(basis.cols()); }
};

// Solves the velocity field on a lattice of shape `shape` centered at
// `center`, axes along the reduced basis scaled by `spacing`.  Every lattice
// point must lie inside the cone.
SlicePatch build_slice_patch(const MassSystem& ms, const ConeSpec& cone, const Vec& center,
                             const std::vector<int>& shape, double spacing,
                             const ShapeSolveOptions& opts = {}, int threads = 1);

// Central differences from lattice neighbors (step = lattice spacing) for
// every interior point with converged neighbors; fills dv, jacobian and the
// forward/backward asymmetry diagnostic.  Boundary points and points next to
// failed solves are left without a differential, with the reason recorded.
void differential_of_field(const MassSystem& ms, SlicePatch& patch);

// sqrt(det(I + DV^T DV)) through singular values; always >= 1.
double graph_jacobian(const Mat& dv);

struct PatchMeasure {
  double value{0.0};
  int evaluated{0};
  int dropped{0};  // interior points without a differential
  bool unreliable{false};
};

// Riemann sum of the graph Jacobian over the interior lattice; unreliable
// when more than 10% of the interior was dropped.
PatchMeasure hausdorff_measure_patch(const SlicePatch& patch, double cell_volume);

struct SaturationResult {
  Mat cloud;  // rows of (reduced position, reduced velocity), 2k columns
  std::vector<std::pair<int, int>> origin;  // (patch point index, backward steps)
  int discarded{0};  // (point, n) pairs lost to backward singularities
};

// Backward flow images of the graph points (x, V(x)) for n = 0..n_max unit
// steps; points whose backward flow reaches a singularity stop contributing.
SaturationResult flow_saturate(const MassSystem& ms, const SlicePatch& patch, int n_max,
                               const IntegrateOptions& opts = {}, int threads = 1);

struct InsufficientScales : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BoxCountOptions {
  int scales{5};          // dyadic scales requested, starting at L/4
  double vel_scale{1.0};  // multiplies the velocity half of the columns
};

struct DimensionEstimate {
  std::vector<double> scales;
  std::vector<long> counts;
  double slope{0.0};
  double confidence{0.0};  // standard error of the fitted slope
};

// Counts occupied boxes at dyadic scales and fits log N against log(1/eps).
// Scales where the count saturates (more than half the points isolated) are
// not used; fewer than 4 usable scales throws InsufficientScales.
DimensionEstimate box_counting_dimension(const Mat& cloud, const BoxCountOptions& opts = {});

}  // namespace jmflow
