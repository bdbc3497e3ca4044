#include "jmflow/slice.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_set>

#include "jmflow/integrate.hpp"
#include "jmflow/parallel.hpp"

namespace jmflow {

SlicePatch build_slice_patch(const MassSystem& ms, const ConeSpec& cone, const Vec& center,
                             const std::vector<int>& shape, double spacing,
                             const ShapeSolveOptions& opts, int threads) {
  if (shape.empty()) throw std::invalid_argument("build_slice_patch: empty lattice shape");
  for (int s : shape) {
    if (s < 1) throw std::invalid_argument("build_slice_patch: lattice extents must be >= 1");
  }
  if (!(spacing > 0.0)) throw std::invalid_argument("build_slice_patch: spacing must be positive");
  const Mat basis = reduced_basis(ms);
  const int k = static_cast<int>(basis.cols());
  if (static_cast<int>(shape.size()) > k) {
    throw std::invalid_argument("build_slice_patch: more lattice axes than reduced dimensions");
  }

  SlicePatch patch;
  patch.cone = cone;
  patch.basis = basis;
  patch.spacing = spacing;
  patch.lattice.shape = shape;
  patch.lattice.axes = Mat(ms.coords(), shape.size());
  for (std::size_t a = 0; a < shape.size(); ++a) {
    patch.lattice.axes.col(a) = spacing * basis.col(a);
  }
  patch.lattice.origin = center;
  for (std::size_t a = 0; a < shape.size(); ++a) {
    patch.lattice.origin -= 0.5 * (shape[a] - 1) * patch.lattice.axes.col(a);
  }

  const Mat pts = lattice_points(patch.lattice);
  for (int i = 0; i < pts.rows(); ++i) {
    if (!cone_contains(ms, cone, pts.row(i).transpose()).inside) {
      throw std::invalid_argument("build_slice_patch: lattice point " + std::to_string(i) +
                                  " lies outside the cone");
    }
  }

  patch.points.resize(pts.rows());
  parallel_for(static_cast<int>(pts.rows()), threads, [&](int i) {
    SlicePoint& sp = patch.points[i];
    sp.x = pts.row(i).transpose();
    const ShapeSolve solve = solve_velocity_field(ms, cone, sp.x, opts);
    sp.v = solve.v;
    sp.iterations = solve.iterations;
    sp.residual = solve.residual;
    sp.converged = solve.status == SolveStatus::converged;
    if (!sp.converged) sp.drop_reason = to_string(solve.status);
  });
  return patch;
}

void differential_of_field(const MassSystem& ms, SlicePatch& patch) {
  const LatticeSpec& lat = patch.lattice;
  const int k = patch.dims();
  if (static_cast<int>(lat.shape.size()) != k) {
    throw std::invalid_argument("differential_of_field: lattice must span the reduced space");
  }
  const double h = patch.spacing;

  for (int f = 0; f < lat.points(); ++f) {
    SlicePoint& sp = patch.points[f];
    sp.has_differential = false;
    if (!sp.converged) continue;

    const std::vector<int> idx = lat.unflat(f);
    bool interior = true;
    for (int a = 0; a < k; ++a) {
      if (idx[a] == 0 || idx[a] == lat.shape[a] - 1) interior = false;
    }
    if (!interior) {
      if (sp.drop_reason.empty()) sp.drop_reason = "boundary point";
      continue;
    }

    Mat dv(k, k);
    double asym = 0.0;
    bool ok = true;
    for (int a = 0; a < k && ok; ++a) {
      std::vector<int> up = idx, dn = idx;
      up[a] += 1;
      dn[a] -= 1;
      const SlicePoint& pu = patch.points[lat.flat(up)];
      const SlicePoint& pd = patch.points[lat.flat(dn)];
      if (!pu.converged || !pd.converged) {
        sp.drop_reason = "neighbor solve failed";
        ok = false;
        break;
      }
      const Vec central = (pu.v - pd.v) / (2.0 * h);
      for (int i = 0; i < k; ++i) dv(i, a) = mass_inner(ms, patch.basis.col(i), central);
      asym = std::max(asym, mass_norm(ms, pu.v - 2.0 * sp.v + pd.v) / h);
    }
    if (!ok) continue;

    sp.dv = dv;
    sp.jacobian = graph_jacobian(dv);
    sp.asymmetry = asym;
    sp.has_differential = true;
    sp.drop_reason.clear();
  }
}

double graph_jacobian(const Mat& dv) {
  if (dv.rows() != dv.cols()) throw std::invalid_argument("graph_jacobian: matrix must be square");
  if (!dv.allFinite()) throw std::invalid_argument("graph_jacobian: non-finite entries");
  const Eigen::JacobiSVD<Mat> svd(dv);
  double j = 1.0;
  for (int i = 0; i < svd.singularValues().size(); ++i) {
    const double s = svd.singularValues()[i];
    j *= std::sqrt(1.0 + s * s);
  }
  return j;
}

PatchMeasure hausdorff_measure_patch(const SlicePatch& patch, double cell_volume) {
  if (!(cell_volume > 0.0)) {
    throw std::invalid_argument("hausdorff_measure_patch: cell volume must be positive");
  }
  const LatticeSpec& lat = patch.lattice;
  int interior = 1;
  for (int s : lat.shape) interior *= std::max(0, s - 2);
  if (interior == 0) {
    throw std::invalid_argument("hausdorff_measure_patch: lattice has no interior");
  }

  PatchMeasure out;
  for (const SlicePoint& sp : patch.points) {
    if (!sp.has_differential) continue;
    out.value += sp.jacobian * cell_volume;
    out.evaluated += 1;
  }
  out.dropped = interior - out.evaluated;
  out.unreliable = out.dropped > static_cast<int>(0.1 * interior);
  return out;
}

SaturationResult flow_saturate(const MassSystem& ms, const SlicePatch& patch, int n_max,
                               const IntegrateOptions& opts, int threads) {
  if (n_max < 0) throw std::invalid_argument("flow_saturate: n_max must be >= 0");
  const int k = patch.dims();

  struct PerPoint {
    std::vector<Vec> rows;
    int discarded{0};
  };
  std::vector<PerPoint> partial(patch.points.size());

  parallel_for(static_cast<int>(patch.points.size()), threads, [&](int i) {
    const SlicePoint& sp = patch.points[i];
    if (!sp.converged) return;
    PerPoint& acc = partial[i];
    PhaseState state{sp.x, sp.v};
    for (int n = 0; n <= n_max; ++n) {
      if (n > 0) {
        IntegrationResult res = integrate(ms, state, 0.0, -1.0, opts);
        if (!res.ok()) {
          acc.discarded += n_max - n + 1;
          return;
        }
        state = res.trajectory.final_state();
      }
      Vec row(2 * k);
      row.head(k) = reduced_coordinates(ms, patch.basis, state.q);
      row.tail(k) = reduced_coordinates(ms, patch.basis, state.v);
      acc.rows.push_back(row);
    }
  });

  SaturationResult out;
  int total = 0;
  for (const PerPoint& acc : partial) total += static_cast<int>(acc.rows.size());
  out.cloud = Mat(total, 2 * k);
  int r = 0;
  for (std::size_t i = 0; i < partial.size(); ++i) {
    out.discarded += partial[i].discarded;
    for (std::size_t n = 0; n < partial[i].rows.size(); ++n, ++r) {
      out.cloud.row(r) = partial[i].rows[n];
      out.origin.emplace_back(static_cast<int>(i), static_cast<int>(n));
    }
  }
  return out;
}

namespace {

std::uint64_t cell_hash(const std::vector<std::int64_t>& idx) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::int64_t v : idx) {
    std::uint64_t u = static_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      h ^= (u >> (8 * b)) & 0xffull;
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace

DimensionEstimate box_counting_dimension(const Mat& cloud, const BoxCountOptions& opts) {
  if (cloud.rows() < 16) throw std::invalid_argument("box_counting_dimension: cloud too small");
  if (opts.scales < 4) throw std::invalid_argument("box_counting_dimension: needs >= 4 scales");
  const int dims = static_cast<int>(cloud.cols());
  if (dims < 2 || dims % 2 != 0) {
    throw std::invalid_argument("box_counting_dimension: columns must split into q|v halves");
  }

  Mat scaled = cloud;
  scaled.rightCols(dims / 2) *= opts.vel_scale;
  const Vec lo = scaled.colwise().minCoeff().transpose();
  const Vec hi = scaled.colwise().maxCoeff().transpose();
  const double extent = (hi - lo).maxCoeff();
  if (!(extent > 0.0)) {
    throw InsufficientScales("box_counting_dimension: cloud is a single point");
  }

  DimensionEstimate est;
  std::vector<double> lx, ly;
  const long rows = cloud.rows();
  for (int j = 0; j < opts.scales; ++j) {
    const double eps = extent / std::pow(2.0, j + 2);
    const std::int64_t per_axis = std::int64_t{1} << (j + 2);
    std::unordered_set<std::uint64_t> cells;
    cells.reserve(static_cast<std::size_t>(rows));
    std::vector<std::int64_t> idx(dims);
    for (long r = 0; r < rows; ++r) {
      for (int c = 0; c < dims; ++c) {
        auto cell = static_cast<std::int64_t>(std::floor((scaled(r, c) - lo[c]) / eps));
        idx[c] = std::clamp(cell, std::int64_t{0}, per_axis - 1);
      }
      cells.insert(cell_hash(idx));
    }
    const long count = static_cast<long>(cells.size());
    if (2 * count > rows) break;  // saturated: points isolated
    est.scales.push_back(eps);
    est.counts.push_back(count);
    lx.push_back(std::log(1.0 / eps));
    ly.push_back(std::log(static_cast<double>(count)));
  }

  const int n = static_cast<int>(est.scales.size());
  if (n < 4) {
    throw InsufficientScales(
        "box_counting_dimension: fewer than 4 unsaturated dyadic scales (cloud too sparse)");
  }

  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < n; ++i) {
    sx += lx[i];
    sy += ly[i];
    sxx += lx[i] * lx[i];
    sxy += lx[i] * ly[i];
  }
  const double det = n * sxx - sx * sx;
  est.slope = (n * sxy - sx * sy) / det;
  const double intercept = (sy - est.slope * sx) / n;
  double sse = 0.0, sxc = 0.0;
  const double xbar = sx / n;
  for (int i = 0; i < n; ++i) {
    const double e = ly[i] - est.slope * lx[i] - intercept;
    sse += e * e;
    sxc += (lx[i] - xbar) * (lx[i] - xbar);
  }
  est.confidence = n > 2 ? std::sqrt(sse / (n - 2) / sxc) : 0.0;
  return est;
}

}  // namespace jmflow
