#include "jmflow/horofunction.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "jmflow/parallel.hpp"

namespace jmflow {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Binary near-collisions are rejected; exact total collisions (all bodies at
// one point) are fine as action endpoints and stay admissible.
void check_grid(const MassSystem& ms, const Mat& grid, const char* what) {
  if (grid.cols() != ms.coords()) {
    throw std::invalid_argument(std::string(what) + ": grid column count mismatch");
  }
  for (int r = 0; r < grid.rows(); ++r) {
    const Vec q = grid.row(r).transpose();
    const double dmax = max_pairwise_distance(ms, q);
    if (dmax > 0.0 && !(min_pairwise_distance(ms, q) > 1e-10 * dmax)) {
      throw std::invalid_argument(std::string(what) + ": grid row " + std::to_string(r) +
                                  " has a pair within the collision cutoff");
    }
  }
}

struct IterateOutcome {
  Vec values;
  std::vector<char> failed;
};

double sup_increment(const Vec& next, const Vec& prev, const std::vector<char>& failed) {
  double sup = 0.0;
  for (int i = 0; i < next.size(); ++i) {
    if (!failed[i]) sup = std::max(sup, std::abs(next[i] - prev[i]));
  }
  return sup;
}

PhiOptions scaled_phi(const BusemannOptions& opts, double factor) {
  PhiOptions po = opts.phi;
  if (opts.scale_nodes && factor > 1.0) {
    const double capped = std::min(factor, 256.0);
    po.nodes = static_cast<int>(std::lround(po.nodes * capped));
  }
  return po;
}

}  // namespace

int LatticeSpec::points() const {
  int p = 1;
  for (int s : shape) p *= s;
  return p;
}

int LatticeSpec::flat(const std::vector<int>& idx) const {
  int f = 0;
  for (std::size_t a = 0; a < shape.size(); ++a) f = f * shape[a] + idx[a];
  return f;
}

std::vector<int> LatticeSpec::unflat(int flat_index) const {
  std::vector<int> idx(shape.size());
  for (int a = static_cast<int>(shape.size()) - 1; a >= 0; --a) {
    idx[a] = flat_index % shape[a];
    flat_index /= shape[a];
  }
  return idx;
}

Mat lattice_points(const LatticeSpec& spec) {
  const int p = spec.points();
  Mat grid(p, spec.origin.size());
  for (int f = 0; f < p; ++f) {
    const std::vector<int> idx = spec.unflat(f);
    Vec q = spec.origin;
    for (int a = 0; a < spec.dims(); ++a) q += static_cast<double>(idx[a]) * spec.axes.col(a);
    grid.row(f) = q.transpose();
  }
  return grid;
}

bool HorofunctionField::is_excluded(int row) const {
  return std::binary_search(excluded.begin(), excluded.end(), row);
}

std::optional<double> HorofunctionField::value_at(const Vec& x) const {
  if (grid.rows() == 0 || x.size() != grid.cols()) return std::nullopt;
  if (lattice) {
    const LatticeSpec& lat = *lattice;
    const Vec rhs = x - lat.origin;
    const Vec c = lat.axes.colPivHouseholderQr().solve(rhs);
    if ((lat.axes * c - rhs).norm() > 1e-8 * (1.0 + x.norm())) return std::nullopt;
    const int k = lat.dims();
    std::vector<int> base(k);
    std::vector<double> frac(k);
    for (int a = 0; a < k; ++a) {
      if (c[a] < -1e-9 || c[a] > lat.shape[a] - 1 + 1e-9) return std::nullopt;
      const double clamped = std::min(std::max(c[a], 0.0), static_cast<double>(lat.shape[a] - 1));
      base[a] = std::min(static_cast<int>(std::floor(clamped)), lat.shape[a] - 2);
      if (lat.shape[a] == 1) base[a] = 0;
      frac[a] = clamped - base[a];
    }
    double acc = 0.0;
    for (int corner = 0; corner < (1 << k); ++corner) {
      std::vector<int> idx = base;
      double w = 1.0;
      for (int a = 0; a < k; ++a) {
        if (corner & (1 << a)) {
          if (lat.shape[a] == 1) {
            w = 0.0;
            break;
          }
          idx[a] += 1;
          w *= frac[a];
        } else {
          w *= 1.0 - frac[a];
        }
      }
      if (w == 0.0) continue;
      const int f = lat.flat(idx);
      if (is_excluded(f)) return std::nullopt;
      acc += w * values[f];
    }
    return acc;
  }
  int best = -1;
  double best_dist = kInf;
  for (int r = 0; r < grid.rows(); ++r) {
    const double d = (grid.row(r).transpose() - x).norm();
    if (d < best_dist) {
      best_dist = d;
      best = r;
    }
  }
  if (best < 0 || best_dist > 1e-8 * (1.0 + x.norm()) || is_excluded(best)) return std::nullopt;
  return values[best];
}

std::function<std::optional<double>(const Vec&)> field_evaluator(const HorofunctionField& f) {
  return [&f](const Vec& x) { return f.value_at(x); };
}

HorofunctionField busemann_estimate(const MassSystem& ms, const Trajectory& ray, double h,
                                    const Mat& grid, const BusemannOptions& opts,
                                    PhiCache* cache) {
  check_grid(ms, grid, "busemann_estimate");
  std::vector<double> schedule;
  for (int k = 0; k < opts.max_truncations; ++k) {
    const double t = opts.t0 * std::pow(2.0, k);
    if (ray.t_begin() + t <= ray.t_end() + 1e-9) schedule.push_back(t);
  }
  if (schedule.size() < 2) {
    throw std::invalid_argument("busemann_estimate: ray horizon shorter than two truncations");
  }

  const int points = static_cast<int>(grid.rows());
  const Vec origin = Vec::Zero(ms.coords());
  HorofunctionField field;
  field.grid = grid;
  field.h = h;
  field.values = Vec::Zero(points);
  field.last_increment = Vec::Zero(points);

  Vec curr = Vec::Zero(points);
  Vec prev;
  std::vector<char> failed(points, 0);
  const double ref_norm = mass_norm(ms, ray.state_at(ray.t_begin() + schedule[0]).q);
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    const Vec endpoint = ray.state_at(ray.t_begin() + schedule[k]).q;
    const PhiOptions po = scaled_phi(
        opts, ref_norm > 0.0 ? mass_norm(ms, endpoint) / ref_norm : schedule[k] / schedule[0]);
    const double anchor = phi_free(ms, h, origin, endpoint, po, cache).value;
    Vec next = Vec::Zero(points);
    parallel_for(points, opts.threads, [&](int i) {
      if (failed[i]) return;
      try {
        next[i] = anchor - phi_free(ms, h, grid.row(i).transpose(), endpoint, po, cache).value;
      } catch (const AllStartsFailed&) {
        failed[i] = 1;
      }
    });
    field.truncations.push_back(schedule[k]);
    if (k > 0) {
      for (int i = 0; i < points; ++i) {
        field.last_increment[i] = failed[i] ? 0.0 : std::abs(next[i] - curr[i]);
      }
      const double sup = sup_increment(next, curr, failed);
      field.increment_history.push_back(sup);
      curr = next;
      if (sup <= opts.buse_tol) {
        field.converged = true;
        break;
      }
    } else {
      curr = next;
    }
  }

  field.values = curr;
  for (int i = 0; i < points; ++i) {
    if (failed[i]) field.excluded.push_back(i);
  }
  return field;
}

HorofunctionField horofunction_from_sequence(const MassSystem& ms,
                                             const std::vector<double>& h_seq, const Mat& p_seq,
                                             const Mat& grid, const BusemannOptions& opts,
                                             PhiCache* cache) {
  check_grid(ms, grid, "horofunction_from_sequence");
  if (h_seq.empty() || static_cast<int>(h_seq.size()) != p_seq.rows()) {
    throw std::invalid_argument("horofunction_from_sequence: h and p lengths differ");
  }
  if (p_seq.cols() != ms.coords()) {
    throw std::invalid_argument("horofunction_from_sequence: p column count mismatch");
  }
  for (int n = 1; n < p_seq.rows(); ++n) {
    if (!(mass_norm(ms, p_seq.row(n).transpose()) >
          mass_norm(ms, p_seq.row(n - 1).transpose()))) {
      throw std::invalid_argument("horofunction_from_sequence: |p_n| must increase");
    }
  }

  const int points = static_cast<int>(grid.rows());
  const Vec origin = Vec::Zero(ms.coords());
  HorofunctionField field;
  field.grid = grid;
  field.h = h_seq.back();
  field.values = Vec::Zero(points);
  field.last_increment = Vec::Zero(points);

  Vec curr = Vec::Zero(points);
  std::vector<char> failed(points, 0);
  const double norm0 = mass_norm(ms, p_seq.row(0).transpose());
  for (int n = 0; n < p_seq.rows(); ++n) {
    const Vec p = p_seq.row(n).transpose();
    const PhiOptions po = scaled_phi(opts, norm0 > 0.0 ? mass_norm(ms, p) / norm0 : 1.0);
    const double anchor = phi_free(ms, h_seq[n], origin, p, po, cache).value;
    Vec next = Vec::Zero(points);
    parallel_for(points, opts.threads, [&](int i) {
      if (failed[i]) return;
      try {
        next[i] = anchor - phi_free(ms, h_seq[n], grid.row(i).transpose(), p, po, cache).value;
      } catch (const AllStartsFailed&) {
        failed[i] = 1;
      }
    });
    field.truncations.push_back(mass_norm(ms, p));
    if (n > 0) {
      for (int i = 0; i < points; ++i) {
        field.last_increment[i] = failed[i] ? 0.0 : std::abs(next[i] - curr[i]);
      }
      field.increment_history.push_back(sup_increment(next, curr, failed));
    }
    curr = next;
  }

  field.values = curr;
  field.converged =
      !field.increment_history.empty() && field.increment_history.back() <= opts.buse_tol;
  for (int i = 0; i < points; ++i) {
    if (failed[i]) field.excluded.push_back(i);
  }
  return field;
}

double domination_check(const MassSystem& ms, const HorofunctionField& field,
                        const std::vector<std::pair<int, int>>& samples,
                        const PhiOptions& opts, PhiCache* cache) {
  double worst = 0.0;
  for (const auto& [i, j] : samples) {
    if (i < 0 || j < 0 || i >= field.points() || j >= field.points()) {
      throw std::invalid_argument("domination_check: sample index out of range");
    }
    if (field.is_excluded(i) || field.is_excluded(j)) {
      throw std::invalid_argument("domination_check: sampled pair touches an excluded point");
    }
    const double phi =
        phi_free(ms, field.h, field.grid.row(i).transpose(), field.grid.row(j).transpose(),
                 opts, cache)
            .value;
    worst = std::max(worst, field.values[j] - field.values[i] - phi);
  }
  return worst;
}

ViscosityReport viscosity_residual(const MassSystem& ms, const HorofunctionField& field,
                                   double h) {
  if (!field.lattice) {
    throw std::invalid_argument("viscosity_residual: field has no lattice metadata");
  }
  const LatticeSpec& lat = *field.lattice;
  if (lat.points() != field.points()) {
    throw std::invalid_argument("viscosity_residual: lattice shape does not match grid");
  }
  const int k = lat.dims();
  for (int a = 0; a < k; ++a) {
    if (lat.shape[a] < 3) {
      throw std::invalid_argument("viscosity_residual: need >= 3 points per lattice axis");
    }
  }

  Mat gram(k, k);
  for (int a = 0; a < k; ++a) {
    for (int b = 0; b < k; ++b) gram(a, b) = mass_inner(ms, lat.axes.col(a), lat.axes.col(b));
  }
  const Eigen::LLT<Mat> gram_llt(gram);
  if (gram_llt.info() != Eigen::Success) {
    throw std::invalid_argument("viscosity_residual: lattice axes are degenerate");
  }

  ViscosityReport report;
  std::vector<int> row_of(lat.points(), -1);
  std::vector<double> residuals, gnorms;
  for (int f = 0; f < lat.points(); ++f) {
    const std::vector<int> idx = lat.unflat(f);
    bool interior = true;
    for (int a = 0; a < k; ++a) {
      if (idx[a] < 1 || idx[a] > lat.shape[a] - 2) interior = false;
    }
    if (!interior || field.is_excluded(f)) continue;
    bool stencil_ok = true;
    Vec d(k);
    for (int a = 0; a < k && stencil_ok; ++a) {
      std::vector<int> up = idx, dn = idx;
      up[a] += 1;
      dn[a] -= 1;
      const int fu = lat.flat(up), fd = lat.flat(dn);
      if (field.is_excluded(fu) || field.is_excluded(fd)) {
        stencil_ok = false;
        break;
      }
      // w = -value; central difference per unit lattice coordinate.
      d[a] = 0.5 * (-field.values[fu] + field.values[fd]);
    }
    if (!stencil_ok) continue;
    double u_here = 0.0;
    try {
      u_here = potential(ms, field.grid.row(f).transpose());
    } catch (const CollisionError&) {
      continue;
    }
    const Vec coef = gram_llt.solve(d);
    const double gnorm2 = d.dot(coef);
    row_of[f] = static_cast<int>(residuals.size());
    report.point_index.push_back(f);
    residuals.push_back(0.5 * gnorm2 - u_here - h);
    gnorms.push_back(std::sqrt(std::max(gnorm2, 0.0)));
  }

  report.residual = Eigen::Map<const Vec>(residuals.data(), static_cast<Eigen::Index>(residuals.size()));
  report.gradient_norm = Eigen::Map<const Vec>(gnorms.data(), static_cast<Eigen::Index>(gnorms.size()));
  report.masked.assign(residuals.size(), false);

  for (std::size_t r = 0; r < report.point_index.size(); ++r) {
    const std::vector<int> idx = lat.unflat(report.point_index[r]);
    for (int a = 0; a < k; ++a) {
      for (int dir : {-1, 1}) {
        std::vector<int> nb = idx;
        nb[a] += dir;
        if (nb[a] < 0 || nb[a] >= lat.shape[a]) continue;
        const int rn = row_of[lat.flat(nb)];
        if (rn < 0) continue;
        if (gnorms[r] + 1e-12 > 3.0 * (gnorms[rn] + 1e-12)) report.masked[r] = true;
      }
    }
  }

  std::vector<double> live;
  for (std::size_t r = 0; r < residuals.size(); ++r) {
    if (!report.masked[r]) live.push_back(std::abs(residuals[r]));
  }
  report.evaluated = static_cast<int>(live.size());
  if (!live.empty()) {
    std::sort(live.begin(), live.end());
    report.median_abs_residual = live[live.size() / 2];
    report.q90_abs_residual = live[static_cast<std::size_t>(0.9 * (live.size() - 1))];
  }
  return report;
}

}  // namespace jmflow
