#include "jmflow/nbody.hpp"

#include <cmath>
#include <limits>

namespace jmflow {

namespace {

void check_config_size(const MassSystem& ms, const Vec& x, const char* what) {
  if (x.size() != ms.coords()) {
    throw std::invalid_argument(std::string(what) + ": expected length " +
                                std::to_string(ms.coords()) + ", got " +
                                std::to_string(x.size()));
  }
}

double pair_distance(const MassSystem& ms, const Vec& q, int i, int j) {
  const int d = ms.dim;
  return (q.segment(i * d, d) - q.segment(j * d, d)).norm();
}

}  // namespace

MassSystem make_mass_system(const std::vector<double>& masses, int dim) {
  if (masses.empty()) throw std::invalid_argument("masses: need at least one body");
  if (dim < 1) throw std::invalid_argument("dim: must be >= 1");
  MassSystem ms;
  ms.masses = Eigen::Map<const Vec>(masses.data(), static_cast<Eigen::Index>(masses.size()));
  ms.dim = dim;
  for (int i = 0; i < ms.bodies(); ++i) {
    if (!(ms.masses[i] > 0.0)) {
      throw std::invalid_argument("masses: entry " + std::to_string(i) + " must be positive");
    }
  }
  return ms;
}

double mass_inner(const MassSystem& ms, const Vec& x, const Vec& y) {
  check_config_size(ms, x, "mass_inner x");
  check_config_size(ms, y, "mass_inner y");
  double acc = 0.0;
  const int d = ms.dim;
  for (int i = 0; i < ms.bodies(); ++i) {
    acc += ms.masses[i] * x.segment(i * d, d).dot(y.segment(i * d, d));
  }
  return acc;
}

double mass_norm(const MassSystem& ms, const Vec& x) {
  return std::sqrt(mass_inner(ms, x, x));
}

double dual_norm(const MassSystem& ms, const Vec& p) {
  check_config_size(ms, p, "dual_norm");
  double acc = 0.0;
  const int d = ms.dim;
  for (int i = 0; i < ms.bodies(); ++i) {
    acc += p.segment(i * d, d).squaredNorm() / ms.masses[i];
  }
  return std::sqrt(acc);
}

double min_pairwise_distance(const MassSystem& ms, const Vec& q) {
  check_config_size(ms, q, "min_pairwise_distance");
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < ms.bodies(); ++i)
    for (int j = i + 1; j < ms.bodies(); ++j)
      best = std::min(best, pair_distance(ms, q, i, j));
  return best;
}

double max_pairwise_distance(const MassSystem& ms, const Vec& q) {
  check_config_size(ms, q, "max_pairwise_distance");
  double best = 0.0;
  for (int i = 0; i < ms.bodies(); ++i)
    for (int j = i + 1; j < ms.bodies(); ++j)
      best = std::max(best, pair_distance(ms, q, i, j));
  return best;
}

double collision_cutoff(const MassSystem& ms, const Vec& q) {
  return 1e-10 * max_pairwise_distance(ms, q);
}

bool collision_free(const MassSystem& ms, const Vec& q) {
  if (ms.bodies() < 2) return true;
  return min_pairwise_distance(ms, q) > collision_cutoff(ms, q);
}

double potential(const MassSystem& ms, const Vec& q) {
  check_config_size(ms, q, "potential");
  const double cutoff = collision_cutoff(ms, q);
  double acc = 0.0;
  for (int i = 0; i < ms.bodies(); ++i) {
    for (int j = i + 1; j < ms.bodies(); ++j) {
      const double r = pair_distance(ms, q, i, j);
      if (r <= cutoff) {
        throw CollisionError("potential: bodies " + std::to_string(i) + " and " +
                             std::to_string(j) + " within collision cutoff");
      }
      acc += ms.masses[i] * ms.masses[j] / r;
    }
  }
  return acc;
}

Vec potential_gradient(const MassSystem& ms, const Vec& q) {
  check_config_size(ms, q, "potential_gradient");
  const int d = ms.dim;
  const double cutoff = collision_cutoff(ms, q);
  Vec g = Vec::Zero(q.size());
  for (int i = 0; i < ms.bodies(); ++i) {
    for (int j = i + 1; j < ms.bodies(); ++j) {
      const Vec rij = q.segment(i * d, d) - q.segment(j * d, d);
      const double r = rij.norm();
      if (r <= cutoff) throw CollisionError("potential_gradient: pair within collision cutoff");
      const Vec pull = ms.masses[i] * ms.masses[j] / (r * r * r) * rij;
      g.segment(i * d, d) -= pull;
      g.segment(j * d, d) += pull;
    }
  }
  return g;
}

Mat potential_hessian(const MassSystem& ms, const Vec& q) {
  check_config_size(ms, q, "potential_hessian");
  const int d = ms.dim;
  const double cutoff = collision_cutoff(ms, q);
  Mat h = Mat::Zero(q.size(), q.size());
  for (int i = 0; i < ms.bodies(); ++i) {
    for (int j = i + 1; j < ms.bodies(); ++j) {
      const Vec rij = q.segment(i * d, d) - q.segment(j * d, d);
      const double r = rij.norm();
      if (r <= cutoff) throw CollisionError("potential_hessian: pair within collision cutoff");
      const double r3 = r * r * r;
      const double r5 = r3 * r * r;
      const Mat block =
          ms.masses[i] * ms.masses[j] * (3.0 / r5 * (rij * rij.transpose()) - Mat::Identity(d, d) / r3);
      h.block(i * d, i * d, d, d) += block;
      h.block(j * d, j * d, d, d) += block;
      h.block(i * d, j * d, d, d) -= block;
      h.block(j * d, i * d, d, d) -= block;
    }
  }
  return h;
}

Vec accelerations(const MassSystem& ms, const Vec& q) {
  check_config_size(ms, q, "accelerations");
  const int d = ms.dim;
  const double cutoff = collision_cutoff(ms, q);
  Vec a = Vec::Zero(q.size());
  for (int i = 0; i < ms.bodies(); ++i) {
    for (int j = i + 1; j < ms.bodies(); ++j) {
      const Vec rij = q.segment(j * d, d) - q.segment(i * d, d);
      const double r = rij.norm();
      if (r <= cutoff) throw CollisionError("accelerations: pair within collision cutoff");
      const Vec dir = rij / (r * r * r);
      a.segment(i * d, d) += ms.masses[j] * dir;
      a.segment(j * d, d) -= ms.masses[i] * dir;
    }
  }
  return a;
}

double kinetic_energy(const MassSystem& ms, const Vec& v) {
  return 0.5 * mass_inner(ms, v, v);
}

double energy(const MassSystem& ms, const PhaseState& s) {
  return kinetic_energy(ms, s.v) - potential(ms, s.q);
}

double moment_of_inertia(const MassSystem& ms, const Vec& q) {
  return mass_inner(ms, q, q);
}

Vec center_of_mass(const MassSystem& ms, const Vec& q) {
  check_config_size(ms, q, "center_of_mass");
  const int d = ms.dim;
  Vec c = Vec::Zero(d);
  for (int i = 0; i < ms.bodies(); ++i) c += ms.masses[i] * q.segment(i * d, d);
  return c / ms.total_mass();
}

Vec linear_momentum(const MassSystem& ms, const PhaseState& s) {
  check_config_size(ms, s.v, "linear_momentum");
  const int d = ms.dim;
  Vec p = Vec::Zero(d);
  for (int i = 0; i < ms.bodies(); ++i) p += ms.masses[i] * s.v.segment(i * d, d);
  return p;
}

Vec angular_momentum(const MassSystem& ms, const PhaseState& s) {
  check_config_size(ms, s.q, "angular_momentum q");
  check_config_size(ms, s.v, "angular_momentum v");
  const int d = ms.dim;
  const int planes = d * (d - 1) / 2;
  Vec l = Vec::Zero(std::max(planes, 1));
  if (planes == 0) return Vec::Zero(1);
  for (int i = 0; i < ms.bodies(); ++i) {
    int k = 0;
    for (int a = 0; a < d; ++a) {
      for (int b = a + 1; b < d; ++b, ++k) {
        l[k] += ms.masses[i] * (s.q[i * d + a] * s.v[i * d + b] - s.q[i * d + b] * s.v[i * d + a]);
      }
    }
  }
  return l;
}

Vec reduce_to_center_of_mass(const MassSystem& ms, const Vec& q) {
  const Vec c = center_of_mass(ms, q);
  const int d = ms.dim;
  Vec out = q;
  for (int i = 0; i < ms.bodies(); ++i) out.segment(i * d, d) -= c;
  return out;
}

PhaseState reduce_to_center_of_mass(const MassSystem& ms, const PhaseState& s) {
  return {reduce_to_center_of_mass(ms, s.q), reduce_to_center_of_mass(ms, s.v)};
}

bool is_reduced(const MassSystem& ms, const Vec& q, double tol) {
  return center_of_mass(ms, q).norm() <= tol;
}

Mat reduced_basis(const MassSystem& ms) {
  const int d = ms.dim;
  const int n = ms.bodies();
  const int k = d * (n - 1);
  Mat basis(ms.coords(), k);
  int col = 0;
  for (int i = 0; i < n - 1; ++i) {
    for (int c = 0; c < d; ++c, ++col) {
      // Unit displacement of body i along axis c, projected onto the
      // zero-center-of-mass subspace in the mass metric.
      Vec v = Vec::Zero(ms.coords());
      v[i * d + c] = 1.0;
      const double shift = ms.masses[i] / ms.total_mass();
      for (int j = 0; j < n; ++j) v[j * d + c] -= shift;
      // Modified Gram-Schmidt against the columns already accepted.
      for (int p = 0; p < col; ++p) {
        v -= mass_inner(ms, basis.col(p), v) * basis.col(p);
      }
      const double norm = mass_norm(ms, v);
      if (norm <= 1e-14) throw std::logic_error("reduced_basis: degenerate generator");
      basis.col(col) = v / norm;
    }
  }
  return basis;
}

Vec reduced_coordinates(const MassSystem& ms, const Mat& basis, const Vec& q) {
  Vec z(basis.cols());
  for (int p = 0; p < basis.cols(); ++p) z[p] = mass_inner(ms, basis.col(p), q);
  return z;
}

}  // namespace jmflow
