// Mass systems and configuration-space primitives for the Newtonian N-body
// problem with G = 1.  A configuration is a flat vector of length
// bodies * dim, body-major: coordinate c of body i sits at index i*dim + c.
#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

namespace jmflow {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Raised when the Newtonian potential is evaluated too close to a collision.
class CollisionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MassSystem {
  Vec masses;   // strictly positive, one entry per body
  int dim{0};   // coordinates per body

  int bodies() const { return static_cast<int>(masses.size()); }
  int coords() const { return bodies() * dim; }
  double total_mass() const { return masses.sum(); }
};

// Validates masses and dimension; throws std::invalid_argument on bad input.
MassSystem make_mass_system(const std::vector<double>& masses, int dim);

struct PhaseState {
  Vec q;  // positions, flat
  Vec v;  // velocities, flat
};

// Mass inner product <x,y> = sum_i m_i (x_i . y_i), its norm, and the dual
// norm |p|_*^2 = sum_i |p_i|^2 / m_i used on differentials.
double mass_inner(const MassSystem& ms, const Vec& x, const Vec& y);
double mass_norm(const MassSystem& ms, const Vec& x);
double dual_norm(const MassSystem& ms, const Vec& p);

double min_pairwise_distance(const MassSystem& ms, const Vec& q);
double max_pairwise_distance(const MassSystem& ms, const Vec& q);

// Collision cutoff: 1e-10 times the configuration diameter.
double collision_cutoff(const MassSystem& ms, const Vec& q);
bool collision_free(const MassSystem& ms, const Vec& q);

// Newtonian potential U(q) = sum_{i<j} m_i m_j / |q_i - q_j|.  Throws
// CollisionError when some pair sits below the collision cutoff.
double potential(const MassSystem& ms, const Vec& q);

// Raw-coordinate gradient and Hessian of U.
Vec potential_gradient(const MassSystem& ms, const Vec& q);
Mat potential_hessian(const MassSystem& ms, const Vec& q);

// Accelerations q_i'' = sum_{j != i} m_j (q_j - q_i) / |q_j - q_i|^3,
// i.e. the mass-metric gradient of U.
Vec accelerations(const MassSystem& ms, const Vec& q);

double kinetic_energy(const MassSystem& ms, const Vec& v);

// Total energy h = |v|^2/2 - U(q).
double energy(const MassSystem& ms, const PhaseState& s);

// Moment of inertia I = sum_i m_i |q_i|^2.
double moment_of_inertia(const MassSystem& ms, const Vec& q);

Vec center_of_mass(const MassSystem& ms, const Vec& q);
Vec linear_momentum(const MassSystem& ms, const PhaseState& s);

// Angular momentum components L_ab = sum_i m_i (q_ia v_ib - q_ib v_ia),
// one entry per coordinate plane (a < b).
Vec angular_momentum(const MassSystem& ms, const PhaseState& s);

// Shift so the center of mass (and mean velocity) sit at the origin.
Vec reduce_to_center_of_mass(const MassSystem& ms, const Vec& q);
PhaseState reduce_to_center_of_mass(const MassSystem& ms, const PhaseState& s);
bool is_reduced(const MassSystem& ms, const Vec& q, double tol = 1e-12);

// Orthonormal basis (mass inner product) of the reduced subspace
// {q : sum_i m_i q_i = 0}; dim*(bodies-1) columns, deterministic order.
Mat reduced_basis(const MassSystem& ms);

// Coordinates of a reduced configuration in the reduced_basis columns.
Vec reduced_coordinates(const MassSystem& ms, const Mat& basis, const Vec& q);

}  // namespace jmflow
