#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "morseflow/geometry.hpp"

namespace morseflow {

// A closed loop x : S^1 -> M sampled at N_t uniform nodes t_k = k/N_t.
// Node coordinates are stored columnwise (ambient dim x N_t).  N_t must be
// a power of two >= 8 so the flat backends admit exact Fourier diagnostics.
struct DiscreteLoop {
  Manifold man;
  Eigen::MatrixXd nodes;

  int nt() const { return static_cast<int>(nodes.cols()); }
  double h() const { return 1.0 / static_cast<double>(nodes.cols()); }
};

DiscreteLoop make_constant_loop(const Manifold& man, const Eigen::VectorXd& point,
                                int nt);
void validate_loop(const DiscreteLoop& x);

// Tangent field along a loop, one tangent vector per node (columnwise).
struct LoopField {
  DiscreteLoop base;
  Eigen::MatrixXd vectors;

  int nt() const { return static_cast<int>(vectors.cols()); }
};

LoopField zero_field(const DiscreteLoop& x);

// Time-periodic potentials.  On flat tori every shipped potential is a sum
// of plane-wave terms A * cos(2*pi*(k.x + omega*t) + phase); on the sphere a
// sum of height terms A * cos(2*pi*omega*t + phase) * <axis, x>.  Both have
// exact gradients and covariant Hessians.
struct CosTerm {
  double amplitude = 0.0;
  Eigen::VectorXi k;
  int omega = 0;
  double phase = 0.0;
};

struct HeightTerm {
  double amplitude = 0.0;
  Eigen::Vector3d axis = Eigen::Vector3d::UnitZ();
  int omega = 0;
  double phase = 0.0;
};

// Archetypal wrapper 'V(x) = rho(||x - x0||_{L^2}^2) * Int V(t, x(t)) dt with
// the bump profile rho(r) = exp(-r / (R - r)) on [0, R), 0 beyond (smooth,
// rho(0) = 1, bounded derivatives).  Flat backends only.
struct ArchetypalWrap {
  double radius = 1.0;
  Eigen::MatrixXd x0_nodes;
};

struct Perturbation {
  std::vector<CosTerm> cos_terms;
  std::vector<HeightTerm> height_terms;
  std::optional<ArchetypalWrap> archetypal;

  bool zero() const { return cos_terms.empty() && height_terms.empty(); }
};

// Pointwise data of the potential V(t, .) at a single node.
double potential_value(const Perturbation& P, const Manifold& man, double t,
                       const Eigen::VectorXd& x);
Eigen::VectorXd potential_grad(const Perturbation& P, const Manifold& man, double t,
                               const Eigen::VectorXd& x);
Eigen::VectorXd potential_hess(const Perturbation& P, const Manifold& man, double t,
                               const Eigen::VectorXd& x, const Eigen::VectorXd& xi);

// Loop functional 'V(x) (integral of V along the loop, with the archetypal
// cutoff applied when present).
double calV(const DiscreteLoop& x, const Perturbation& P);

// Covariant t-derivative of a field: central difference at spacing 1/N_t
// followed by projection to the tangent space at the center node.
LoopField nabla_t(const LoopField& field);

// Central-difference velocity of the loop itself (shortest-lift differences
// on tori, ambient differences projected on the sphere).
LoopField velocity(const DiscreteLoop& x);

// S_V(x) = 1/2 Int |xdot|^2 - 'V(x), trapezoid quadrature on the t-grid.
double classical_action(const DiscreteLoop& x, const Perturbation& P);

// A_V(x,y) = Int (<y, xdot> - 1/2 |y|^2) - 'V(x).
double symplectic_action(const DiscreteLoop& x, const LoopField& y,
                         const Perturbation& P);

// L^2-gradient of 'V: nodewise Riemannian gradient of V(t_k, .), plus the
// product-rule terms of the archetypal cutoff.
LoopField grad_V(const DiscreteLoop& x, const Perturbation& P);

// Covariant Hessian H_V(x) xi.
LoopField hess_V(const DiscreteLoop& x, const LoopField& xi, const Perturbation& P);

// Norms: one quadrature routine on the unit-measure circle.  Node magnitude
// is the Euclidean norm of the column.
double lp_norm(const Eigen::MatrixXd& vectors, double p);
double sup_norm(const Eigen::MatrixXd& vectors);

// Sup distance between two loops (wrap-aware).
double loop_distance(const DiscreteLoop& a, const DiscreteLoop& b);

// Empirical maxima of the axiom ratios
//   |nabla_s grad V(u)| / (|d_s u| + ||d_s u||_{L^1}) and
//   |nabla_t grad V(u)| / (1 + |d_t u|)
// over consecutive loop slices at spacing hs.
struct AxiomReport {
  double s_ratio_max = 0.0;
  double t_ratio_max = 0.0;
};
AxiomReport axiom_probe(const Perturbation& P, const std::vector<DiscreteLoop>& slices,
                        double hs);

}  // namespace morseflow
