#pragma once

#include <vector>

#include <Eigen/Dense>

#include "morseflow/loops.hpp"

namespace morseflow {

// A nondegenerate critical loop of the classical action together with its
// classification data.
struct PeriodicOrbit {
  DiscreteLoop loop;
  double action = 0.0;
  int index = 0;
  Eigen::VectorXd spectrum_head;  // lowest eigenvalues of the Hessian
  double nondeg_margin = 0.0;     // smallest |eigenvalue|
  double residual = 0.0;          // sup norm of the critical equation residual
};

// First-order optimality field nabla_t(xdot) + grad V(x); identically zero at
// perturbed closed geodesics.
LoopField orbit_residual_field(const DiscreteLoop& x, const Perturbation& P);
double orbit_residual(const DiscreteLoop& x, const Perturbation& P);

// Per-node orthonormal tangent frames (ambient dim x tangent dim).  Identity
// on flat tori; deterministic 2-frames on the sphere.
int tangent_dim(const Manifold& man);
std::vector<Eigen::MatrixXd> tangent_frames(const DiscreteLoop& x);
Eigen::VectorXd field_to_coeffs(const LoopField& f,
                                const std::vector<Eigen::MatrixXd>& frames);
LoopField coeffs_to_field(const DiscreteLoop& x,
                          const std::vector<Eigen::MatrixXd>& frames,
                          const Eigen::VectorXd& coeffs);

// Newton solver for the critical equation; converges to residual 1e-12.
PeriodicOrbit find_orbit(const DiscreteLoop& guess, const Perturbation& P);

// Three-point covariant second t-difference of a tangent field (the compact
// stencil shared by the Hessian and the cylinder linearizations).
Eigen::MatrixXd apply_laplace3(const DiscreteLoop& x, const Eigen::MatrixXd& field);

// Second variation A(x) xi = -nabla_t nabla_t xi - R(xi, xdot) xdot - H_V(x) xi
// assembled on the compact 3-point t-stencil in frame coordinates.
struct HessianOperator {
  DiscreteLoop base;
  std::vector<Eigen::MatrixXd> frames;
  Eigen::MatrixXd mat;
};
HessianOperator hessian_matrix(const DiscreteLoop& x, const Perturbation& P);
LoopField apply_hessian(const HessianOperator& H, const LoopField& xi);

struct OrbitSpectrum {
  Eigen::VectorXd eigenvalues;  // ascending
  int negative_count = 0;
  double margin = 0.0;  // min |eigenvalue|
};
OrbitSpectrum orbit_spectrum(const DiscreteLoop& x, const Perturbation& P);

// Count of negative Hessian eigenvalues; throws Degenerate when an
// eigenvalue sits within tol of zero.
int morse_index(const PeriodicOrbit& x, double tol = 1e-8);

// Free homotopy class of a flat-torus loop (zero vector on the sphere).
Eigen::VectorXi winding_vector(const DiscreteLoop& x);

// Multistart enumeration of P^a(V): runs find_orbit from every start,
// deduplicates at sup-distance 1e-6, keeps actions <= a, and orders the
// result by (component, index, action, lexicographic coordinates).
std::vector<PeriodicOrbit> enumerate_orbits(const Perturbation& P, double a,
                                            const std::vector<DiscreteLoop>& starts);

// Pair Hessian A(x,y)(xi,eta) = (-nabla_t eta - R(xi, xdot) y - H_V(x) xi,
// nabla_t xi - eta); self-adjoint w.r.t. the L^2 pairing when y = xdot.
void apply_pair_hessian(const DiscreteLoop& x, const LoopField& y,
                        const Perturbation& P, const LoopField& xi,
                        const LoopField& eta, LoopField* out1, LoopField* out2);
Eigen::MatrixXd pair_hessian(const DiscreteLoop& x, const LoopField& y,
                             const Perturbation& P);

// Decomposition of a C^1-small deviation from the critical set:
// x = exp_{x0}(xi0), y = Phi(x0,xi0)(dot x0 + eta0).
struct OrbitDecomposition {
  PeriodicOrbit x0;
  LoopField xi0;
  LoopField eta0;
  double c1_size = 0.0;
};
OrbitDecomposition decompose_near_orbit(const DiscreteLoop& x, const LoopField& y,
                                        const Perturbation& P, double a,
                                        double delta1 = 0.1,
                                        double trust_radius = 0.1);

}  // namespace morseflow
