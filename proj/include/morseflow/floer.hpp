#pragma once

#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "morseflow/heatflow.hpp"

namespace morseflow {

// First-order pair (u, v): a cylinder together with one tangent field per
// slice playing the role of the loop velocity.  eps is the coupling
// parameter of the first-order system.  A pair flagged exact has been
// driven to residual <= 1e-9 in the weighted (0,p,eps)-norm.
struct CylinderPair {
  Cylinder u;
  std::vector<LoopField> v;
  double eps = 1.0;
  bool exact = false;
};

// Pair of cylinder fields: xi varies the position slot, eta the velocity
// slot.  Fields handed to the linear operators vanish on the boundary
// slices.
struct PairField {
  CylField xi;
  CylField eta;
};

PairField zero_pair_field(const Cylinder& u);
double pair_sup_norm(const PairField& z);

// Weighted norms of a pair field: the plain and first-order quadrature
// norms and the composite working norm that adds eps-weighted sup terms.
struct EpsNorms {
  double p = 2.0;
  double eps = 1.0;
  double n0 = 0.0;
  double n1 = 0.0;
  double triple = 0.0;
};

// (sum (|xi|^p + eps^p |eta|^p) h_s/N_t)^{1/p}.
double pair_norm_0(const Cylinder& u, const PairField& z, double p, double eps);
EpsNorms eps_norms(const Cylinder& u, const PairField& z, double p, double eps);

// Per-slice central-difference velocities, the canonical v for a parabolic
// cylinder.
std::vector<LoopField> cylinder_velocities(const Cylinder& u);

// Structural checks plus, for exact-flagged pairs, the residual invariant.
void validate_pair(const CylinderPair& w, const Perturbation& P);

// Residual of the first-order system
//   (d_su - nabla_t v - grad V(u),  nabla_s v + eps^{-2} (d_tu - v))
// on interior slices; boundary slices map to zero.
PairField floer_residual(const CylinderPair& w, const Perturbation& P);

// Residual of the unit-structure system on the cotangent side,
//   (d_su - eps nabla_t v - eps grad V(u),  nabla_s v + eps^{-1}(d_tu - v)).
// Relabeling the s-grid spacing by a factor eps maps exact zeros of this
// system to exact zeros of the first-order system above.
PairField cotangent_residual(const CylinderPair& w, const Perturbation& P);

// Residual at the deformed pair (exp_u(xi), Phi(u,xi)(v0 + eta)) pulled
// back node by node through the transport Phi(u,xi); on flat backends the
// transport is the identity.
PairField pullback_F(const Cylinder& u, const std::vector<LoopField>& v0,
                     const PairField& zeta, double eps, const Perturbation& P);

// Linearization of the first-order system at (u, v),
//   ( nabla_s xi - nabla_t eta - R(xi, d_tu) v - H_V(u) xi,
//     nabla_s eta + R(xi, d_su) v + eps^{-2} (nabla_t xi - eta) ),
// and its formal adjoint with respect to the (0,2,eps) pairing,
//   ( -nabla_s xi - nabla_t eta - R(xi, v) d_tu - H_V(u) xi
//       + eps^2 R(eta, v) d_su,
//     -nabla_s eta + eps^{-2} (nabla_t xi - eta) ).
// On flat backends the adjoint is the exact weighted transpose of the
// discretization.
PairField apply_D_eps(const Cylinder& u, const std::vector<LoopField>& v,
                      const PairField& zeta, double eps, const Perturbation& P);
PairField apply_D_eps_adjoint(const Cylinder& u, const std::vector<LoopField>& v,
                              const PairField& zeta, double eps,
                              const Perturbation& P);

// Sparse matrix of the linearization: rows are the interior equations, the
// columns keep every slice (free walls, so the translation kernel survives
// as a right kernel), with v frozen at the slice velocities; unknowns
// ordered as the position block followed by the velocity block, each block
// slice-major with the d coordinates of node k at offset k*d within its
// slice.
Eigen::SparseMatrix<double> assemble_D_eps(const Cylinder& u, double eps,
                                           const Perturbation& P);
// Inverse weights of the (0,2,eps) inner product on those unknowns.
Eigen::VectorXd eps_weight_inv(const Cylinder& u, double eps);

// Slicewise projection (1 - eps nabla_t nabla_t)^{-1} (xi - eps^2 nabla_t eta):
// exact Fourier resolvent on flat backends, dense frame solve on the sphere.
LoopField pi_eps(const DiscreteLoop& x, const LoopField& xi, const LoopField& eta,
                 double eps);

struct LiftReport {
  std::vector<double> residual_history;    // (0,p,eps) residual per iteration
  std::vector<double> correction_history;  // composite norm of each correction
  double correction_total = 0.0;           // composite norm of the summed correction
  int iterations = 0;
  bool converged = false;
};

// Projected Newton iteration for the first-order system seeded at
// (u, d_tu): corrections are minimum-norm in the (0,2,eps) product, taken
// against the linearization frozen at the seed, with residual-decrease
// damping (at most 5 halvings).  Stops below 1e-10 or after 40 iterations.
CylinderPair newton_picard_lift(const Cylinder& u, double eps, double p,
                                const Perturbation& P,
                                LiftReport* report = nullptr);

// Quadrature of
//   1/2 (|d_su|^2 + |nabla_t v + grad V|^2 + eps^2 |nabla_s v|^2
//        + eps^{-2} |d_tu - v|^2)
// over interior slices; equals the endpoint action drop for exact pairs.
double energy_eps(const CylinderPair& w, const Perturbation& P);

// True iff two exact pairs expressed over u coincide (sup-distance below
// 1e-8).  Both deviations must lie in the range of the adjoint; a projection
// defect above 1e-6 violates the uniqueness hypotheses.
bool verify_uniqueness(const Cylinder& u, const CylinderPair& w1,
                       const CylinderPair& w2, double eps, const Perturbation& P);

// Root of theta(sigma) = -< Z_sigma, zeta(sigma) >_eps over the bracket
// [-sigma_max, sigma_max], where Z_sigma spans the kernel of the
// linearization at the shifted cylinder and zeta(sigma) expresses w over
// that shift.  theta must change sign across the bracket (NoRoot) and be
// monotone on it (NotMonotone).  c_measured, when given, receives
// |sigma| / (||xi||_p + eps^2).
double fit_time_shift(const Cylinder& u, const CylinderPair& w, double eps,
                      double p, const Perturbation& P, double sigma_max = 0.25,
                      double* c_measured = nullptr);

// Lift grid: non-trivial seeds are resampled to this coarser grid before
// the iteration so the normal system stays within the direct-solve range.
struct EpsEnumOptions {
  CylinderGridSpec m0_grid;
  int lift_nt = 16;
  double lift_hs = 0.06;
  double lift_S = 24.0;
  double p = 2.0;
};

// Lifts every connecting-cylinder representative and asserts the lifts stay
// pairwise distinct after optimal shift alignment.
std::vector<CylinderPair> enumerate_M_eps(const PeriodicOrbit& xminus,
                                          const PeriodicOrbit& xplus, double eps,
                                          const Perturbation& P,
                                          const EpsEnumOptions& opts = {});

struct QuadraticRemainders {
  double taylor = 0.0;           // |F(Z+zeta) - F(Z) - dF(Z)zeta|
  double variation = 0.0;        // |dF(Z)zeta - dF(0)zeta|
  double taylor_bound = 0.0;     // reference bounds with unit constant
  double variation_bound = 0.0;
};

QuadraticRemainders quadratic_remainder_measure(const Cylinder& u,
                                                const std::vector<LoopField>& v,
                                                const PairField& Z,
                                                const PairField& zeta, double eps,
                                                double p, const Perturbation& P);

}  // namespace morseflow
