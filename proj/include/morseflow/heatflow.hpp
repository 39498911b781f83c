#pragma once

#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "morseflow/critical.hpp"
#include "morseflow/loops.hpp"

namespace morseflow {

// Parabolic cylinder: loops[j] lives at s_j = -S + j*h_s, j = 0..ns-1, with
// h_s*(ns-1) = 2S.  The first and last slices are pinned to the endpoint
// orbits.
struct Cylinder {
  PeriodicOrbit xminus;
  PeriodicOrbit xplus;
  std::vector<DiscreteLoop> loops;
  double S = 0.0;
  double h_s = 0.0;

  int ns() const { return static_cast<int>(loops.size()); }
  int nt() const { return loops.empty() ? 0 : loops.front().nt(); }
  int dim() const { return loops.empty() ? 0 : static_cast<int>(loops.front().nodes.rows()); }
  const Manifold& man() const { return loops.front().man; }
  double s_of(int j) const { return -S + h_s * j; }
};

// Tangent field along a cylinder, one (ambient dim x N_t) block per slice.
// Fields handed to the linearized operators vanish on the boundary slices.
struct CylField {
  std::vector<Eigen::MatrixXd> slices;
};

CylField zero_cyl_field(const Cylinder& u);
double cyl_sup_norm(const CylField& f);
// L^p norm with product quadrature weight h_s/N_t.
double cyl_lp_norm(const Cylinder& u, const CylField& f, double p);
// Central s-derivative field of the slices (zero on the boundary slices).
CylField cylinder_ds(const Cylinder& u);

// Heat residual r_j = nabla_s u - nabla_t(du/dt) - grad V on interior slices
// (central differences in s and t); boundary slices map to zero.
CylField heat_residual(const Cylinder& u, const Perturbation& P);
double heat_residual_sup(const Cylinder& u, const Perturbation& P);

std::vector<double> slice_actions(const Cylinder& u, const Perturbation& P);
// Trapezoid-in-s, mean-in-t quadrature of |du/ds|^2 (central s-differences).
double cylinder_energy(const Cylinder& u);
// Checks the boundary-attachment and action-monotonicity invariants.
void validate_cylinder(const Cylinder& u, const Perturbation& P);

// One semi-implicit heat step: the t-Laplacian is treated implicitly through
// its resolvent, potential and curvature terms explicitly.  On the flat torus
// the resolvent acts spectrally on a detrended lift (winding loops are
// handled exactly); on the sphere the increment equation is solved per node
// band in ambient coordinates followed by exponential reprojection.
DiscreteLoop step_heat(const DiscreteLoop& x, const Perturbation& P, double h);

struct EvolveOptions {
  double h0 = 0.05;
  double s_budget = 400.0;
};

struct FlowResult {
  PeriodicOrbit orbit;
  double rate = 0.0;
  bool rate_defined = false;
  double s_elapsed = 0.0;
};

FlowResult evolve_to_orbit(const DiscreteLoop& x, const Perturbation& P,
                           const EvolveOptions& opts = {});

// S <= 0 requests the default truncation 12 / (smaller endpoint spectral
// gap); n_s <= 0 derives the slice count from h_target (grid kept odd so
// s = 0 is a grid point).
struct CylinderGridSpec {
  double S = 0.0;
  int n_s = 0;
  double h_target = 0.025;
  double step_h = 0.05;
  double s_budget = 400.0;
};

// Shoots along the unit negative eigenvector of an index-1 orbit, flows to
// convergence, synthesizes the backward tail from the linearized flow, and
// returns the resampled cylinder refined to a discrete zero of the residual.
Cylinder shoot_unstable(const PeriodicOrbit& x, int dir, double delta,
                        const Perturbation& P, const CylinderGridSpec& grid = {});

// One representative per shift class connecting x- to x+ (index difference
// one), action (S(x-)+S(x+))/2 placed at s = 0.
std::vector<Cylinder> enumerate_M0(const PeriodicOrbit& xminus,
                                   const PeriodicOrbit& xplus,
                                   const Perturbation& P,
                                   const CylinderGridSpec& grid = {});

// Linearized parabolic operator (upwind s-difference, three-point t-stencil)
// and its formal adjoint, the exact discrete transpose.
CylField apply_D0(const Cylinder& u, const CylField& xi, const Perturbation& P);
CylField apply_D0_adjoint(const Cylinder& u, const CylField& xi,
                          const Perturbation& P);

// Signed count of slice-Hessian eigenvalue crossings along s.
int spectral_flow_index(const Cylinder& u, const Perturbation& P);

// Smallest singular value of the discretized adjoint, assembled with a free
// s-boundary so genuine translation kernels stay visible, normalized by the
// operator norm measured against the discrete graph norm of the symbol (the
// raw largest singular value grows like N_t^2 and would wash the margin out).
double surjectivity_margin(const Cylinder& u, const Perturbation& P);

struct ModuliProjection {
  Cylinder u0;
  CylField xi;
  double correction_ratio = 0.0;
  int iterations = 0;
};

ModuliProjection project_to_moduli(const Cylinder& u_approx,
                                   const Perturbation& P, double p = 2.0,
                                   double delta0 = 1e-3);

// Newton refinement of the interior slices onto the discrete zero set with
// boundary slices pinned to the endpoint orbits.  Corrections are taken in
// the row space of the frozen linearization, which keeps the iteration away
// from the shift direction.  Shared by shoot_unstable and project_to_moduli.
Cylinder polish_cylinder(const Cylinder& u, const Perturbation& P,
                         double tol = 1e-12, int max_iter = 30);

// Sparse matrix of the upwind linearized operator.  With dirichlet = true
// rows and columns run over interior slices (fields vanishing at the ends);
// with dirichlet = false columns include the boundary slices and rows start
// at the second slice, exposing translation near-kernels.
Eigen::SparseMatrix<double> assemble_D0(const Cylinder& u,
                                        const Perturbation& P, bool dirichlet);

// Resamples a cylinder onto a grid shifted by sigma (tails synthesized from
// the endpoint linearizations where the shifted grid leaves the domain).
Cylinder shift_cylinder(const Cylinder& u, const Perturbation& P, double sigma);

// Resamples a cylinder onto a coarser grid: S and n_s control the s-grid
// (values <= 0 keep the source scale), n_t subsamples the time grid and must
// be a power-of-two divisor of the source N_t (0 keeps it).  The endpoint
// orbits are re-solved on the target grid and the result is refined and
// validated.
Cylinder regrid_cylinder(const Cylinder& u, const Perturbation& P, double S = 0.0,
                         int n_s = 0, int n_t = 0);

}  // namespace morseflow
