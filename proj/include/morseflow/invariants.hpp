#pragma once

#include <complex>
#include <string>
#include <vector>

#include "morseflow/floer.hpp"

namespace morseflow {

// One measured sample of an estimate: the parameter values it was taken at,
// the grid resolutions used, the measured constant and whether the reference
// bound of that estimate held.  Estimates whose constant has no concrete
// reference value set bound_ok to "the measurement is finite"; the content is
// then the uniformity/stability summary of the report.
struct EstimatePoint {
  double eps = 0.0;       // 0 when the estimate has no eps parameter
  double p = 0.0;         // 0 when the estimate has no norm exponent
  std::vector<int> grid;  // resolutions the point was measured on
  double measured = 0.0;
  bool bound_ok = true;
  std::string label;
};

// Result of one estimate check: the sampled points in deterministic
// parameter order plus the trend summary.  Measured constants are reported
// as found; they are never compared against the non-constructive constants
// of the source estimates.
struct EstimateReport {
  std::string estimate_id;
  std::vector<EstimatePoint> points;
  double max_measured = 0.0;  // largest measured constant over all points
  double uniformity = 1.0;    // max/min of the primary constants of the sweep
  double stability = 0.0;     // worst relative drift under grid refinement
  bool all_ok = true;         // every point satisfied its bound
};

// Interior mean-value inequality on the backward parabolic cell
// P_r = (-r^2 - eps r, eps r) x (-r, r): members of an explicit family of
// nonnegative supersolutions of (eps^2 d_ss + d_tt - d_s) w >= -a w are
// integrated by midpoint quadrature and w(0) r^3 / (2 e^{a r^2} Int w) is
// compared against the reference constant 1.  A one-dimensional member
// checks the s-interval statement for eps^2 f'' - f' + mu f >= 0 with
// mu = a.  Requires eps > 0, r in (0, 1], a >= 0.
EstimateReport mean_value_check(double eps, double r, double a);

// The five closed-form Fourier multipliers behind the L^p inequalities:
// with D = sigma^2 + tau^2 + i sigma,
//   cz_m11 = (sigma^2 + i sigma) / D,   cz_m12 = sigma tau / D,
//   cz_m21 = -sigma tau / D,            cz_m22 = sigma^2 / D,
//   parabolic_m = i sigma / (tau^2 + i sigma).
enum class MultiplierId { CzM11, CzM12, CzM21, CzM22, ParabolicM };

std::complex<double> multiplier_symbol(MultiplierId id, double sigma, double tau);

// Sup of |m| + |sigma d_sigma m| + |tau d_tau m| + |sigma tau d_sigma d_tau m|
// over the logarithmic grid (sigma, tau) in +-[2^-20, 2^20]^2, the scaled
// derivatives taken by central differences in log coordinates.  The refined
// point halves the exponent step; its bound is a relative drift below 1%.
EstimateReport multiplier_condition_check(MultiplierId m_id);

// Ratio checks of the three L^p inequalities on the periodic unit square
// with randomized smooth bumps supported in the middle third and exact
// spectral differentiation:
//   cz:        |d_s u| + |d_s v| <= c (|d_s u - d_t v| + |d_s v + d_t u - v|)
//   parabolic: |d_s u| + |d_tt u| <= c |d_s u - d_tt u|
//   cz_eps:    |d_s u| + eps |d_s v|
//                <= c (|d_s u - d_t v| + eps |d_s v + eps^-2 (d_t u - v)|)
// (all norms L^p).  The measured constant is the max ratio over 100 samples;
// for cz_eps the samples take v = d_t u + eps^2 w with w an independent bump,
// the regime the eps-rescaling argument reduces to, and the sweep runs over
// eps_list (default {1, 0.5, 0.25, 0.125}).  p must be one of 1.5, 2, 3, 4.
enum class LpWhich { CZ, Parabolic, CZEps };

EstimateReport lp_inequality_check(LpWhich which, double p,
                                   std::vector<double> eps_list = {});

// |symbol| of the three resolvent operators on the circle at continuous
// frequency freq: which = 0 for (1 - eps nabla_t nabla_t)^{-1}, 1 for
// sqrt(eps) (1 - eps nabla_t nabla_t)^{-1} nabla_t, 2 for
// eps (1 - eps nabla_t nabla_t)^{-1} nabla_t nabla_t.
double resolvent_symbol(int which, double eps, double freq);

// Operator-norm check of the three resolvent estimates on L^p(S^1): bounds
// 1, kappa_p, 2 with kappa_p = p for p >= 2 and p/(p-1) for p < 2.  p = 2 is
// exact via the symbol sup; other p are sampled on 100 random smooth fields.
EstimateReport eat_eps_check(double p, double eps);

// Linear estimate sweeps at a connecting cylinder u (flat backends):
//   elliptic:  eps^-1 |nabla_t xi - eta| + |nabla_t eta| + |nabla_s xi|
//                + eps |nabla_s eta|
//                <= c (|D zeta|_{0,p,eps} + |xi| + eps^2 |eta|)
//   inverse:   |zeta|_{1,p,eps} <= c (eps |D zeta|_{0,p,eps} + |pi_eps(D zeta)|_p)
//   composite: the composite working norm of zeta against
//                |xi'|_p + eps^{3/2} |eta'|_p for (xi', eta') = D zeta
//   balanced:  |xi|_inf <= c eps^{-(b1+b2)/p} (|xi|_p + eps^{b1} |nabla_t xi|_p
//                + eps^{b2} |nabla_s xi|_p), needs p > 2
// elliptic/balanced draw random smooth fields vanishing at the walls
// (elliptic alternates generic draws with eta = nabla_t xi + eps^2 w);
// inverse/composite draw random right-hand sides and map them through the
// assembled minimum-norm right inverse, so the assembled sweeps expect a
// lift-scale grid.  Linear-solver failures propagate.
enum class LinearWhich { Elliptic, Inverse, Composite, Balanced };

EstimateReport linear_estimate_sweep(const Cylinder& u, LinearWhich which,
                                     double p, const std::vector<double>& eps_list,
                                     const Perturbation& P, double beta1 = 0.5,
                                     double beta2 = 1.0);

// Nonlinear a-priori sweeps: for each eps the cylinder is lifted to an exact
// first-order pair (resampled to the lift grid first when its interior
// unknown count exceeds the direct-solver range) and the report measures
//   apriori:  sup |v|
//   gradient: max over interior (s,t) of (|d_s u|^2 + |nabla_s v|^2) divided
//             by the energy over [s-1, s+1], plus the coupling-gap point
//             sup |d_t u - v| / eps^2
//   second:   the four L^2 norms |nabla_t d_s u|, |nabla_s d_s u|,
//             |nabla_t nabla_s v|, |nabla_s nabla_s v| over [-T, T] with
//             T = S - 1, divided by sqrt(energy)
//   decay:    the exponential rate of the tail energy, fitted from
//             log E(|s| > T) against T, plus the fit residual (bound 1e-2)
enum class NonlinearWhich { Apriori, Gradient, Second, Decay };

EstimateReport nonlinear_bound_sweep(const Cylinder& u, NonlinearWhich which,
                                     const std::vector<double>& eps_list,
                                     const Perturbation& P,
                                     const EpsEnumOptions& opts = {});

// Least-squares fit of log E(|s| > T) against T over T in [2, S - 4], where
// E is the pair energy outside the window (cells fully inside subtracted
// from the total).  ok needs a positive total energy, at least eight usable
// windows, and a finite slope.
struct DecayFit {
  double rho = 0.0;  // fitted rate (negated slope)
  double rms = 0.0;  // root-mean-square fit residual
  int windows = 0;
  bool ok = false;
};

DecayFit fit_energy_decay(const CylinderPair& w, const Perturbation& P);

}  // namespace morseflow
