#include "morseflow/heatflow.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <exception>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "morseflow/errors.hpp"
#include "morseflow/exec.hpp"
#include "morseflow/fft.hpp"
#include "morseflow/geometry.hpp"
#include "morseflow/linsys.hpp"

namespace morseflow {
namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kBoundaryTol = 1e-4;
constexpr double kMonotoneSlack = 1e-10;
constexpr double kStopRate = 1e-11;
constexpr double kMinStep = 1e-9;
constexpr double kShotDelta = 1e-4;
// Sparse-Cholesky cap for the cylinder systems; the polish grids stay banded
// so the factor remains cheap well beyond the generic default.
constexpr int kCylinderDirectLimit = 1 << 18;

bool power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

void require_flat(const Manifold& man, const char* what) {
  if (!man.flat())
    throw ArgumentError(std::string(what) + " is only available on flat backends");
}

// The low-node reduction of t-constant cylinders is valid only when the
// potential cannot distinguish time slices: no oscillating coefficients and
// no archetypal cutoff (its reference loop fixes the node count).
bool t_reduction_valid(const Perturbation& P) {
  if (P.archetypal) return false;
  for (const CosTerm& c : P.cos_terms)
    if (c.omega != 0) return false;
  for (const HeightTerm& h : P.height_terms)
    if (h.omega != 0) return false;
  return true;
}

bool cylinder_t_constant(const Cylinder& u) {
  const Manifold& man = u.man();
  for (const DiscreteLoop& lp : u.loops)
    for (int k = 1; k < lp.nt(); ++k)
      if (wrap_diff(man, lp.nodes.col(k) - lp.nodes.col(0))
              .lpNorm<Eigen::Infinity>() > 1e-12)
        return false;
  return true;
}

void normalize_columns(const Manifold& man, Eigen::MatrixXd& nodes) {
  for (int k = 0; k < nodes.cols(); ++k)
    nodes.col(k) = normalize_point(man, nodes.col(k)).coords;
}

// Per-node tangent representative of target relative to base.
Eigen::MatrixXd deviation(const Manifold& man, const Eigen::MatrixXd& base,
                          const Eigen::MatrixXd& target) {
  Eigen::MatrixXd out(base.rows(), base.cols());
  if (man.flat()) {
    for (int k = 0; k < base.cols(); ++k)
      out.col(k) = wrap_diff(man, target.col(k) - base.col(k));
  } else {
    for (int k = 0; k < base.cols(); ++k)
      out.col(k) = log_map(man, base.col(k), target.col(k));
  }
  return out;
}

Eigen::MatrixXd slice_ds_central(const Cylinder& u, int j) {
  const Manifold& man = u.man();
  const Eigen::MatrixXd& prev = u.loops[static_cast<size_t>(j) - 1].nodes;
  const Eigen::MatrixXd& next = u.loops[static_cast<size_t>(j) + 1].nodes;
  const Eigen::MatrixXd& mid = u.loops[static_cast<size_t>(j)].nodes;
  Eigen::MatrixXd out(mid.rows(), mid.cols());
  const double two_h = 2.0 * u.h_s;
  if (man.flat()) {
    for (int k = 0; k < mid.cols(); ++k)
      out.col(k) = wrap_diff(man, next.col(k) - prev.col(k)) / two_h;
  } else {
    for (int k = 0; k < mid.cols(); ++k)
      out.col(k) = (log_map(man, mid.col(k), next.col(k)) -
                    log_map(man, mid.col(k), prev.col(k))) /
                   two_h;
  }
  return out;
}

DiscreteLoop step_flat(const DiscreteLoop& x, const Perturbation& P, double h) {
  const int n = x.nt();
  const int d = static_cast<int>(x.nodes.rows());
  // continuous lift in t; the closing increment makes the winding exact
  Eigen::MatrixXd lift = x.nodes;
  for (int k = 1; k < n; ++k)
    lift.col(k) =
        lift.col(k - 1) + wrap_diff(x.man, x.nodes.col(k) - x.nodes.col(k - 1));
  const Eigen::VectorXd span = lift.col(n - 1) - lift.col(0) +
                               wrap_diff(x.man, x.nodes.col(0) - x.nodes.col(n - 1));
  const LoopField g = grad_V(x, P);
  DiscreteLoop out = x;
  std::vector<double> row(static_cast<size_t>(n));
  for (int i = 0; i < d; ++i) {
    const double wind = std::round(span[i]);
    for (int k = 0; k < n; ++k)
      row[static_cast<size_t>(k)] =
          lift(i, k) - wind * (static_cast<double>(k) / n) + h * g.vectors(i, k);
    const std::vector<double> res =
        apply_symbol(row, [&](double w) { return 1.0 / (1.0 + h * w); });
    for (int k = 0; k < n; ++k)
      out.nodes(i, k) =
          res[static_cast<size_t>(k)] + wind * (static_cast<double>(k) / n);
  }
  normalize_columns(x.man, out.nodes);
  return out;
}

DiscreteLoop step_sphere(const DiscreteLoop& x, const Perturbation& P, double h) {
  const int n = x.nt();
  const double nn = static_cast<double>(n);
  const LoopField f = orbit_residual_field(x, P);
  // resolvent with the symbol of the compact 3-point stencil, so discrete
  // critical orbits stay fixed
  auto resolvent = [&](double w) {
    const double k = std::sqrt(std::max(w, 0.0)) / kTwoPi;
    const double lam = (2.0 - 2.0 * std::cos(kTwoPi * k / nn)) * nn * nn;
    return 1.0 / (1.0 + h * lam);
  };
  Eigen::MatrixXd inc(x.nodes.rows(), n);
  std::vector<double> row(static_cast<size_t>(n));
  for (int i = 0; i < inc.rows(); ++i) {
    for (int k = 0; k < n; ++k) row[static_cast<size_t>(k)] = h * f.vectors(i, k);
    const std::vector<double> res = apply_symbol(row, resolvent);
    for (int k = 0; k < n; ++k) inc(i, k) = res[static_cast<size_t>(k)];
  }
  DiscreteLoop out = x;
  for (int k = 0; k < n; ++k) {
    ManifoldPoint p{x.man, x.nodes.col(k)};
    TangentVector v{p, project_tangent(x.man, x.nodes.col(k), inc.col(k))};
    out.nodes.col(k) = exp_map(p, v).coords;
  }
  return out;
}

// One accepted step, halving h on rejection.
DiscreteLoop advance(const DiscreteLoop& cur, const Perturbation& P, double* h) {
  for (;;) {
    try {
      return step_heat(cur, P, *h);
    } catch (const StepRejected&) {
      *h *= 0.5;
      if (*h < kMinStep)
        throw NoConvergence("heat step size underflow while rejecting steps");
    }
  }
}

struct FlowRecord {
  std::vector<double> tau;
  std::vector<DiscreteLoop> slices;
  bool converged = false;
};

FlowRecord flow_record(const DiscreteLoop& start, const Perturbation& P,
                       double h0, double budget) {
  FlowRecord rec;
  rec.tau.push_back(0.0);
  rec.slices.push_back(start);
  DiscreteLoop cur = start;
  double h = h0 > 0.0 ? h0 : 0.05;
  double s = 0.0;
  for (;;) {
    const DiscreteLoop next = advance(cur, P, &h);
    const double inc =
        deviation(start.man, cur.nodes, next.nodes).lpNorm<Eigen::Infinity>();
    cur = next;
    s += h;
    rec.tau.push_back(s);
    rec.slices.push_back(cur);
    if (inc / h < kStopRate) {
      rec.converged = true;
      break;
    }
    if (s > budget) break;
  }
  return rec;
}

// Cubic Hermite interpolation of a recorded trajectory with 3-point slopes
// on the nonuniform step grid.  Flat positions are lifted in s so torus
// wraps do not tear the interpolant; callers renormalize.
struct PathInterp {
  std::vector<double> tau;
  std::vector<Eigen::MatrixXd> pos;
  std::vector<Eigen::MatrixXd> slope;

  Eigen::MatrixXd eval(double t) const {
    if (t <= tau.front()) return pos.front();
    if (t >= tau.back()) return pos.back();
    const auto it = std::upper_bound(tau.begin(), tau.end(), t);
    const std::size_t r = static_cast<std::size_t>(it - tau.begin()) - 1;
    const double dt = tau[r + 1] - tau[r];
    const double s = (t - tau[r]) / dt;
    const double s2 = s * s, s3 = s2 * s;
    return (2.0 * s3 - 3.0 * s2 + 1.0) * pos[r] +
           ((s3 - 2.0 * s2 + s) * dt) * slope[r] +
           (-2.0 * s3 + 3.0 * s2) * pos[r + 1] + ((s3 - s2) * dt) * slope[r + 1];
  }
};

PathInterp make_path_interp(const Manifold& man, const std::vector<double>& tau,
                            const std::vector<DiscreteLoop>& slices) {
  PathInterp pi;
  pi.tau = tau;
  const std::size_t n = slices.size();
  pi.pos.resize(n);
  pi.pos[0] = slices[0].nodes;
  for (std::size_t r = 1; r < n; ++r)
    pi.pos[r] = man.flat() ? (pi.pos[r - 1] +
                              deviation(man, slices[r - 1].nodes, slices[r].nodes))
                                 .eval()
                           : slices[r].nodes;
  pi.slope.resize(n);
  if (n == 1) {
    pi.slope[0] = Eigen::MatrixXd::Zero(pi.pos[0].rows(), pi.pos[0].cols());
    return pi;
  }
  for (std::size_t r = 0; r < n; ++r) {
    if (r == 0) {
      pi.slope[r] = (pi.pos[1] - pi.pos[0]) / (tau[1] - tau[0]);
    } else if (r + 1 == n) {
      pi.slope[r] = (pi.pos[n - 1] - pi.pos[n - 2]) / (tau[n - 1] - tau[n - 2]);
    } else {
      const double hm = tau[r] - tau[r - 1];
      const double hp = tau[r + 1] - tau[r];
      const Eigen::MatrixXd dm = (pi.pos[r] - pi.pos[r - 1]) / hm;
      const Eigen::MatrixXd dp = (pi.pos[r + 1] - pi.pos[r]) / hp;
      pi.slope[r] = (hp * dm + hm * dp) / (hm + hp);
    }
  }
  return pi;
}

// Recorded trajectory extended by the linearized flow: exponential approach
// to x- before the record and decaying endpoint Hessian modes after it.
struct GlobalPath {
  Manifold man;
  PathInterp interp;
  double tau0 = 0.0;
  double tau1 = 0.0;
  Eigen::MatrixXd xm_nodes;
  Eigen::MatrixXd dev0;
  double rate_back = 1.0;
  Eigen::MatrixXd xp_nodes;
  std::vector<double> lam;
  std::vector<Eigen::MatrixXd> modes;

  Eigen::MatrixXd coords(double t) const {
    Eigen::MatrixXd out;
    if (t < tau0) {
      out = xm_nodes + std::exp(rate_back * (t - tau0)) * dev0;
    } else if (t > tau1) {
      out = xp_nodes;
      for (std::size_t i = 0; i < lam.size(); ++i)
        out += std::exp(-lam[i] * (t - tau1)) * modes[i];
    } else {
      out = interp.eval(t);
    }
    normalize_columns(man, out);
    return out;
  }
};

GlobalPath make_global_path(const PeriodicOrbit& xm, const PeriodicOrbit& xp,
                            const std::vector<double>& tau,
                            const std::vector<DiscreteLoop>& slices,
                            const Perturbation& P, double rate_back) {
  GlobalPath g;
  g.man = slices.front().man;
  g.interp = make_path_interp(g.man, tau, slices);
  g.tau0 = tau.front();
  g.tau1 = tau.back();
  g.xm_nodes = xm.loop.nodes;
  g.dev0 = deviation(g.man, xm.loop.nodes, slices.front().nodes);
  g.rate_back = rate_back > 0.0 ? rate_back : 1.0;
  g.xp_nodes = xp.loop.nodes;
  HessianOperator H = hessian_matrix(xp.loop, P);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H.mat);
  if (es.info() != Eigen::Success)
    throw NumericalError("endpoint eigenbasis failed");
  LoopField devf = zero_field(xp.loop);
  devf.vectors = deviation(g.man, xp.loop.nodes, slices.back().nodes);
  const Eigen::VectorXd c =
      es.eigenvectors().transpose() * field_to_coeffs(devf, H.frames);
  for (int i = 0; i < c.size(); ++i) {
    if (es.eigenvalues()[i] <= 0.0 || std::abs(c[i]) < 1e-15) continue;
    const LoopField mode = coeffs_to_field(xp.loop, H.frames, es.eigenvectors().col(i));
    g.lam.push_back(es.eigenvalues()[i]);
    g.modes.push_back(c[i] * mode.vectors);
  }
  return g;
}

Eigen::VectorXd flatten_interior(const Cylinder& u, const CylField& f) {
  const int ni = u.ns() - 2;
  const Eigen::Index m = static_cast<Eigen::Index>(u.dim()) * u.nt();
  Eigen::VectorXd v(static_cast<Eigen::Index>(ni) * m);
  for (int j = 0; j < ni; ++j)
    v.segment(j * m, m) = Eigen::Map<const Eigen::VectorXd>(
        f.slices[static_cast<size_t>(j) + 1].data(), m);
  return v;
}

void apply_full_step(Cylinder* u, const Eigen::VectorXd& step, double scale) {
  const Eigen::Index m = static_cast<Eigen::Index>(u->dim()) * u->nt();
  for (int j = 0; j < u->ns(); ++j) {
    Eigen::Map<const Eigen::MatrixXd> blk(step.data() + j * m, u->dim(), u->nt());
    Eigen::MatrixXd& nodes = u->loops[static_cast<size_t>(j)].nodes;
    nodes += scale * blk;
    normalize_columns(u->man(), nodes);
  }
}

// Potential Hessian of one slice as a dense (d*nt) x (d*nt) block in node
// order; nodewise unless the archetypal cutoff couples the nodes.
Eigen::MatrixXd slice_hess_block(const DiscreteLoop& lp, const Perturbation& P) {
  const int d = static_cast<int>(lp.nodes.rows());
  const int n = lp.nt();
  const Eigen::Index m = static_cast<Eigen::Index>(d) * n;
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(m, m);
  if (!P.archetypal) {
    for (int k = 0; k < n; ++k) {
      const double t = k * lp.h();
      for (int i = 0; i < d; ++i) {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(d);
        e[i] = 1.0;
        H.block(k * d, k * d + i, d, 1) =
            potential_hess(P, lp.man, t, lp.nodes.col(k), e);
      }
    }
    return H;
  }
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < d; ++i) {
      LoopField e = zero_field(lp);
      e.vectors(i, k) = 1.0;
      const LoopField he = hess_V(lp, e, P);
      H.col(k * d + i) = Eigen::Map<const Eigen::VectorXd>(he.vectors.data(), m);
    }
  return H;
}

// Sup bound on the zeroth-order coefficient, used to calibrate the operator
// norm of the adjoint (first- and second-order parts calibrate to one in the
// discrete graph norm).
double hess_sup_bound(const Cylinder& u, const Perturbation& P) {
  const int d = u.dim();
  std::vector<double> per(static_cast<size_t>(u.ns()), 0.0);
  parallel_for(u.ns(), [&](std::int64_t idx) {
    const DiscreteLoop& lp = u.loops[static_cast<size_t>(idx)];
    double bound = 0.0;
    for (int k = 0; k < lp.nt(); ++k) {
      double fro2 = 0.0;
      for (int i = 0; i < d; ++i) {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(d);
        e[i] = 1.0;
        fro2 += potential_hess(P, lp.man, k * lp.h(), lp.nodes.col(k), e).squaredNorm();
      }
      bound = std::max(bound, std::sqrt(fro2));
    }
    per[static_cast<size_t>(idx)] = bound;
  });
  return *std::max_element(per.begin(), per.end());
}

using Trip = Eigen::Triplet<double>;

void add_identity(std::vector<Trip>* T, int row0, int col0, int m, double v) {
  for (int i = 0; i < m; ++i) T->emplace_back(row0 + i, col0 + i, v);
}

// -(3-point Laplacian) block.
void add_neg_lap3(std::vector<Trip>* T, int row0, int col0, int d, int n,
                  double h2) {
  for (int k = 0; k < n; ++k) {
    const int kp = (k + 1) % n;
    const int km = (k + n - 1) % n;
    for (int i = 0; i < d; ++i) {
      const int r = row0 + k * d + i;
      T->emplace_back(r, col0 + k * d + i, 2.0 / h2);
      T->emplace_back(r, col0 + kp * d + i, -1.0 / h2);
      T->emplace_back(r, col0 + km * d + i, -1.0 / h2);
    }
  }
}

// -(wide Laplacian) block: the composition of two central differences, the
// stencil of the nonlinear residual.
void add_neg_wide(std::vector<Trip>* T, int row0, int col0, int d, int n,
                  double h2) {
  for (int k = 0; k < n; ++k) {
    const int kp = (k + 2) % n;
    const int km = (k + n - 2) % n;
    for (int i = 0; i < d; ++i) {
      const int r = row0 + k * d + i;
      T->emplace_back(r, col0 + k * d + i, 0.5 / h2);
      T->emplace_back(r, col0 + kp * d + i, -0.25 / h2);
      T->emplace_back(r, col0 + km * d + i, -0.25 / h2);
    }
  }
}

void add_dense_neg(std::vector<Trip>* T, int row0, int col0,
                   const Eigen::MatrixXd& B) {
  for (int c = 0; c < B.cols(); ++c)
    for (int r = 0; r < B.rows(); ++r)
      if (B(r, c) != 0.0) T->emplace_back(row0 + r, col0 + c, -B(r, c));
}

std::vector<Eigen::MatrixXd> hess_blocks(const Cylinder& u, const Perturbation& P,
                                         int first, int count) {
  std::vector<Eigen::MatrixXd> blocks(static_cast<size_t>(count));
  parallel_for(count, [&](std::int64_t idx) {
    blocks[static_cast<size_t>(idx)] =
        slice_hess_block(u.loops[static_cast<size_t>(first + idx)], P);
  });
  return blocks;
}

// Jacobian of the nonlinear interior residual (central s-differences, wide
// t-stencil).  Rows cover the interior equations, columns every slice: the
// walls stay unknowns, so the translation mode is an honest right kernel and
// the normal system keeps its spectral gap.  This is the operator the
// refinement inverts.
Eigen::SparseMatrix<double> assemble_wide(const Cylinder& u, const Perturbation& P) {
  const int ni = u.ns() - 2;
  const int d = u.dim();
  const int n = u.nt();
  const int m = d * n;
  const double h2 = 1.0 / (static_cast<double>(n) * n);
  const std::vector<Eigen::MatrixXd> blocks = hess_blocks(u, P, 1, ni);
  std::vector<Trip> T;
  T.reserve(static_cast<size_t>(ni) * m * (d + 5));
  for (int j = 1; j <= ni; ++j) {
    const int row0 = (j - 1) * m;
    add_identity(&T, row0, (j - 1) * m, m, -0.5 / u.h_s);
    add_identity(&T, row0, (j + 1) * m, m, 0.5 / u.h_s);
    add_neg_wide(&T, row0, j * m, d, n, h2);
    add_dense_neg(&T, row0, j * m, blocks[static_cast<size_t>(j) - 1]);
  }
  Eigen::SparseMatrix<double> D(static_cast<Eigen::Index>(ni) * m,
                                static_cast<Eigen::Index>(u.ns()) * m);
  D.setFromTriplets(T.begin(), T.end());
  D.makeCompressed();
  return D;
}

// Square free-boundary discretization of the adjoint: backward s-difference
// on every slice, the missing forward neighbor of the last row replicated
// (Neumann), so translation kernels of the continuum operator survive
// truncation exactly.
Eigen::SparseMatrix<double> assemble_adjoint_square(const Cylinder& u,
                                                    const Perturbation& P) {
  const int ns = u.ns();
  const int d = u.dim();
  const int n = u.nt();
  const int m = d * n;
  const double h2 = 1.0 / (static_cast<double>(n) * n);
  const std::vector<Eigen::MatrixXd> blocks = hess_blocks(u, P, 0, ns);
  std::vector<Trip> T;
  T.reserve(static_cast<size_t>(ns) * m * (d + 4));
  for (int j = 0; j < ns; ++j) {
    const int row0 = j * m;
    add_neg_lap3(&T, row0, j * m, d, n, h2);
    add_dense_neg(&T, row0, j * m, blocks[static_cast<size_t>(j)]);
    if (j + 1 < ns) {
      add_identity(&T, row0, j * m, m, 1.0 / u.h_s);
      add_identity(&T, row0, (j + 1) * m, m, -1.0 / u.h_s);
    }
  }
  Eigen::SparseMatrix<double> A(static_cast<Eigen::Index>(ns) * m,
                                static_cast<Eigen::Index>(ns) * m);
  A.setFromTriplets(T.begin(), T.end());
  A.makeCompressed();
  return A;
}

Cylinder polish_core(const Cylinder& u_in, const Perturbation& P, double tol,
                     int max_iter) {
  Cylinder u = u_in;
  const Eigen::Index m = static_cast<Eigen::Index>(u.dim()) * u.nt();
  const Eigen::Index nfull = static_cast<Eigen::Index>(u.ns()) * m;
  auto rvec = [&](const Cylinder& c) {
    const CylField r = heat_residual(c, P);
    return flatten_interior(c, r);
  };
  Eigen::VectorXd r = rvec(u);
  double rsup = r.lpNorm<Eigen::Infinity>();
  std::unique_ptr<MinNormSolver> solver;
  int since = 0;
  for (int it = 0; it < max_iter && rsup >= tol; ++it) {
    if (!solver) {
      // corrections in the row space of the frozen linearization keep the
      // iteration transverse to the time-shift direction
      solver = std::make_unique<MinNormSolver>(assemble_wide(u, P),
                                               Eigen::VectorXd::Ones(nfull), 0.0,
                                               kCylinderDirectLimit);
      since = 0;
    }
    const Eigen::VectorXd step = solver->min_norm_step(r);
    double alpha = 1.0;
    bool ok = false;
    for (int hv = 0; hv < 9 && !ok; ++hv) {
      Cylinder cand = u;
      apply_full_step(&cand, step, alpha);
      Eigen::VectorXd rc = rvec(cand);
      const double rcs = rc.lpNorm<Eigen::Infinity>();
      if (rcs < tol || rcs < rsup * (1.0 - 0.25 * alpha)) {
        u = std::move(cand);
        r = std::move(rc);
        rsup = rcs;
        ok = true;
      } else {
        alpha *= 0.5;
      }
    }
    if (!ok) {
      if (since == 0)
        throw NoConvergence("cylinder refinement stalled at residual " +
                            std::to_string(rsup));
      solver.reset();
      continue;
    }
    if (++since >= 6) solver.reset();
  }
  if (rsup >= tol)
    throw NoConvergence("cylinder refinement stopped at residual " +
                        std::to_string(rsup));
  return u;
}

Cylinder reduce_t(const Cylinder& u, int ntr) {
  auto shrink = [&](const DiscreteLoop& lp) {
    DiscreteLoop out = lp;
    out.nodes = lp.nodes.col(0).replicate(1, ntr).eval();
    return out;
  };
  Cylinder red = u;
  for (DiscreteLoop& lp : red.loops) lp = shrink(lp);
  red.xminus.loop = shrink(u.xminus.loop);
  red.xplus.loop = shrink(u.xplus.loop);
  return red;
}

Eigen::MatrixXd unit_negative_direction(const PeriodicOrbit& x,
                                        const Perturbation& P) {
  HessianOperator H = hessian_matrix(x.loop, P);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H.mat);
  if (es.info() != Eigen::Success)
    throw NumericalError("orbit eigenbasis failed");
  if (es.eigenvalues()[0] >= 0.0)
    throw ArgumentError("orbit has no negative direction to shoot along");
  const LoopField mode = coeffs_to_field(x.loop, H.frames, es.eigenvectors().col(0));
  Eigen::MatrixXd M = mode.vectors;
  int bi = 0, bk = 0;
  double best = -1.0;
  for (int k = 0; k < M.cols(); ++k)
    for (int i = 0; i < M.rows(); ++i)
      if (std::abs(M(i, k)) > best + 1e-15) {
        best = std::abs(M(i, k));
        bi = i;
        bk = k;
      }
  if (M(bi, bk) < 0.0) M = -M;
  return M / best;
}

Cylinder build_normalized_cylinder(const PeriodicOrbit& xm, const PeriodicOrbit& xp,
                                   const std::vector<double>& tau,
                                   const std::vector<DiscreteLoop>& slices,
                                   const Perturbation& P, double rate_back,
                                   const CylinderGridSpec& grid) {
  const GlobalPath path = make_global_path(xm, xp, tau, slices, P, rate_back);
  const double rho = std::min(xm.nondeg_margin, xp.nondeg_margin);
  if (!(rho > 0.0)) throw Degenerate("endpoint spectral gap vanishes");
  const double S = grid.S > 0.0 ? grid.S : 12.0 / rho;
  int n_s = grid.n_s;
  if (n_s <= 0) {
    const double ht = grid.h_target > 0.0 ? grid.h_target : 0.025;
    n_s = 2 * static_cast<int>(std::ceil(S / ht)) + 1;
  }
  if (n_s < 5) n_s = 5;
  const double h_s = 2.0 * S / (n_s - 1);
  const double target = 0.5 * (xm.action + xp.action);
  auto action_at = [&](double t) {
    DiscreteLoop lp{xm.loop.man, path.coords(t)};
    return classical_action(lp, P);
  };
  // the action decreases monotonically along the flow: bisect for the slice
  // carrying the midpoint action and center the grid there
  double lo = tau.front();
  double hi = tau.back();
  for (int guard = 0; guard < 64 && action_at(lo) <= target; ++guard)
    lo -= 4.0 / path.rate_back;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (action_at(mid) > target ? lo : hi) = mid;
  }
  const double tstar = 0.5 * (lo + hi);
  Cylinder cyl;
  cyl.xminus = xm;
  cyl.xplus = xp;
  cyl.S = S;
  cyl.h_s = h_s;
  cyl.loops.assign(static_cast<size_t>(n_s), xm.loop);
  for (int j = 1; j + 1 < n_s; ++j)
    cyl.loops[static_cast<size_t>(j)].nodes = path.coords(tstar - S + h_s * j);
  cyl.loops.back() = xp.loop;
  cyl = polish_cylinder(cyl, P);
  if (n_s % 2 == 1) {
    // refinement may nudge the mid-slice action; one corrective slide
    const int j0 = (n_s - 1) / 2;
    const double drift =
        classical_action(cyl.loops[static_cast<size_t>(j0)], P) - target;
    if (std::abs(drift) > 1e-8) {
      const double slope =
          (classical_action(cyl.loops[static_cast<size_t>(j0) + 1], P) -
           classical_action(cyl.loops[static_cast<size_t>(j0) - 1], P)) /
          (2.0 * h_s);
      const double sigma = -drift / slope;
      if (slope < -1e-14 && std::abs(sigma) < 4.0 * h_s)
        cyl = polish_cylinder(shift_cylinder(cyl, P, sigma), P);
    }
  }
  validate_cylinder(cyl, P);
  return cyl;
}

double cyl_inner(const Cylinder& u, const CylField& a, const CylField& b) {
  const int nt = u.nt();
  const double acc = block_sum(
      static_cast<std::int64_t>(u.ns()) * nt, [&](std::int64_t id) {
        const int j = static_cast<int>(id / nt);
        const int k = static_cast<int>(id % nt);
        const Eigen::MatrixXd& A = a.slices[static_cast<size_t>(j)];
        const Eigen::MatrixXd& B = b.slices[static_cast<size_t>(j)];
        if (A.size() == 0 || B.size() == 0) return 0.0;
        return A.col(k).dot(B.col(k));
      });
  return acc * u.h_s / nt;
}

CylField deviation_field(const Cylinder& base, const Cylinder& target) {
  CylField f = zero_cyl_field(base);
  for (int j = 0; j < base.ns(); ++j)
    f.slices[static_cast<size_t>(j)] =
        deviation(base.man(), base.loops[static_cast<size_t>(j)].nodes,
                  target.loops[static_cast<size_t>(j)].nodes);
  return f;
}

}  // namespace

CylField zero_cyl_field(const Cylinder& u) {
  CylField f;
  f.slices.assign(static_cast<size_t>(u.ns()),
                  Eigen::MatrixXd::Zero(u.dim(), u.nt()));
  return f;
}

double cyl_sup_norm(const CylField& f) {
  double m = 0.0;
  for (const Eigen::MatrixXd& s : f.slices)
    if (s.size() != 0) m = std::max(m, s.lpNorm<Eigen::Infinity>());
  return m;
}

double cyl_lp_norm(const Cylinder& u, const CylField& f, double p) {
  if (!(p >= 1.0)) throw ArgumentError("p must be at least one");
  if (u.ns() == 0) return 0.0;
  const int nt = u.nt();
  const double acc = block_sum(
      static_cast<std::int64_t>(u.ns()) * nt, [&](std::int64_t id) {
        const int j = static_cast<int>(id / nt);
        const int k = static_cast<int>(id % nt);
        const Eigen::MatrixXd& s = f.slices[static_cast<size_t>(j)];
        if (s.size() == 0) return 0.0;
        return std::pow(s.col(k).norm(), p);
      });
  return std::pow(acc * u.h_s / nt, 1.0 / p);
}

CylField cylinder_ds(const Cylinder& u) {
  CylField f = zero_cyl_field(u);
  for (int j = 1; j + 1 < u.ns(); ++j)
    f.slices[static_cast<size_t>(j)] = slice_ds_central(u, j);
  return f;
}

CylField heat_residual(const Cylinder& u, const Perturbation& P) {
  CylField r = zero_cyl_field(u);
  if (u.ns() < 3) return r;
  parallel_for(u.ns() - 2, [&](std::int64_t idx) {
    const int j = static_cast<int>(idx) + 1;
    const LoopField f = orbit_residual_field(u.loops[static_cast<size_t>(j)], P);
    r.slices[static_cast<size_t>(j)] = slice_ds_central(u, j) - f.vectors;
  });
  return r;
}

double heat_residual_sup(const Cylinder& u, const Perturbation& P) {
  return cyl_sup_norm(heat_residual(u, P));
}

std::vector<double> slice_actions(const Cylinder& u, const Perturbation& P) {
  std::vector<double> a(static_cast<size_t>(u.ns()), 0.0);
  parallel_for(u.ns(), [&](std::int64_t j) {
    a[static_cast<size_t>(j)] = classical_action(u.loops[static_cast<size_t>(j)], P);
  });
  return a;
}

double cylinder_energy(const Cylinder& u) {
  if (u.ns() < 3) return 0.0;
  const double nt = static_cast<double>(u.nt());
  const double acc = block_sum(u.ns() - 2, [&](std::int64_t idx) {
    return slice_ds_central(u, static_cast<int>(idx) + 1).squaredNorm() / nt;
  });
  return acc * u.h_s;
}

void validate_cylinder(const Cylinder& u, const Perturbation& P) {
  if (u.ns() < 3) throw ArgumentError("cylinder needs at least three slices");
  if (!(u.h_s > 0.0) || !(u.S > 0.0))
    throw ArgumentError("cylinder grid scales must be positive");
  if (std::abs(u.h_s * (u.ns() - 1) - 2.0 * u.S) > 1e-9 * std::max(1.0, u.S))
    throw ArgumentError("slice count does not match the truncation length");
  for (const DiscreteLoop& lp : u.loops) {
    validate_loop(lp);
    if (!(lp.man == u.man()) || lp.nt() != u.nt())
      throw ArgumentError("cylinder slices disagree on grid or manifold");
  }
  if (loop_distance(u.loops.front(), u.xminus.loop) > kBoundaryTol)
    throw HypothesisViolated("first slice detached from the left endpoint orbit");
  if (loop_distance(u.loops.back(), u.xplus.loop) > kBoundaryTol)
    throw HypothesisViolated("last slice detached from the right endpoint orbit");
  const std::vector<double> a = slice_actions(u, P);
  for (std::size_t j = 0; j + 1 < a.size(); ++j)
    if (a[j + 1] > a[j] + kMonotoneSlack)
      throw HypothesisViolated("slice actions increase between slices " +
                               std::to_string(j) + " and " + std::to_string(j + 1));
}

DiscreteLoop step_heat(const DiscreteLoop& x, const Perturbation& P, double h) {
  validate_loop(x);
  if (!(h > 0.0)) throw ArgumentError("step size must be positive");
  if (!power_of_two(x.nt()))
    throw ArgumentError("step_heat needs a power-of-two time grid");
  const double before = classical_action(x, P);
  DiscreteLoop out = x.man.flat() ? step_flat(x, P, h) : step_sphere(x, P, h);
  const double after = classical_action(out, P);
  if (after > before + kMonotoneSlack)
    throw StepRejected("action increased by " + std::to_string(after - before));
  return out;
}

FlowResult evolve_to_orbit(const DiscreteLoop& x, const Perturbation& P,
                           const EvolveOptions& opts) {
  validate_loop(x);
  if (!(opts.h0 > 0.0) || !(opts.s_budget > 0.0))
    throw ArgumentError("evolve options must be positive");
  DiscreteLoop cur = x;
  double h = opts.h0;
  double s = 0.0;
  bool first = true;
  std::vector<double> ss, lr;
  for (;;) {
    const DiscreteLoop next = advance(cur, P, &h);
    const Eigen::MatrixXd dev = deviation(x.man, cur.nodes, next.nodes);
    const double sup = dev.lpNorm<Eigen::Infinity>();
    if (sup / h < kStopRate) {
      if (!first) {
        cur = next;
        s += h;
      }
      break;
    }
    first = false;
    cur = next;
    s += h;
    const double rate_now = std::sqrt(dev.squaredNorm() / x.nt()) / h;
    if (rate_now >= 1e-9 && rate_now <= 1e-4) {
      ss.push_back(s);
      lr.push_back(std::log(rate_now));
    }
    if (s > opts.s_budget)
      throw NoConvergence("heat flow exhausted the s budget at s = " +
                          std::to_string(s));
  }
  FlowResult res;
  res.orbit = find_orbit(cur, P);
  res.s_elapsed = first ? 0.0 : s;
  if (ss.size() >= 6) {
    double ms = 0.0, ml = 0.0;
    for (std::size_t i = 0; i < ss.size(); ++i) {
      ms += ss[i];
      ml += lr[i];
    }
    ms /= static_cast<double>(ss.size());
    ml /= static_cast<double>(ss.size());
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < ss.size(); ++i) {
      num += (ss[i] - ms) * (lr[i] - ml);
      den += (ss[i] - ms) * (ss[i] - ms);
    }
    if (den > 0.0) {
      res.rate = -num / den;
      res.rate_defined = res.rate > 0.0;
    }
  }
  return res;
}

Cylinder shoot_unstable(const PeriodicOrbit& x, int dir, double delta,
                        const Perturbation& P, const CylinderGridSpec& grid) {
  require_flat(x.loop.man, "unstable shooting");
  if (dir != 1 && dir != -1) throw ArgumentError("dir must be +1 or -1");
  if (!(delta >= 1e-6 && delta <= 1e-3))
    throw ArgumentError("shot offset outside [1e-6, 1e-3]");
  if (x.index != 1)
    throw ArgumentError("shooting needs an index-one orbit, got index " +
                        std::to_string(x.index));
  const Eigen::MatrixXd e = unit_negative_direction(x, P);
  DiscreteLoop start = x.loop;
  start.nodes += (dir * delta) * e;
  normalize_columns(start.man, start.nodes);
  const FlowRecord rec = flow_record(start, P, grid.step_h, grid.s_budget);
  if (!rec.converged)
    throw NoConvergence("shot trajectory did not settle within the s budget");
  const PeriodicOrbit xp = find_orbit(rec.slices.back(), P);
  const double rb = x.spectrum_head.size() > 0 && x.spectrum_head[0] < 0.0
                        ? -x.spectrum_head[0]
                        : x.nondeg_margin;
  return build_normalized_cylinder(x, xp, rec.tau, rec.slices, P, rb, grid);
}

std::vector<Cylinder> enumerate_M0(const PeriodicOrbit& xminus,
                                   const PeriodicOrbit& xplus,
                                   const Perturbation& P,
                                   const CylinderGridSpec& grid) {
  require_flat(xminus.loop.man, "moduli enumeration");
  if (xminus.index - xplus.index != 1)
    throw IndexMismatch("index difference is " +
                        std::to_string(xminus.index - xplus.index) +
                        ", enumeration needs exactly one");
  HessianOperator H = hessian_matrix(xminus.loop, P);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H.mat);
  if (es.info() != Eigen::Success)
    throw NumericalError("orbit eigenbasis failed");
  int neg = 0;
  while (neg < es.eigenvalues().size() && es.eigenvalues()[neg] < 0.0) ++neg;

  struct Shot {
    std::vector<double> tau;
    std::vector<DiscreteLoop> slices;
  };
  std::vector<Shot> accepted;
  const Manifold man = xminus.loop.man;

  if (neg == 1) {
    const Eigen::MatrixXd e = unit_negative_direction(xminus, P);
    std::array<FlowRecord, 2> recs;
    std::array<std::exception_ptr, 2> errs{};
    parallel_for(2, [&](std::int64_t i) {
      try {
        DiscreteLoop start = xminus.loop;
        start.nodes += ((i == 0 ? 1.0 : -1.0) * kShotDelta) * e;
        normalize_columns(start.man, start.nodes);
        recs[static_cast<size_t>(i)] =
            flow_record(start, P, grid.step_h, grid.s_budget);
      } catch (...) {
        errs[static_cast<size_t>(i)] = std::current_exception();
      }
    });
    for (const std::exception_ptr& ep : errs)
      if (ep) std::rethrow_exception(ep);
    for (int i = 0; i < 2; ++i) {
      const FlowRecord& rec = recs[static_cast<size_t>(i)];
      if (!rec.converged)
        throw NoConvergence("shot trajectory did not settle within the s budget");
      const PeriodicOrbit lim = find_orbit(rec.slices.back(), P);
      if (loop_distance(lim.loop, xplus.loop) <= kBoundaryTol)
        accepted.push_back(Shot{rec.tau, rec.slices});
    }
  } else if (neg == 2) {
    // nearly degenerate unstable plane: locate the separatrices of the
    // shooting circle by sign patterns of the lifted displacement, then keep
    // the ones that pass by the requested endpoint
    const LoopField e1 = coeffs_to_field(xminus.loop, H.frames, es.eigenvectors().col(0));
    const LoopField e2 = coeffs_to_field(xminus.loop, H.frames, es.eigenvectors().col(1));
    auto start_at = [&](double theta) {
      DiscreteLoop s0 = xminus.loop;
      s0.nodes +=
          kShotDelta * (std::cos(theta) * e1.vectors + std::sin(theta) * e2.vectors);
      normalize_columns(s0.man, s0.nodes);
      return s0;
    };
    auto lifted_disp = [&](const FlowRecord& rec) {
      Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(xminus.loop.nodes.rows(),
                                                  xminus.loop.nt());
      for (std::size_t r = 1; r < rec.slices.size(); ++r)
        acc += deviation(man, rec.slices[r - 1].nodes, rec.slices[r].nodes);
      Eigen::VectorXd disp(acc.rows());
      for (int i = 0; i < acc.rows(); ++i) disp[i] = acc.row(i).mean();
      return disp;
    };
    auto pattern_of = [&](const Eigen::VectorXd& disp) {
      std::vector<int> pat(static_cast<size_t>(disp.size()));
      for (int i = 0; i < disp.size(); ++i)
        pat[static_cast<size_t>(i)] = disp[i] > 0.1 ? 1 : (disp[i] < -0.1 ? -1 : 0);
      return pat;
    };
    const int n_probe = 32;
    std::vector<FlowRecord> recs(static_cast<size_t>(n_probe));
    std::vector<std::exception_ptr> errs(static_cast<size_t>(n_probe));
    parallel_for(n_probe, [&](std::int64_t i) {
      try {
        recs[static_cast<size_t>(i)] = flow_record(
            start_at(kTwoPi * static_cast<double>(i) / n_probe), P, grid.step_h,
            grid.s_budget);
      } catch (...) {
        errs[static_cast<size_t>(i)] = std::current_exception();
      }
    });
    for (const std::exception_ptr& ep : errs)
      if (ep) std::rethrow_exception(ep);
    std::vector<std::vector<int>> patterns(static_cast<size_t>(n_probe));
    for (int i = 0; i < n_probe; ++i) {
      if (!recs[static_cast<size_t>(i)].converged)
        throw NoConvergence("probe trajectory did not settle within the s budget");
      patterns[static_cast<size_t>(i)] =
          pattern_of(lifted_disp(recs[static_cast<size_t>(i)]));
    }
    for (int i = 0; i < n_probe; ++i) {
      const int i2 = (i + 1) % n_probe;
      if (patterns[static_cast<size_t>(i)] == patterns[static_cast<size_t>(i2)])
        continue;
      double ta = kTwoPi * static_cast<double>(i) / n_probe;
      double tb = kTwoPi * static_cast<double>(i + 1) / n_probe;
      const std::vector<int> pa = patterns[static_cast<size_t>(i)];
      for (int it = 0; it < 60 && tb - ta > 1e-16; ++it) {
        const double tm = 0.5 * (ta + tb);
        const FlowRecord rm = flow_record(start_at(tm), P, grid.step_h, grid.s_budget);
        if (!rm.converged)
          throw NoConvergence("bisection trajectory did not settle");
        (pattern_of(lifted_disp(rm)) == pa ? ta : tb) = tm;
      }
      const FlowRecord rc =
          flow_record(start_at(0.5 * (ta + tb)), P, grid.step_h, grid.s_budget);
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < rc.slices.size(); ++r) {
        const double dist = loop_distance(rc.slices[r], xplus.loop);
        if (dist < bd) {
          bd = dist;
          best = r;
        }
      }
      if (bd > 1e-5) continue;  // separatrix of a different endpoint
      Shot sh;
      sh.tau.assign(rc.tau.begin(), rc.tau.begin() + static_cast<long>(best) + 1);
      sh.slices.assign(rc.slices.begin(),
                       rc.slices.begin() + static_cast<long>(best) + 1);
      accepted.push_back(std::move(sh));
    }
  } else {
    throw ArgumentError("enumeration supports unstable spheres of dimension at most two");
  }

  const double rb = -es.eigenvalues()[0];
  std::vector<Cylinder> out;
  for (const Shot& sh : accepted)
    out.push_back(build_normalized_cylinder(xminus, xplus, sh.tau, sh.slices, P,
                                            rb, grid));
  std::vector<Cylinder> uniq;
  for (Cylinder& c : out) {
    bool dup = false;
    for (const Cylinder& have : uniq) {
      if (have.ns() != c.ns()) continue;
      double dmax = 0.0;
      for (int j = 0; j < c.ns(); ++j)
        dmax = std::max(dmax, loop_distance(have.loops[static_cast<size_t>(j)],
                                            c.loops[static_cast<size_t>(j)]));
      if (dmax < kBoundaryTol) {
        dup = true;
        break;
      }
    }
    if (!dup) uniq.push_back(std::move(c));
  }
  std::sort(uniq.begin(), uniq.end(), [](const Cylinder& a, const Cylinder& b) {
    const int ns = std::min(a.ns(), b.ns());
    for (int j = 0; j < ns; ++j) {
      const Eigen::MatrixXd& A = a.loops[static_cast<size_t>(j)].nodes;
      const Eigen::MatrixXd& B = b.loops[static_cast<size_t>(j)].nodes;
      for (int k = 0; k < A.cols(); ++k)
        for (int i = 0; i < A.rows(); ++i) {
          const double d = A(i, k) - B(i, k);
          if (std::abs(d) > 1e-9) return d < 0.0;
        }
    }
    return a.ns() < b.ns();
  });
  return uniq;
}

CylField apply_D0(const Cylinder& u, const CylField& xi, const Perturbation& P) {
  if (static_cast<int>(xi.slices.size()) != u.ns())
    throw ArgumentError("field grid does not match the cylinder");
  CylField out = zero_cyl_field(u);
  if (u.ns() < 3) return out;
  const bool flat = u.man().flat();
  parallel_for(u.ns() - 2, [&](std::int64_t idx) {
    const int j = static_cast<int>(idx) + 1;
    const DiscreteLoop& lp = u.loops[static_cast<size_t>(j)];
    const Eigen::MatrixXd& cur = xi.slices[static_cast<size_t>(j)];
    const Eigen::MatrixXd& prev = xi.slices[static_cast<size_t>(j) - 1];
    Eigen::MatrixXd res(u.dim(), u.nt());
    if (flat) {
      res = (cur - prev) / u.h_s;
    } else {
      for (int k = 0; k < u.nt(); ++k) {
        const Eigen::VectorXd pk = u.loops[static_cast<size_t>(j) - 1].nodes.col(k);
        ManifoldPoint p{u.man(), pk};
        TangentVector v{p, log_map(u.man(), pk, lp.nodes.col(k))};
        TangentVector w{p, prev.col(k)};
        res.col(k) = (cur.col(k) - parallel_transport(p, v, w).components) / u.h_s;
      }
    }
    res -= apply_laplace3(lp, cur);
    const LoopField xif{lp, cur};
    res -= hess_V(lp, xif, P).vectors;
    if (!flat) {
      const LoopField vel = velocity(lp);
      for (int k = 0; k < u.nt(); ++k) {
        ManifoldPoint pt{u.man(), lp.nodes.col(k)};
        TangentVector a{pt, cur.col(k)};
        TangentVector b{pt, vel.vectors.col(k)};
        res.col(k) -= curvature(pt, a, b, b).components;
      }
    }
    out.slices[static_cast<size_t>(j)] = res;
  });
  return out;
}

CylField apply_D0_adjoint(const Cylinder& u, const CylField& xi,
                          const Perturbation& P) {
  if (static_cast<int>(xi.slices.size()) != u.ns())
    throw ArgumentError("field grid does not match the cylinder");
  CylField out = zero_cyl_field(u);
  if (u.ns() < 3) return out;
  const bool flat = u.man().flat();
  parallel_for(u.ns() - 2, [&](std::int64_t idx) {
    const int j = static_cast<int>(idx) + 1;
    const DiscreteLoop& lp = u.loops[static_cast<size_t>(j)];
    const Eigen::MatrixXd& cur = xi.slices[static_cast<size_t>(j)];
    const Eigen::MatrixXd& next = xi.slices[static_cast<size_t>(j) + 1];
    Eigen::MatrixXd res(u.dim(), u.nt());
    if (flat) {
      res = (cur - next) / u.h_s;
    } else {
      for (int k = 0; k < u.nt(); ++k) {
        const Eigen::VectorXd qk = u.loops[static_cast<size_t>(j) + 1].nodes.col(k);
        ManifoldPoint q{u.man(), qk};
        TangentVector v{q, log_map(u.man(), qk, lp.nodes.col(k))};
        TangentVector w{q, next.col(k)};
        res.col(k) = (cur.col(k) - parallel_transport(q, v, w).components) / u.h_s;
      }
    }
    res -= apply_laplace3(lp, cur);
    const LoopField xif{lp, cur};
    res -= hess_V(lp, xif, P).vectors;
    if (!flat) {
      const LoopField vel = velocity(lp);
      for (int k = 0; k < u.nt(); ++k) {
        ManifoldPoint pt{u.man(), lp.nodes.col(k)};
        TangentVector a{pt, cur.col(k)};
        TangentVector b{pt, vel.vectors.col(k)};
        res.col(k) -= curvature(pt, a, b, b).components;
      }
    }
    out.slices[static_cast<size_t>(j)] = res;
  });
  return out;
}

int spectral_flow_index(const Cylinder& u, const Perturbation& P) {
  if (u.ns() < 2) return 0;
  const int m = tangent_dim(u.man()) * u.nt();
  const int K = std::min(m, 8);
  Eigen::MatrixXd heads(K, u.ns());
  std::vector<std::exception_ptr> errs(static_cast<size_t>(u.ns()));
  parallel_for(u.ns(), [&](std::int64_t idx) {
    try {
      const HessianOperator H = hessian_matrix(u.loops[static_cast<size_t>(idx)], P);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H.mat,
                                                        Eigen::EigenvaluesOnly);
      if (es.info() != Eigen::Success)
        throw NumericalError("slice eigen decomposition failed");
      heads.col(idx) = es.eigenvalues().head(K);
    } catch (...) {
      errs[static_cast<size_t>(idx)] = std::current_exception();
    }
  });
  for (const std::exception_ptr& ep : errs)
    if (ep) std::rethrow_exception(ep);
  int flow = 0;
  for (int j = 0; j + 1 < u.ns(); ++j) {
    for (int i = 0; i < K; ++i) {
      const double a = heads(i, j);
      const double b = heads(i, j + 1);
      const bool sa = a >= 0.0;
      const bool sb = b >= 0.0;
      if (sa == sb) continue;
      // a crossing is trustworthy only if every nearby track crosses the
      // same way; otherwise the sorted labels are ambiguous
      for (int i2 = 0; i2 < K; ++i2) {
        if (i2 == i) continue;
        const double a2 = heads(i2, j);
        const double b2 = heads(i2, j + 1);
        if (std::abs(a2 - a) >= 1e-9 && std::abs(b2 - b) >= 1e-9) continue;
        if ((a2 >= 0.0) != sa || (b2 >= 0.0) != sb)
          throw EigenvalueCollision("tracks " + std::to_string(i) + " and " +
                                    std::to_string(i2) +
                                    " collide at a crossing near slice " +
                                    std::to_string(j));
      }
      flow += sb ? 1 : -1;
    }
  }
  return flow;
}

double surjectivity_margin(const Cylinder& u, const Perturbation& P) {
  require_flat(u.man(), "surjectivity margin");
  if (u.ns() < 3) throw ArgumentError("cylinder needs at least three slices");
  const Eigen::SparseMatrix<double> A = assemble_adjoint_square(u, P);
  const MinNormSolver solver(A, Eigen::VectorXd::Ones(A.cols()), 0.0,
                             kCylinderDirectLimit);
  const double lmin = solver.lambda_min_estimate();
  const double smin = std::sqrt(std::max(lmin, 0.0));
  return smin / (1.0 + hess_sup_bound(u, P));
}

ModuliProjection project_to_moduli(const Cylinder& u_approx,
                                   const Perturbation& P, double p,
                                   double delta0) {
  require_flat(u_approx.man(), "moduli projection");
  if (u_approx.ns() < 3) throw ArgumentError("cylinder needs at least three slices");
  if (loop_distance(u_approx.loops.front(), u_approx.xminus.loop) > kBoundaryTol ||
      loop_distance(u_approx.loops.back(), u_approx.xplus.loop) > kBoundaryTol)
    throw ArgumentError("boundary slices must sit on the endpoint orbits");
  const CylField r0 = heat_residual(u_approx, P);
  const double r0norm = cyl_lp_norm(u_approx, r0, p);
  if (r0norm > delta0)
    throw ArgumentError("residual " + std::to_string(r0norm) +
                        " exceeds the admissible bound " + std::to_string(delta0));
  ModuliProjection out;
  try {
    out.u0 = polish_cylinder(u_approx, P);
  } catch (const NoConvergence& e) {
    throw ProjectionFailed(e.what());
  }
  // slide along the time-shift family until the deviation is orthogonal to
  // the flow direction, which places it in the row space of the
  // linearization
  for (int it = 0; it < 8; ++it) {
    const CylField phi = cylinder_ds(out.u0);
    const CylField dev = deviation_field(out.u0, u_approx);
    const double den = cyl_inner(out.u0, phi, phi);
    if (!(den > 0.0)) break;
    const double sigma = cyl_inner(out.u0, dev, phi) / den;
    if (std::abs(sigma) < 1e-12) break;
    try {
      out.u0 = polish_cylinder(shift_cylinder(out.u0, P, sigma), P);
    } catch (const NoConvergence& e) {
      throw ProjectionFailed(std::string("shift alignment: ") + e.what());
    }
    out.iterations = it + 1;
  }
  out.xi = deviation_field(out.u0, u_approx);
  const double xin = cyl_lp_norm(out.u0, out.xi, p);
  out.correction_ratio = r0norm > 1e-300 ? xin / r0norm : 0.0;
  return out;
}

Cylinder polish_cylinder(const Cylinder& u, const Perturbation& P, double tol,
                         int max_iter) {
  require_flat(u.man(), "cylinder refinement");
  if (u.ns() < 3) throw ArgumentError("cylinder needs at least three slices");
  if (!(tol > 0.0) || max_iter < 1)
    throw ArgumentError("refinement tolerance and iteration cap must be positive");
  if (u.nt() > 8 && t_reduction_valid(P) && cylinder_t_constant(u)) {
    const Cylinder red = polish_core(reduce_t(u, 8), P, tol, max_iter);
    Cylinder out = u;
    for (int j = 0; j < u.ns(); ++j)
      out.loops[static_cast<size_t>(j)].nodes =
          red.loops[static_cast<size_t>(j)].nodes.col(0).replicate(1, u.nt()).eval();
    return out;
  }
  return polish_core(u, P, tol, max_iter);
}

Eigen::SparseMatrix<double> assemble_D0(const Cylinder& u, const Perturbation& P,
                                        bool dirichlet) {
  require_flat(u.man(), "cylinder linearization assembly");
  if (u.ns() < 3) throw ArgumentError("cylinder needs at least three slices");
  const int ns = u.ns();
  const int d = u.dim();
  const int n = u.nt();
  const int m = d * n;
  const double h2 = 1.0 / (static_cast<double>(n) * n);
  std::vector<Trip> T;
  if (dirichlet) {
    const int ni = ns - 2;
    const std::vector<Eigen::MatrixXd> blocks = hess_blocks(u, P, 1, ni);
    T.reserve(static_cast<size_t>(ni) * m * (d + 4));
    for (int j = 1; j <= ni; ++j) {
      const int row0 = (j - 1) * m;
      add_identity(&T, row0, (j - 1) * m, m, 1.0 / u.h_s);
      add_neg_lap3(&T, row0, (j - 1) * m, d, n, h2);
      add_dense_neg(&T, row0, (j - 1) * m, blocks[static_cast<size_t>(j) - 1]);
      if (j - 1 >= 1) add_identity(&T, row0, (j - 2) * m, m, -1.0 / u.h_s);
    }
    Eigen::SparseMatrix<double> D(static_cast<Eigen::Index>(ni) * m,
                                  static_cast<Eigen::Index>(ni) * m);
    D.setFromTriplets(T.begin(), T.end());
    D.makeCompressed();
    return D;
  }
  const std::vector<Eigen::MatrixXd> blocks = hess_blocks(u, P, 1, ns - 1);
  T.reserve(static_cast<size_t>(ns - 1) * m * (d + 4));
  for (int j = 1; j < ns; ++j) {
    const int row0 = (j - 1) * m;
    add_identity(&T, row0, j * m, m, 1.0 / u.h_s);
    add_neg_lap3(&T, row0, j * m, d, n, h2);
    add_dense_neg(&T, row0, j * m, blocks[static_cast<size_t>(j) - 1]);
    add_identity(&T, row0, (j - 1) * m, m, -1.0 / u.h_s);
  }
  Eigen::SparseMatrix<double> D(static_cast<Eigen::Index>(ns - 1) * m,
                                static_cast<Eigen::Index>(ns) * m);
  D.setFromTriplets(T.begin(), T.end());
  D.makeCompressed();
  return D;
}

Cylinder regrid_cylinder(const Cylinder& u, const Perturbation& P, double S,
                         int n_s, int n_t) {
  require_flat(u.man(), "cylinder regridding");
  if (u.ns() < 3) throw ArgumentError("cylinder needs at least three slices");
  const double S2 = S > 0.0 ? std::min(S, u.S) : u.S;
  const int nt2 = n_t > 0 ? n_t : u.nt();
  if (nt2 < 8 || !power_of_two(nt2) || u.nt() % nt2 != 0)
    throw ArgumentError("target time grid must be a power-of-two divisor of the source");
  const int stride = u.nt() / nt2;
  auto subsample = [&](const DiscreteLoop& lp) {
    DiscreteLoop out = lp;
    Eigen::MatrixXd nodes(lp.nodes.rows(), nt2);
    for (int k = 0; k < nt2; ++k) nodes.col(k) = lp.nodes.col(k * stride);
    out.nodes = std::move(nodes);
    return out;
  };
  const PeriodicOrbit xm = find_orbit(subsample(u.xminus.loop), P);
  const PeriodicOrbit xp = find_orbit(subsample(u.xplus.loop), P);
  std::vector<double> tau(static_cast<size_t>(u.ns()));
  std::vector<DiscreteLoop> slices(static_cast<size_t>(u.ns()));
  for (int j = 0; j < u.ns(); ++j) {
    tau[static_cast<size_t>(j)] = u.s_of(j);
    slices[static_cast<size_t>(j)] = subsample(u.loops[static_cast<size_t>(j)]);
  }
  const double rb = xm.spectrum_head.size() > 0 && xm.spectrum_head[0] < 0.0
                        ? -xm.spectrum_head[0]
                        : xm.nondeg_margin;
  const GlobalPath path = make_global_path(xm, xp, tau, slices, P, rb);
  int ns2 = n_s;
  if (ns2 <= 0) ns2 = 2 * static_cast<int>(std::ceil(S2 / u.h_s)) + 1;
  if (ns2 < 5) ns2 = 5;
  if (ns2 % 2 == 0) ++ns2;
  const double h2 = 2.0 * S2 / (ns2 - 1);
  Cylinder out;
  out.xminus = xm;
  out.xplus = xp;
  out.S = S2;
  out.h_s = h2;
  out.loops.assign(static_cast<size_t>(ns2), xm.loop);
  for (int j = 1; j + 1 < ns2; ++j)
    out.loops[static_cast<size_t>(j)].nodes = path.coords(-S2 + h2 * j);
  out.loops.back() = xp.loop;
  out = polish_cylinder(out, P);
  validate_cylinder(out, P);
  return out;
}

Cylinder shift_cylinder(const Cylinder& u, const Perturbation& P, double sigma) {
  require_flat(u.man(), "cylinder shifting");
  if (u.ns() < 3) throw ArgumentError("cylinder needs at least three slices");
  std::vector<double> tau(static_cast<size_t>(u.ns()));
  for (int j = 0; j < u.ns(); ++j) tau[static_cast<size_t>(j)] = u.s_of(j);
  const double rb =
      u.xminus.spectrum_head.size() > 0 && u.xminus.spectrum_head[0] < 0.0
          ? -u.xminus.spectrum_head[0]
          : u.xminus.nondeg_margin;
  const GlobalPath path = make_global_path(u.xminus, u.xplus, tau, u.loops, P, rb);
  Cylinder out = u;
  for (int j = 1; j + 1 < u.ns(); ++j)
    out.loops[static_cast<size_t>(j)].nodes = path.coords(u.s_of(j) + sigma);
  out.loops.front() = u.xminus.loop;
  out.loops.back() = u.xplus.loop;
  return out;
}

}  // namespace morseflow
