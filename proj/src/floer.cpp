#include "morseflow/floer.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "morseflow/errors.hpp"
#include "morseflow/exec.hpp"
#include "morseflow/fft.hpp"
#include "morseflow/geometry.hpp"
#include "morseflow/linsys.hpp"

namespace morseflow {
namespace {

constexpr double kExactResidual = 1e-9;
constexpr double kLiftTol = 1e-10;
constexpr int kLiftMaxIter = 40;
constexpr int kLiftMaxHalvings = 5;
constexpr double kPairDistanceTol = 1e-8;
constexpr double kKernelDefectTol = 1e-6;
// The tube radius delta in ||xi||_inf <= delta*sqrt(eps).
constexpr double kTubeRadius = 0.5;
// Chart radii: stay inside half a fundamental cell on tori, below the cut
// locus on the sphere.
constexpr double kFlatChartRadius = 0.45;
constexpr double kSphereChartRadius = 3.0;

void require_flat(const Manifold& man, const char* what) {
  if (!man.flat())
    throw ArgumentError(std::string(what) + " is only available on flat backends");
}

void check_eps(double eps) {
  if (!(eps > 0.0) || !(eps <= 1.0))
    throw ArgumentError("eps must lie in (0, 1]");
}

void check_p(double p) {
  if (!(p > 1.0)) throw ArgumentError("norm exponent must exceed one");
}

// parallel_for with worker exceptions carried across the thread boundary.
void guarded_parallel_for(std::int64_t n,
                          const std::function<void(std::int64_t)>& fn) {
  std::vector<std::exception_ptr> errs(static_cast<size_t>(n));
  parallel_for(n, [&](std::int64_t i) {
    try {
      fn(i);
    } catch (...) {
      errs[static_cast<size_t>(i)] = std::current_exception();
    }
  });
  for (const std::exception_ptr& e : errs)
    if (e) std::rethrow_exception(e);
}

void check_field(const Cylinder& u, const CylField& f, const char* what) {
  if (static_cast<int>(f.slices.size()) != u.ns())
    throw ArgumentError(std::string(what) + " does not match the cylinder grid");
  for (const Eigen::MatrixXd& s : f.slices)
    if (s.rows() != u.dim() || s.cols() != u.nt())
      throw ArgumentError(std::string(what) + " does not match the cylinder grid");
}

void check_pair_field(const Cylinder& u, const PairField& z, const char* what) {
  check_field(u, z.xi, what);
  check_field(u, z.eta, what);
}

void check_velocities(const Cylinder& u, const std::vector<LoopField>& v) {
  if (static_cast<int>(v.size()) != u.ns())
    throw ArgumentError("velocity array does not match the cylinder grid");
  for (const LoopField& f : v)
    if (f.vectors.rows() != u.dim() || f.vectors.cols() != u.nt())
      throw ArgumentError("velocity array does not match the cylinder grid");
}

double field_sup(const CylField& f) {
  double m = 0.0;
  for (const Eigen::MatrixXd& s : f.slices)
    for (int k = 0; k < s.cols(); ++k) m = std::max(m, s.col(k).norm());
  return m;
}

double chart_radius(const Manifold& man) {
  return man.flat() ? kFlatChartRadius : kSphereChartRadius;
}

// Transports the columns of field (tangent at the matching column of from)
// to the tangent spaces at to.  Identity on flat backends.
Eigen::MatrixXd transport_field(const Manifold& man, const Eigen::MatrixXd& from,
                                const Eigen::MatrixXd& to,
                                const Eigen::MatrixXd& field) {
  if (man.flat()) return field;
  Eigen::MatrixXd out(field.rows(), field.cols());
  for (int k = 0; k < field.cols(); ++k) {
    ManifoldPoint p{man, from.col(k)};
    const TangentVector dir{p, log_map(man, from.col(k), to.col(k))};
    out.col(k) = parallel_transport(p, dir, TangentVector{p, field.col(k)}).components;
  }
  return out;
}

Eigen::MatrixXd slice_ds(const Cylinder& u, int j) {
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

// Central s-derivative of a tangent-field stack at interior slice j.
Eigen::MatrixXd field_ds(const Cylinder& u, const std::vector<Eigen::MatrixXd>& f,
                         int j) {
  const Manifold& man = u.man();
  const double two_h = 2.0 * u.h_s;
  if (man.flat())
    return (f[static_cast<size_t>(j) + 1] - f[static_cast<size_t>(j) - 1]) / two_h;
  const Eigen::MatrixXd fp =
      transport_field(man, u.loops[static_cast<size_t>(j) + 1].nodes,
                      u.loops[static_cast<size_t>(j)].nodes,
                      f[static_cast<size_t>(j) + 1]);
  const Eigen::MatrixXd fm =
      transport_field(man, u.loops[static_cast<size_t>(j) - 1].nodes,
                      u.loops[static_cast<size_t>(j)].nodes,
                      f[static_cast<size_t>(j) - 1]);
  return (fp - fm) / two_h;
}

Eigen::MatrixXd curvature_term(const Manifold& man, const Eigen::MatrixXd& base,
                               const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                               const Eigen::MatrixXd& c) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(a.rows(), a.cols());
  if (man.flat()) return out;
  for (int k = 0; k < a.cols(); ++k) {
    ManifoldPoint p{man, base.col(k)};
    out.col(k) = curvature(p, TangentVector{p, a.col(k)}, TangentVector{p, b.col(k)},
                           TangentVector{p, c.col(k)})
                     .components;
  }
  return out;
}

// Residual of the first-order system at slice data (v as raw matrices).
// eps_t scales the t-derivative/potential part of the first slot, eps_c the
// coupling of the second slot: (1, eps^-2) gives the eps-system,
// (eps, eps^-1) the cotangent-side unit system.
PairField residual_with_weights(const Cylinder& u,
                                const std::vector<Eigen::MatrixXd>& v,
                                const Perturbation& P, double eps_t,
                                double eps_c) {
  PairField r{zero_cyl_field(u), zero_cyl_field(u)};
  if (u.ns() < 3) return r;
  guarded_parallel_for(u.ns() - 2, [&](std::int64_t idx) {
    const int j = static_cast<int>(idx) + 1;
    const DiscreteLoop& lp = u.loops[static_cast<size_t>(j)];
    const LoopField vf{lp, v[static_cast<size_t>(j)]};
    r.xi.slices[static_cast<size_t>(j)] =
        slice_ds(u, j) - eps_t * (nabla_t(vf).vectors + grad_V(lp, P).vectors);
    r.eta.slices[static_cast<size_t>(j)] =
        field_ds(u, v, j) +
        eps_c * (velocity(lp).vectors - v[static_cast<size_t>(j)]);
  });
  return r;
}

std::vector<Eigen::MatrixXd> velocity_mats(const CylinderPair& w) {
  std::vector<Eigen::MatrixXd> v(w.v.size());
  for (size_t j = 0; j < w.v.size(); ++j) v[j] = w.v[j].vectors;
  return v;
}

// Flattened interior layout shared with the assembled operator: the xi block
// ahead of the eta block, slices in order, nodes column-major inside a slice.
Eigen::VectorXd flatten_pair_interior(const Cylinder& u, const PairField& z) {
  const int ni = u.ns() - 2;
  const Eigen::Index m = static_cast<Eigen::Index>(u.dim()) * u.nt();
  Eigen::VectorXd out(2 * static_cast<Eigen::Index>(ni) * m);
  for (int j = 0; j < ni; ++j) {
    out.segment(j * m, m) = Eigen::Map<const Eigen::VectorXd>(
        z.xi.slices[static_cast<size_t>(j) + 1].data(), m);
    out.segment((ni + j) * m, m) = Eigen::Map<const Eigen::VectorXd>(
        z.eta.slices[static_cast<size_t>(j) + 1].data(), m);
  }
  return out;
}

Eigen::VectorXd flatten_pair_full(const Cylinder& u, const PairField& z) {
  const int ns = u.ns();
  const Eigen::Index m = static_cast<Eigen::Index>(u.dim()) * u.nt();
  Eigen::VectorXd out(2 * static_cast<Eigen::Index>(ns) * m);
  for (int j = 0; j < ns; ++j) {
    out.segment(j * m, m) =
        Eigen::Map<const Eigen::VectorXd>(z.xi.slices[static_cast<size_t>(j)].data(), m);
    out.segment((ns + j) * m, m) =
        Eigen::Map<const Eigen::VectorXd>(z.eta.slices[static_cast<size_t>(j)].data(), m);
  }
  return out;
}

PairField unflatten_pair_full(const Cylinder& u, const Eigen::VectorXd& vec) {
  const int ns = u.ns();
  const Eigen::Index m = static_cast<Eigen::Index>(u.dim()) * u.nt();
  PairField z{zero_cyl_field(u), zero_cyl_field(u)};
  for (int j = 0; j < ns; ++j) {
    z.xi.slices[static_cast<size_t>(j)] =
        Eigen::Map<const Eigen::MatrixXd>(vec.data() + j * m, u.dim(), u.nt());
    z.eta.slices[static_cast<size_t>(j)] = Eigen::Map<const Eigen::MatrixXd>(
        vec.data() + (ns + j) * m, u.dim(), u.nt());
  }
  return z;
}

void pair_axpy(PairField* z, const PairField& d, double a) {
  for (size_t j = 0; j < z->xi.slices.size(); ++j) {
    z->xi.slices[j] += a * d.xi.slices[j];
    z->eta.slices[j] += a * d.eta.slices[j];
  }
}

PairField pair_diff(const PairField& a, const PairField& b) {
  PairField out = a;
  pair_axpy(&out, b, -1.0);
  return out;
}

// (0,2,eps) inner product over all slices with weight h_s/N_t.
double pair_inner_eps(const Cylinder& u, const PairField& a, const PairField& b,
                      double eps) {
  const double nt = static_cast<double>(u.nt());
  const double e2 = eps * eps;
  const double acc = block_sum(u.ns(), [&](std::int64_t j) {
    const size_t sj = static_cast<size_t>(j);
    return (a.xi.slices[sj].cwiseProduct(b.xi.slices[sj]).sum() +
            e2 * a.eta.slices[sj].cwiseProduct(b.eta.slices[sj]).sum()) /
           nt;
  });
  return acc * u.h_s;
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

using Trip = Eigen::Triplet<double>;

void add_identity(std::vector<Trip>* T, int row0, int col0, int m, double v) {
  for (int i = 0; i < m; ++i) T->emplace_back(row0 + i, col0 + i, v);
}

// Central t-difference block scale*(f_{k+1} - f_{k-1})*N_t/2.
void add_central_t(std::vector<Trip>* T, int row0, int col0, int d, int n,
                   double scale) {
  const double v = scale * static_cast<double>(n) / 2.0;
  for (int k = 0; k < n; ++k) {
    const int kp = (k + 1) % n;
    const int km = (k + n - 1) % n;
    for (int i = 0; i < d; ++i) {
      const int r = row0 + k * d + i;
      T->emplace_back(r, col0 + kp * d + i, v);
      T->emplace_back(r, col0 + km * d + i, -v);
    }
  }
}

void add_dense_neg(std::vector<Trip>* T, int row0, int col0,
                   const Eigen::MatrixXd& B) {
  for (int c = 0; c < B.cols(); ++c)
    for (int r = 0; r < B.rows(); ++r)
      if (B(r, c) != 0.0) T->emplace_back(row0 + r, col0 + c, -B(r, c));
}

// Linearized first-order operator on interior rows.  With dirichlet columns
// the unknowns are the interior slices (fields vanishing at the ends) and
// the matrix is square; with free columns every slice is an unknown and the
// discrete translation kernel survives.
Eigen::SparseMatrix<double> assemble_eps_core(const Cylinder& u, double eps,
                                              const Perturbation& P,
                                              bool dirichlet) {
  const int ni = u.ns() - 2;
  const int d = u.dim();
  const int n = u.nt();
  const int m = d * n;
  const double ie2 = 1.0 / (eps * eps);
  const double hs2 = 2.0 * u.h_s;
  const int ncols = dirichlet ? ni : u.ns();
  const int eta_col0 = ncols * m;
  // Column index of slice j inside one block, or -1 when the slice is not an
  // unknown (Dirichlet wall).
  auto col_of = [&](int j) {
    if (!dirichlet) return j * m;
    return (j >= 1 && j <= ni) ? (j - 1) * m : -1;
  };
  std::vector<Eigen::MatrixXd> blocks(static_cast<size_t>(ni));
  guarded_parallel_for(ni, [&](std::int64_t idx) {
    blocks[static_cast<size_t>(idx)] =
        slice_hess_block(u.loops[static_cast<size_t>(idx) + 1], P);
  });
  std::vector<Trip> T;
  T.reserve(static_cast<size_t>(ni) * m * (9 + (P.archetypal ? m : d)));
  for (int j = 1; j <= ni; ++j) {
    const int row_xi = (j - 1) * m;
    const int row_eta = (ni + j - 1) * m;
    const int cm = col_of(j - 1);
    const int cp = col_of(j + 1);
    const int cj = col_of(j);
    // first slot: nabla_s xi - nabla_t eta - H xi
    if (cm >= 0) add_identity(&T, row_xi, cm, m, -1.0 / hs2);
    if (cp >= 0) add_identity(&T, row_xi, cp, m, 1.0 / hs2);
    add_central_t(&T, row_xi, eta_col0 + cj, d, n, -1.0);
    add_dense_neg(&T, row_xi, cj, blocks[static_cast<size_t>(j) - 1]);
    // second slot: nabla_s eta + eps^-2 (nabla_t xi - eta)
    if (cm >= 0) add_identity(&T, row_eta, eta_col0 + cm, m, -1.0 / hs2);
    if (cp >= 0) add_identity(&T, row_eta, eta_col0 + cp, m, 1.0 / hs2);
    add_central_t(&T, row_eta, cj, d, n, ie2);
    add_identity(&T, row_eta, eta_col0 + cj, m, -ie2);
  }
  Eigen::SparseMatrix<double> D(2 * static_cast<Eigen::Index>(ni) * m,
                                2 * static_cast<Eigen::Index>(ncols) * m);
  D.setFromTriplets(T.begin(), T.end());
  D.makeCompressed();
  return D;
}

Eigen::VectorXd weight_inv_blocks(int block, double eps) {
  Eigen::VectorXd w(2 * static_cast<Eigen::Index>(block));
  w.head(block).setOnes();
  w.tail(block).setConstant(1.0 / (eps * eps));
  return w;
}

// Shift field of the cylinder: (d_su, nabla_t d_su) on every slice, with
// one-sided s-differences at the walls (the free system keeps wall values).
PairField shift_field(const Cylinder& u) {
  PairField phi{zero_cyl_field(u), zero_cyl_field(u)};
  const Manifold& man = u.man();
  guarded_parallel_for(u.ns(), [&](std::int64_t idx) {
    const int j = static_cast<int>(idx);
    const size_t sj = static_cast<size_t>(j);
    Eigen::MatrixXd ds;
    if (j == 0 || j == u.ns() - 1) {
      const int ja = j == 0 ? 0 : u.ns() - 2;
      const Eigen::MatrixXd& a = u.loops[static_cast<size_t>(ja)].nodes;
      const Eigen::MatrixXd& b = u.loops[static_cast<size_t>(ja) + 1].nodes;
      ds.resize(u.dim(), u.nt());
      for (int k = 0; k < u.nt(); ++k)
        ds.col(k) = man.flat()
                        ? Eigen::VectorXd(wrap_diff(man, b.col(k) - a.col(k)) / u.h_s)
                        : Eigen::VectorXd(log_map(man, a.col(k), b.col(k)) / u.h_s);
      if (!man.flat() && j != 0)
        ds = transport_field(man, a, b, ds);
    } else {
      ds = slice_ds(u, j);
    }
    phi.xi.slices[sj] = ds;
    phi.eta.slices[sj] = nabla_t(LoopField{u.loops[sj], ds}).vectors;
  });
  return phi;
}

struct KernelData {
  PairField Z;
  double norm = 0.0;
};

// Projection of the shift field onto the kernel of the free-boundary
// linearization: the component orthogonal (in the (0,2,eps) product) to the
// range of the adjoint.  Spans the discrete translation direction.
KernelData kernel_field(const Cylinder& u, double eps, const Perturbation& P) {
  const PairField phi = shift_field(u);
  const Eigen::SparseMatrix<double> D = assemble_eps_core(u, eps, P, false);
  MinNormSolver solver(D, weight_inv_blocks(u.ns() * u.dim() * u.nt(), eps));
  const Eigen::VectorXd full = flatten_pair_full(u, phi);
  const Eigen::VectorXd step = solver.min_norm_step(D * full);
  KernelData out;
  out.Z = phi;
  pair_axpy(&out.Z, unflatten_pair_full(u, step), 1.0);
  out.norm = std::sqrt(std::max(pair_inner_eps(u, out.Z, out.Z, eps), 0.0));
  return out;
}

// (xi, eta) expressing the pair over the base cylinder (flat backends).
PairField deviation_pair(const Cylinder& u, const CylinderPair& w) {
  PairField z{zero_cyl_field(u), zero_cyl_field(u)};
  const Manifold& man = u.man();
  for (int j = 0; j < u.ns(); ++j) {
    const size_t sj = static_cast<size_t>(j);
    const Eigen::MatrixXd& a = u.loops[sj].nodes;
    const Eigen::MatrixXd& b = w.u.loops[sj].nodes;
    Eigen::MatrixXd xi(u.dim(), u.nt());
    for (int k = 0; k < u.nt(); ++k)
      xi.col(k) = wrap_diff(man, b.col(k) - a.col(k));
    z.xi.slices[sj] = xi;
    z.eta.slices[sj] = w.v[sj].vectors - velocity(u.loops[sj]).vectors;
  }
  return z;
}

void check_same_grid(const Cylinder& a, const Cylinder& b, const char* what) {
  if (a.ns() != b.ns() || a.nt() != b.nt() || !(a.man() == b.man()) ||
      std::abs(a.h_s - b.h_s) > 1e-12 * std::max(1.0, a.h_s))
    throw ArgumentError(std::string(what) + " needs matching cylinder grids");
}

double sup_wrap_distance(const Cylinder& a, const Cylinder& b) {
  double m = 0.0;
  const Manifold& man = a.man();
  for (int j = 0; j < a.ns(); ++j)
    for (int k = 0; k < a.nt(); ++k)
      m = std::max(m, wrap_diff(man, a.loops[static_cast<size_t>(j)].nodes.col(k) -
                                         b.loops[static_cast<size_t>(j)].nodes.col(k))
                          .norm());
  return m;
}

CylinderPair assemble_pair(const Cylinder& u, const std::vector<LoopField>& v0,
                           const PairField& z, double eps, bool exact) {
  CylinderPair out;
  out.u = u;
  const Manifold& man = u.man();
  for (int j = 0; j < u.ns(); ++j) {
    const size_t sj = static_cast<size_t>(j);
    Eigen::MatrixXd& nodes = out.u.loops[sj].nodes;
    nodes += z.xi.slices[sj];
    for (int k = 0; k < nodes.cols(); ++k)
      nodes.col(k) = normalize_point(man, nodes.col(k)).coords;
  }
  out.v.resize(static_cast<size_t>(u.ns()));
  for (int j = 0; j < u.ns(); ++j) {
    const size_t sj = static_cast<size_t>(j);
    out.v[sj] = LoopField{out.u.loops[sj], v0[sj].vectors + z.eta.slices[sj]};
  }
  out.eps = eps;
  out.exact = exact;
  return out;
}

}  // namespace

PairField zero_pair_field(const Cylinder& u) {
  return PairField{zero_cyl_field(u), zero_cyl_field(u)};
}

double pair_sup_norm(const PairField& z) {
  return std::max(field_sup(z.xi), field_sup(z.eta));
}

double pair_norm_0(const Cylinder& u, const PairField& z, double p, double eps) {
  if (!(p >= 1.0)) throw ArgumentError("norm exponent must be at least one");
  if (!(eps > 0.0)) throw ArgumentError("eps must be positive");
  const double nx = cyl_lp_norm(u, z.xi, p);
  const double ny = eps * cyl_lp_norm(u, z.eta, p);
  return std::pow(std::pow(nx, p) + std::pow(ny, p), 1.0 / p);
}

std::vector<LoopField> cylinder_velocities(const Cylinder& u) {
  std::vector<LoopField> v(static_cast<size_t>(u.ns()));
  guarded_parallel_for(u.ns(), [&](std::int64_t j) {
    v[static_cast<size_t>(j)] = velocity(u.loops[static_cast<size_t>(j)]);
  });
  return v;
}

EpsNorms eps_norms(const Cylinder& u, const PairField& z, double p, double eps) {
  check_p(p);
  check_eps(eps);
  check_pair_field(u, z, "pair field");
  const int ns = u.ns();
  CylField dtxi = zero_cyl_field(u);
  CylField dteta = zero_cyl_field(u);
  CylField dsxi = zero_cyl_field(u);
  CylField dseta = zero_cyl_field(u);
  CylField gap = zero_cyl_field(u);
  guarded_parallel_for(ns, [&](std::int64_t idx) {
    const int j = static_cast<int>(idx);
    const size_t sj = static_cast<size_t>(j);
    const DiscreteLoop& lp = u.loops[sj];
    dtxi.slices[sj] = nabla_t(LoopField{lp, z.xi.slices[sj]}).vectors;
    dteta.slices[sj] = nabla_t(LoopField{lp, z.eta.slices[sj]}).vectors;
    if (j >= 1 && j + 1 < ns) {
      dsxi.slices[sj] = field_ds(u, z.xi.slices, j);
      dseta.slices[sj] = field_ds(u, z.eta.slices, j);
    }
    gap.slices[sj] = z.eta.slices[sj] - dtxi.slices[sj];
  });
  EpsNorms out;
  out.p = p;
  out.eps = eps;
  out.n0 = pair_norm_0(u, z, p, eps);
  const double xi_p = cyl_lp_norm(u, z.xi, p);
  const double eta_p = cyl_lp_norm(u, z.eta, p);
  const double dtxi_p = cyl_lp_norm(u, dtxi, p);
  const double dteta_p = cyl_lp_norm(u, dteta, p);
  const double dsxi_p = cyl_lp_norm(u, dsxi, p);
  const double dseta_p = cyl_lp_norm(u, dseta, p);
  auto powp = [&](double a) { return std::pow(a, p); };
  out.n1 = std::pow(powp(xi_p) + powp(eps * eta_p) + powp(eps * dtxi_p) +
                        powp(eps * eps * dteta_p) + powp(eps * eps * dsxi_p) +
                        powp(eps * eps * eps * dseta_p),
                    1.0 / p);
  out.triple = xi_p + std::sqrt(eps) * eta_p + std::sqrt(eps) * dtxi_p +
               cyl_lp_norm(u, gap, p) + eps * eps * dseta_p + eps * dteta_p +
               eps * dsxi_p + std::pow(eps, 1.5 / p) * field_sup(z.xi) +
               std::pow(eps, 0.5 + 2.0 / p) * field_sup(z.eta);
  return out;
}

void validate_pair(const CylinderPair& w, const Perturbation& P) {
  const Cylinder& u = w.u;
  if (u.ns() < 3) throw ArgumentError("pair needs at least three slices");
  if (!(u.h_s > 0.0) || !(u.S > 0.0))
    throw ArgumentError("pair grid scales must be positive");
  if (std::abs(u.h_s * (u.ns() - 1) - 2.0 * u.S) > 1e-9 * std::max(1.0, u.S))
    throw ArgumentError("slice count does not match the truncation length");
  check_eps(w.eps);
  for (const DiscreteLoop& lp : u.loops) {
    validate_loop(lp);
    if (!(lp.man == u.man()) || lp.nt() != u.nt())
      throw ArgumentError("pair slices disagree on grid or manifold");
  }
  check_velocities(u, w.v);
  for (int j = 0; j < u.ns(); ++j)
    if (loop_distance(w.v[static_cast<size_t>(j)].base, u.loops[static_cast<size_t>(j)]) >
        1e-9)
      throw ArgumentError("velocity field detached from its slice");
  if (loop_distance(u.loops.front(), u.xminus.loop) > 1e-6)
    throw HypothesisViolated("first slice detached from the left endpoint orbit");
  if (loop_distance(u.loops.back(), u.xplus.loop) > 1e-6)
    throw HypothesisViolated("last slice detached from the right endpoint orbit");
  if (w.exact) {
    const double res = pair_norm_0(u, floer_residual(w, P), 2.0, w.eps);
    if (!(res <= kExactResidual))
      throw HypothesisViolated("exact-flagged pair has residual " +
                               std::to_string(res));
  }
}

PairField floer_residual(const CylinderPair& w, const Perturbation& P) {
  check_eps(w.eps);
  check_velocities(w.u, w.v);
  return residual_with_weights(w.u, velocity_mats(w), P, 1.0,
                               1.0 / (w.eps * w.eps));
}

PairField cotangent_residual(const CylinderPair& w, const Perturbation& P) {
  check_eps(w.eps);
  check_velocities(w.u, w.v);
  return residual_with_weights(w.u, velocity_mats(w), P, w.eps, 1.0 / w.eps);
}

PairField pullback_F(const Cylinder& u, const std::vector<LoopField>& v0,
                     const PairField& zeta, double eps, const Perturbation& P) {
  check_eps(eps);
  check_velocities(u, v0);
  check_pair_field(u, zeta, "pair field");
  if (field_sup(zeta.xi) >= chart_radius(u.man()))
    throw InjectivityRadiusExceeded("deformation exceeds the chart radius");
  const Manifold& man = u.man();
  const int ns = u.ns();
  Cylinder u2 = u;
  std::vector<Eigen::MatrixXd> v2(static_cast<size_t>(ns));
  guarded_parallel_for(ns, [&](std::int64_t idx) {
    const size_t sj = static_cast<size_t>(idx);
    const Eigen::MatrixXd& xi = zeta.xi.slices[sj];
    const Eigen::MatrixXd& eta = zeta.eta.slices[sj];
    Eigen::MatrixXd& nodes = u2.loops[sj].nodes;
    if (man.flat()) {
      nodes += xi;
      for (int k = 0; k < nodes.cols(); ++k)
        nodes.col(k) = normalize_point(man, nodes.col(k)).coords;
      v2[sj] = v0[sj].vectors + eta;
    } else {
      Eigen::MatrixXd moved(nodes.rows(), nodes.cols());
      Eigen::MatrixXd vtrans(nodes.rows(), nodes.cols());
      for (int k = 0; k < nodes.cols(); ++k) {
        ManifoldPoint p{man, nodes.col(k)};
        const TangentVector dir{p, xi.col(k)};
        moved.col(k) = exp_map(p, dir).coords;
        vtrans.col(k) =
            parallel_transport(p, dir,
                               TangentVector{p, v0[sj].vectors.col(k) + eta.col(k)})
                .components;
      }
      nodes = moved;
      v2[sj] = vtrans;
    }
  });
  PairField res = residual_with_weights(u2, v2, P, 1.0, 1.0 / (eps * eps));
  if (!man.flat()) {
    guarded_parallel_for(ns, [&](std::int64_t idx) {
      const size_t sj = static_cast<size_t>(idx);
      res.xi.slices[sj] = transport_field(man, u2.loops[sj].nodes,
                                          u.loops[sj].nodes, res.xi.slices[sj]);
      res.eta.slices[sj] = transport_field(man, u2.loops[sj].nodes,
                                           u.loops[sj].nodes, res.eta.slices[sj]);
    });
  }
  return res;
}

PairField apply_D_eps(const Cylinder& u, const std::vector<LoopField>& v,
                      const PairField& zeta, double eps, const Perturbation& P) {
  check_eps(eps);
  check_velocities(u, v);
  check_pair_field(u, zeta, "pair field");
  PairField out{zero_cyl_field(u), zero_cyl_field(u)};
  if (u.ns() < 3) return out;
  const Manifold& man = u.man();
  const double ie2 = 1.0 / (eps * eps);
  guarded_parallel_for(u.ns() - 2, [&](std::int64_t idx) {
    const int j = static_cast<int>(idx) + 1;
    const size_t sj = static_cast<size_t>(j);
    const DiscreteLoop& lp = u.loops[sj];
    const Eigen::MatrixXd& xi = zeta.xi.slices[sj];
    const Eigen::MatrixXd& eta = zeta.eta.slices[sj];
    const Eigen::MatrixXd dtxi = nabla_t(LoopField{lp, xi}).vectors;
    const Eigen::MatrixXd dteta = nabla_t(LoopField{lp, eta}).vectors;
    Eigen::MatrixXd first = field_ds(u, zeta.xi.slices, j) - dteta -
                            hess_V(lp, LoopField{lp, xi}, P).vectors;
    Eigen::MatrixXd second =
        field_ds(u, zeta.eta.slices, j) + ie2 * (dtxi - eta);
    if (!man.flat()) {
      const Eigen::MatrixXd vel = velocity(lp).vectors;
      const Eigen::MatrixXd ds = slice_ds(u, j);
      first -= curvature_term(man, lp.nodes, xi, vel, v[sj].vectors);
      second += curvature_term(man, lp.nodes, xi, ds, v[sj].vectors);
    }
    out.xi.slices[sj] = first;
    out.eta.slices[sj] = second;
  });
  return out;
}

PairField apply_D_eps_adjoint(const Cylinder& u, const std::vector<LoopField>& v,
                              const PairField& zeta, double eps,
                              const Perturbation& P) {
  check_eps(eps);
  check_velocities(u, v);
  check_pair_field(u, zeta, "pair field");
  PairField out{zero_cyl_field(u), zero_cyl_field(u)};
  if (u.ns() < 3) return out;
  const Manifold& man = u.man();
  const double ie2 = 1.0 / (eps * eps);
  guarded_parallel_for(u.ns() - 2, [&](std::int64_t idx) {
    const int j = static_cast<int>(idx) + 1;
    const size_t sj = static_cast<size_t>(j);
    const DiscreteLoop& lp = u.loops[sj];
    const Eigen::MatrixXd& xi = zeta.xi.slices[sj];
    const Eigen::MatrixXd& eta = zeta.eta.slices[sj];
    const Eigen::MatrixXd dtxi = nabla_t(LoopField{lp, xi}).vectors;
    const Eigen::MatrixXd dteta = nabla_t(LoopField{lp, eta}).vectors;
    Eigen::MatrixXd first = -field_ds(u, zeta.xi.slices, j) - dteta -
                            hess_V(lp, LoopField{lp, xi}, P).vectors;
    Eigen::MatrixXd second =
        -field_ds(u, zeta.eta.slices, j) + ie2 * (dtxi - eta);
    if (!man.flat()) {
      const Eigen::MatrixXd vel = velocity(lp).vectors;
      const Eigen::MatrixXd ds = slice_ds(u, j);
      first -= curvature_term(man, lp.nodes, xi, v[sj].vectors, vel);
      first += eps * eps * curvature_term(man, lp.nodes, eta, v[sj].vectors, ds);
    }
    out.xi.slices[sj] = first;
    out.eta.slices[sj] = second;
  });
  return out;
}

Eigen::SparseMatrix<double> assemble_D_eps(const Cylinder& u, double eps,
                                           const Perturbation& P) {
  require_flat(u.man(), "the assembled linearization");
  check_eps(eps);
  if (u.ns() < 3) throw ArgumentError("cylinder needs at least three slices");
  return assemble_eps_core(u, eps, P, false);
}

Eigen::VectorXd eps_weight_inv(const Cylinder& u, double eps) {
  check_eps(eps);
  return weight_inv_blocks(u.ns() * u.dim() * u.nt(), eps);
}

LoopField pi_eps(const DiscreteLoop& x, const LoopField& xi, const LoopField& eta,
                 double eps) {
  if (!(eps > 0.0)) throw ArgumentError("eps must be positive");
  if (xi.vectors.rows() != x.nodes.rows() || xi.vectors.cols() != x.nodes.cols() ||
      eta.vectors.rows() != x.nodes.rows() || eta.vectors.cols() != x.nodes.cols())
    throw ArgumentError("projection fields do not match the loop grid");
  const int n = x.nt();
  LoopField out = zero_field(x);
  if (x.man.flat()) {
    const double e2 = eps * eps;
    std::vector<double> row(static_cast<size_t>(n));
    for (int i = 0; i < x.nodes.rows(); ++i) {
      for (int k = 0; k < n; ++k) row[static_cast<size_t>(k)] = eta.vectors(i, k);
      const std::vector<double> deta = spectral_derivative(row, 1);
      for (int k = 0; k < n; ++k)
        row[static_cast<size_t>(k)] =
            xi.vectors(i, k) - e2 * deta[static_cast<size_t>(k)];
      const std::vector<double> res =
          apply_symbol(row, [&](double w) { return 1.0 / (1.0 + eps * w); });
      for (int k = 0; k < n; ++k) out.vectors(i, k) = res[static_cast<size_t>(k)];
    }
    return out;
  }
  const std::vector<Eigen::MatrixXd> frames = tangent_frames(x);
  const int td = tangent_dim(x.man);
  const Eigen::Index m = static_cast<Eigen::Index>(td) * n;
  Eigen::MatrixXd M(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(m);
    e[i] = 1.0;
    const LoopField basis = coeffs_to_field(x, frames, e);
    const Eigen::MatrixXd lap = apply_laplace3(x, basis.vectors);
    M.col(i) = e - eps * field_to_coeffs(LoopField{x, lap}, frames);
  }
  const Eigen::MatrixXd rhs_field =
      xi.vectors - eps * eps * nabla_t(eta).vectors;
  const Eigen::VectorXd rhs = field_to_coeffs(LoopField{x, rhs_field}, frames);
  const Eigen::VectorXd sol = M.partialPivLu().solve(rhs);
  return coeffs_to_field(x, frames, sol);
}

CylinderPair newton_picard_lift(const Cylinder& u, double eps, double p,
                                const Perturbation& P, LiftReport* report) {
  require_flat(u.man(), "the lift iteration");
  check_eps(eps);
  check_p(p);
  validate_cylinder(u, P);
  const std::vector<LoopField> v0 = cylinder_velocities(u);
  std::vector<Eigen::MatrixXd> v0m(v0.size());
  for (size_t j = 0; j < v0.size(); ++j) v0m[j] = v0[j].vectors;

  LiftReport rep;
  PairField Z = zero_pair_field(u);
  PairField F = residual_with_weights(u, v0m, P, 1.0, 1.0 / (eps * eps));
  double fn = pair_norm_0(u, F, p, eps);
  rep.residual_history.push_back(fn);
  bool converged = fn < kLiftTol;

  if (!converged) {
    MinNormSolver solver(assemble_D_eps(u, eps, P), eps_weight_inv(u, eps));
    for (int nu = 0; nu < kLiftMaxIter && !converged; ++nu) {
      const Eigen::VectorXd step =
          solver.min_norm_step(flatten_pair_interior(u, F));
      const PairField dz = unflatten_pair_full(u, step);
      double alpha = 1.0;
      bool accepted = false;
      PairField Zc = Z;
      PairField Fc = F;
      double fc = fn;
      for (int half = 0; half <= kLiftMaxHalvings; ++half) {
        Zc = Z;
        pair_axpy(&Zc, dz, alpha);
        try {
          Fc = pullback_F(u, v0, Zc, eps, P);
        } catch (const InjectivityRadiusExceeded&) {
          alpha *= 0.5;
          continue;
        }
        fc = pair_norm_0(u, Fc, p, eps);
        if (fc < fn) {
          accepted = true;
          break;
        }
        alpha *= 0.5;
      }
      if (!accepted)
        throw IterationDiverged("damped correction cannot reduce the residual");
      PairField applied = zero_pair_field(u);
      pair_axpy(&applied, dz, alpha);
      rep.correction_history.push_back(eps_norms(u, applied, p, eps).triple);
      const size_t nc = rep.correction_history.size();
      if (nc >= 3 &&
          rep.correction_history[nc - 1] > rep.correction_history[nc - 2] &&
          rep.correction_history[nc - 2] > rep.correction_history[nc - 3])
        throw IterationDiverged("correction norms stopped contracting");
      Z = Zc;
      F = Fc;
      fn = fc;
      rep.residual_history.push_back(fn);
      if (!(fn < 1e6))
        throw IterationDiverged("residual left the basin of the seed");
      converged = fn < kLiftTol;
    }
    if (!converged)
      throw IterationDiverged("no convergence within the iteration budget");
  }

  rep.iterations = static_cast<int>(rep.correction_history.size());
  rep.converged = converged;
  rep.correction_total = eps_norms(u, Z, p, eps).triple;
  if (report != nullptr) *report = rep;
  return assemble_pair(u, v0, Z, eps, fn < kExactResidual);
}

double energy_eps(const CylinderPair& w, const Perturbation& P) {
  check_eps(w.eps);
  check_velocities(w.u, w.v);
  const Cylinder& u = w.u;
  if (u.ns() < 2) return 0.0;
  const Manifold& man = u.man();
  const int ns = u.ns();
  const int nt = u.nt();
  const double e2 = w.eps * w.eps;
  // Per-slice nodal squares of the t-part and the coupling defect.
  std::vector<Eigen::ArrayXd> tpart(static_cast<size_t>(ns));
  std::vector<Eigen::ArrayXd> defect(static_cast<size_t>(ns));
  guarded_parallel_for(ns, [&](std::int64_t idx) {
    const size_t sj = static_cast<size_t>(idx);
    const DiscreteLoop& lp = u.loops[sj];
    const Eigen::MatrixXd a =
        nabla_t(w.v[sj]).vectors + grad_V(lp, P).vectors;
    const Eigen::MatrixXd b = velocity(lp).vectors - w.v[sj].vectors;
    tpart[sj] = a.colwise().squaredNorm().transpose();
    defect[sj] = b.colwise().squaredNorm().transpose();
  });
  // Cell quadrature: forward differences live at the cell midpoint, nodal
  // terms are averaged onto it, so the sum is exactly additive over
  // s-subintervals.
  const double acc = block_sum(ns - 1, [&](std::int64_t idx) {
    const int j = static_cast<int>(idx);
    const size_t sj = static_cast<size_t>(j);
    const Eigen::MatrixXd& a = u.loops[sj].nodes;
    const Eigen::MatrixXd& b = u.loops[sj + 1].nodes;
    double cell = 0.0;
    for (int k = 0; k < nt; ++k) {
      Eigen::VectorXd du;
      Eigen::VectorXd dv;
      if (man.flat()) {
        du = wrap_diff(man, b.col(k) - a.col(k)) / u.h_s;
        dv = (w.v[sj + 1].vectors.col(k) - w.v[sj].vectors.col(k)) / u.h_s;
      } else {
        du = log_map(man, a.col(k), b.col(k)) / u.h_s;
        ManifoldPoint pb{man, b.col(k)};
        const TangentVector dir{pb, log_map(man, b.col(k), a.col(k))};
        dv = (parallel_transport(pb, dir,
                                 TangentVector{pb, w.v[sj + 1].vectors.col(k)})
                  .components -
              w.v[sj].vectors.col(k)) /
             u.h_s;
      }
      cell += du.squaredNorm() + e2 * dv.squaredNorm() +
              0.5 * (tpart[sj][k] + tpart[sj + 1][k]) +
              0.5 * (defect[sj][k] + defect[sj + 1][k]) / e2;
    }
    return cell / nt;
  });
  return 0.5 * acc * u.h_s;
}

bool verify_uniqueness(const Cylinder& u, const CylinderPair& w1,
                       const CylinderPair& w2, double eps, const Perturbation& P) {
  require_flat(u.man(), "the uniqueness check");
  check_eps(eps);
  check_same_grid(u, w1.u, "the uniqueness check");
  check_same_grid(u, w2.u, "the uniqueness check");
  if (!w1.exact || !w2.exact)
    throw ArgumentError("uniqueness check needs exact-flagged pairs");
  if (w1.eps != eps || w2.eps != eps)
    throw ArgumentError("pairs disagree with the requested eps");
  const PairField z1 = deviation_pair(u, w1);
  const PairField z2 = deviation_pair(u, w2);
  const double tube = kTubeRadius * std::sqrt(eps);
  if (field_sup(z1.xi) > tube || field_sup(z2.xi) > tube)
    throw ArgumentError("pair sits outside the uniqueness tube");
  const KernelData ker = kernel_field(u, eps, P);
  for (const PairField* z : {&z1, &z2}) {
    const double zn = std::sqrt(std::max(pair_inner_eps(u, *z, *z, eps), 0.0));
    if (zn < 1e-300 || ker.norm < 1e-300) continue;
    const double defect =
        std::abs(pair_inner_eps(u, ker.Z, *z, eps)) / (ker.norm * zn);
    if (defect > kKernelDefectTol)
      throw HypothesisViolated(
          "deviation has a kernel component outside the adjoint range, size " +
          std::to_string(defect));
  }
  double dist = sup_wrap_distance(w1.u, w2.u);
  for (int j = 0; j < u.ns(); ++j)
    for (int k = 0; k < u.nt(); ++k)
      dist = std::max(dist, (w1.v[static_cast<size_t>(j)].vectors.col(k) -
                             w2.v[static_cast<size_t>(j)].vectors.col(k))
                                .norm());
  return dist < kPairDistanceTol;
}

double fit_time_shift(const Cylinder& u, const CylinderPair& w, double eps,
                      double p, const Perturbation& P, double sigma_max,
                      double* c_measured) {
  require_flat(u.man(), "the time-shift fit");
  check_eps(eps);
  check_p(p);
  if (!(sigma_max > 0.0)) throw ArgumentError("shift bracket must be positive");
  check_same_grid(u, w.u, "the time-shift fit");
  if (w.eps != eps) throw ArgumentError("pair disagrees with the requested eps");
  const PairField z0 = deviation_pair(u, w);
  if (field_sup(z0.xi) > kTubeRadius * std::sqrt(eps))
    throw ArgumentError("pair sits outside the shift tube of the cylinder");

  auto theta = [&](double sigma) {
    const Cylinder us = shift_cylinder(u, P, sigma);
    const KernelData ker = kernel_field(us, eps, P);
    const PairField zs = deviation_pair(us, w);
    if (field_sup(zs.xi) >= kFlatChartRadius)
      throw InjectivityRadiusExceeded("shifted deviation leaves the chart");
    return -pair_inner_eps(us, ker.Z, zs, eps);
  };

  std::vector<std::pair<double, double>> evals;
  auto eval = [&](double sigma) {
    const double th = theta(sigma);
    evals.emplace_back(sigma, th);
    return th;
  };

  double a = -sigma_max;
  double b = sigma_max;
  double fa = eval(a);
  double fb = eval(b);
  if (fa > 0.0 && fb < 0.0)
    throw NotMonotone("theta decreases across the shift bracket");
  if (!(fa < 0.0) || !(fb > 0.0))
    throw NoRoot("theta does not change sign across the shift bracket");
  double root = 0.0;
  double prev_s = a;
  double prev_f = fa;
  double cur_s = b;
  double cur_f = fb;
  for (int it = 0; it < 60; ++it) {
    double cand;
    const double df = cur_f - prev_f;
    if (df != 0.0) {
      cand = cur_s - cur_f * (cur_s - prev_s) / df;
      if (!(cand > a) || !(cand < b)) cand = 0.5 * (a + b);
    } else {
      cand = 0.5 * (a + b);
    }
    const double fc = eval(cand);
    prev_s = cur_s;
    prev_f = cur_f;
    cur_s = cand;
    cur_f = fc;
    if (fc == 0.0) {
      a = b = cand;
    } else if (fc < 0.0) {
      a = cand;
      fa = fc;
    } else {
      b = cand;
      fb = fc;
    }
    root = 0.5 * (a + b);
    if (b - a <= 1e-12) break;
  }
  std::sort(evals.begin(), evals.end());
  double scale = 0.0;
  for (const auto& e : evals) scale = std::max(scale, std::abs(e.second));
  for (size_t i = 0; i + 1 < evals.size(); ++i)
    if (evals[i + 1].second < evals[i].second - 1e-10 * (1.0 + scale))
      throw NotMonotone("theta is not monotone across the shift bracket");
  if (c_measured != nullptr) {
    const double denom = cyl_lp_norm(u, z0.xi, p) + eps * eps;
    *c_measured = denom > 0.0 ? std::abs(root) / denom : 0.0;
  }
  return root;
}

std::vector<CylinderPair> enumerate_M_eps(const PeriodicOrbit& xminus,
                                          const PeriodicOrbit& xplus, double eps,
                                          const Perturbation& P,
                                          const EpsEnumOptions& opts) {
  check_eps(eps);
  check_p(opts.p);
  const int diff = xminus.index - xplus.index;
  if (diff != 1)
    throw IndexMismatch("index difference is " + std::to_string(diff) +
                        ", the continuation count needs exactly one");
  const std::vector<Cylinder> reps = enumerate_M0(xminus, xplus, P, opts.m0_grid);
  std::vector<CylinderPair> out;
  out.reserve(reps.size());
  for (const Cylinder& rep : reps) {
    const std::vector<LoopField> v0 = cylinder_velocities(rep);
    std::vector<Eigen::MatrixXd> v0m(v0.size());
    for (size_t j = 0; j < v0.size(); ++j) v0m[j] = v0[j].vectors;
    const PairField f0 =
        residual_with_weights(rep, v0m, P, 1.0, 1.0 / (eps * eps));
    if (pair_norm_0(rep, f0, opts.p, eps) < kLiftTol) {
      out.push_back(newton_picard_lift(rep, eps, opts.p, P));
      continue;
    }
    const int ns2 =
        2 * static_cast<int>(std::llround(opts.lift_S / opts.lift_hs)) + 1;
    const Cylinder coarse =
        regrid_cylinder(rep, P, opts.lift_S, ns2, opts.lift_nt);
    out.push_back(newton_picard_lift(coarse, eps, opts.p, P));
  }
  // Pairwise distinctness after the optimal shift alignment.
  for (size_t i = 0; i < out.size(); ++i) {
    for (size_t j = i + 1; j < out.size(); ++j) {
      const Cylinder& ua = out[i].u;
      const Cylinder& ub = out[j].u;
      if (ua.ns() != ub.ns() || ua.nt() != ub.nt()) continue;
      auto dist_at = [&](double sigma) {
        return sup_wrap_distance(ua, shift_cylinder(ub, P, sigma));
      };
      double best_s = 0.0;
      double best = std::numeric_limits<double>::max();
      for (int k = -6; k <= 6; ++k) {
        const double s = 0.05 * k;
        const double d = dist_at(s);
        if (d < best) {
          best = d;
          best_s = s;
        }
      }
      double lo = best_s - 0.05;
      double hi = best_s + 0.05;
      const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
      double x1 = hi - gr * (hi - lo);
      double x2 = lo + gr * (hi - lo);
      double f1 = dist_at(x1);
      double f2 = dist_at(x2);
      for (int it = 0; it < 40; ++it) {
        if (f1 <= f2) {
          hi = x2;
          x2 = x1;
          f2 = f1;
          x1 = hi - gr * (hi - lo);
          f1 = dist_at(x1);
        } else {
          lo = x1;
          x1 = x2;
          f1 = f2;
          x2 = lo + gr * (hi - lo);
          f2 = dist_at(x2);
        }
      }
      best = std::min(best, std::min(f1, f2));
      if (best < 1e-6)
        throw HypothesisViolated("two lifts coincide after shift alignment");
    }
  }
  return out;
}

QuadraticRemainders quadratic_remainder_measure(const Cylinder& u,
                                                const std::vector<LoopField>& v,
                                                const PairField& Z,
                                                const PairField& zeta, double eps,
                                                double p, const Perturbation& P) {
  check_eps(eps);
  check_p(p);
  check_velocities(u, v);
  check_pair_field(u, Z, "pair field");
  check_pair_field(u, zeta, "pair field");
  QuadraticRemainders out;
  const double zsup = pair_sup_norm(zeta);
  if (zsup == 0.0) return out;
  const double eps32 = std::pow(eps, 1.5);

  const PairField FZ = pullback_F(u, v, Z, eps, P);
  PairField Zpz = Z;
  pair_axpy(&Zpz, zeta, 1.0);
  const PairField FZz = pullback_F(u, v, Zpz, eps, P);
  const PairField dF0z = apply_D_eps(u, v, zeta, eps, P);

  PairField dFZz = dF0z;
  if (pair_sup_norm(Z) > 0.0) {
    const double tau = 1e-4 / zsup;
    PairField fwd = Z;
    pair_axpy(&fwd, zeta, tau);
    PairField bwd = Z;
    pair_axpy(&bwd, zeta, -tau);
    const PairField Fp = pullback_F(u, v, fwd, eps, P);
    const PairField Fm = pullback_F(u, v, bwd, eps, P);
    dFZz = pair_diff(Fp, Fm);
    for (size_t j = 0; j < dFZz.xi.slices.size(); ++j) {
      dFZz.xi.slices[j] /= 2.0 * tau;
      dFZz.eta.slices[j] /= 2.0 * tau;
    }
  }

  PairField taylor = pair_diff(FZz, FZ);
  pair_axpy(&taylor, dFZz, -1.0);
  out.taylor = pair_norm_0(u, taylor, p, eps32);
  out.variation = pair_norm_0(u, pair_diff(dFZz, dF0z), p, eps32);

  const double tz = eps_norms(u, zeta, p, eps).triple;
  const double tZ = eps_norms(u, Z, p, eps).triple;
  const double xi_inf = field_sup(zeta.xi);
  const double eta_inf = field_sup(zeta.eta);
  out.taylor_bound =
      tz * (xi_inf / std::sqrt(eps) + xi_inf * xi_inf / eps) +
      std::pow(eps, -1.0 - 1.5 / p) * tZ * tz *
          (xi_inf + std::sqrt(eps) * eta_inf);
  out.variation_bound = (std::pow(eps, -0.5 - 1.5 / p) * tZ +
                         std::pow(eps, -1.0 - 3.5 / p) * tZ * tZ) *
                        tz;
  return out;
}

}  // namespace morseflow
