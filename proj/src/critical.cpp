#include "morseflow/critical.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "morseflow/errors.hpp"

namespace morseflow {
namespace {

// nabla_t nabla_t on the compact 3-point stencil (ambient differences,
// projected at the center node).
LoopField laplace3(const LoopField& xi) {
  const int n = xi.nt();
  const double h2 = xi.base.h() * xi.base.h();
  LoopField out = zero_field(xi.base);
  for (int k = 0; k < n; ++k) {
    int kp = (k + 1) % n;
    int km = (k + n - 1) % n;
    Eigen::VectorXd d =
        xi.vectors.col(kp) - 2.0 * xi.vectors.col(k) + xi.vectors.col(km);
    out.vectors.col(k) =
        project_tangent(xi.base.man, xi.base.nodes.col(k), d / h2);
  }
  return out;
}

Eigen::VectorXd curvature_term(const Manifold& man, const Eigen::VectorXd& p,
                               const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                               const Eigen::VectorXd& c) {
  if (man.flat()) return Eigen::VectorXd::Zero(p.size());
  return b.dot(c) * a - a.dot(c) * b;
}

// A(x) xi with the compact stencil.
LoopField apply_A_compact(const DiscreteLoop& x, const Perturbation& P,
                          const LoopField& xi) {
  LoopField out = laplace3(xi);
  out.vectors = -out.vectors;
  LoopField h = hess_V(x, xi, P);
  LoopField v = velocity(x);
  for (int k = 0; k < x.nt(); ++k) {
    out.vectors.col(k) -=
        curvature_term(x.man, x.nodes.col(k), xi.vectors.col(k), v.vectors.col(k),
                       v.vectors.col(k)) +
        h.vectors.col(k);
  }
  return out;
}

// Linearization of the critical-equation residual along xi (the negative of
// the wide-stencil second variation, matching the residual's own stencil).
LoopField apply_residual_jacobian(const DiscreteLoop& x, const Perturbation& P,
                                  const LoopField& xi) {
  LoopField out = nabla_t(nabla_t(xi));
  LoopField h = hess_V(x, xi, P);
  LoopField v = velocity(x);
  for (int k = 0; k < x.nt(); ++k) {
    out.vectors.col(k) +=
        curvature_term(x.man, x.nodes.col(k), xi.vectors.col(k), v.vectors.col(k),
                       v.vectors.col(k)) +
        h.vectors.col(k);
  }
  return out;
}

template <typename ApplyFn>
Eigen::MatrixXd assemble_matrix(const DiscreteLoop& x,
                                const std::vector<Eigen::MatrixXd>& frames,
                                ApplyFn&& apply) {
  const int dt = tangent_dim(x.man);
  const int m = dt * x.nt();
  Eigen::MatrixXd mat(m, m);
  LoopField basis = zero_field(x);
  for (int col = 0; col < m; ++col) {
    int k = col / dt;
    int a = col % dt;
    basis.vectors.setZero();
    basis.vectors.col(k) = frames[static_cast<size_t>(k)].col(a);
    LoopField img = apply(basis);
    mat.col(col) = field_to_coeffs(img, frames);
  }
  return mat;
}

bool lex_less(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  for (int k = 0; k < a.cols(); ++k) {
    for (int i = 0; i < a.rows(); ++i) {
      double x = a(i, k), y = b(i, k);
      if (x != y) return x < y;
    }
  }
  return false;
}

bool winding_less(const Eigen::VectorXi& a, const Eigen::VectorXi& b) {
  for (int i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return a[i] < b[i];
  return false;
}

}  // namespace

LoopField orbit_residual_field(const DiscreteLoop& x, const Perturbation& P) {
  LoopField r = nabla_t(velocity(x));
  LoopField g = grad_V(x, P);
  r.vectors += g.vectors;
  return r;
}

double orbit_residual(const DiscreteLoop& x, const Perturbation& P) {
  return sup_norm(orbit_residual_field(x, P).vectors);
}

int tangent_dim(const Manifold& man) { return man.flat() ? man.torus_dim : 2; }

std::vector<Eigen::MatrixXd> tangent_frames(const DiscreteLoop& x) {
  const int n = x.nt();
  std::vector<Eigen::MatrixXd> frames(static_cast<size_t>(n));
  if (x.man.flat()) {
    for (int k = 0; k < n; ++k)
      frames[static_cast<size_t>(k)] =
          Eigen::MatrixXd::Identity(x.man.torus_dim, x.man.torus_dim);
    return frames;
  }
  for (int k = 0; k < n; ++k) {
    Eigen::Vector3d p = x.nodes.col(k);
    int j = 0;
    for (int i = 1; i < 3; ++i)
      if (std::abs(p[i]) < std::abs(p[j])) j = i;
    Eigen::Vector3d e = Eigen::Vector3d::Unit(j);
    Eigen::Vector3d f1 = (e - p.dot(e) * p).normalized();
    Eigen::Vector3d f2 = p.cross(f1);
    Eigen::MatrixXd F(3, 2);
    F.col(0) = f1;
    F.col(1) = f2;
    frames[static_cast<size_t>(k)] = F;
  }
  return frames;
}

Eigen::VectorXd field_to_coeffs(const LoopField& f,
                                const std::vector<Eigen::MatrixXd>& frames) {
  const int n = f.nt();
  const int dt = static_cast<int>(frames[0].cols());
  Eigen::VectorXd c(static_cast<Eigen::Index>(dt) * n);
  for (int k = 0; k < n; ++k)
    c.segment(static_cast<Eigen::Index>(k) * dt, dt) =
        frames[static_cast<size_t>(k)].transpose() * f.vectors.col(k);
  return c;
}

LoopField coeffs_to_field(const DiscreteLoop& x,
                          const std::vector<Eigen::MatrixXd>& frames,
                          const Eigen::VectorXd& coeffs) {
  const int n = x.nt();
  const int dt = static_cast<int>(frames[0].cols());
  LoopField f = zero_field(x);
  for (int k = 0; k < n; ++k)
    f.vectors.col(k) = frames[static_cast<size_t>(k)] *
                       coeffs.segment(static_cast<Eigen::Index>(k) * dt, dt);
  return f;
}

PeriodicOrbit find_orbit(const DiscreteLoop& guess, const Perturbation& P) {
  validate_loop(guess);
  DiscreteLoop x = guess;
  const double tol = 1e-12;
  bool converged = false;
  for (int iter = 0; iter < 50; ++iter) {
    LoopField r = orbit_residual_field(x, P);
    double rn = sup_norm(r.vectors);
    if (!std::isfinite(rn) || rn > 1e8)
      throw NoConvergence("find_orbit: residual blew up at iteration " +
                          std::to_string(iter));
    if (rn < tol) {
      converged = true;
      break;
    }
    std::vector<Eigen::MatrixXd> frames = tangent_frames(x);
    Eigen::MatrixXd J = assemble_matrix(
        x, frames,
        [&](const LoopField& b) { return apply_residual_jacobian(x, P, b); });
    Eigen::VectorXd rhs = -field_to_coeffs(r, frames);
    Eigen::VectorXd delta = J.partialPivLu().solve(rhs);
    if (!delta.allFinite())
      throw NoConvergence("find_orbit: singular Newton system");
    LoopField step = coeffs_to_field(x, frames, delta);
    for (int k = 0; k < x.nt(); ++k) {
      ManifoldPoint p{x.man, x.nodes.col(k)};
      TangentVector v{p, step.vectors.col(k)};
      x.nodes.col(k) = exp_map(p, v).coords;
    }
  }
  if (!converged) throw NoConvergence("find_orbit: no convergence in 50 steps");

  PeriodicOrbit orbit;
  orbit.loop = x;
  orbit.action = classical_action(x, P);
  orbit.residual = orbit_residual(x, P);
  OrbitSpectrum spec = orbit_spectrum(x, P);
  if (spec.margin < 1e-8)
    throw Degenerate("find_orbit: Hessian eigenvalue margin " +
                     std::to_string(spec.margin) + " below 1e-8");
  orbit.index = spec.negative_count;
  orbit.nondeg_margin = spec.margin;
  int head = std::min<int>(12, static_cast<int>(spec.eigenvalues.size()));
  orbit.spectrum_head = spec.eigenvalues.head(head);
  return orbit;
}

HessianOperator hessian_matrix(const DiscreteLoop& x, const Perturbation& P) {
  validate_loop(x);
  HessianOperator H;
  H.base = x;
  H.frames = tangent_frames(x);
  H.mat = assemble_matrix(x, H.frames, [&](const LoopField& b) {
    return apply_A_compact(x, P, b);
  });
  H.mat = 0.5 * (H.mat + H.mat.transpose()).eval();
  return H;
}

LoopField apply_hessian(const HessianOperator& H, const LoopField& xi) {
  return coeffs_to_field(H.base, H.frames, H.mat * field_to_coeffs(xi, H.frames));
}

OrbitSpectrum orbit_spectrum(const DiscreteLoop& x, const Perturbation& P) {
  HessianOperator H = hessian_matrix(x, P);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H.mat);
  if (es.info() != Eigen::Success)
    throw NumericalError("orbit_spectrum: eigendecomposition failed");
  OrbitSpectrum s;
  s.eigenvalues = es.eigenvalues();
  s.negative_count = 0;
  s.margin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < s.eigenvalues.size(); ++i) {
    if (s.eigenvalues[i] < 0.0) ++s.negative_count;
    s.margin = std::min(s.margin, std::abs(s.eigenvalues[i]));
  }
  return s;
}

int morse_index(const PeriodicOrbit& x, double tol) {
  if (x.nondeg_margin < tol)
    throw Degenerate("morse_index: eigenvalue within " + std::to_string(tol) +
                     " of zero");
  return x.index;
}

Eigen::VectorXi winding_vector(const DiscreteLoop& x) {
  if (!x.man.flat()) return Eigen::VectorXi::Zero(1);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(x.nodes.rows());
  for (int k = 0; k < x.nt(); ++k) {
    int kp = (k + 1) % x.nt();
    w += wrap_diff(x.man, x.nodes.col(kp) - x.nodes.col(k));
  }
  Eigen::VectorXi out(w.size());
  for (int i = 0; i < w.size(); ++i) out[i] = static_cast<int>(std::llround(w[i]));
  return out;
}

std::vector<PeriodicOrbit> enumerate_orbits(const Perturbation& P, double a,
                                            const std::vector<DiscreteLoop>& starts) {
  std::vector<PeriodicOrbit> found;
  for (const DiscreteLoop& s : starts) {
    PeriodicOrbit orbit;
    try {
      orbit = find_orbit(s, P);
    } catch (const NoConvergence&) {
      continue;
    }
    if (orbit.action > a) continue;
    found.push_back(std::move(orbit));
  }
  std::sort(found.begin(), found.end(),
            [](const PeriodicOrbit& l, const PeriodicOrbit& r) {
              Eigen::VectorXi wl = winding_vector(l.loop);
              Eigen::VectorXi wr = winding_vector(r.loop);
              if ((wl.array() != wr.array()).any()) return winding_less(wl, wr);
              if (l.index != r.index) return l.index < r.index;
              if (l.action != r.action) return l.action < r.action;
              return lex_less(l.loop.nodes, r.loop.nodes);
            });
  std::vector<PeriodicOrbit> kept;
  for (PeriodicOrbit& o : found) {
    bool dup = false;
    for (const PeriodicOrbit& k : kept) {
      if (k.loop.nt() == o.loop.nt() && loop_distance(k.loop, o.loop) < 1e-6) {
        dup = true;
        break;
      }
    }
    if (!dup) kept.push_back(std::move(o));
  }
  return kept;
}

void apply_pair_hessian(const DiscreteLoop& x, const LoopField& y,
                        const Perturbation& P, const LoopField& xi,
                        const LoopField& eta, LoopField* out1, LoopField* out2) {
  LoopField dte = nabla_t(eta);
  LoopField h = hess_V(x, xi, P);
  LoopField v = velocity(x);
  *out1 = zero_field(x);
  *out2 = nabla_t(xi);
  for (int k = 0; k < x.nt(); ++k) {
    out1->vectors.col(k) =
        -dte.vectors.col(k) -
        curvature_term(x.man, x.nodes.col(k), xi.vectors.col(k),
                       v.vectors.col(k), y.vectors.col(k)) -
        h.vectors.col(k);
    out2->vectors.col(k) -= eta.vectors.col(k);
  }
}

Eigen::MatrixXd pair_hessian(const DiscreteLoop& x, const LoopField& y,
                             const Perturbation& P) {
  validate_loop(x);
  const std::vector<Eigen::MatrixXd> frames = tangent_frames(x);
  const int dt = tangent_dim(x.man);
  const int m = dt * x.nt();
  Eigen::MatrixXd mat(2 * m, 2 * m);
  LoopField bx = zero_field(x);
  LoopField be = zero_field(x);
  LoopField o1, o2;
  for (int col = 0; col < 2 * m; ++col) {
    int slot = col / m;
    int k = (col % m) / dt;
    int a = (col % m) % dt;
    bx.vectors.setZero();
    be.vectors.setZero();
    (slot == 0 ? bx : be).vectors.col(k) = frames[static_cast<size_t>(k)].col(a);
    apply_pair_hessian(x, y, P, bx, be, &o1, &o2);
    mat.col(col).head(m) = field_to_coeffs(o1, frames);
    mat.col(col).tail(m) = field_to_coeffs(o2, frames);
  }
  return mat;
}

OrbitDecomposition decompose_near_orbit(const DiscreteLoop& x, const LoopField& y,
                                        const Perturbation& P, double a,
                                        double delta1, double trust_radius) {
  validate_loop(x);
  if (symplectic_action(x, y, P) > a)
    throw ArgumentError("decompose_near_orbit: symplectic action exceeds the cut");
  LoopField dty = nabla_t(y);
  LoopField g = grad_V(x, P);
  LoopField v = velocity(x);
  double res = sup_norm((dty.vectors + g.vectors).eval()) +
               sup_norm((v.vectors - y.vectors).eval());
  if (res > delta1)
    throw ArgumentError("decompose_near_orbit: C^0 residual " +
                        std::to_string(res) + " above delta1");

  PeriodicOrbit x0;
  try {
    x0 = find_orbit(x, P);
  } catch (const NoConvergence&) {
    throw NoNearbyOrbit("decompose_near_orbit: Newton found no orbit near the loop");
  }
  if (x0.action > a)
    throw NoNearbyOrbit("decompose_near_orbit: nearest orbit action exceeds the cut");
  if (loop_distance(x, x0.loop) > trust_radius)
    throw NoNearbyOrbit("decompose_near_orbit: nearest orbit outside trust radius");

  OrbitDecomposition dec;
  dec.xi0 = zero_field(x0.loop);
  dec.eta0 = zero_field(x0.loop);
  LoopField v0 = velocity(x0.loop);
  for (int k = 0; k < x.nt(); ++k) {
    Eigen::VectorXd xi = log_map(x.man, x0.loop.nodes.col(k), x.nodes.col(k));
    dec.xi0.vectors.col(k) = xi;
    // Pull y back to x0 by transporting along the reversed geodesic.
    ManifoldPoint q{x.man, x.nodes.col(k)};
    Eigen::VectorXd back = log_map(x.man, x.nodes.col(k), x0.loop.nodes.col(k));
    TangentVector yk{q, y.vectors.col(k)};
    TangentVector pulled = parallel_transport(q, TangentVector{q, back}, yk);
    dec.eta0.vectors.col(k) = pulled.components - v0.vectors.col(k);
  }
  dec.c1_size = sup_norm(dec.xi0.vectors) + sup_norm(nabla_t(dec.xi0).vectors) +
                sup_norm(dec.eta0.vectors) + sup_norm(nabla_t(dec.eta0).vectors);
  dec.x0 = std::move(x0);
  return dec;
}

Eigen::MatrixXd apply_laplace3(const DiscreteLoop& x, const Eigen::MatrixXd& field) {
  LoopField f{x, field};
  return laplace3(f).vectors;
}

}  // namespace morseflow
