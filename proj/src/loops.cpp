#include "morseflow/loops.hpp"

#include <cmath>
#include <string>

#include "morseflow/errors.hpp"

namespace morseflow {
namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

bool power_of_two(int n) { return n >= 1 && (n & (n - 1)) == 0; }

int ambient_dim(const Manifold& man) {
  return man.flat() ? man.torus_dim : 3;
}

// Bump profile and its first two derivatives.
double rho_bump(double r, double R) {
  if (r >= R) return 0.0;
  return std::exp(-r / (R - r));
}
double rho_bump_d1(double r, double R) {
  if (r >= R) return 0.0;
  double d = R - r;
  return -R / (d * d) * rho_bump(r, R);
}
double rho_bump_d2(double r, double R) {
  if (r >= R) return 0.0;
  double d = R - r;
  return R * (R / d - 2.0) / (d * d * d) * rho_bump(r, R);
}

// Squared L^2 distance of the loop from the cutoff center, with its nodewise
// gradient field 2*(x - x0).
double cutoff_q(const DiscreteLoop& x, const ArchetypalWrap& w, Eigen::MatrixXd* gq) {
  const int n = x.nt();
  if (w.x0_nodes.rows() != x.nodes.rows() || w.x0_nodes.cols() != x.nodes.cols())
    throw ArgumentError("archetypal center grid does not match the loop grid");
  double q = 0.0;
  if (gq) gq->setZero(x.nodes.rows(), n);
  for (int k = 0; k < n; ++k) {
    Eigen::VectorXd d = wrap_diff(x.man, x.nodes.col(k) - w.x0_nodes.col(k));
    q += d.squaredNorm();
    if (gq) gq->col(k) = 2.0 * d;
  }
  return q / static_cast<double>(n);
}

// Mean-quadrature inner product of two node fields.
double field_inner(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.cwiseProduct(b).sum() / static_cast<double>(a.cols());
}

double bare_integral(const Perturbation& P, const DiscreteLoop& x) {
  const int n = x.nt();
  double acc = 0.0;
  for (int k = 0; k < n; ++k)
    acc += potential_value(P, x.man, k * x.h(), x.nodes.col(k));
  return acc / static_cast<double>(n);
}

}  // namespace

DiscreteLoop make_constant_loop(const Manifold& man, const Eigen::VectorXd& point,
                                int nt) {
  DiscreteLoop x;
  x.man = man;
  x.nodes = point.replicate(1, nt);
  for (int k = 0; k < nt; ++k)
    x.nodes.col(k) = normalize_point(man, x.nodes.col(k)).coords;
  validate_loop(x);
  return x;
}

void validate_loop(const DiscreteLoop& x) {
  const int n = x.nt();
  if (!power_of_two(n) || n < 8)
    throw ArgumentError("loop resolution must be a power of two >= 8, got " +
                        std::to_string(n));
  if (x.nodes.rows() != ambient_dim(x.man))
    throw ArgumentError("loop coordinate dimension does not match the manifold");
  if (!x.man.flat()) {
    for (int k = 0; k < n; ++k) {
      if (std::abs(x.nodes.col(k).norm() - 1.0) > 1e-9)
        throw ArgumentError("sphere loop node " + std::to_string(k) +
                            " is off the unit sphere");
    }
  }
}

LoopField zero_field(const DiscreteLoop& x) {
  LoopField f;
  f.base = x;
  f.vectors = Eigen::MatrixXd::Zero(x.nodes.rows(), x.nt());
  return f;
}

double potential_value(const Perturbation& P, const Manifold& man, double t,
                       const Eigen::VectorXd& x) {
  double v = 0.0;
  if (man.flat()) {
    for (const CosTerm& c : P.cos_terms) {
      double arg = c.omega * t + c.k.cast<double>().dot(x);
      v += c.amplitude * std::cos(kTwoPi * arg + c.phase);
    }
  } else {
    for (const HeightTerm& hgt : P.height_terms) {
      double a = hgt.amplitude * std::cos(kTwoPi * hgt.omega * t + hgt.phase);
      v += a * hgt.axis.dot(x);
    }
  }
  return v;
}

Eigen::VectorXd potential_grad(const Perturbation& P, const Manifold& man, double t,
                               const Eigen::VectorXd& x) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(x.size());
  if (man.flat()) {
    for (const CosTerm& c : P.cos_terms) {
      double arg = c.omega * t + c.k.cast<double>().dot(x);
      g -= c.amplitude * kTwoPi * std::sin(kTwoPi * arg + c.phase) *
           c.k.cast<double>();
    }
  } else {
    for (const HeightTerm& hgt : P.height_terms) {
      double a = hgt.amplitude * std::cos(kTwoPi * hgt.omega * t + hgt.phase);
      g += a * (hgt.axis - hgt.axis.dot(x) * x);
    }
  }
  return g;
}

Eigen::VectorXd potential_hess(const Perturbation& P, const Manifold& man, double t,
                               const Eigen::VectorXd& x, const Eigen::VectorXd& xi) {
  Eigen::VectorXd h = Eigen::VectorXd::Zero(x.size());
  if (man.flat()) {
    for (const CosTerm& c : P.cos_terms) {
      Eigen::VectorXd kd = c.k.cast<double>();
      double arg = c.omega * t + kd.dot(x);
      h -= c.amplitude * kTwoPi * kTwoPi * std::cos(kTwoPi * arg + c.phase) *
           kd.dot(xi) * kd;
    }
  } else {
    for (const HeightTerm& hgt : P.height_terms) {
      double a = hgt.amplitude * std::cos(kTwoPi * hgt.omega * t + hgt.phase);
      h -= a * hgt.axis.dot(x) * xi;
    }
  }
  return h;
}

double calV(const DiscreteLoop& x, const Perturbation& P) {
  validate_loop(x);
  double base = bare_integral(P, x);
  if (!P.archetypal) return base;
  if (!x.man.flat())
    throw ArgumentError("archetypal cutoff is only available on flat backends");
  double q = cutoff_q(x, *P.archetypal, nullptr);
  return rho_bump(q, P.archetypal->radius) * base;
}

LoopField nabla_t(const LoopField& field) {
  const int n = field.nt();
  const double h = field.base.h();
  LoopField out = zero_field(field.base);
  for (int k = 0; k < n; ++k) {
    int kp = (k + 1) % n;
    int km = (k + n - 1) % n;
    Eigen::VectorXd d = (field.vectors.col(kp) - field.vectors.col(km)) / (2.0 * h);
    out.vectors.col(k) =
        project_tangent(field.base.man, field.base.nodes.col(k), d);
  }
  return out;
}

LoopField velocity(const DiscreteLoop& x) {
  const int n = x.nt();
  const double h = x.h();
  LoopField v = zero_field(x);
  for (int k = 0; k < n; ++k) {
    int kp = (k + 1) % n;
    int km = (k + n - 1) % n;
    Eigen::VectorXd d =
        wrap_diff(x.man, x.nodes.col(kp) - x.nodes.col(km)) / (2.0 * h);
    v.vectors.col(k) = project_tangent(x.man, x.nodes.col(k), d);
  }
  return v;
}

double classical_action(const DiscreteLoop& x, const Perturbation& P) {
  LoopField v = velocity(x);
  double kinetic = 0.5 * v.vectors.squaredNorm() / static_cast<double>(x.nt());
  return kinetic - calV(x, P);
}

double symplectic_action(const DiscreteLoop& x, const LoopField& y,
                         const Perturbation& P) {
  LoopField v = velocity(x);
  double pairing = field_inner(y.vectors, v.vectors);
  double half_sq = 0.5 * y.vectors.squaredNorm() / static_cast<double>(x.nt());
  return pairing - half_sq - calV(x, P);
}

LoopField grad_V(const DiscreteLoop& x, const Perturbation& P) {
  validate_loop(x);
  LoopField g = zero_field(x);
  const int n = x.nt();
  for (int k = 0; k < n; ++k)
    g.vectors.col(k) = potential_grad(P, x.man, k * x.h(), x.nodes.col(k));
  if (!P.archetypal) return g;
  if (!x.man.flat())
    throw ArgumentError("archetypal cutoff is only available on flat backends");
  const ArchetypalWrap& w = *P.archetypal;
  Eigen::MatrixXd gq;
  double q = cutoff_q(x, w, &gq);
  double integral = bare_integral(P, x);
  double r0 = rho_bump(q, w.radius);
  double r1 = rho_bump_d1(q, w.radius);
  g.vectors = r1 * integral * gq + r0 * g.vectors;
  return g;
}

LoopField hess_V(const DiscreteLoop& x, const LoopField& xi, const Perturbation& P) {
  validate_loop(x);
  LoopField h = zero_field(x);
  const int n = x.nt();
  for (int k = 0; k < n; ++k)
    h.vectors.col(k) =
        potential_hess(P, x.man, k * x.h(), x.nodes.col(k), xi.vectors.col(k));
  if (!P.archetypal) return h;
  const ArchetypalWrap& w = *P.archetypal;
  Eigen::MatrixXd gq;
  double q = cutoff_q(x, w, &gq);
  double integral = bare_integral(P, x);
  double r1 = rho_bump_d1(q, w.radius);
  double r2 = rho_bump_d2(q, w.radius);
  Eigen::MatrixXd gI(x.nodes.rows(), n);
  for (int k = 0; k < n; ++k)
    gI.col(k) = potential_grad(P, x.man, k * x.h(), x.nodes.col(k));
  double gq_xi = field_inner(gq, xi.vectors);
  double gI_xi = field_inner(gI, xi.vectors);
  // 'V = rho(q) I: Hessian by the product rule; gq is the gradient field of q
  // and 2 xi its derivative along xi.
  h.vectors = (r2 * gq_xi * integral + r1 * gI_xi) * gq +
              r1 * integral * 2.0 * xi.vectors + r1 * gq_xi * gI +
              rho_bump(q, w.radius) * h.vectors;
  return h;
}

double lp_norm(const Eigen::MatrixXd& vectors, double p) {
  if (!(p >= 1.0))
    throw ArgumentError("lp_norm requires p >= 1");
  if (std::isinf(p)) return sup_norm(vectors);
  const int n = static_cast<int>(vectors.cols());
  double acc = 0.0;
  for (int k = 0; k < n; ++k)
    acc += std::pow(vectors.col(k).norm(), p);
  return std::pow(acc / static_cast<double>(n), 1.0 / p);
}

double sup_norm(const Eigen::MatrixXd& vectors) {
  double m = 0.0;
  for (int k = 0; k < vectors.cols(); ++k)
    m = std::max(m, vectors.col(k).norm());
  return m;
}

double loop_distance(const DiscreteLoop& a, const DiscreteLoop& b) {
  if (!(a.man == b.man) || a.nt() != b.nt())
    throw ArgumentError("loop_distance requires matching grids");
  double m = 0.0;
  for (int k = 0; k < a.nt(); ++k)
    m = std::max(m, wrap_diff(a.man, a.nodes.col(k) - b.nodes.col(k)).norm());
  return m;
}

AxiomReport axiom_probe(const Perturbation& P, const std::vector<DiscreteLoop>& slices,
                        double hs) {
  if (slices.size() < 3)
    throw ArgumentError("axiom_probe needs at least three consecutive slices");
  if (!(hs > 0.0)) throw ArgumentError("axiom_probe needs hs > 0");
  AxiomReport rep;
  const int m = static_cast<int>(slices.size());
  for (int j = 0; j < m; ++j) {
    const DiscreteLoop& x = slices[j];
    LoopField g = grad_V(x, P);
    LoopField gt = nabla_t(g);
    LoopField vel = velocity(x);
    for (int k = 0; k < x.nt(); ++k) {
      double denom = 1.0 + vel.vectors.col(k).norm();
      rep.t_ratio_max = std::max(rep.t_ratio_max, gt.vectors.col(k).norm() / denom);
    }
    if (j == 0 || j == m - 1) continue;
    Eigen::MatrixXd ds(x.nodes.rows(), x.nt());
    for (int k = 0; k < x.nt(); ++k) {
      Eigen::VectorXd d = wrap_diff(
          x.man, slices[j + 1].nodes.col(k) - slices[j - 1].nodes.col(k));
      ds.col(k) = project_tangent(x.man, x.nodes.col(k), d / (2.0 * hs));
    }
    LoopField gp = grad_V(slices[j + 1], P);
    LoopField gm = grad_V(slices[j - 1], P);
    double ds_l1 = lp_norm(ds, 1.0);
    for (int k = 0; k < x.nt(); ++k) {
      Eigen::VectorXd dgs = project_tangent(
          x.man, x.nodes.col(k),
          (gp.vectors.col(k) - gm.vectors.col(k)) / (2.0 * hs));
      double denom = ds.col(k).norm() + ds_l1;
      if (denom > 1e-300)
        rep.s_ratio_max = std::max(rep.s_ratio_max, dgs.norm() / denom);
    }
  }
  return rep;
}

}  // namespace morseflow
