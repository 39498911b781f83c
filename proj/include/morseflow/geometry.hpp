#pragma once

#include <Eigen/Dense>

#include "morseflow/errors.hpp"

namespace morseflow {

// Riemannian backends.  FlatTorus(n) is R^n/Z^n with the flat metric in the
// unit-length normalization (angles live in [0,1) per coordinate).  Sphere2
// is the round unit sphere embedded in 3-space; points are unit vectors and
// tangent vectors are ambient 3-vectors orthogonal to the base point.
enum class Backend : int { FlatTorus = 0, Sphere2 = 1 };

struct Manifold {
  Backend backend = Backend::FlatTorus;
  int torus_dim = 1;

  static Manifold flat_torus(int n) { return Manifold{Backend::FlatTorus, n}; }
  static Manifold sphere2() { return Manifold{Backend::Sphere2, 0}; }

  // Ambient coordinate dimension of a point/tangent vector.
  int dim() const { return backend == Backend::FlatTorus ? torus_dim : 3; }
  bool flat() const { return backend == Backend::FlatTorus; }
  bool operator==(const Manifold& o) const {
    return backend == o.backend && (backend != Backend::FlatTorus || torus_dim == o.torus_dim);
  }
};

struct ManifoldPoint {
  Manifold man;
  Eigen::VectorXd coords;
};

struct TangentVector {
  ManifoldPoint base;
  Eigen::VectorXd components;
};

// Reduces torus coordinates into [0,1); renormalizes sphere points.
ManifoldPoint normalize_point(const Manifold& man, const Eigen::VectorXd& coords);

// Shortest representative of the difference a - b (torus: componentwise in
// (-1/2, 1/2]; sphere: ambient difference).  Both points must share the
// backend.  Used by every finite-difference stencil.
Eigen::VectorXd wrap_diff(const Manifold& man, const Eigen::VectorXd& a,
                          const Eigen::VectorXd& b);
// Same reduction applied to an already-formed difference vector.
Eigen::VectorXd wrap_diff(const Manifold& man, const Eigen::VectorXd& d);

// Orthogonal projection of an ambient vector into T_pM (identity on tori).
Eigen::VectorXd project_tangent(const Manifold& man, const Eigen::VectorXd& p,
                                const Eigen::VectorXd& v);

double metric_inner(const ManifoldPoint& p, const TangentVector& a,
                    const TangentVector& b);

// R(a,b)c at p.  Zero on flat tori; <b,c>a - <a,c>b on the unit sphere.
TangentVector curvature(const ManifoldPoint& p, const TangentVector& a,
                        const TangentVector& b, const TangentVector& c);

// Point at unit time along the geodesic with initial velocity v.
ManifoldPoint exp_map(const ManifoldPoint& p, const TangentVector& v);

// Inverse of exp_map: the tangent vector at p whose geodesic reaches q at
// unit time (shortest one).  Throws InjectivityRadiusExceeded near the cut
// locus of the sphere.
Eigen::VectorXd log_map(const Manifold& man, const Eigen::VectorXd& p,
                        const Eigen::VectorXd& q);

// Parallel transport of w along the geodesic tau -> exp_p(tau v); the result
// is based at exp_map(p, v).
TangentVector parallel_transport(const ManifoldPoint& p, const TangentVector& v,
                                 const TangentVector& w);

// The linear maps E1, E2 : T_pM -> T_{exp_p(v)}M defined by
//   d/dtau exp_x(xi) = E1(x,xi) d_tau x + E2(x,xi) nabla_tau xi
// along any path (x(tau), xi(tau)).  Returned as ambient-coordinate
// matrices.  Closed forms on both backends (flat: identities; sphere:
// Jacobi-field formulas for constant curvature).
struct GeodesicMaps {
  Eigen::MatrixXd E1;
  Eigen::MatrixXd E2;
};
GeodesicMaps geodesic_maps(const ManifoldPoint& p, const TangentVector& v);

// Coordinate-wise helpers used throughout the discretizations.
inline double wrap_unit(double x) {
  double y = x - std::floor(x);
  if (y >= 1.0) y -= 1.0;
  return y;
}

}  // namespace morseflow
