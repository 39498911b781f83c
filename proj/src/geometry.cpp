#include "morseflow/geometry.hpp"

#include <cmath>

namespace morseflow {

namespace {

void check_base(const ManifoldPoint& p, const TangentVector& a, const char* op) {
  if (!(a.base.man == p.man) || (a.base.coords - p.coords).cwiseAbs().maxCoeff() > 1e-12)
    throw ArgumentError(std::string(op) + ": tangent vector not based at the given point");
}

// sin(x)/x with the small-argument series.
double sinc(double x) {
  if (std::abs(x) < 1e-6) return 1.0 - x * x / 6.0;
  return std::sin(x) / x;
}

}  // namespace

ManifoldPoint normalize_point(const Manifold& man, const Eigen::VectorXd& coords) {
  ManifoldPoint p{man, coords};
  if (man.flat()) {
    for (int i = 0; i < p.coords.size(); ++i) p.coords[i] = wrap_unit(p.coords[i]);
  } else {
    const double n = p.coords.norm();
    if (n == 0.0) throw ArgumentError("normalize_point: zero vector is not on the sphere");
    p.coords /= n;
  }
  return p;
}

Eigen::VectorXd wrap_diff(const Manifold& man, const Eigen::VectorXd& a,
                          const Eigen::VectorXd& b) {
  Eigen::VectorXd d = a - b;
  if (man.flat()) {
    for (int i = 0; i < d.size(); ++i) {
      d[i] -= std::round(d[i]);
    }
  }
  return d;
}

Eigen::VectorXd wrap_diff(const Manifold& man, const Eigen::VectorXd& d) {
  return wrap_diff(man, d, Eigen::VectorXd::Zero(d.size()));
}

Eigen::VectorXd project_tangent(const Manifold& man, const Eigen::VectorXd& p,
                                const Eigen::VectorXd& v) {
  if (man.flat()) return v;
  return v - p.dot(v) * p;
}

double metric_inner(const ManifoldPoint& p, const TangentVector& a,
                    const TangentVector& b) {
  check_base(p, a, "metric_inner");
  check_base(p, b, "metric_inner");
  return a.components.dot(b.components);
}

TangentVector curvature(const ManifoldPoint& p, const TangentVector& a,
                        const TangentVector& b, const TangentVector& c) {
  check_base(p, a, "curvature");
  check_base(p, b, "curvature");
  check_base(p, c, "curvature");
  TangentVector out{p, Eigen::VectorXd::Zero(p.coords.size())};
  if (p.man.backend == Backend::Sphere2) {
    out.components = b.components.dot(c.components) * a.components -
                     a.components.dot(c.components) * b.components;
  }
  return out;
}

ManifoldPoint exp_map(const ManifoldPoint& p, const TangentVector& v) {
  check_base(p, v, "exp_map");
  if (p.man.flat()) return normalize_point(p.man, p.coords + v.components);
  const double theta = v.components.norm();
  Eigen::VectorXd q = std::cos(theta) * p.coords + sinc(theta) * v.components;
  return normalize_point(p.man, q);
}

Eigen::VectorXd log_map(const Manifold& man, const Eigen::VectorXd& p,
                        const Eigen::VectorXd& q) {
  if (man.flat()) return wrap_diff(man, q, p);
  const double c = std::max(-1.0, std::min(1.0, p.dot(q)));
  Eigen::VectorXd perp = q - c * p;
  const double s = perp.norm();
  const double theta = std::atan2(s, c);
  if (theta > 3.1) throw InjectivityRadiusExceeded("log_map: points nearly antipodal");
  if (s < 1e-300) return Eigen::VectorXd::Zero(p.size());
  return (theta / s) * perp;
}

TangentVector parallel_transport(const ManifoldPoint& p, const TangentVector& v,
                                 const TangentVector& w) {
  check_base(p, v, "parallel_transport");
  check_base(p, w, "parallel_transport");
  const ManifoldPoint q = exp_map(p, v);
  if (p.man.flat()) return TangentVector{q, w.components};
  const double theta = v.components.norm();
  if (theta < 1e-300) return TangentVector{q, project_tangent(p.man, q.coords, w.components)};
  const Eigen::VectorXd dir = v.components / theta;
  const double along = w.components.dot(dir);
  const Eigen::VectorXd perp = w.components - along * dir;
  Eigen::VectorXd out =
      perp + along * (std::cos(theta) * dir - std::sin(theta) * p.coords);
  return TangentVector{q, project_tangent(p.man, q.coords, out)};
}

GeodesicMaps geodesic_maps(const ManifoldPoint& p, const TangentVector& v) {
  check_base(p, v, "geodesic_maps");
  const int d = p.man.dim();
  GeodesicMaps maps{Eigen::MatrixXd::Identity(d, d), Eigen::MatrixXd::Identity(d, d)};
  if (p.man.flat()) return maps;

  const double theta = v.components.norm();
  // Columns: transport the basis of T_pM and scale the component orthogonal
  // to the geodesic direction by the Jacobi factors cos(theta) (base slot)
  // and sinc(theta) (fiber slot).
  Eigen::MatrixXd transport(d, d);
  Eigen::VectorXd dir = Eigen::VectorXd::Zero(d);
  if (theta > 1e-300) dir = v.components / theta;
  for (int j = 0; j < d; ++j) {
    Eigen::VectorXd e = project_tangent(p.man, p.coords, Eigen::VectorXd::Unit(d, j));
    TangentVector te = parallel_transport(p, v, TangentVector{p, e});
    transport.col(j) = te.components;
  }
  Eigen::MatrixXd proj_along = Eigen::MatrixXd::Zero(d, d);
  if (theta > 1e-300) proj_along = dir * dir.transpose();
  Eigen::MatrixXd tangent_proj =
      Eigen::MatrixXd::Identity(d, d) - p.coords * p.coords.transpose();
  const Eigen::MatrixXd proj_perp = tangent_proj - proj_along;
  maps.E1 = transport * (proj_along + std::cos(theta) * proj_perp);
  maps.E2 = transport * (proj_along + sinc(theta) * proj_perp);
  // Restrict to T_pM on the input side.
  maps.E1 = maps.E1 * tangent_proj;
  maps.E2 = maps.E2 * tangent_proj;
  return maps;
}

}  // namespace morseflow
