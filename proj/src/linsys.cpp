#include "morseflow/linsys.hpp"

#include <cmath>
#include <vector>

namespace morseflow {

namespace {
// Acceptable relative residual ||N m - r|| / ||r|| for a Cholesky multiplier.
constexpr double kNormalCheck = 1e-9;
}  // namespace

MinNormSolver::MinNormSolver(Eigen::SparseMatrix<double> D,
                             Eigen::VectorXd w_inv, double shift,
                             int direct_limit)
    : D_(std::move(D)), winv_(std::move(w_inv)) {
  if (winv_.size() != D_.cols())
    throw ArgumentError("weight size does not match operator columns");
  Eigen::SparseMatrix<double> Dt = D_.transpose();
  N_ = D_ * winv_.asDiagonal() * Dt;
  N_.makeCompressed();
  if (shift != 0.0) {
    Eigen::SparseMatrix<double> I(N_.rows(), N_.cols());
    I.setIdentity();
    N_ = N_ + shift * I;
  }
  jacobi_ = N_.diagonal();
  for (Eigen::Index i = 0; i < jacobi_.size(); ++i)
    jacobi_[i] = jacobi_[i] > 0.0 ? 1.0 / jacobi_[i] : 1.0;
  if (N_.rows() <= direct_limit) {
    tried_direct_ = true;
    llt_ = std::make_unique<Eigen::SimplicialLLT<Eigen::SparseMatrix<double>>>();
    llt_->compute(N_);
    factor_ok_ = llt_->info() == Eigen::Success;
    if (!factor_ok_) llt_.reset();
  }
}

Eigen::VectorXd MinNormSolver::apply_normal(const Eigen::VectorXd& v) const {
  return N_ * v;
}

Eigen::VectorXd MinNormSolver::pcg(const Eigen::VectorXd& b) const {
  const double bnorm = b.norm();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(b.size());
  if (bnorm == 0.0) return x;
  Eigen::VectorXd r = b;
  Eigen::VectorXd z = jacobi_.cwiseProduct(r);
  Eigen::VectorXd p = z;
  double rz = r.dot(z);
  const int max_iter = 20000;
  for (int it = 0; it < max_iter; ++it) {
    Eigen::VectorXd Np = N_ * p;
    const double pNp = p.dot(Np);
    if (!(pNp > 0.0)) break;
    const double alpha = rz / pNp;
    x += alpha * p;
    r -= alpha * Np;
    if (r.norm() <= 1e-13 * bnorm) return x;
    z = jacobi_.cwiseProduct(r);
    const double rz_new = r.dot(z);
    p = z + (rz_new / rz) * p;
    rz = rz_new;
  }
  if (r.norm() > 1e-8 * bnorm)
    throw LinearSolveFailed("conjugate gradient stalled on normal system");
  return x;
}

const Eigen::SparseLU<Eigen::SparseMatrix<double>>& MinNormSolver::kkt() const {
  if (kkt_) return *kkt_;
  const Eigen::Index n = D_.cols();
  const Eigen::Index k = D_.rows();
  const double s2 = N_.diagonal().maxCoeff();
  kkt_scale_ = s2 > 0.0 ? std::sqrt(s2) : 1.0;
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<size_t>(n) + 2 * static_cast<size_t>(D_.nonZeros()));
  for (Eigen::Index i = 0; i < n; ++i) trip.emplace_back(i, i, 1.0);
  for (Eigen::Index c = 0; c < D_.outerSize(); ++c)
    for (Eigen::SparseMatrix<double>::InnerIterator it(D_, c); it; ++it) {
      const double v = it.value() * std::sqrt(winv_[it.col()]) / kkt_scale_;
      trip.emplace_back(n + it.row(), it.col(), v);
      trip.emplace_back(it.col(), n + it.row(), v);
    }
  Eigen::SparseMatrix<double> K(n + k, n + k);
  K.setFromTriplets(trip.begin(), trip.end());
  K.makeCompressed();
  kkt_ = std::make_unique<Eigen::SparseLU<Eigen::SparseMatrix<double>>>();
  kkt_->compute(K);
  if (kkt_->info() != Eigen::Success) {
    kkt_.reset();
    throw LinearSolveFailed("saddle factorization failed");
  }
  return *kkt_;
}

Eigen::VectorXd MinNormSolver::multiplier(const Eigen::VectorXd& r) const {
  if (r.size() != N_.rows())
    throw ArgumentError("residual size does not match normal system");
  const double rnorm = r.norm();
  if (rnorm == 0.0) return Eigen::VectorXd::Zero(r.size());
  if (llt_) {
    Eigen::VectorXd m = llt_->solve(r);
    if (llt_->info() == Eigen::Success &&
        (N_ * m - r).norm() <= kNormalCheck * rnorm)
      return m;
    llt_.reset();
  }
  if (!tried_direct_) return pcg(r);
  const auto& lu = kkt();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(D_.cols() + r.size());
  rhs.tail(r.size()) = r / kkt_scale_;
  Eigen::VectorXd sol = lu.solve(rhs);
  if (lu.info() != Eigen::Success)
    throw LinearSolveFailed("saddle backsolve failed");
  return -sol.tail(r.size()) / kkt_scale_;
}

Eigen::VectorXd MinNormSolver::pullback(const Eigen::VectorXd& m) const {
  return winv_.cwiseProduct(D_.transpose() * m);
}

Eigen::VectorXd MinNormSolver::min_norm_step(const Eigen::VectorXd& r) const {
  return -pullback(multiplier(r));
}

double MinNormSolver::lambda_max_estimate(int iters) const {
  Eigen::VectorXd v = Eigen::VectorXd::Ones(N_.rows());
  v.normalize();
  double lam = 0.0;
  for (int it = 0; it < iters; ++it) {
    Eigen::VectorXd w = N_ * v;
    lam = v.dot(w);
    const double n = w.norm();
    if (n == 0.0) return 0.0;
    v = w / n;
  }
  return lam;
}

double MinNormSolver::lambda_min_estimate(int iters) const {
  if (!llt_) {
    if (tried_direct_) return 0.0;
    throw LinearSolveFailed("minimum eigenvalue estimate needs a factorization");
  }
  Eigen::VectorXd v = Eigen::VectorXd::Ones(N_.rows());
  v.normalize();
  double lam = 0.0;
  for (int it = 0; it < iters; ++it) {
    Eigen::VectorXd w = llt_->solve(v);
    const double n = w.norm();
    if (n == 0.0) return 0.0;
    lam = v.dot(w);
    v = w / n;
  }
  return lam > 0.0 ? 1.0 / lam : 0.0;
}

}  // namespace morseflow
