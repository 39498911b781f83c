#pragma once

#include <memory>

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include "morseflow/errors.hpp"

namespace morseflow {

// Minimum-norm solver for the underdetermined/ill-posed correction systems
//   zeta = -W^{-1} D^T (D W^{-1} D^T)^{-1} r
// with D sparse (rows = residual equations, cols = field unknowns) and W a
// positive diagonal weight on the field space.  The normal matrix
// N = D W^{-1} D^T is symmetric positive (semi)definite; it is factored by
// a sparse Cholesky decomposition up to kDirectLimit unknowns and solved by
// Jacobi-preconditioned conjugate gradients above that (fixed iteration
// order, serial reductions, so results are bit-reproducible).
//
// Squaring D doubles its condition number, and the cylinder linearizations
// carry near-kernels (translation modes, parasitic central-difference
// oscillations), so the Cholesky multiplier is verified against the normal
// residual; if the factorization fails or loses accuracy the solver falls
// back to a pivoted LU of the KKT saddle system
//   [ W   D^T ] [x]   [0]
//   [ D    0  ] [l] = [r]
// which never forms N.  Solves are not thread-safe (the fallback is built
// lazily on first use).
class MinNormSolver {
 public:
  static constexpr int kDirectLimit = 50000;

  MinNormSolver(Eigen::SparseMatrix<double> D, Eigen::VectorXd w_inv,
                double shift = 0.0, int direct_limit = kDirectLimit);

  // Multiplier m with (N + shift) m = r.
  Eigen::VectorXd multiplier(const Eigen::VectorXd& r) const;
  // The correction -W^{-1} D^T m for the residual r.
  Eigen::VectorXd min_norm_step(const Eigen::VectorXd& r) const;
  // W^{-1} D^T m for an externally produced multiplier.
  Eigen::VectorXd pullback(const Eigen::VectorXd& m) const;
  // N v without forming the solve.
  Eigen::VectorXd apply_normal(const Eigen::VectorXd& v) const;

  // Deterministic extreme-eigenvalue estimates of N (power iterations from
  // the normalized all-ones vector).
  double lambda_max_estimate(int iters = 80) const;
  double lambda_min_estimate(int iters = 80) const;

  bool direct() const { return static_cast<bool>(llt_); }
  bool factor_ok() const { return factor_ok_; }
  Eigen::Index rows() const { return N_.rows(); }

 private:
  Eigen::SparseMatrix<double> D_;
  Eigen::VectorXd winv_;
  Eigen::SparseMatrix<double> N_;
  mutable std::unique_ptr<Eigen::SimplicialLLT<Eigen::SparseMatrix<double>>> llt_;
  mutable std::unique_ptr<Eigen::SparseLU<Eigen::SparseMatrix<double>>> kkt_;
  mutable double kkt_scale_ = 1.0;
  Eigen::VectorXd jacobi_;
  bool factor_ok_ = false;
  bool tried_direct_ = false;

  Eigen::VectorXd pcg(const Eigen::VectorXd& b) const;
  const Eigen::SparseLU<Eigen::SparseMatrix<double>>& kkt() const;
};

}  // namespace morseflow
