#pragma once

// Dense Kronecker reference paths. They form the full (m*n)x(m*n) curvature
// block explicitly and never touch an eigendecomposition, so they serve as
// independent checks for the factored preconditioners.

#include "dkfac/linalg.hpp"

namespace dkfac::oracle {

/// unvec((kron(G, A) + damping * I)^-1 vec(grad)) for an out x in gradient.
template <typename Scalar>
Matrix<Scalar> dense_damped_kron(const Matrix<Scalar>& a, const Matrix<Scalar>& g, const Matrix<Scalar>& grad,
                                 Scalar damping) {
  Matrix<Scalar> block = linalg::kron(g, a);
  block.diagonal().array() += damping;
  return linalg::unvec(linalg::inverse(block) * linalg::vec(grad), grad.rows(), grad.cols());
}

/// unvec(kron((G + dI)^-1, (A + dI)^-1) vec(grad)).
template <typename Scalar>
Matrix<Scalar> dense_factored_damping(const Matrix<Scalar>& a, const Matrix<Scalar>& g, const Matrix<Scalar>& grad,
                                      Scalar damping) {
  Matrix<Scalar> ad = a;
  Matrix<Scalar> gd = g;
  ad.diagonal().array() += damping;
  gd.diagonal().array() += damping;
  Matrix<Scalar> block = linalg::kron(linalg::inverse(gd), linalg::inverse(ad));
  return linalg::unvec(block * linalg::vec(grad), grad.rows(), grad.cols());
}

}  // namespace dkfac::oracle
