#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/KroneckerProduct>

#include <random>

#include "dkfac/linalg.hpp"

namespace testing_support {

using dkfac::MatrixXd;
using dkfac::VectorXd;

inline MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> normal;
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

// Sample covariance of n + 8 Gaussian draws.
inline MatrixXd random_spd(std::mt19937_64& rng, Eigen::Index n) {
  const MatrixXd x = random_matrix(rng, n, n + 8);
  return x * x.transpose() / static_cast<double>(x.cols());
}

inline VectorXd row_major(const MatrixXd& m) {
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> r = m;
  return Eigen::Map<const VectorXd>(r.data(), r.size());
}

inline MatrixXd from_row_major(const VectorXd& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(v.data(), rows, cols);
}

// Eigen's own Kronecker product and LU solve, with no library code involved.
inline MatrixXd reference_kron(const MatrixXd& a, const MatrixXd& b) { return Eigen::kroneckerProduct(a, b).eval(); }

inline MatrixXd reference_damped_kron(const MatrixXd& a, const MatrixXd& g, const MatrixXd& grad, double damping) {
  MatrixXd block = reference_kron(g, a);
  block.diagonal().array() += damping;
  const VectorXd x = block.fullPivLu().solve(row_major(grad));
  return from_row_major(x, grad.rows(), grad.cols());
}

inline MatrixXd reference_factored(const MatrixXd& a, const MatrixXd& g, const MatrixXd& grad, double damping) {
  const MatrixXd ad = a + damping * MatrixXd::Identity(a.rows(), a.cols());
  const MatrixXd gd = g + damping * MatrixXd::Identity(g.rows(), g.cols());
  const MatrixXd block = reference_kron(gd.fullPivLu().inverse(), ad.fullPivLu().inverse());
  return from_row_major(block * row_major(grad), grad.rows(), grad.cols());
}

inline double max_abs_diff(const MatrixXd& x, const MatrixXd& y) { return (x - y).cwiseAbs().maxCoeff(); }

}  // namespace testing_support
