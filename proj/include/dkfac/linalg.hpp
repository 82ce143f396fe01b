#pragma once

// Dense kernels used by the preconditioner: symmetric eigendecomposition
// (cyclic Jacobi), Kronecker product, Gauss-Jordan inversion and the
// row-major vectorization used by the dense Kronecker oracles.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "dkfac/errors.hpp"

namespace dkfac {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXd = Matrix<double>;
using VectorXd = Vector<double>;

/// Eigendecomposition q * diag(lambda) * q^T of a symmetric matrix.
/// Columns of q are eigenvectors; lambda is sorted descending.
template <typename Scalar>
struct SymEig {
  Matrix<Scalar> q;
  Vector<Scalar> lambda;

  Eigen::Index dim() const { return lambda.size(); }
  // Number of scalars carried by this decomposition (n^2 + n).
  Eigen::Index element_count() const { return q.size() + lambda.size(); }

  Matrix<Scalar> reconstruct() const { return q * lambda.asDiagonal() * q.transpose(); }

  bool operator==(const SymEig& other) const {
    return q.rows() == other.q.rows() && q.cols() == other.q.cols() && lambda.size() == other.lambda.size() &&
           q == other.q && lambda == other.lambda;
  }
};

namespace linalg {

struct JacobiOptions {
  double relative_tolerance = 1e-12;
  int max_sweeps = 100;
};

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

template <typename Derived>
typename Derived::Scalar max_abs(const Eigen::MatrixBase<Derived>& m) {
  if (m.size() == 0) return typename Derived::Scalar(0);
  return m.cwiseAbs().maxCoeff();
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as (M + M^T) / 2 first. Sweeps stop once the
/// off-diagonal Frobenius norm drops below tolerance * ||M||_F or after
/// max_sweeps. Eigenvalues are returned raw (possibly negative); see
/// psd_clamped() for the form used in preconditioner denominators.
template <typename Derived>
SymEig<typename Derived::Scalar> sym_eig(const Eigen::MatrixBase<Derived>& m, JacobiOptions opts = {}) {
  using Scalar = typename Derived::Scalar;
  using std::abs;
  using std::sqrt;
  if (m.rows() != m.cols() || m.rows() == 0) {
    throw DimensionError("sym_eig: expected a non-empty square matrix, got " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()));
  }
  if (!all_finite(m)) throw ValueError("sym_eig: input contains NaN or Inf");

  const Eigen::Index n = m.rows();
  Matrix<Scalar> a = (m + m.transpose()) / Scalar(2);
  Matrix<Scalar> v = Matrix<Scalar>::Identity(n, n);

  const Scalar threshold = Scalar(opts.relative_tolerance) * a.norm();
  auto off_diagonal_norm = [&] {
    Scalar s = 0;
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i)
        if (i != j) s += a(i, j) * a(i, j);
    return sqrt(s);
  };

  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    if (off_diagonal_norm() <= threshold) break;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const Scalar apq = a(p, q);
        if (apq == Scalar(0)) continue;
        const Scalar theta = (a(q, q) - a(p, p)) / (Scalar(2) * apq);
        const Scalar t = (theta >= 0 ? Scalar(1) : Scalar(-1)) / (abs(theta) + sqrt(theta * theta + Scalar(1)));
        const Scalar c = Scalar(1) / sqrt(t * t + Scalar(1));
        const Scalar s = t * c;

        // A <- J^T A J with J the (p, q) rotation.
        for (Eigen::Index k = 0; k < n; ++k) {
          const Scalar akp = a(k, p);
          const Scalar akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const Scalar apk = a(p, k);
          const Scalar aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = Scalar(0);
        a(q, p) = Scalar(0);

        for (Eigen::Index k = 0; k < n; ++k) {
          const Scalar vkp = v(k, p);
          const Scalar vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });

  SymEig<Scalar> out{Matrix<Scalar>(n, n), Vector<Scalar>(n)};
  for (Eigen::Index k = 0; k < n; ++k) {
    out.lambda(k) = a(order[k], order[k]);
    out.q.col(k) = v.col(order[k]);
  }
  return out;
}

/// Copy of `eig` with negative eigenvalues set to zero. Factors are PSD in
/// exact arithmetic; negative values are rounding noise.
template <typename Scalar>
SymEig<Scalar> psd_clamped(SymEig<Scalar> eig) {
  eig.lambda = eig.lambda.cwiseMax(Scalar(0));
  return eig;
}

/// Kronecker product: block (i, j) of the result is a(i, j) * b.
template <typename DerivedA, typename DerivedB>
Matrix<typename DerivedA::Scalar> kron(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.size() == 0 || b.size() == 0) throw DimensionError("kron: operands must be non-empty");
  constexpr auto kMax = std::numeric_limits<Eigen::Index>::max();
  if (a.rows() > kMax / b.rows() || a.cols() > kMax / b.cols() || (a.rows() * b.rows()) > kMax / (a.cols() * b.cols())) {
    throw DimensionError("kron: result dimensions overflow");
  }
  const Eigen::Index p = b.rows();
  const Eigen::Index q = b.cols();
  Matrix<Scalar> out(a.rows() * p, a.cols() * q);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) out.block(i * p, j * q, p, q) = a(i, j) * b;
  return out;
}

/// Gauss-Jordan inverse with partial pivoting. Throws SingularMatrixError
/// naming the first pivot column whose best pivot is negligible.
template <typename Derived>
Matrix<typename Derived::Scalar> inverse(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  using std::abs;
  if (m.rows() != m.cols() || m.rows() == 0) throw DimensionError("inverse: expected a non-empty square matrix");
  if (!all_finite(m)) throw ValueError("inverse: input contains NaN or Inf");

  const Eigen::Index n = m.rows();
  Matrix<Scalar> a = m;
  Matrix<Scalar> inv = Matrix<Scalar>::Identity(n, n);
  const Scalar scale = max_abs(m);
  const Scalar tiny = Scalar(n) * std::numeric_limits<Scalar>::epsilon() * scale;

  for (Eigen::Index col = 0; col < n; ++col) {
    Eigen::Index pivot = col;
    a.col(col).tail(n - col).cwiseAbs().maxCoeff(&pivot);
    pivot += col;
    if (!(abs(a(pivot, col)) > tiny)) {
      throw SingularMatrixError("inverse: matrix is singular to working precision at pivot " + std::to_string(col),
                                col);
    }
    if (pivot != col) {
      a.row(pivot).swap(a.row(col));
      inv.row(pivot).swap(inv.row(col));
    }
    const Scalar d = a(col, col);
    a.row(col) /= d;
    inv.row(col) /= d;
    for (Eigen::Index r = 0; r < n; ++r) {
      if (r == col) continue;
      const Scalar f = a(r, col);
      if (f == Scalar(0)) continue;
      a.row(r) -= f * a.row(col);
      inv.row(r) -= f * inv.row(col);
    }
  }
  return inv;
}

/// Row-major vectorization: out[i * cols + j] = m(i, j).
/// Under this convention vec(G V A) = kron(G, A^T) vec(V).
template <typename Derived>
Vector<typename Derived::Scalar> vec(const Eigen::MatrixBase<Derived>& m) {
  Vector<typename Derived::Scalar> out(m.size());
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(k++) = m(i, j);
  return out;
}

template <typename Derived>
Matrix<typename Derived::Scalar> unvec(const Eigen::MatrixBase<Derived>& v, Eigen::Index rows, Eigen::Index cols) {
  if (v.size() != rows * cols) {
    throw DimensionError("unvec: " + std::to_string(v.size()) + " elements cannot form " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
  Matrix<typename Derived::Scalar> out(rows, cols);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = v(k++);
  return out;
}

/// Same shape and bitwise-equal entries.
template <typename DerivedA, typename DerivedB>
bool identical(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.size() == 0 || a == b);
}

template <typename Derived>
bool is_symmetric(const Eigen::MatrixBase<Derived>& m, double tol) {
  if (m.rows() != m.cols()) return false;
  const auto scale = std::max<double>(1.0, static_cast<double>(max_abs(m)));
  return static_cast<double>(max_abs(m - m.transpose())) <= tol * scale;
}

}  // namespace linalg
}  // namespace dkfac
