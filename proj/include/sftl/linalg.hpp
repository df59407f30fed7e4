#pragma once

#include <Eigen/Dense>

#include "sftl/errors.hpp"

namespace sftl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Symmetrizes and clamps negative eigenvalues at zero. Applied to every
/// computed covariance to control round-off accumulation over long chains.
inline Matrix make_psd(const Matrix& m) {
  const Matrix s = symmetrize(m);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(s);
  if (eig.info() != Eigen::Success) {
    throw SingularSystem("eigendecomposition failed during PSD projection");
  }
  Vector w = eig.eigenvalues();
  bool clean = true;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (w[i] < 0.0) {
      w[i] = 0.0;
      clean = false;
    }
  }
  if (clean) return s;
  return eig.eigenvectors() * w.asDiagonal() * eig.eigenvectors().transpose();
}

inline double mean_diagonal(const Matrix& m) {
  return m.diagonal().mean();
}

/// Solves A x = b for symmetric positive definite A. On a singular factor,
/// adds 1e-9 times the mean diagonal as jitter and retries exactly once.
inline Vector solve_spd(const Matrix& a, const Vector& b) {
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() == Eigen::Success) return llt.solve(b);
  const double jitter = 1e-9 * mean_diagonal(a);
  Matrix aj = a + jitter * Matrix::Identity(a.rows(), a.cols());
  Eigen::LLT<Matrix> llt2(aj);
  if (llt2.info() == Eigen::Success) return llt2.solve(b);
  throw SingularSystem("SPD solve failed after one jitter retry");
}

/// Inverts a symmetric positive definite matrix with the same jitter policy.
inline Matrix invert_spd(const Matrix& a) {
  const Matrix id = Matrix::Identity(a.rows(), a.cols());
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() == Eigen::Success) return llt.solve(id);
  const double jitter = 1e-9 * mean_diagonal(a);
  Eigen::LLT<Matrix> llt2(a + jitter * id);
  if (llt2.info() == Eigen::Success) return llt2.solve(id);
  throw SingularSystem("SPD inversion failed after one jitter retry");
}

inline bool is_positive_definite(const Matrix& a) {
  Eigen::LDLT<Matrix> ldlt(symmetrize(a));
  if (ldlt.info() != Eigen::Success) return false;
  return ldlt.isPositive() && (ldlt.vectorD().array() > 0.0).all();
}

/// Block-diagonal matrix with `copies` repetitions of `block`.
inline Matrix block_diagonal(const Matrix& block, int copies) {
  const Eigen::Index d = block.rows();
  Matrix out = Matrix::Zero(d * copies, d * copies);
  for (int r = 0; r < copies; ++r) {
    out.block(r * d, r * d, d, d) = block;
  }
  return out;
}

inline Matrix kronecker(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

inline Vector kronecker(const Vector& a, const Vector& b) {
  Vector out(a.size() * b.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    out.segment(i * b.size(), b.size()) = a[i] * b;
  }
  return out;
}

}  // namespace sftl
