#pragma once

// Dense real kernels shared by the field constructions.

#include <Eigen/Dense>
#include <boost/multiprecision/cpp_int.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "invarc/errors.hpp"

namespace invarc::linalg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Rational = boost::multiprecision::cpp_rational;
using BigInt = boost::multiprecision::cpp_int;

inline void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols()) {
    throw DimensionError(std::string(what) + ": expected a square matrix, got " +
                         std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

/// A = (F - F^T) / 2. Each off-diagonal pair is computed once and negated, so
/// A + A^T is exactly zero.
inline Matrix skew_part(const Matrix& f) {
  require_square(f, "skew_part");
  const auto n = f.rows();
  Matrix a = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = 0.5 * (f(i, j) - f(j, i));
      a(i, j) = v;
      a(j, i) = -v;
    }
  }
  return a;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  return a * b;
}

inline Vector matvec(const Matrix& a, const Vector& x) {
  if (a.cols() != x.size()) throw DimensionError("matvec: dimension mismatch");
  return a * x;
}

inline Matrix transpose(const Matrix& a) { return a.transpose(); }

inline double frobenius_norm(const Matrix& a) { return a.norm(); }

inline bool is_integer_valued(const Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double v = m.data()[i];
    if (!std::isfinite(v) || v != std::round(v) || std::abs(v) > 1e15) return false;
  }
  return true;
}

/// Reduced row echelon form over the rationals. Returns pivot columns.
inline std::vector<Eigen::Index> rref(std::vector<std::vector<Rational>>& a, Eigen::Index cols) {
  std::vector<Eigen::Index> pivots;
  std::size_t row = 0;
  for (Eigen::Index col = 0; col < cols && row < a.size(); ++col) {
    std::size_t sel = row;
    while (sel < a.size() && a[sel][col] == 0) ++sel;
    if (sel == a.size()) continue;
    std::swap(a[row], a[sel]);
    const Rational inv = Rational(1) / a[row][col];
    for (auto& v : a[row]) v *= inv;
    for (std::size_t r = 0; r < a.size(); ++r) {
      if (r == row || a[r][col] == 0) continue;
      const Rational factor = a[r][col];
      for (Eigen::Index c = 0; c < cols; ++c) a[r][c] -= factor * a[row][c];
    }
    pivots.push_back(col);
    ++row;
  }
  return pivots;
}

/// Exact null-space basis of an integer matrix. Columns are scaled to the
/// smallest integer vector; the free variable of each column is positive.
inline std::vector<std::vector<BigInt>> integer_nullspace(const Matrix& m) {
  const auto rows = m.rows();
  const auto cols = m.cols();
  std::vector<std::vector<Rational>> a(rows, std::vector<Rational>(cols));
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) a[i][j] = Rational(static_cast<std::int64_t>(m(i, j)));
  const auto pivots = rref(a, cols);

  std::vector<bool> is_pivot(cols, false);
  for (auto p : pivots) is_pivot[p] = true;

  std::vector<std::vector<BigInt>> basis;
  for (Eigen::Index free = 0; free < cols; ++free) {
    if (is_pivot[free]) continue;
    std::vector<Rational> v(cols, Rational(0));
    v[free] = 1;
    for (std::size_t r = 0; r < pivots.size(); ++r) v[pivots[r]] = -a[r][free];

    BigInt lcm = 1;
    for (const auto& x : v) {
      const BigInt d = boost::multiprecision::denominator(x);
      lcm = lcm / boost::multiprecision::gcd(lcm, d) * d;
    }
    std::vector<BigInt> iv(cols);
    BigInt g = 0;
    for (Eigen::Index j = 0; j < cols; ++j) {
      const Rational scaled = v[j] * Rational(lcm);
      iv[j] = boost::multiprecision::numerator(scaled);
      g = boost::multiprecision::gcd(g, boost::multiprecision::abs(iv[j]));
    }
    if (g > 1)
      for (auto& x : iv) x /= g;
    basis.push_back(std::move(iv));
  }
  return basis;
}

/// Numerical rank by singular-value thresholding.
inline Eigen::Index rank(const Matrix& m, double tol = 1e-10) {
  if (m.size() == 0) return 0;
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > tol * s(0)) ++r;
  return r;
}

/// Columns span Null(M). Integer matrices go through exact elimination;
/// anything else uses singular-value thresholding. A trivial null space
/// yields a matrix with zero columns.
inline Matrix nullspace_basis(const Matrix& m, double tol = 1e-10) {
  if (m.cols() == 0) throw DimensionError("nullspace_basis: matrix has no columns");
  if (is_integer_valued(m)) {
    const auto basis = integer_nullspace(m);
    Matrix b(m.cols(), static_cast<Eigen::Index>(basis.size()));
    for (std::size_t k = 0; k < basis.size(); ++k)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        b(j, static_cast<Eigen::Index>(k)) = basis[k][j].convert_to<double>();
    return b;
  }
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  const double smax = s.size() ? s(0) : 0.0;
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > tol * std::max(smax, 1e-300)) ++r;
  return svd.matrixV().rightCols(m.cols() - r);
}

/// Moore-Penrose pseudo-inverse of a small symmetric PSD Gram matrix via its
/// eigendecomposition; eigenvalues below tol * lambda_max are treated as zero.
inline Matrix pinv_gram(const Matrix& g, double tol = 1e-10) {
  require_square(g, "pinv_gram");
  const double scale = std::max(1.0, g.cwiseAbs().maxCoeff());
  if ((g - g.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw ContractError("pinv_gram: input is not symmetric");
  const auto n = g.rows();
  if (n == 0) return Matrix(0, 0);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (g + g.transpose()));
  const Vector& lambda = eig.eigenvalues();
  const double lmax = lambda.cwiseAbs().maxCoeff();
  Matrix out = Matrix::Zero(n, n);
  if (lmax == 0.0) return out;
  const Matrix& v = eig.eigenvectors();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (lambda(i) > tol * lmax) out.noalias() += (1.0 / lambda(i)) * v.col(i) * v.col(i).transpose();
  }
  return out;
}

}  // namespace invarc::linalg
