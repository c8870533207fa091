#include <gtest/gtest.h>

#include <random>

#include "invarc/linalg.hpp"

using namespace invarc;
using invarc::linalg::Matrix;
using invarc::linalg::Vector;

namespace {

Matrix random_matrix(std::mt19937_64& rng, int r, int c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace

TEST(SkewPart, HandExample) {
  Matrix f(2, 2);
  f << 0, 1, 0, 0;
  Matrix expected(2, 2);
  expected << 0, 0.5, -0.5, 0;
  EXPECT_EQ(linalg::skew_part(f), expected);
}

TEST(SkewPart, SymmetricInputGivesZero) {
  std::mt19937_64 rng(1);
  const Matrix a = random_matrix(rng, 4, 4);
  EXPECT_EQ(linalg::skew_part(a + a.transpose()), Matrix::Zero(4, 4));
  EXPECT_EQ(linalg::skew_part(Matrix::Identity(3, 3)), Matrix::Zero(3, 3));
}

TEST(SkewPart, AntisymmetryIsExact) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix a = linalg::skew_part(random_matrix(rng, 5, 5) * 1e3);
    const Matrix sum = a + a.transpose();
    EXPECT_EQ(sum.cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(SkewPart, RejectsNonSquare) { EXPECT_THROW(linalg::skew_part(Matrix::Zero(2, 3)), DimensionError); }

TEST(Nullspace, WaterFormation) {
  // H and O counts of H2, O2, H2O.
  Matrix m(2, 3);
  m << 2, 0, 2, 0, 2, 1;
  const Matrix b = linalg::nullspace_basis(m);
  ASSERT_EQ(b.cols(), 1);
  // Proportional to (-2, -1, 2).
  Vector ref(3);
  ref << -2, -1, 2;
  const double s = b.col(0).dot(ref) / ref.squaredNorm();
  EXPECT_NEAR((b.col(0) - s * ref).norm(), 0.0, 1e-14);
  EXPECT_EQ((m * b).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Nullspace, SumRow) {
  Matrix m(1, 3);
  m << 1, 1, 1;
  const Matrix b = linalg::nullspace_basis(m);
  ASSERT_EQ(b.cols(), 2);
  EXPECT_EQ((m * b).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(linalg::rank(b), 2);
}

TEST(Nullspace, TrivialNullSpaceHasNoColumns) {
  const Matrix b = linalg::nullspace_basis(Matrix::Identity(3, 3));
  EXPECT_EQ(b.rows(), 3);
  EXPECT_EQ(b.cols(), 0);
}

TEST(Nullspace, IntegerBasisIsPrimitive) {
  Matrix m(2, 4);
  m << 3, 6, 0, 9, 0, 4, 2, 0;
  const auto basis = linalg::integer_nullspace(m);
  ASSERT_EQ(basis.size(), 2u);
  for (const auto& v : basis) {
    linalg::BigInt g = 0;
    for (const auto& x : v) g = boost::multiprecision::gcd(g, boost::multiprecision::abs(x));
    EXPECT_EQ(g, 1);
    for (int r = 0; r < 2; ++r) {
      linalg::BigInt acc = 0;
      for (int c = 0; c < 4; ++c) acc += static_cast<long>(m(r, c)) * v[c];
      EXPECT_EQ(acc, 0);
    }
  }
}

TEST(Nullspace, PropertyRandomMatrices) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> small(-3, 3);
  for (int trial = 0; trial < 50; ++trial) {
    const int r = 1 + trial % 4, c = r + 1 + trial % 3;
    // Integer path.
    Matrix mi(r, c);
    for (int i = 0; i < mi.size(); ++i) mi.data()[i] = small(rng);
    const Matrix bi = linalg::nullspace_basis(mi);
    EXPECT_EQ(bi.cols(), c - linalg::rank(mi));
    EXPECT_EQ((mi * bi).cwiseAbs().maxCoeff(), 0.0);
    if (bi.cols()) {
      EXPECT_EQ(linalg::rank(bi), bi.cols());
    }
    // Floating path.
    const Matrix mf = random_matrix(rng, r, c);
    const Matrix bf = linalg::nullspace_basis(mf);
    EXPECT_EQ(bf.cols(), c - r);
    EXPECT_LE((mf * bf).cwiseAbs().maxCoeff(), 1e-12 * mf.norm() * bf.norm());
  }
}

TEST(PinvGram, HandExamples) {
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 1;
  EXPECT_NEAR((linalg::pinv_gram(d) - d).norm(), 0.0, 1e-15);

  Matrix g(2, 2);
  g << 2, 2, 2, 2;
  const Matrix p = linalg::pinv_gram(g);
  EXPECT_NEAR((p - Matrix::Constant(2, 2, 0.125)).cwiseAbs().maxCoeff(), 0.0, 1e-15);
  EXPECT_NEAR((g * p * g - g).norm(), 0.0, 1e-14);

  EXPECT_NEAR((linalg::pinv_gram(Matrix::Identity(3, 3)) - Matrix::Identity(3, 3)).norm(), 0.0, 1e-15);
}

TEST(PinvGram, PenroseConditionsOnRandomPsd) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const int rank = 1 + trial % 4;
    const Matrix a = random_matrix(rng, 4, rank);
    const Matrix g = a * a.transpose();
    const Matrix p = linalg::pinv_gram(g);
    const double sg = g.norm(), sp = p.norm();
    EXPECT_LE((g * p * g - g).norm(), 1e-9 * sg);
    EXPECT_LE((p * g * p - p).norm(), 1e-9 * sp);
    EXPECT_LE(((g * p).transpose() - g * p).norm(), 1e-9 * std::max(1.0, (g * p).norm()));
    EXPECT_LE(((p * g).transpose() - p * g).norm(), 1e-9 * std::max(1.0, (p * g).norm()));
  }
}

TEST(PinvGram, ZeroMatrix) { EXPECT_EQ(linalg::pinv_gram(Matrix::Zero(3, 3)), Matrix::Zero(3, 3)); }

TEST(PinvGram, RejectsAsymmetric) {
  Matrix g(2, 2);
  g << 1, 0.5, 0, 1;
  EXPECT_THROW(linalg::pinv_gram(g), ContractError);
}

TEST(Plumbing, IdentityCases) {
  std::mt19937_64 rng(5);
  const Matrix a = random_matrix(rng, 3, 4);
  EXPECT_EQ(linalg::matmul(Matrix::Identity(3, 3), a), a);
  EXPECT_EQ(linalg::transpose(linalg::transpose(a)), a);
  const Vector x = Vector::LinSpaced(4, 1, 4);
  EXPECT_EQ(linalg::matvec(Matrix::Identity(4, 4), x), x);
  EXPECT_DOUBLE_EQ(linalg::frobenius_norm(Matrix::Identity(4, 4)), 2.0);
  EXPECT_THROW(linalg::matmul(a, a), DimensionError);
  EXPECT_THROW(linalg::matvec(a, Vector::Zero(3)), DimensionError);
}
