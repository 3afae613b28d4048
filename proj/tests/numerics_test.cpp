#include <gtest/gtest.h>

#include <set>

#include "parout/numerics.hpp"

namespace parout {
namespace {

Matrix random_matrix(Rng& rng, Index r, Index c) {
  std::normal_distribution<double> nd;
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

TEST(EigReal, IdentityHasUnitEigenvalues) {
  const auto ep = eig_real(Matrix::Identity(2, 2));
  ASSERT_EQ(ep.values.size(), 2);
  EXPECT_NEAR(ep.values(0).real(), 1.0, 1e-14);
  EXPECT_NEAR(ep.values(1).real(), 1.0, 1e-14);
  EXPECT_EQ(ep.values(0).imag(), 0.0);
}

TEST(EigReal, DiagonalSortedAscendingWithUnitVectors) {
  Matrix a(2, 2);
  a << 3, 0, 0, 1;
  const auto ep = eig_real(a);
  EXPECT_NEAR(ep.values(0).real(), 1.0, 1e-14);
  EXPECT_NEAR(ep.values(1).real(), 3.0, 1e-14);
  EXPECT_NEAR(std::abs(ep.vectors(0, 0)), 0.0, 1e-14);
  EXPECT_NEAR(ep.vectors(1, 0).real(), 1.0, 1e-14);
  EXPECT_NEAR(ep.vectors(0, 1).real(), 1.0, 1e-14);
  EXPECT_NEAR(std::abs(ep.vectors(1, 1)), 0.0, 1e-14);
}

// The binary simulation design: P(y1=1, Y2, Y3 | x=1) P(Y2, Y3 | x=1)^{-1}
// built by explicit summation over u must have spectrum pr(Y1=1 | u, x=1).
TEST(EigReal, BinaryDesignSpectrumIsOutcomeConditional) {
  const double pu[2] = {0.65, 0.35};
  const double px1[2] = {0.4, 0.7};
  const double y1[2] = {0.4, 0.7};  // pr(Y1=1 | u, x=1)
  const double y2[2] = {0.25, 0.45};
  const double y3[2] = {0.15, 0.45};
  Matrix p23 = Matrix::Zero(2, 2), p123 = Matrix::Zero(2, 2);
  double mass = 0.0;
  for (int u = 0; u < 2; ++u) {
    const double w = pu[u] * px1[u];
    mass += w;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        const double a = i == 0 ? y2[u] : 1 - y2[u];
        const double b = j == 0 ? y3[u] : 1 - y3[u];
        p23(i, j) += w * a * b;
        p123(i, j) += w * y1[u] * a * b;
      }
  }
  p23 /= mass;
  p123 /= mass;
  const auto ep = eig_real(p123 * p23.inverse());
  EXPECT_NEAR(ep.values(0).real(), 0.4, 1e-12);
  EXPECT_NEAR(ep.values(1).real(), 0.7, 1e-12);
  EXPECT_NEAR(ep.values(0).imag(), 0.0, 1e-12);
}

TEST(EigReal, ComplexSpectrumIsReturnedNotDropped) {
  Matrix rot(2, 2);
  rot << 0, -1, 1, 0;
  const auto ep = eig_real(rot);
  EXPECT_NEAR(std::abs(ep.values(0).imag()), 1.0, 1e-14);
  EXPECT_NEAR(std::abs(ep.values(1).imag()), 1.0, 1e-14);
}

TEST(EigReal, RejectsNonSquare) {
  EXPECT_THROW(eig_real(Matrix::Zero(2, 3)), Error);
}

TEST(EigReal, ReconstructionAndNormalizationProperty) {
  Rng rng(7);
  std::uniform_int_distribution<int> dim(1, 8);
  for (int trial = 0; trial < 200; ++trial) {
    const Index k = dim(rng);
    const Matrix m = random_matrix(rng, k, k);
    const auto ep = eig_real(m);
    const Eigen::MatrixXcd mc = m.cast<std::complex<double>>();
    for (Index j = 0; j < k; ++j) {
      const Eigen::VectorXcd v = ep.vectors.col(j);
      const double res = (mc * v - ep.values(j) * v).cwiseAbs().maxCoeff();
      EXPECT_LE(res, 1e-8 * inf_norm(m));
      EXPECT_NEAR(v.cwiseAbs().sum(), 1.0, 1e-12);
      if (j > 0) EXPECT_LE(ep.values(j - 1).real(), ep.values(j).real());
      for (Index i = 0; i < k; ++i) {
        if (std::abs(v(i)) > 1e-12) {
          EXPECT_GT(v(i).real(), 0.0);
          EXPECT_NEAR(v(i).imag(), 0.0, 1e-12);
          break;
        }
      }
    }
  }
}

TEST(SolveOls, ConstantColumnGivesMean) {
  const Matrix x = Matrix::Ones(3, 1);
  Vector y(3);
  y << 2, 2, 2;
  const Vector b = solve_ols(x, y);
  ASSERT_EQ(b.size(), 1);
  EXPECT_NEAR(b(0), 2.0, 1e-14);
}

TEST(SolveOls, OrthonormalColumnsGiveProjection) {
  Rng rng(3);
  const Matrix q = random_matrix(rng, 20, 4).householderQr().householderQ() * Matrix::Identity(20, 4);
  const Vector y = random_matrix(rng, 20, 1).col(0);
  const Vector b = solve_ols(q, y);
  EXPECT_LE((b - q.transpose() * y).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SolveOls, RecoversNoiselessCoefficients) {
  Rng rng(11);
  const Matrix x = random_matrix(rng, 100, 3);
  Vector truth(3);
  truth << 1.5, -2.0, 0.25;
  const Vector b = solve_ols(x, Vector(x * truth));
  EXPECT_LE((b - truth).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SolveOls, MinimumNormOnRankDeficiency) {
  Matrix x(4, 2);
  x << 1, 1, 2, 2, 3, 3, 4, 4;
  Vector y(4);
  y << 2, 4, 6, 8;
  const Vector b = solve_ols(x, y);
  EXPECT_NEAR(b(0), 1.0, 1e-10);
  EXPECT_NEAR(b(1), 1.0, 1e-10);
}

TEST(SolveOls, DimensionMismatch) {
  try {
    solve_ols(Matrix(Matrix::Ones(3, 1)), Vector(Vector::Ones(4)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimensionMismatch);
  }
  EXPECT_THROW(solve_ols(Matrix(Matrix::Ones(2, 3)), Vector(Vector::Ones(2))), Error);
}

TEST(RidgeMasked, ZeroPenaltyMatchesOls) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const Matrix b = random_matrix(rng, 60, 5);
    const Vector y = random_matrix(rng, 60, 1).col(0);
    const Vector r = ridge_masked(b, y, 0.0, {0, 1, 1, 1, 1});
    EXPECT_LE((r - solve_ols(b, y)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(RidgeMasked, IdentityDesignHalves) {
  Vector y(3);
  y << 2, -4, 7;
  const Vector b = ridge_masked(Matrix::Identity(3, 3), y, 1.0, {1, 1, 1});
  EXPECT_LE((b - y / 2).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(RidgeMasked, UnpenalizedOrthogonalColumnIsUnaffected) {
  Rng rng(9);
  Matrix b = random_matrix(rng, 50, 4);
  // Make column 0 orthogonal to the rest.
  const Matrix rest = b.rightCols(3);
  b.col(0) -= rest * solve_ols(rest, Vector(b.col(0)));
  const Vector y = random_matrix(rng, 50, 1).col(0);
  const double ols0 = b.col(0).dot(y) / b.col(0).squaredNorm();
  for (double lambda : {0.0, 1.0, 1e3, 1e6}) {
    const Vector r = ridge_masked(b, y, lambda, {0, 1, 1, 1});
    EXPECT_NEAR(r(0), ols0, 1e-10) << "lambda=" << lambda;
  }
}

TEST(RidgeMasked, SingularSystemDetected) {
  Matrix b(4, 2);
  b << 1, 1, 2, 2, 3, 3, 4, 4;
  try {
    ridge_masked(b, Vector::Ones(4), 0.0, {0, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SingularSystem);
  }
  EXPECT_NO_THROW(ridge_masked(b, Vector::Ones(4), 1.0, {0, 1}));
}

TEST(KfoldSplit, Singletons) {
  const auto folds = kfold_split(10, 10, 1);
  ASSERT_EQ(folds.size(), 10u);
  for (const auto& f : folds) EXPECT_EQ(f.size(), 1u);
}

TEST(KfoldSplit, SizesDifferByAtMostOne) {
  const auto folds = kfold_split(10, 3, 42);
  std::multiset<std::size_t> sizes;
  for (const auto& f : folds) sizes.insert(f.size());
  EXPECT_EQ(sizes, (std::multiset<std::size_t>{3, 3, 4}));
}

TEST(KfoldSplit, PartitionAndDeterminismProperty) {
  Rng rng(1);
  std::uniform_int_distribution<Index> nd(2, 200);
  for (int t = 0; t < 100; ++t) {
    const Index n = nd(rng);
    const Index k = std::uniform_int_distribution<Index>(2, n)(rng);
    const std::uint64_t seed = rng();
    const auto a = kfold_split(n, k, seed);
    EXPECT_EQ(a, kfold_split(n, k, seed));
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& f : a) {
      lo = std::min(lo, f.size());
      hi = std::max(hi, f.size());
      for (Index i : f) seen[static_cast<std::size_t>(i)]++;
    }
    EXPECT_LE(hi - lo, 1u);
    for (int s : seen) EXPECT_EQ(s, 1);
  }
}

TEST(KfoldSplit, BadFoldCount) {
  EXPECT_THROW(kfold_split(10, 1, 0), Error);
  EXPECT_THROW(kfold_split(3, 4, 0), Error);
}

TEST(LevenbergMarquardt, FitsExponentialCurve) {
  Vector t(8), obs(8);
  for (int i = 0; i < 8; ++i) {
    t(i) = 0.25 * i;
    obs(i) = 2.0 * std::exp(-1.3 * t(i));
  }
  auto resid = [&](const Vector& p) -> Vector {
    return (p(0) * (-p(1) * t.array()).exp() - obs.array()).matrix();
  };
  Vector x0(2);
  x0 << 1.0, 0.5;
  const auto r = levenberg_marquardt(resid, x0);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.x(0), 2.0, 1e-7);
  EXPECT_NEAR(r.x(1), 1.3, 1e-7);
  EXPECT_LT(r.cost, 1e-14);
}

TEST(SubSeed, DistinctAndStable) {
  EXPECT_EQ(sub_seed(1, 0), sub_seed(1, 0));
  EXPECT_NE(sub_seed(1, 0), sub_seed(1, 1));
  EXPECT_NE(sub_seed(1, 0), sub_seed(2, 0));
}

}  // namespace
}  // namespace parout
