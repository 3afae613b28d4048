#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "linear_support.hpp"
#include "parout/pipeline.hpp"
#include "parout/simgen.hpp"

using namespace parout;
using namespace parout::pipeline;
using parout::testing::random_normal;

namespace {

// Survivors restricted to the suggested subset.
int violations_within(const DiagonalityReport& rep) {
  int c = 0;
  for (const auto& o : rep.survivors) {
    const bool i_in = std::binary_search(rep.suggested_subset.begin(), rep.suggested_subset.end(), o.i);
    const bool j_in = std::binary_search(rep.suggested_subset.begin(), rep.suggested_subset.end(), o.j);
    c += (i_in && j_in) ? 1 : 0;
  }
  return c;
}

}  // namespace

TEST(Residualize, NoCovariatesIsCentering) {
  Rng rng(1);
  RawTable t;
  t.exposure = random_normal(50, 1, rng).col(0).array() + 4.0;
  t.outcomes = random_normal(50, 3, rng).array() - 2.0;
  const auto r = residualize(t);
  Vector xc = t.exposure.array() - t.exposure.mean();
  Matrix yc = t.outcomes.rowwise() - t.outcomes.colwise().mean();
  EXPECT_LT((r.data.x - xc).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((r.data.y - yc).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_TRUE(r.data.centered);
  EXPECT_NO_THROW(linear_sem::check_centered(r.data));
  EXPECT_FALSE(r.exposure_degenerate);
}

TEST(Residualize, CovariateEqualToExposure) {
  Rng rng(2);
  RawTable t;
  t.exposure = random_normal(80, 1, rng).col(0);
  t.outcomes = random_normal(80, 3, rng);
  t.covariates = t.exposure;
  const auto r = residualize(t);
  EXPECT_TRUE(r.exposure_degenerate);
  EXPECT_LT(r.data.x.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_TRUE(r.degenerate_outcomes.empty());
}

TEST(Residualize, RemovesCovariateSignal) {
  Rng rng(3);
  const Index n = 500;
  RawTable t;
  const Vector v = random_normal(n, 1, rng).col(0);
  t.covariates = v;
  t.exposure = v + random_normal(n, 1, rng).col(0);
  t.outcomes = Matrix(n, 2);
  t.outcomes.col(0) = 3.0 * v + random_normal(n, 1, rng).col(0);
  t.outcomes.col(1) = random_normal(n, 1, rng).col(0);
  const auto r = residualize(t);
  const Vector vc = v.array() - v.mean();
  const Vector y = r.data.y.col(0);
  EXPECT_LT(std::abs(y.dot(vc) / (y.norm() * vc.norm())), 1e-10);
}

TEST(Residualize, OrthogonalToCovariateSpan) {
  Rng rng(4);
  const Index n = 300;
  RawTable t;
  t.covariates = random_normal(n, 4, rng) * 10.0;
  t.exposure = t.covariates * Vector::LinSpaced(4, 1, 4) + random_normal(n, 1, rng).col(0);
  t.outcomes = t.covariates * random_normal(4, 6, rng) + random_normal(n, 6, rng);
  const auto r = residualize(t);
  Matrix span(n, 5);
  span.col(0).setOnes();
  span.rightCols(4) = t.covariates;
  auto check = [&](const Vector& col) {
    for (Index k = 0; k < span.cols(); ++k)
      EXPECT_LE(std::abs(col.dot(span.col(k))), 1e-8 * col.norm() * span.col(k).norm());
  };
  check(r.data.x);
  for (Index j = 0; j < 6; ++j) check(r.data.y.col(j));
}

TEST(Residualize, LogFlags) {
  Rng rng(5);
  RawTable t;
  t.exposure = random_normal(40, 1, rng).col(0).array().exp();
  t.outcomes = random_normal(40, 2, rng);
  t.log_exposure = true;
  const auto r = residualize(t);
  const Vector lx = t.exposure.array().log();
  EXPECT_LT((r.data.x - (lx.array() - lx.mean()).matrix()).cwiseAbs().maxCoeff(), 1e-12);

  t.log_outcomes = {false, true};
  try {
    residualize(t);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonPositiveLog);
    EXPECT_NE(std::string(e.what()).find("outcome"), std::string::npos);
  }
}

TEST(Residualize, CollinearCovariates) {
  Rng rng(6);
  RawTable t;
  t.exposure = random_normal(40, 1, rng).col(0);
  t.outcomes = random_normal(40, 3, rng);
  t.covariates = Matrix::Constant(40, 1, 2.5);  // duplicates the intercept
  try {
    residualize(t);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::CovariateCollinearity);
  }
}

TEST(Screen, NullOutcomeIsDropped) {
  const auto design = simgen::linear_design(30);
  int dropped = 0;
  for (int r = 0; r < 100; ++r) {
    auto d = simgen::gen_linear(design, 2000, sub_seed(61, r));
    Rng rng(sub_seed(62, r));
    d.y.col(29) = random_normal(2000, 1, rng).col(0);
    const auto s = screen_outcomes(linear_sem::centered(d));
    dropped += std::find(s.retained.begin(), s.retained.end(), 29) == s.retained.end() ? 1 : 0;
  }
  EXPECT_GE(dropped, 95);
}

TEST(Screen, ExactLinearOutcomeIsRetained) {
  Rng rng(7);
  linear_sem::Dataset d;
  d.x = random_normal(100, 1, rng).col(0);
  d.y = random_normal(100, 3, rng);
  d.y.col(1) = 5.0 * d.x;
  const auto s = screen_outcomes(linear_sem::centered(d));
  EXPECT_NE(std::find(s.retained.begin(), s.retained.end(), 1), s.retained.end());
  EXPECT_NEAR(s.coefficient(1), 5.0, 1e-12);
}

TEST(Screen, ThresholdMultiplier) {
  Rng rng(8);
  linear_sem::Dataset d;
  d.x = random_normal(200, 1, rng).col(0);
  d.y = random_normal(200, 20, rng);
  const auto s = screen_outcomes(linear_sem::centered(d));
  for (Index j = 0; j < 20; ++j) EXPECT_NEAR(s.threshold(j) / s.std_error(j), 2.4477, 5e-5);

  // Homoskedastic standard error from first principles.
  const auto c = linear_sem::centered(d);
  const double sxx = c.x.squaredNorm();
  const double b = c.x.dot(c.y.col(3)) / sxx;
  const double rss = (c.y.col(3) - b * c.x).squaredNorm();
  EXPECT_NEAR(s.std_error(3), std::sqrt(rss / 198.0 / sxx), 1e-14);
}

TEST(Screen, InvariantToPositiveRescaling) {
  const auto design = simgen::linear_design(30);
  const auto d = linear_sem::centered(simgen::gen_linear(design, 500, 9));
  const auto base = screen_outcomes(d);
  auto scaled = d;
  Rng rng(10);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  for (Index j = 0; j < 30; ++j) scaled.y.col(j) *= scale(rng);
  EXPECT_EQ(screen_outcomes(scaled).retained, base.retained);
}

TEST(Diagonality, ModelDataIsDiagonal) {
  const auto design = simgen::linear_design(30);
  int clean = 0;
  for (int r = 0; r < 100; ++r) {
    const auto d = linear_sem::centered(simgen::gen_linear(design, 2000, sub_seed(71, r)));
    const auto rep = check_error_diagonality(d, linear_sem::fit_factors(d));
    clean += rep.nonzero_offdiagonals() == 0 ? 1 : 0;
    EXPECT_EQ(violations_within(rep), 0);
  }
  EXPECT_GE(clean, 90);
}

TEST(Diagonality, SharedNoiseIsDetected) {
  const auto design = simgen::linear_design(30);
  auto d = simgen::gen_linear(design, 2000, 72);
  Rng rng(73);
  const Vector shared = 2.0 * random_normal(2000, 1, rng).col(0);
  d.y.col(14) += shared;
  d.y.col(22) += shared;
  d = linear_sem::centered(d);
  const auto rep = check_error_diagonality(d, linear_sem::fit_factors(d, 3));
  const bool flagged = std::any_of(rep.survivors.begin(), rep.survivors.end(),
                                   [](const OffDiagonal& o) { return o.i == 14 && o.j == 22; });
  EXPECT_TRUE(flagged);
  const bool one_removed = std::count(rep.removed.begin(), rep.removed.end(), 14) +
                               std::count(rep.removed.begin(), rep.removed.end(), 22) ==
                           1;
  EXPECT_TRUE(one_removed);
  EXPECT_EQ(violations_within(rep), 0);
}

TEST(Diagonality, TwoOutcomes) {
  Rng rng(11);
  linear_sem::Dataset d;
  d.x = random_normal(500, 1, rng).col(0);
  const Vector common = random_normal(500, 1, rng).col(0);
  d.y.resize(500, 2);
  d.y.col(0) = common + 0.1 * random_normal(500, 1, rng).col(0);
  d.y.col(1) = common + 0.1 * random_normal(500, 1, rng).col(0);
  d = linear_sem::centered(d);
  linear_sem::FactorFit fit;
  fit.num_factors = 0;  // no factor removed, so the shared term stays in the residual
  fit.loadings = Matrix::Zero(2, 0);
  fit.spectrum = Vector::Zero(2);
  fit.n = 500;
  const auto rep = check_error_diagonality(d, fit);
  ASSERT_EQ(rep.survivors.size(), 1u);
  EXPECT_EQ(rep.survivors[0].i, 0);
  EXPECT_EQ(rep.survivors[0].j, 1);
  // Tie between the two outcomes: the higher index goes.
  EXPECT_EQ(rep.removed, std::vector<int>{1});
  EXPECT_EQ(rep.suggested_subset, std::vector<int>{0});
  EXPECT_EQ(rep.variances.size(), 2);
}

TEST(Diagonality, GreedyBreaksStarFirst) {
  // Outcome 0 shares noise with 1, 2 and 3; removing it clears everything.
  Rng rng(12);
  const Index n = 3000;
  linear_sem::Dataset d;
  d.x = random_normal(n, 1, rng).col(0);
  d.y = random_normal(n, 6, rng);
  for (int j = 1; j <= 3; ++j) {
    const Vector s = random_normal(n, 1, rng).col(0);
    d.y.col(0) += s;
    d.y.col(j) += s;
  }
  d = linear_sem::centered(d);
  linear_sem::FactorFit fit;
  fit.num_factors = 0;
  fit.loadings = Matrix::Zero(6, 0);
  fit.spectrum = Vector::Zero(6);
  fit.n = n;
  const auto rep = check_error_diagonality(d, fit);
  EXPECT_EQ(rep.removed, std::vector<int>{0});
  EXPECT_EQ(rep.suggested_subset, (std::vector<int>{1, 2, 3, 4, 5}));
}
