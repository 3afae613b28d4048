#include <gtest/gtest.h>

#include <cmath>

#include "parout/categorical.hpp"
#include "parout/simgen.hpp"

using namespace parout;
using namespace parout::simgen;

namespace {

bool same_report(const ReplicationReport& a, const ReplicationReport& b) {
  if (a.cells.size() != b.cells.size() || a.failures != b.failures || a.attempts != b.attempts ||
      a.fallbacks != b.fallbacks)
    return false;
  auto same = [](double u, double v) { return (std::isnan(u) && std::isnan(v)) || u == v; };
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    const auto& x = a.cells[i];
    const auto& y = b.cells[i];
    if (x.row != y.row || x.column != y.column || x.count != y.count || !same(x.value, y.value) ||
        !same(x.spread, y.spread))
      return false;
  }
  return true;
}

}  // namespace

TEST(CategoricalDesign, ReferenceConstants) {
  const auto p = categorical_design();
  EXPECT_EQ(p.pr_u(0), 0.65);
  EXPECT_EQ(p.pr_x_given_u(0, 0), 0.4);
  EXPECT_EQ(p.pr_x_given_u(0, 1), 0.7);
  const double first[3][2][2] = {{{0.4, 0.3}, {0.7, 0.6}}, {{0.25, 0.45}, {0.45, 0.75}}, {{0.15, 0.25}, {0.45, 0.65}}};
  for (int j = 0; j < 3; ++j)
    for (int u = 0; u < 2; ++u)
      for (int x = 0; x < 2; ++x) EXPECT_EQ(p.y(j, 0, u, x), first[j][u][x]);
  EXPECT_NO_THROW(categorical::validate(p));
}

TEST(GenCategorical, MarginalsAtLargeN) {
  const auto recs = gen_categorical(1'000'000, 3);
  double x1 = 0, y1_and_x1 = 0;
  for (const auto& r : recs) {
    if (r.x == 0) {
      ++x1;
      if (r.y[0] == 0) ++y1_and_x1;
    }
  }
  EXPECT_NEAR(x1 / 1e6, 0.4 * 0.65 + 0.7 * 0.35, 0.002);
  // pr(Y1=1 | X=1) by conditioning on U.
  const double pu[2] = {0.65, 0.35}, px[2] = {0.4, 0.7}, py[2] = {0.4, 0.7};
  const double joint = pu[0] * px[0] * py[0] + pu[1] * px[1] * py[1];
  const double cond = joint / (pu[0] * px[0] + pu[1] * px[1]);
  EXPECT_NEAR(cond, 0.5455, 5e-5);
  EXPECT_NEAR(y1_and_x1 / x1, cond, 0.003);
}

TEST(GenCategorical, JointCellsWithinFourStandardErrors) {
  const std::size_t n = 1'000'000;
  const auto design = categorical_design();
  const auto pop = categorical::forward_joint(design);
  std::vector<double> counts(pop.prob.size(), 0.0);
  for (const auto& r : gen_categorical(n, 8)) counts[pop.flat(r.x, r.y[0], r.y[1], r.y[2])] += 1.0;
  for (std::size_t i = 0; i < pop.prob.size(); ++i) {
    const double se = std::sqrt(pop.prob[i] * (1 - pop.prob[i]) / static_cast<double>(n));
    EXPECT_LE(std::abs(counts[i] / static_cast<double>(n) - pop.prob[i]), 4 * se) << "cell " << i;
  }
}

TEST(GenCategorical, Deterministic) {
  const auto a = gen_categorical(1, 42);
  const auto b = gen_categorical(1, 42);
  EXPECT_EQ(a[0].x, b[0].x);
  EXPECT_EQ(a[0].u, b[0].u);
  EXPECT_EQ(a[0].y, b[0].y);
  const auto c = gen_categorical(500, 42);
  const auto d = gen_categorical(500, 42);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(c[i].y, d[i].y);
  EXPECT_THROW(gen_categorical(0, 1), Error);
}

TEST(LinearDesign, ClosedFormRule) {
  const auto d = linear_design(30);
  EXPECT_EQ(d.r, 2);
  EXPECT_EQ(d.sigma_x, 1.0);
  EXPECT_EQ(d.alpha_x, Vector::Ones(2));
  EXPECT_EQ(d.beta.head(4), (Vector(4) << -1, 2, -3, 4).finished());
  EXPECT_EQ((d.beta.array() != 0.0).count(), 12);
  EXPECT_TRUE((d.beta.tail(18).array() == 0.0).all());
  EXPECT_LT(12, 30 - d.r);
  const double block[7] = {1.5, -1.8, 2.1, 2.4, -2.7, 3.0, -3.3};
  for (int j = 1; j <= 30; ++j) {
    EXPECT_EQ(d.sigma(j - 1), 1.5 + 0.25 * ((j + 2) % 3));
    EXPECT_EQ(d.alpha(j - 1, 0), block[(j - 1) % 7]);
    EXPECT_EQ(d.alpha(j - 1, 1), block[(30 + j - 1) % 7]);
    if (j <= 12) EXPECT_EQ(d.beta(j - 1), std::pow(-1.0, j) * (1 + (j + 3) % 4));
  }
  for (int p : {60, 100}) EXPECT_EQ((linear_design(p).beta.array() != 0.0).count(), static_cast<Index>(0.4 * p));
  EXPECT_THROW(linear_design(2), Error);
}

TEST(LinearDesign, GammaStarAndZeroSet) {
  const auto d = linear_design(30);
  const Matrix g = d.gamma_star();
  ASSERT_EQ(g.cols(), 3);
  for (int j = 0; j < 30; ++j) {
    EXPECT_EQ(g(j, 0), d.beta(j));
    EXPECT_DOUBLE_EQ(g(j, 1), d.alpha(j, 0) + d.beta(j));
  }
  EXPECT_EQ(d.zero_set().size(), 18u);
  EXPECT_EQ(d.zero_set().front(), 12);
}

TEST(GenLinear, SecondMoments) {
  const auto d = linear_design(30);
  const auto data = linear_sem::centered(gen_linear(d, 1'000'000, 4));
  const double n = 1e6;
  EXPECT_NEAR(data.x.squaredNorm() / (n - 1), d.alpha_x.squaredNorm() + 1.0, 0.01);
  const double cov = data.x.dot(data.y.col(0)) / (n - 1);
  const double var_x = d.alpha_x.squaredNorm() + d.sigma_x * d.sigma_x;
  const double expected = d.alpha.row(0).dot(d.alpha_x) + d.beta(0) * var_x;
  EXPECT_NEAR(expected, 0.6, 1e-12);
  EXPECT_NEAR(cov, expected, 0.02);
}

TEST(GenLinear, NoSignalNoCorrelation) {
  auto d = linear_design(6);
  d.beta.setZero();
  d.alpha.setZero();
  const auto data = linear_sem::centered(gen_linear(d, 1'000'000, 5));
  for (int j = 0; j < 6; ++j) {
    const double corr = data.x.dot(data.y.col(j)) / (data.x.norm() * data.y.col(j).norm());
    EXPECT_LT(std::abs(corr), 0.01);
  }
}

TEST(GenLinear, DeterministicAndUncentered) {
  const auto d = linear_design(12);
  const auto a = gen_linear(d, 100, 9);
  const auto b = gen_linear(d, 100, 9);
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.y, b.y);
  EXPECT_FALSE(a.centered);
  EXPECT_THROW(gen_linear(d, 13, 1), Error);
}

TEST(SelectionRates, Definitions) {
  Vector beta(5);
  beta << 1, 2, 0, 0, 0;
  // Selected zeros {1, 2}: estimated nonzero {0, 3, 4}, two of them false.
  auto r = detail::selection_rates({1, 2}, beta);
  EXPECT_DOUBLE_EQ(r.fpr, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.fnr, 1.0 / 2.0);
  r = detail::selection_rates({2, 3, 4}, beta);
  EXPECT_EQ(r.fpr, 0.0);
  EXPECT_EQ(r.fnr, 0.0);
}

TEST(Tables, ParseAndPrint) {
  for (auto t : {Table::Table1, Table::Table2, Table::TableS1}) EXPECT_EQ(parse_table(to_string(t)), t);
  try {
    parse_table("table3");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Usage);
  }
}

TEST(Replicate, RejectsTooFewRuns) { EXPECT_THROW(replicate(Table::Table2, 9, 1), Error); }

TEST(Replicate, Table1SmokeAndDeterminism) {
  ReplicateOptions opt;
  opt.cells = {{500, 30}};
  const auto a = replicate(Table::Table1, 10, 3, opt);
  opt.threads = 1;
  const auto b = replicate(Table::Table1, 10, 3, opt);
  EXPECT_TRUE(same_report(a, b));
  EXPECT_EQ(a.runs, 10);
  EXPECT_EQ(a.attempts, 10);
  ASSERT_EQ(a.cells.size(), 2u);
  for (const auto& c : a.cells) {
    EXPECT_GE(c.value, 0.0);
    EXPECT_LE(c.value, 1e4);
  }
  EXPECT_EQ(a.find("n=500,p=30", "fpr_x10000")->reference, 58.0);
}

TEST(Replicate, Table2Deterministic) {
  const auto a = replicate(Table::Table2, 10, 21);
  const auto b = replicate(Table::Table2, 10, 21);
  EXPECT_TRUE(same_report(a, b));
  ASSERT_EQ(a.cells.size(), 4u);
  EXPECT_EQ(a.cells[0].column, "beta1");
  EXPECT_EQ(a.cells[0].reference, -0.68);
  EXPECT_EQ(a.failures, 0);
}

TEST(ReplicateS1, SmokeAndDeterminism) {
  const auto a = replicate(Table::TableS1, 20, 4);
  const auto b = replicate(Table::TableS1, 20, 4, ReplicateOptions{1, {}, 1000});
  EXPECT_TRUE(same_report(a, b));
  EXPECT_EQ(a.cells.size(), 18u);
  const auto* crude = a.find("pr{Y1(X=1)=1}", "crude");
  ASSERT_NE(crude, nullptr);
  EXPECT_EQ(crude->reference, -4.02);
  EXPECT_EQ(crude->count, 20u);
}
