#pragma once

// Data preparation ahead of the linear estimator: covariate adjustment,
// screening of outcomes unrelated to the exposure, and a check that the
// outcome errors left after removing the factors are uncorrelated.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <tuple>
#include <vector>

#include "parout/errors.hpp"
#include "parout/linear_sem.hpp"
#include "parout/numerics.hpp"

namespace parout::pipeline {

using linear_sem::Dataset;
using linear_sem::FactorFit;

struct RawTable {
  std::string exposure_name = "x";
  Vector exposure;                        // n
  std::vector<std::string> outcome_names;
  Matrix outcomes;                        // n x p
  std::vector<std::string> covariate_names;
  Matrix covariates;                      // n x q (q may be 0)
  bool log_exposure = false;
  std::vector<bool> log_outcomes;         // empty or length p
  std::size_t dropped_rows = 0;           // rows removed for missing values at ingestion
};

struct Residualized {
  Dataset data;
  bool exposure_degenerate = false;
  std::vector<int> degenerate_outcomes;
};

inline Residualized residualize(const RawTable& raw) {
  const Index n = raw.exposure.size();
  const Index p = raw.outcomes.cols();
  if (raw.outcomes.rows() != n) throw Error(ErrorKind::DimensionMismatch, "outcome rows differ from exposure rows");
  const Index q = raw.covariates.size() == 0 ? 0 : raw.covariates.cols();
  if (q > 0 && raw.covariates.rows() != n)
    throw Error(ErrorKind::DimensionMismatch, "covariate rows differ from exposure rows");
  if (!raw.log_outcomes.empty() && static_cast<Index>(raw.log_outcomes.size()) != p)
    throw Error(ErrorKind::DimensionMismatch, "one log flag per outcome expected");
  if (n <= q + 1) throw Error(ErrorKind::DimensionMismatch, "too few rows for the covariate adjustment");

  auto log_column = [](Vector v, const std::string& name) {
    if (!(v.minCoeff() > 0.0)) throw Error(ErrorKind::NonPositiveLog, "column '" + name + "' has entries <= 0");
    return Vector(v.array().log());
  };
  Vector x = raw.exposure;
  if (raw.log_exposure) x = log_column(x, raw.exposure_name);
  Matrix y = raw.outcomes;
  for (Index j = 0; j < p; ++j)
    if (!raw.log_outcomes.empty() && raw.log_outcomes[static_cast<std::size_t>(j)]) {
      const std::string name = static_cast<std::size_t>(j) < raw.outcome_names.size()
                                   ? raw.outcome_names[static_cast<std::size_t>(j)]
                                   : "outcome " + std::to_string(j);
      y.col(j) = log_column(y.col(j), name);
    }

  Matrix design(n, 1 + q);
  design.col(0).setOnes();
  if (q > 0) design.rightCols(q) = raw.covariates;
  Eigen::ColPivHouseholderQR<Matrix> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < design.cols())
    throw Error(ErrorKind::CovariateCollinearity, "intercept plus covariates are rank deficient");
  const Matrix qmat = qr.householderQ() * Matrix::Identity(n, 1 + q);
  auto resid = [&](const Vector& v) {
    Vector r = v - qmat * (qmat.transpose() * v);
    // A second pass removes what rounding left in the covariate span.
    r -= qmat * (qmat.transpose() * r);
    return r;
  };

  Residualized out;
  out.data.x = resid(x);
  out.data.y.resize(n, p);
  for (Index j = 0; j < p; ++j) out.data.y.col(j) = resid(y.col(j));
  out.data.centered = true;
  auto degenerate = [](const Vector& r, const Vector& orig) {
    const double scale = (orig.array() - orig.mean()).matrix().norm();
    return r.norm() <= 1e-10 * std::max(scale, std::numeric_limits<double>::min());
  };
  out.exposure_degenerate = degenerate(out.data.x, x);
  for (Index j = 0; j < p; ++j)
    if (degenerate(out.data.y.col(j), y.col(j))) out.degenerate_outcomes.push_back(static_cast<int>(j));
  return out;
}

struct ScreenResult {
  std::vector<int> retained;
  Vector coefficient;
  Vector std_error;  // homoskedastic OLS standard error
  Vector threshold;  // std_error * sqrt(2 log p)
};

inline ScreenResult screen_outcomes(const Dataset& data) {
  linear_sem::check_centered(data);
  const Index n = data.n(), p = data.p();
  if (n < 3) throw Error(ErrorKind::DimensionMismatch, "screening needs at least 3 rows");
  const double xx = data.x.squaredNorm();
  if (!(xx > 0.0)) throw Error(ErrorKind::BadParams, "exposure has zero variance");
  const double mult = std::sqrt(2.0 * std::log(static_cast<double>(std::max<Index>(p, 1))));
  ScreenResult res;
  res.coefficient.resize(p);
  res.std_error.resize(p);
  res.threshold.resize(p);
  for (Index j = 0; j < p; ++j) {
    const Vector y = data.y.col(j);
    const double b = data.x.dot(y) / xx;
    // Centered data: the intercept used one degree of freedom already.
    const double s2 = (y - b * data.x).squaredNorm() / static_cast<double>(n - 2);
    const double se = std::sqrt(s2 / xx);
    res.coefficient(j) = b;
    res.std_error(j) = se;
    res.threshold(j) = se * mult;
    // A zero standard error with a nonzero slope is an infinite t-ratio.
    const bool keep = std::abs(b) > se * mult || (se <= 1e-14 * std::abs(b) && b != 0.0);
    if (keep) res.retained.push_back(static_cast<int>(j));
  }
  return res;
}

inline Dataset select_outcomes(const Dataset& data, const std::vector<int>& cols) {
  Dataset out;
  out.x = data.x;
  out.y.resize(data.n(), static_cast<Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.y.col(static_cast<Index>(i)) = data.y.col(cols[i]);
  out.centered = data.centered;
  return out;
}

struct OffDiagonal {
  int i = 0, j = 0;
  double value = 0.0;
  double threshold = 0.0;
};

struct DiagonalityReport {
  Vector variances;                 // diagonal of the residual covariance
  std::vector<OffDiagonal> survivors;
  std::vector<int> suggested_subset;
  std::vector<int> removed;         // in removal order
  int nonzero_offdiagonals() const { return static_cast<int>(survivors.size()); }
};

inline DiagonalityReport check_error_diagonality(const Dataset& data, const FactorFit& fit,
                                                 double threshold_mult = 2.0) {
  linear_sem::check_centered(data);
  const Index n = data.n(), p = data.p();
  if (fit.loadings.rows() != p) throw Error(ErrorKind::DimensionMismatch, "factor fit does not match the data");
  const Matrix cov = data.y.transpose() * data.y / static_cast<double>(n - 1);
  // Plain principal-component loadings absorb the noise into the retained
  // directions. Iterated principal axes with per-outcome uniquenesses
  // remove that bias before the off-diagonals are judged.
  const Index m = fit.loadings.cols();
  Vector psi = Vector::Constant(p, fit.sigma2_hat);
  Matrix shrunk = fit.loadings;
  for (int it = 0; it < 200 && m > 0; ++it) {
    Matrix reduced = cov;
    reduced.diagonal() -= psi;
    Eigen::SelfAdjointEigenSolver<Matrix> es(reduced);
    for (Index k = 0; k < m; ++k) {
      const Index src = p - 1 - k;
      shrunk.col(k) = std::sqrt(std::max(es.eigenvalues()(src), 0.0)) * es.eigenvectors().col(src);
    }
    const Vector next = (cov.diagonal() - shrunk.rowwise().squaredNorm()).cwiseMax(1e-8 * cov.diagonal().maxCoeff());
    const double change = (next - psi).cwiseAbs().maxCoeff();
    psi = next;
    if (change < 1e-10 * cov.diagonal().maxCoeff()) break;
  }
  const Matrix r = cov - shrunk * shrunk.transpose();
  DiagonalityReport rep;
  rep.variances = r.diagonal();
  const double rate = std::log(static_cast<double>(std::max<Index>(p, 2))) / static_cast<double>(n);
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(p));
  for (Index i = 0; i < p; ++i)
    for (Index j = i + 1; j < p; ++j) {
      const double scale = std::max(r(i, i), 0.0) * std::max(r(j, j), 0.0);
      const double tau = threshold_mult * std::sqrt(scale * rate);
      if (std::abs(r(i, j)) > tau) {
        rep.survivors.push_back({static_cast<int>(i), static_cast<int>(j), r(i, j), tau});
        adj[static_cast<std::size_t>(i)].push_back(static_cast<int>(j));
        adj[static_cast<std::size_t>(j)].push_back(static_cast<int>(i));
      }
    }

  std::vector<bool> alive(static_cast<std::size_t>(p), true);
  for (;;) {
    int worst = -1, worst_count = 0;
    for (Index v = 0; v < p; ++v) {
      if (!alive[static_cast<std::size_t>(v)]) continue;
      int c = 0;
      for (int w : adj[static_cast<std::size_t>(v)]) c += alive[static_cast<std::size_t>(w)] ? 1 : 0;
      if (c > 0 && c >= worst_count) {  // >= : ties go to the higher index
        worst = static_cast<int>(v);
        worst_count = c;
      }
    }
    if (worst < 0) break;
    alive[static_cast<std::size_t>(worst)] = false;
    rep.removed.push_back(worst);
  }
  for (Index v = 0; v < p; ++v)
    if (alive[static_cast<std::size_t>(v)]) rep.suggested_subset.push_back(static_cast<int>(v));
  return rep;
}

}  // namespace parout::pipeline
