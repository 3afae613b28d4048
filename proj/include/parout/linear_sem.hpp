#pragma once

// Linear structural equation model with parallel outcomes: principal-component
// factor fit, thresholded l0 rotation search for negative-control outcomes,
// and the two-stage masked-ridge effect estimator.
//
// Outcome indices are 0-based in the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "parout/errors.hpp"
#include "parout/numerics.hpp"

namespace parout::linear_sem {

struct Dataset {
  Vector x;   // n
  Matrix y;   // n x p
  bool centered = false;

  Index n() const { return x.size(); }
  Index p() const { return y.cols(); }
};

inline Dataset centered(Dataset d) {
  if (d.y.rows() != d.x.size()) throw Error(ErrorKind::DimensionMismatch, "x and y row counts differ");
  if (d.x.size() == 0) return d;
  d.x.array() -= d.x.mean();
  d.y.rowwise() -= d.y.colwise().mean();
  d.centered = true;
  return d;
}

inline void check_centered(const Dataset& d) {
  if (d.y.rows() != d.x.size()) throw Error(ErrorKind::DimensionMismatch, "x and y row counts differ");
  if (!d.centered) throw Error(ErrorKind::BadParams, "dataset must be centered");
  const double scale = std::max(1.0, d.y.cwiseAbs().maxCoeff());
  if (std::abs(d.x.mean()) > 1e-10 * std::max(1.0, d.x.cwiseAbs().maxCoeff()) ||
      (d.p() > 0 && d.y.colwise().mean().cwiseAbs().maxCoeff() > 1e-10 * scale)) {
    throw Error(ErrorKind::BadParams, "dataset is flagged centered but column means are nonzero");
  }
}

struct FactorFit {
  int num_factors = 0;  // r_hat + 1
  Matrix loadings;      // p x num_factors
  Vector spectrum;      // covariance eigenvalues, descending
  Vector correlation_spectrum;
  double sigma2_hat = 0.0;
  double delta = 0.0;
  Index n = 0;
};

// sigma2 = mean of the trailing eigenvalues past `num_factors` (divided by p,
// not by their count), delta = sqrt(2 log(p) sigma2 / n).
inline std::pair<double, double> noise_threshold(const Vector& spectrum_desc, int num_factors, Index n) {
  const Index p = spectrum_desc.size();
  if (num_factors < 0 || num_factors > p) throw Error(ErrorKind::BadParams, "factor count out of range");
  if (n <= 0) throw Error(ErrorKind::BadParams, "sample size must be positive");
  const double sigma2 = spectrum_desc.tail(p - num_factors).sum() / static_cast<double>(p);
  const double delta = std::sqrt(2.0 * std::log(static_cast<double>(p)) * sigma2 / static_cast<double>(n));
  return {sigma2, delta};
}

inline FactorFit fit_factors(const Dataset& data, std::optional<int> num_factors_override = std::nullopt) {
  check_centered(data);
  const Index n = data.n(), p = data.p();
  if (p < 3) throw Error(ErrorKind::TooFewOutcomes, "factor fitting needs at least 3 outcomes, got " + std::to_string(p));
  if (n <= p) throw Error(ErrorKind::DimensionMismatch, "factor fitting needs n > p");

  const Matrix cov = (data.y.transpose() * data.y) / static_cast<double>(n - 1);
  const Vector sd = cov.diagonal().cwiseSqrt();
  if (!(sd.minCoeff() > 0.0)) throw Error(ErrorKind::DegenerateSpectrum, "an outcome column is constant");
  const Matrix corr = sd.cwiseInverse().asDiagonal() * cov * sd.cwiseInverse().asDiagonal();

  FactorFit fit;
  fit.n = n;
  Eigen::SelfAdjointEigenSolver<Matrix> ec(corr, Eigen::EigenvaluesOnly);
  fit.correlation_spectrum = ec.eigenvalues().reverse();
  int kaiser = 0;
  for (Index i = 0; i < p; ++i) kaiser += fit.correlation_spectrum(i) > 1.0 ? 1 : 0;

  if (num_factors_override) {
    if (*num_factors_override < 1 || *num_factors_override >= p)
      throw Error(ErrorKind::BadParams, "factor count override must lie in [1, p)");
    fit.num_factors = *num_factors_override;
  } else if (kaiser == 0) {
    throw Error(ErrorKind::NoFactors, "no correlation eigenvalue exceeds 1; supply a factor count");
  } else {
    fit.num_factors = std::min<int>(kaiser, static_cast<int>(p) - 1);
  }

  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  fit.spectrum = es.eigenvalues().reverse();
  const Matrix vecs = es.eigenvectors().rowwise().reverse();
  const int m = fit.num_factors;
  for (int j = 0; j < m; ++j) {
    if (!(fit.spectrum(j) > 0.0)) {
      throw Error(ErrorKind::DegenerateSpectrum,
                  "only " + std::to_string(j) + " positive eigenvalues for " + std::to_string(m) + " factors");
    }
  }
  fit.loadings.resize(p, m);
  for (int j = 0; j < m; ++j) {
    Vector v = vecs.col(j);
    Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    fit.loadings.col(j) = std::sqrt(fit.spectrum(j)) * v;
  }
  std::tie(fit.sigma2_hat, fit.delta) = noise_threshold(fit.spectrum, m, n);
  return fit;
}

enum class SelectionMethod { Enumeration, BranchAndBound };

inline std::string to_string(SelectionMethod m) {
  return m == SelectionMethod::Enumeration ? "enumeration" : "branch_and_bound";
}

struct Selection {
  std::vector<int> s0_hat;  // ascending
  Vector w_star;
  Vector y_star;
  int objective = 0;
  SelectionMethod method = SelectionMethod::Enumeration;
  long candidates = 0;  // candidates evaluated (enumeration) or nodes visited (branch and bound)
};

struct SelectionOptions {
  SelectionMethod method = SelectionMethod::Enumeration;
  double big_m = 30.0;
};

namespace detail {

inline bool in_band(double y, double delta) { return std::abs(y) <= delta * (1.0 + 1e-9); }

inline int count_out(const Vector& y, double delta) {
  int c = 0;
  for (Index j = 0; j < y.size(); ++j) c += in_band(y(j), delta) ? 0 : 1;
  return c;
}

// Calls f(subset) for every ascending subset of {0..p-1} of size s.
template <typename F>
void for_each_subset(int p, int s, F&& f) {
  std::vector<int> idx(static_cast<std::size_t>(s));
  std::iota(idx.begin(), idx.end(), 0);
  if (s > p) return;
  for (;;) {
    f(idx);
    int i = s - 1;
    while (i >= 0 && idx[static_cast<std::size_t>(i)] == p - s + i) --i;
    if (i < 0) return;
    ++idx[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < s; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
  }
}

inline Selection make_selection(const Matrix& gamma, Vector w, double delta, SelectionMethod method) {
  Selection sel;
  sel.method = method;
  w.normalize();
  Vector y = gamma * w;
  Index arg = 0;
  if (y.size() > 0) {
    y.cwiseAbs().maxCoeff(&arg);
    if (y(arg) < 0) {
      w = -w;
      y = -y;
    }
  }
  sel.w_star = w;
  sel.y_star = y;
  for (Index j = 0; j < y.size(); ++j)
    if (in_band(y(j), delta)) sel.s0_hat.push_back(static_cast<int>(j));
  sel.objective = static_cast<int>(y.size()) - static_cast<int>(sel.s0_hat.size());
  return sel;
}

// Points of the unit sphere on the affine set {w : G_S w = t}. When that set
// meets the sphere in a circle or larger, one point is enough.
inline void sphere_points(const Matrix& gs, const Vector& t, std::vector<Vector>& out) {
  const Index m = gs.cols();
  Vector w0;
  Matrix null;
  if (gs.rows() == 0) {
    w0 = Vector::Zero(m);
    null = Matrix::Identity(m, m);
  } else {
    Eigen::JacobiSVD<Matrix> svd(gs, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    if (sv(sv.size() - 1) <= 1e-12 * sv(0)) return;  // dependent rows; covered by a smaller subset
    const Matrix& v = svd.matrixV();
    w0 = gs.completeOrthogonalDecomposition().solve(t);
    null = v.rightCols(m - gs.rows());
  }
  const double r2 = 1.0 - w0.squaredNorm();
  if (r2 < -1e-12) return;
  const Vector d = null.col(0);
  const double r = std::sqrt(std::max(r2, 0.0));
  out.push_back(w0 + r * d);
  if (null.cols() == 1 && r > 0.0) out.push_back(w0 - r * d);
}

inline Selection enumerate_rotations(const Matrix& gamma, double delta) {
  const int p = static_cast<int>(gamma.rows());
  const int m = static_cast<int>(gamma.cols());
  Vector best_w;
  int best_obj = std::numeric_limits<int>::max();
  double best_mass = std::numeric_limits<double>::infinity();
  long evaluated = 0;
  std::vector<Vector> pts;
  auto consider = [&](const Vector& w) {
    ++evaluated;
    const Vector y = gamma * w;
    int out = 0;
    double mass = 0.0;
    for (Index j = 0; j < y.size(); ++j) {
      if (in_band(y(j), delta)) mass += std::abs(y(j));
      else ++out;
    }
    if (out < best_obj || (out == best_obj && mass < best_mass)) {
      best_obj = out;
      best_mass = mass;
      best_w = w;
    }
  };

  for (int s = 0; s < m; ++s) {
    for_each_subset(p, s, [&](const std::vector<int>& rows) {
      Matrix gs(s, m);
      for (int i = 0; i < s; ++i) gs.row(i) = gamma.row(rows[static_cast<std::size_t>(i)]);
      // Each chosen row sits at offset -delta, 0 or +delta.
      long combos = 1;
      for (int i = 0; i < s; ++i) combos *= 3;
      Vector t(s);
      for (long c = 0; c < combos; ++c) {
        long code = c;
        for (int i = 0; i < s; ++i) {
          // order 0, -delta, +delta so exact annihilation is tried first
          const int digit = static_cast<int>(code % 3);
          code /= 3;
          t(i) = digit == 0 ? 0.0 : (digit == 1 ? -delta : delta);
        }
        if (delta == 0.0 && c > 0) break;
        pts.clear();
        sphere_points(gs, t, pts);
        for (const auto& w : pts) consider(w);
      }
    });
  }
  Selection sel = make_selection(gamma, best_w, delta, SelectionMethod::Enumeration);
  sel.candidates = evaluated;
  return sel;
}

// Largest-norm vertex search over {w : |g_j w| <= b_j}. Returns a point of
// maximal norm, or nullopt-equivalent (empty vector) when the set is unbounded
// in which case any unit null direction of the stacked rows is returned.
struct PolytopeReach {
  bool reaches_sphere = false;
  Vector witness;  // unit vector inside the polytope when reaches_sphere
};

inline PolytopeReach polytope_reach(const Matrix& g, const Vector& b) {
  const Index m = g.cols(), k = g.rows();
  PolytopeReach res;
  if (k < m) {
    Eigen::JacobiSVD<Matrix> svd(k == 0 ? Matrix(Matrix::Zero(1, m)) : g, Eigen::ComputeFullV);
    res.reaches_sphere = true;
    res.witness = svd.matrixV().col(m - 1);
    return res;
  }
  Eigen::JacobiSVD<Matrix> full(g);
  const auto& sv = full.singularValues();
  if (sv(m - 1) <= 1e-12 * sv(0)) {
    Eigen::JacobiSVD<Matrix> svd(g, Eigen::ComputeFullV);
    res.reaches_sphere = true;
    res.witness = svd.matrixV().col(m - 1);
    return res;
  }
  double best = -1.0;
  Vector best_v;
  for_each_subset(static_cast<int>(k), static_cast<int>(m), [&](const std::vector<int>& rows) {
    Matrix gs(m, m);
    for (Index i = 0; i < m; ++i) gs.row(i) = g.row(rows[static_cast<std::size_t>(i)]);
    Eigen::PartialPivLU<Matrix> lu(gs);
    if (!(std::abs(lu.determinant()) > 1e-14 * std::pow(gs.norm(), static_cast<double>(m)))) return;
    Vector t(m);
    for (long signs = 0; signs < (1L << m); ++signs) {
      for (Index i = 0; i < m; ++i)
        t(i) = ((signs >> i) & 1L) ? -b(rows[static_cast<std::size_t>(i)]) : b(rows[static_cast<std::size_t>(i)]);
      const Vector v = lu.solve(t);
      const Vector gv = g * v;
      bool ok = true;
      for (Index j = 0; j < k && ok; ++j) ok = std::abs(gv(j)) <= b(j) * (1.0 + 1e-9) + 1e-15;
      if (ok && v.norm() > best) {
        best = v.norm();
        best_v = v;
      }
    }
  });
  if (best >= 1.0 - 1e-12) {
    res.reaches_sphere = true;
    res.witness = best_v / best;
  }
  return res;
}

// Exact search over the in-band indicators: a node fixes some rows in the band
// (|g_j w| <= delta) and some free (|g_j w| <= delta + M); it is feasible when
// that polytope holds a unit vector.
inline Selection branch_and_bound(const Matrix& gamma, double delta, double big_m) {
  const int p = static_cast<int>(gamma.rows());
  const int m = static_cast<int>(gamma.cols());
  std::vector<int> order(static_cast<std::size_t>(p));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return gamma.row(a).norm() < gamma.row(b).norm(); });

  int incumbent = p + 1;
  Vector best_w = Vector::Unit(m, 0);
  long nodes = 0;
  std::vector<int> state(static_cast<std::size_t>(p), -1);  // -1 undecided, 0 band, 1 free

  auto reach = [&]() {
    std::vector<int> rows;
    for (int j = 0; j < p; ++j)
      if (state[static_cast<std::size_t>(j)] >= 0) rows.push_back(j);
    Matrix g(static_cast<Index>(rows.size()), m);
    Vector b(static_cast<Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      g.row(static_cast<Index>(i)) = gamma.row(rows[i]);
      b(static_cast<Index>(i)) = state[static_cast<std::size_t>(rows[i])] == 0 ? delta : delta + big_m;
    }
    return polytope_reach(g, b);
  };

  auto recurse = [&](auto&& self, int depth, int n_free) -> void {
    ++nodes;
    if (n_free >= incumbent) return;
    const PolytopeReach r = reach();
    if (!r.reaches_sphere) return;
    const int realized = count_out(gamma * r.witness, delta);
    if (realized < incumbent) {
      incumbent = realized;
      best_w = r.witness;
    }
    if (depth == p || realized == n_free) return;
    const auto row = static_cast<std::size_t>(order[static_cast<std::size_t>(depth)]);
    state[row] = 0;
    self(self, depth + 1, n_free);
    state[row] = 1;
    self(self, depth + 1, n_free + 1);
    state[row] = -1;
  };
  recurse(recurse, 0, 0);

  Selection sel = make_selection(gamma, best_w, delta, SelectionMethod::BranchAndBound);
  sel.candidates = nodes;
  return sel;
}

}  // namespace detail

inline Selection select_negative_controls(const Matrix& gamma, double delta, const SelectionOptions& opt = {}) {
  if (gamma.cols() < 1 || gamma.rows() < 1) throw Error(ErrorKind::DimensionMismatch, "empty loading matrix");
  if (!(delta >= 0.0)) throw Error(ErrorKind::BadParams, "threshold must be nonnegative");
  if (!(opt.big_m > 0.0)) throw Error(ErrorKind::BadParams, "M must be positive");
  if (!gamma.allFinite()) throw Error(ErrorKind::BadParams, "loading matrix has non-finite entries");
  return opt.method == SelectionMethod::Enumeration ? detail::enumerate_rotations(gamma, delta)
                                                    : detail::branch_and_bound(gamma, delta, opt.big_m);
}

inline Selection select_negative_controls(const FactorFit& fit, const SelectionOptions& opt = {}) {
  return select_negative_controls(fit.loadings, fit.delta, opt);
}

struct EffectOptions {
  std::vector<double> lambda_grid;  // empty: 50 log-spaced values scaled per outcome
  int folds = 10;
  std::uint64_t seed = 0;
  // Per-outcome penalties to use instead of cross-validation (length p; only
  // entries for estimated outcomes are read).
  std::optional<std::vector<double>> fixed_lambda;
  double collinearity_threshold = 1e10;
};

struct EffectEstimate {
  Vector beta_hat;
  std::vector<double> lambda;  // NaN on negative controls
  std::vector<std::pair<double, double>> intervals;
  double level = 0.0;
  std::vector<double> first_stage_condition;   // NaN on negative controls
  std::vector<double> collinearity_condition;  // NaN on negative controls
  std::vector<std::string> warnings;
  int bootstrap_failures = 0;
};

inline std::vector<double> default_lambda_grid(double scale, int count = 50) {
  std::vector<double> g(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const double e = -4.0 + 8.0 * i / (count - 1);
    g[static_cast<std::size_t>(i)] = scale * std::pow(10.0, e);
  }
  return g;
}

namespace detail {

// Masked ridge with one unpenalized leading column, solved for every penalty
// at once by profiling out that column: returns coefficient vectors.
inline std::vector<Vector> ridge_path(const Matrix& gram, const Vector& rhs, const std::vector<double>& lambdas) {
  const Index m = gram.rows();
  const double xx = gram(0, 0);
  if (!(xx > 0.0)) throw Error(ErrorKind::SingularSystem, "exposure column has zero norm");
  const Vector wx = gram.col(0).tail(m - 1);
  const Matrix wtw = gram.bottomRightCorner(m - 1, m - 1) - wx * wx.transpose() / xx;
  const Vector wty = rhs.tail(m - 1) - wx * rhs(0) / xx;
  Eigen::SelfAdjointEigenSolver<Matrix> es(wtw);
  const Vector ev = es.eigenvalues().cwiseMax(0.0);
  const Matrix& v = es.eigenvectors();
  const Vector proj = v.transpose() * wty;
  std::vector<Vector> out;
  out.reserve(lambdas.size());
  for (double lam : lambdas) {
    Vector b(m);
    const Vector denom = (ev.array() + lam).matrix();
    if (!(denom.minCoeff() > 0.0)) throw Error(ErrorKind::SingularSystem, "zero penalty on a singular profile");
    b.tail(m - 1) = v * (proj.array() / denom.array()).matrix();
    b(0) = (rhs(0) - wx.dot(b.tail(m - 1))) / xx;
    out.push_back(std::move(b));
  }
  return out;
}

inline Matrix select_cols(const Matrix& a, const std::vector<int>& cols) {
  Matrix out(a.rows(), static_cast<Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Index>(i)) = a.col(cols[i]);
  return out;
}

inline Matrix select_rows(const Matrix& a, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = a.row(rows[i]);
  return out;
}

struct SecondStage {
  Matrix b_hat;  // (X, W_hat)
  double first_stage_condition = 0.0;
};

inline SecondStage second_stage_design(const Dataset& d, const std::vector<int>& s0, int ell) {
  const int p = static_cast<int>(d.p());
  std::vector<bool> in_s0(static_cast<std::size_t>(p), false);
  for (int j : s0) in_s0[static_cast<std::size_t>(j)] = true;
  std::vector<int> z;
  for (int j = 0; j < p; ++j)
    if (!in_s0[static_cast<std::size_t>(j)] && j != ell) z.push_back(j);
  Matrix a(d.n(), 1 + static_cast<Index>(z.size()));
  a.col(0) = d.x;
  a.rightCols(static_cast<Index>(z.size())) = select_cols(d.y, z);
  SecondStage st;
  st.first_stage_condition = condition_number(a);
  if (!(st.first_stage_condition <= 1e6)) {
    // (A'A) has condition number above 1e12
    throw Error(ErrorKind::FirstStageSingular,
                "first-stage design for outcome " + std::to_string(ell) + " is numerically singular");
  }
  const Matrix w = select_cols(d.y, s0);
  st.b_hat.resize(d.n(), 1 + static_cast<Index>(s0.size()));
  st.b_hat.col(0) = d.x;
  st.b_hat.rightCols(static_cast<Index>(s0.size())) = a * solve_ols(a, w);
  return st;
}

// Condition number of X against the leading principal directions of W_hat.
inline double collinearity_condition(const Matrix& b_hat, int r_hat) {
  const Matrix w = b_hat.rightCols(b_hat.cols() - 1);
  const int r = std::min<int>(r_hat, static_cast<int>(w.cols()));
  Matrix c(b_hat.rows(), 1 + r);
  c.col(0) = b_hat.col(0) / b_hat.col(0).norm();
  if (r > 0) {
    Eigen::JacobiSVD<Matrix> svd(w, Eigen::ComputeThinU);
    c.rightCols(r) = svd.matrixU().leftCols(r);
  }
  return condition_number(c);
}

inline double cv_lambda(const Matrix& b, const Vector& y, const std::vector<double>& grid, int folds,
                        std::uint64_t seed) {
  const auto split = kfold_split(b.rows(), folds, seed);
  const Matrix gram = b.transpose() * b;
  const Vector rhs = b.transpose() * y;
  std::vector<double> err(grid.size(), 0.0);
  for (const auto& fold : split) {
    const Matrix bf = select_rows(b, fold);
    Vector yf(static_cast<Index>(fold.size()));
    for (std::size_t i = 0; i < fold.size(); ++i) yf(static_cast<Index>(i)) = y(fold[i]);
    const auto path = ridge_path(gram - bf.transpose() * bf, rhs - bf.transpose() * yf, grid);
    for (std::size_t g = 0; g < grid.size(); ++g) err[g] += (yf - bf * path[g]).squaredNorm();
  }
  const auto best = std::min_element(err.begin(), err.end());
  return grid[static_cast<std::size_t>(best - err.begin())];
}

}  // namespace detail

inline EffectEstimate estimate_effects(const Dataset& data, const Selection& sel, int r_hat,
                                       const EffectOptions& opt = {}) {
  check_centered(data);
  const int p = static_cast<int>(data.p());
  EffectEstimate est;
  est.beta_hat = Vector::Zero(p);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  est.lambda.assign(static_cast<std::size_t>(p), nan);
  est.first_stage_condition.assign(static_cast<std::size_t>(p), nan);
  est.collinearity_condition.assign(static_cast<std::size_t>(p), nan);
  if (sel.s0_hat.empty()) throw Error(ErrorKind::NoNegativeControls, "no negative-control outcome was selected");
  for (int j : sel.s0_hat)
    if (j < 0 || j >= p) throw Error(ErrorKind::DimensionMismatch, "selection index out of range");
  if (static_cast<int>(sel.s0_hat.size()) == p) return est;

  std::vector<bool> in_s0(static_cast<std::size_t>(p), false);
  for (int j : sel.s0_hat) in_s0[static_cast<std::size_t>(j)] = true;
  std::vector<int> mask(sel.s0_hat.size() + 1, 1);
  mask[0] = 0;
  for (int ell = 0; ell < p; ++ell) {
    if (in_s0[static_cast<std::size_t>(ell)]) continue;
    const auto st = detail::second_stage_design(data, sel.s0_hat, ell);
    const Vector y = data.y.col(ell);
    est.first_stage_condition[static_cast<std::size_t>(ell)] = st.first_stage_condition;
    const double cc = detail::collinearity_condition(st.b_hat, r_hat);
    est.collinearity_condition[static_cast<std::size_t>(ell)] = cc;
    if (!(cc <= opt.collinearity_threshold)) {
      est.warnings.push_back("CollinearityWarning: outcome " + std::to_string(ell) +
                             ": exposure is nearly a combination of fitted negative controls (condition " +
                             std::to_string(cc) + ")");
    }
    double lam;
    if (opt.fixed_lambda) {
      lam = opt.fixed_lambda->at(static_cast<std::size_t>(ell));
    } else {
      std::vector<double> grid = opt.lambda_grid;
      if (grid.empty()) {
        const double scale = st.b_hat.squaredNorm() / static_cast<double>(st.b_hat.cols());
        grid = default_lambda_grid(scale);
      }
      lam = detail::cv_lambda(st.b_hat, y, grid, opt.folds, sub_seed(opt.seed, static_cast<std::uint64_t>(ell)));
    }
    est.lambda[static_cast<std::size_t>(ell)] = lam;
    est.beta_hat(ell) = ridge_masked(st.b_hat, y, lam, mask)(0);
  }
  return est;
}

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Pairs bootstrap with selection and per-outcome penalties held at their
// full-sample values. Fills est.intervals and est.bootstrap_failures.
inline void bootstrap_ci(const Dataset& data, const Selection& sel, int r_hat, EffectEstimate& est, double level,
                         int replicates, std::uint64_t seed) {
  if (replicates < 100) throw Error(ErrorKind::BadParams, "bootstrap needs at least 100 resamples");
  if (!(level > 0.0 && level < 1.0)) throw Error(ErrorKind::BadParams, "interval level must lie in (0,1)");
  const int p = static_cast<int>(data.p());
  const Index n = data.n();
  EffectOptions fixed;
  fixed.fixed_lambda = est.lambda;
  std::vector<std::vector<double>> draws(static_cast<std::size_t>(p));
  est.bootstrap_failures = 0;
  for (int b = 0; b < replicates; ++b) {
    Rng rng(sub_seed(seed, static_cast<std::uint64_t>(b)));
    std::uniform_int_distribution<Index> pick(0, n - 1);
    Dataset d;
    d.x.resize(n);
    d.y.resize(n, p);
    for (Index i = 0; i < n; ++i) {
      const Index r = pick(rng);
      d.x(i) = data.x(r);
      d.y.row(i) = data.y.row(r);
    }
    d = centered(std::move(d));
    try {
      const auto e = estimate_effects(d, sel, r_hat, fixed);
      for (int j = 0; j < p; ++j) draws[static_cast<std::size_t>(j)].push_back(e.beta_hat(j));
    } catch (const Error&) {
      ++est.bootstrap_failures;
    }
  }
  est.level = level;
  est.intervals.clear();
  const double a = (1.0 - level) / 2.0;
  for (int j = 0; j < p; ++j) {
    const auto& v = draws[static_cast<std::size_t>(j)];
    est.intervals.emplace_back(percentile(v, a), percentile(v, 1.0 - a));
  }
}

}  // namespace parout::linear_sem
