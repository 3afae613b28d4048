#pragma once

// Dense linear algebra and regression kernels shared by the estimators.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "parout/errors.hpp"

namespace parout {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using Rng = std::mt19937_64;

// Right eigenpairs of a real square matrix. Column j of `vectors` belongs to
// values[j]; each column has unit l1 norm (sum of moduli) and its first
// nonzero entry is real and positive. Pairs are sorted by ascending real part.
struct EigenPairs {
  Eigen::VectorXcd values;
  Eigen::MatrixXcd vectors;
};

inline double inf_norm(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  return a.cwiseAbs().rowwise().sum().maxCoeff();
}

inline bool all_finite(const Matrix& a) { return a.allFinite(); }

// Ratio of extreme singular values; +inf for singular or empty input.
inline double condition_number(const Matrix& a) {
  if (a.size() == 0) return std::numeric_limits<double>::infinity();
  Eigen::JacobiSVD<Matrix> svd(a);
  const auto& s = svd.singularValues();
  const double smin = s(s.size() - 1);
  if (!(smin > 0.0)) return std::numeric_limits<double>::infinity();
  return s(0) / smin;
}

inline EigenPairs eig_real(const Matrix& a) {
  if (a.rows() != a.cols()) {
    throw Error(ErrorKind::DimensionMismatch,
                "eig_real needs a square matrix, got " + std::to_string(a.rows()) + "x" +
                    std::to_string(a.cols()));
  }
  if (!all_finite(a)) throw Error(ErrorKind::BadParams, "eig_real input has non-finite entries");
  const Index k = a.rows();
  EigenPairs out;
  if (k == 0) return out;

  Eigen::EigenSolver<Matrix> es(a, true);
  if (es.info() != Eigen::Success) {
    throw Error(ErrorKind::NonConvergence,
                "eigen iteration failed for dimension " + std::to_string(k));
  }
  Eigen::VectorXcd vals = es.eigenvalues();
  Eigen::MatrixXcd vecs = es.eigenvectors();

  for (Index j = 0; j < k; ++j) {
    auto col = vecs.col(j);
    const double l1 = col.cwiseAbs().sum();
    if (l1 > 0.0) col /= l1;
    const double big = col.cwiseAbs().maxCoeff();
    for (Index i = 0; i < k; ++i) {
      const double m = std::abs(col(i));
      if (m > 1e-12 * big) {
        col *= std::conj(col(i)) / m;
        break;
      }
    }
  }

  std::vector<Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index l, Index r) {
    if (vals(l).real() != vals(r).real()) return vals(l).real() < vals(r).real();
    return vals(l).imag() < vals(r).imag();
  });
  out.values.resize(k);
  out.vectors.resize(k, k);
  for (Index j = 0; j < k; ++j) {
    out.values(j) = vals(order[static_cast<std::size_t>(j)]);
    out.vectors.col(j) = vecs.col(order[static_cast<std::size_t>(j)]);
  }

  const double scale = std::max(inf_norm(a), std::numeric_limits<double>::min());
  const Eigen::MatrixXcd ac = a.cast<std::complex<double>>();
  for (Index j = 0; j < k; ++j) {
    const Eigen::VectorXcd r = ac * out.vectors.col(j) - out.values(j) * out.vectors.col(j);
    const double res = r.cwiseAbs().maxCoeff();
    if (res > 1e-8 * scale) {
      throw Error(ErrorKind::NonConvergence,
                  "eigenpair residual " + std::to_string(res) + " exceeds tolerance for dimension " +
                      std::to_string(k));
    }
  }
  return out;
}

// Least squares through a thresholded SVD: singular values below
// 1e-10 * largest are dropped, giving the minimum-norm solution.
inline Matrix solve_ols(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) {
    throw Error(ErrorKind::DimensionMismatch, "design has " + std::to_string(x.rows()) +
                                                  " rows, response has " + std::to_string(y.rows()));
  }
  if (x.rows() < x.cols()) {
    throw Error(ErrorKind::DimensionMismatch, "solve_ols needs n >= q");
  }
  Eigen::BDCSVD<Matrix> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(1e-10);
  return svd.solve(y);
}

inline Vector solve_ols(const Matrix& x, const Vector& y) {
  return solve_ols(x, Matrix(y)).col(0);
}

// Solves (G + lambda * diag(mask)) b = rhs for a symmetric PSD Gram matrix G.
inline Vector ridge_from_gram(const Matrix& gram, const Vector& rhs, double lambda,
                              const std::vector<int>& mask) {
  const Index m = gram.rows();
  if (gram.cols() != m || rhs.size() != m || static_cast<Index>(mask.size()) != m) {
    throw Error(ErrorKind::DimensionMismatch, "ridge system dimensions disagree");
  }
  if (!(lambda >= 0.0)) throw Error(ErrorKind::BadParams, "ridge lambda must be nonnegative");
  Matrix pen = gram;
  for (Index j = 0; j < m; ++j) {
    const int f = mask[static_cast<std::size_t>(j)];
    if (f != 0 && f != 1) throw Error(ErrorKind::BadParams, "ridge mask entries must be 0 or 1");
    pen(j, j) += lambda * f;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(pen);
  if (es.info() != Eigen::Success) {
    throw Error(ErrorKind::SingularSystem, "eigensolver failed on penalized normal matrix");
  }
  const Vector ev = es.eigenvalues();
  const double emax = ev.cwiseAbs().maxCoeff();
  const double emin = ev.minCoeff();
  if (!(emin > 0.0) || emax / emin > 1e12) {
    throw Error(ErrorKind::SingularSystem,
                "penalized normal matrix condition number exceeds 1e12 (min eigenvalue " +
                    std::to_string(emin) + ")");
  }
  const Matrix& v = es.eigenvectors();
  return v * ((v.transpose() * rhs).array() / ev.array()).matrix();
}

// (B'B + lambda * diag(mask))^{-1} B'y.
inline Vector ridge_masked(const Matrix& b, const Vector& y, double lambda,
                           const std::vector<int>& mask) {
  if (b.rows() != y.size()) throw Error(ErrorKind::DimensionMismatch, "ridge design/response rows");
  return ridge_from_gram(b.transpose() * b, b.transpose() * y, lambda, mask);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Seed for run `index` of a sweep started from `master`; independent of the
// order in which runs execute.
inline std::uint64_t sub_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(master ^ splitmix64(index + 1));
}

// Partition of {0..n-1} into k folds of near-equal size (the first n % k
// folds get one extra element). Indices within a fold are ascending.
inline std::vector<std::vector<Index>> kfold_split(Index n, Index k, std::uint64_t seed) {
  if (k < 2 || k > n) {
    throw Error(ErrorKind::BadFoldCount,
                "need 2 <= k <= n, got k=" + std::to_string(k) + " n=" + std::to_string(n));
  }
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng(seed);
  for (Index i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<Index> pick(0, i);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
  }
  std::vector<std::vector<Index>> folds(static_cast<std::size_t>(k));
  Index pos = 0;
  for (Index f = 0; f < k; ++f) {
    const Index size = n / k + (f < n % k ? 1 : 0);
    auto& fold = folds[static_cast<std::size_t>(f)];
    fold.assign(perm.begin() + pos, perm.begin() + pos + size);
    std::sort(fold.begin(), fold.end());
    pos += size;
  }
  return folds;
}

struct LmOptions {
  int max_iterations = 500;
  double gradient_tolerance = 1e-10;
  double step_tolerance = 1e-14;
  double initial_damping = 1e-3;
};

struct LmResult {
  Vector x;
  double cost = 0.0;  // sum of squared residuals
  int iterations = 0;
  bool converged = false;
};

// Damped Gauss-Newton (Levenberg-Marquardt) on r(x) with a central-difference
// Jacobian. `residual` maps a parameter vector to a residual vector.
template <typename ResidualFn>
LmResult levenberg_marquardt(ResidualFn&& residual, Vector x0, const LmOptions& opt = {}) {
  const Index np = x0.size();
  auto jacobian = [&](const Vector& x, Index nr) {
    Matrix jac(nr, np);
    Vector xp = x;
    for (Index i = 0; i < np; ++i) {
      const double h = 1e-6 * std::max(1.0, std::abs(x(i)));
      xp(i) = x(i) + h;
      const Vector fp = residual(xp);
      xp(i) = x(i) - h;
      const Vector fm = residual(xp);
      xp(i) = x(i);
      jac.col(i) = (fp - fm) / (2.0 * h);
    }
    return jac;
  };

  LmResult res;
  res.x = std::move(x0);
  Vector r = residual(res.x);
  res.cost = r.squaredNorm();
  double mu = opt.initial_damping;
  Matrix jac = jacobian(res.x, r.size());
  Vector grad = jac.transpose() * r;
  for (res.iterations = 0; res.iterations < opt.max_iterations; ++res.iterations) {
    if (grad.lpNorm<Eigen::Infinity>() <= opt.gradient_tolerance) {
      res.converged = true;
      break;
    }
    const Matrix jtj = jac.transpose() * jac;
    Matrix damped = jtj;
    for (Index i = 0; i < np; ++i) damped(i, i) += mu * std::max(jtj(i, i), 1e-12);
    const Vector step = damped.ldlt().solve(-grad);
    if (!step.allFinite()) break;
    const Vector cand = res.x + step;
    const Vector rc = residual(cand);
    const double cc = rc.squaredNorm();
    if (std::isfinite(cc) && cc < res.cost) {
      const bool tiny = step.norm() <= opt.step_tolerance * (res.x.norm() + opt.step_tolerance);
      res.x = cand;
      r = rc;
      res.cost = cc;
      mu = std::max(mu / 3.0, 1e-12);
      jac = jacobian(res.x, r.size());
      grad = jac.transpose() * r;
      if (tiny) {
        res.converged = true;
        break;
      }
    } else {
      mu *= 4.0;
      if (mu > 1e16) {
        res.converged = true;  // no descent direction left at working precision
        break;
      }
    }
  }
  return res;
}

}  // namespace parout
