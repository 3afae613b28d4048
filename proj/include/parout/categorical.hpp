#pragma once

// Discrete parallel-outcome model: forward simulation of the observed law,
// identification of the latent-class parameters by eigendecomposition, a
// constrained least-squares refinement, and the g-formula.
//
// Category levels are 0-based throughout the library (the CLI converts from
// the 1-based labels used in input files). Outcome index j = 0, 1, 2 stands
// for Y1, Y2, Y3; Y1 is the outcome whose first level orders the latent
// classes.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "parout/errors.hpp"
#include "parout/numerics.hpp"

namespace parout::categorical {

inline constexpr int kOutcomes = 3;

struct Levels {
  int k_x = 2;
  std::array<int, kOutcomes> k_y{2, 2, 2};

  int cells() const { return k_x * k_y[0] * k_y[1] * k_y[2]; }
  bool operator==(const Levels&) const = default;
};

struct CategoricalParams {
  int k_u = 2;
  Levels levels;
  Vector pr_u;                                     // k_u
  Matrix pr_x_given_u;                             // k_x x k_u, column-stochastic
  std::array<Matrix, kOutcomes> pr_y_given_ux;     // k_yj x (k_u * k_x)

  // Column of pr_y_given_ux holding the pair (u, x).
  int col(int u, int x) const { return x * k_u + u; }
  double y(int j, int level, int u, int x) const {
    return pr_y_given_ux[static_cast<std::size_t>(j)](level, col(u, x));
  }
};

struct JointTable {
  Levels levels;
  std::vector<double> prob;  // indexed by flat(x, y1, y2, y3)

  std::size_t flat(int x, int a, int b, int c) const {
    const auto& k = levels.k_y;
    return static_cast<std::size_t>(((x * k[0] + a) * k[1] + b) * k[2] + c);
  }
  double at(int x, int a, int b, int c) const { return prob[flat(x, a, b, c)]; }
};

// Per-x conditional tables: p23[x](i, j) = pr(Y2=i, Y3=j | x) and
// p123[x][a](i, j) = pr(Y1=a, Y2=i, Y3=j | x). n == 0 marks population input.
struct EmpiricalTables {
  Levels levels;
  Vector pr_x;
  std::vector<Matrix> p23;
  std::vector<std::vector<Matrix>> p123;
  std::size_t n = 0;
};

// dist[j][x] is the probability vector of the potential outcome Y_j(x).
struct PotentialOutcomeDist {
  std::array<std::vector<Vector>, kOutcomes> dist;

  double at(int j, int x, int level) const {
    return dist[static_cast<std::size_t>(j)][static_cast<std::size_t>(x)](level);
  }
};

struct CategoricalRecord {
  int x = 0;
  std::array<int, kOutcomes> y{0, 0, 0};
  int u = -1;  // latent class when known (simulated data), otherwise -1
};

namespace detail {

inline void check_simplex(const Vector& v, double tol, const std::string& what) {
  for (Index i = 0; i < v.size(); ++i) {
    if (!(v(i) >= -tol && v(i) <= 1.0 + tol)) {
      throw Error(ErrorKind::BadParams, what + " has entry outside [0,1]");
    }
  }
  if (std::abs(v.sum() - 1.0) > tol) {
    std::ostringstream os;
    os << what << " sums to " << v.sum();
    throw Error(ErrorKind::BadParams, os.str());
  }
}

// Clips a column to [0,1] and rescales it to sum 1; returns the total clip.
inline double clip_renormalize(Eigen::Ref<Vector> v) {
  double clipped = 0.0;
  for (Index i = 0; i < v.size(); ++i) {
    if (v(i) < 0.0) {
      clipped += -v(i);
      v(i) = 0.0;
    } else if (v(i) > 1.0) {
      clipped += v(i) - 1.0;
      v(i) = 1.0;
    }
  }
  const double s = v.sum();
  if (s > 0.0) {
    v /= s;
  } else {
    v.setConstant(1.0 / static_cast<double>(v.size()));
  }
  return clipped;
}

}  // namespace detail

inline void validate(const CategoricalParams& p, double tol = 1e-12) {
  const auto& lv = p.levels;
  if (p.k_u < 1 || lv.k_x < 1) throw Error(ErrorKind::BadParams, "level counts must be positive");
  for (int k : lv.k_y)
    if (k < 1) throw Error(ErrorKind::BadParams, "outcome level counts must be positive");
  if (p.pr_u.size() != p.k_u) throw Error(ErrorKind::BadParams, "pr_u has wrong length");
  if (p.pr_x_given_u.rows() != lv.k_x || p.pr_x_given_u.cols() != p.k_u)
    throw Error(ErrorKind::BadParams, "pr_x_given_u has wrong shape");
  detail::check_simplex(p.pr_u, tol, "pr_u");
  for (int u = 0; u < p.k_u; ++u)
    detail::check_simplex(p.pr_x_given_u.col(u), tol, "pr_x_given_u column");
  for (int j = 0; j < kOutcomes; ++j) {
    const auto& m = p.pr_y_given_ux[static_cast<std::size_t>(j)];
    if (m.rows() != lv.k_y[static_cast<std::size_t>(j)] || m.cols() != p.k_u * lv.k_x)
      throw Error(ErrorKind::BadParams, "pr_y_given_ux[" + std::to_string(j) + "] has wrong shape");
    for (Index c = 0; c < m.cols(); ++c)
      detail::check_simplex(m.col(c), tol, "pr_y_given_ux[" + std::to_string(j) + "] column");
  }
}

// pr(x, y1, y2, y3) = sum_u pr(u) pr(x|u) prod_j pr(y_j | u, x).
inline JointTable forward_joint(const CategoricalParams& p) {
  validate(p);
  JointTable jt;
  jt.levels = p.levels;
  const auto& k = p.levels.k_y;
  jt.prob.assign(static_cast<std::size_t>(p.levels.cells()), 0.0);
  for (int x = 0; x < p.levels.k_x; ++x)
    for (int u = 0; u < p.k_u; ++u) {
      const double w = p.pr_u(u) * p.pr_x_given_u(x, u);
      for (int a = 0; a < k[0]; ++a)
        for (int b = 0; b < k[1]; ++b)
          for (int c = 0; c < k[2]; ++c)
            jt.prob[jt.flat(x, a, b, c)] += w * p.y(0, a, u, x) * p.y(1, b, u, x) * p.y(2, c, u, x);
    }
  return jt;
}

namespace detail {

inline EmpiricalTables tables_from_counts(const Levels& lv, const std::vector<double>& mass,
                                          std::size_t n) {
  EmpiricalTables t;
  t.levels = lv;
  t.n = n;
  const auto& k = lv.k_y;
  t.pr_x = Vector::Zero(lv.k_x);
  t.p23.assign(static_cast<std::size_t>(lv.k_x), Matrix::Zero(k[1], k[2]));
  t.p123.assign(static_cast<std::size_t>(lv.k_x),
                std::vector<Matrix>(static_cast<std::size_t>(k[0]), Matrix::Zero(k[1], k[2])));
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  std::size_t idx = 0;
  for (int x = 0; x < lv.k_x; ++x) {
    double mx = 0.0;
    for (int a = 0; a < k[0]; ++a)
      for (int b = 0; b < k[1]; ++b)
        for (int c = 0; c < k[2]; ++c) {
          const double m = mass[idx++];
          t.p123[static_cast<std::size_t>(x)][static_cast<std::size_t>(a)](b, c) = m;
          mx += m;
        }
    if (!(mx > 0.0)) {
      throw Error(ErrorKind::EmptyStratum, "exposure level " + std::to_string(x) + " has no mass");
    }
    t.pr_x(x) = mx / total;
    auto& p23 = t.p23[static_cast<std::size_t>(x)];
    for (auto& m : t.p123[static_cast<std::size_t>(x)]) {
      m /= mx;
      p23 += m;
    }
  }
  return t;
}

}  // namespace detail

// Exact conditioning of a population table; the result has n == 0.
inline EmpiricalTables tables_from_joint(const JointTable& jt) {
  return detail::tables_from_counts(jt.levels, jt.prob, 0);
}

inline EmpiricalTables empirical_tables(std::span<const CategoricalRecord> samples,
                                        const Levels& lv) {
  std::vector<double> counts(static_cast<std::size_t>(lv.cells()), 0.0);
  JointTable shape{lv, {}};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& r = samples[i];
    bool ok = r.x >= 0 && r.x < lv.k_x;
    for (int j = 0; j < kOutcomes; ++j)
      ok = ok && r.y[static_cast<std::size_t>(j)] >= 0 &&
           r.y[static_cast<std::size_t>(j)] < lv.k_y[static_cast<std::size_t>(j)];
    if (!ok) {
      throw Error(ErrorKind::BadParams,
                  "record " + std::to_string(i) + " has a level outside the declared counts");
    }
    counts[shape.flat(r.x, r.y[0], r.y[1], r.y[2])] += 1.0;
  }
  return detail::tables_from_counts(lv, counts, samples.size());
}

// Joint probabilities pr(x, y1, y2, y3) implied by conditional tables.
inline std::vector<double> joint_from_tables(const EmpiricalTables& t) {
  const auto& lv = t.levels;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(lv.cells()));
  for (int x = 0; x < lv.k_x; ++x)
    for (int a = 0; a < lv.k_y[0]; ++a)
      for (int b = 0; b < lv.k_y[1]; ++b)
        for (int c = 0; c < lv.k_y[2]; ++c)
          out.push_back(t.p123[static_cast<std::size_t>(x)][static_cast<std::size_t>(a)](b, c) *
                        t.pr_x(x));
  return out;
}

struct IdentifyOptions {
  double eps_rank = 1e-8;        // P23[x] must have condition number <= 1 / eps_rank
  double eps_imag = 1e-6;        // relative to the spectral radius
  double order_tolerance = 1e-8; // minimal eigenvalue gap / ordering significance
};

struct StratumDiagnostics {
  double condition_number = 0.0;
  double min_eigen_gap = 0.0;
  double max_imag_ratio = 0.0;
  double pd_offdiag = 0.0;  // largest off-diagonal of the recovered P_D(U|x)
  // ordering[a] lists latent classes sorted by ascending pr(Y1=a | u, x).
  std::vector<std::vector<int>> ordering;
};

struct IdentifyDiagnostics {
  std::vector<StratumDiagnostics> strata;
  double clip_total = 0.0;
  bool order_consistent = true;
};

struct IdentifyResult {
  CategoricalParams params;
  IdentifyDiagnostics diagnostics;
};

namespace detail {

struct StratumFit {
  Matrix y1;  // k_y1 x k : pr(Y1=a | u, x)
  Matrix y2;  // k x k : columns pr(Y2 | u, x), unnormalized signs possible
  Matrix y3;
  StratumDiagnostics diag;
};

inline Matrix real_probability_columns(const Eigen::MatrixXcd& vecs) {
  Matrix out = vecs.real();
  for (Index c = 0; c < out.cols(); ++c) {
    const double s = out.col(c).sum();
    if (std::abs(s) < 1e-14) {
      throw Error(ErrorKind::RankDeficient, "eigenvector with zero total mass");
    }
    out.col(c) /= s;
  }
  return out;
}

inline double check_spectrum(const EigenPairs& ep, double eps_imag, int x) {
  const double rho = ep.values.cwiseAbs().maxCoeff();
  double worst = 0.0;
  for (Index i = 0; i < ep.values.size(); ++i) worst = std::max(worst, std::abs(ep.values(i).imag()));
  const double ratio = rho > 0.0 ? worst / rho : 0.0;
  if (ratio > eps_imag) {
    std::ostringstream os;
    os << "eigenvalue imaginary part " << worst << " exceeds tolerance at x=" << x;
    throw Error(ErrorKind::ComplexSpectrum, os.str());
  }
  return ratio;
}

// Permutation perm maximizing sum_i |score(i, perm[i])|.
inline std::vector<int> best_assignment(const Matrix& score) {
  const int k = static_cast<int>(score.rows());
  std::vector<int> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  if (k <= 7) {
    std::vector<int> best = perm;
    double best_v = -1.0;
    do {
      double v = 0.0;
      for (int i = 0; i < k; ++i) v += score(i, perm[static_cast<std::size_t>(i)]);
      if (v > best_v) {
        best_v = v;
        best = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
  }
  std::vector<bool> used(static_cast<std::size_t>(k), false);
  for (int i = 0; i < k; ++i) {
    int arg = -1;
    for (int c = 0; c < k; ++c)
      if (!used[static_cast<std::size_t>(c)] && (arg < 0 || score(i, c) > score(i, arg))) arg = c;
    perm[static_cast<std::size_t>(i)] = arg;
    used[static_cast<std::size_t>(arg)] = true;
  }
  return perm;
}

inline std::vector<int> argsort(const Eigen::Ref<const Vector>& v) {
  std::vector<int> idx(static_cast<std::size_t>(v.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v(a) < v(b); });
  return idx;
}

inline StratumFit decompose_stratum(const EmpiricalTables& t, int x, const IdentifyOptions& opt) {
  const auto sx = static_cast<std::size_t>(x);
  const Matrix& p23 = t.p23[sx];
  const int k = static_cast<int>(p23.rows());
  const int k1 = t.levels.k_y[0];
  StratumFit fit;
  fit.diag.condition_number = condition_number(p23);
  if (!(fit.diag.condition_number <= 1.0 / opt.eps_rank)) {
    std::ostringstream os;
    os << "P(Y2,Y3|x=" << x << ") has condition number " << fit.diag.condition_number;
    throw Error(ErrorKind::RankDeficient, os.str());
  }
  const Matrix inv = p23.partialPivLu().inverse();

  const EigenPairs first = eig_real(t.p123[sx][0] * inv);
  fit.diag.max_imag_ratio = check_spectrum(first, opt.eps_imag, x);
  fit.y2 = real_probability_columns(first.vectors);

  // Transposed problem has the same spectrum; its eigenvectors carry Y3.
  const EigenPairs third = eig_real(t.p123[sx][0].transpose() * inv.transpose());
  check_spectrum(third, opt.eps_imag, x);
  fit.y3 = real_probability_columns(third.vectors);

  fit.y1.resize(k1, k);
  fit.y1.row(0) = first.values.real().transpose();
  fit.diag.min_eigen_gap = std::numeric_limits<double>::infinity();
  for (int u = 1; u < k; ++u)
    fit.diag.min_eigen_gap =
        std::min(fit.diag.min_eigen_gap, first.values(u).real() - first.values(u - 1).real());

  // Remaining Y1 levels: eigenvalues are attached to the latent classes by
  // matching eigenvectors against the basis from the first level.
  Matrix basis = first.vectors.real();
  for (Index c = 0; c < basis.cols(); ++c) basis.col(c).normalize();
  for (int a = 1; a < k1; ++a) {
    const EigenPairs ep = eig_real(t.p123[sx][static_cast<std::size_t>(a)] * inv);
    fit.diag.max_imag_ratio = std::max(fit.diag.max_imag_ratio, check_spectrum(ep, opt.eps_imag, x));
    Matrix vecs = ep.vectors.real();
    Matrix score(k, k);  // score(u, i) = |cos(basis_u, vec_i)|
    for (int i = 0; i < k; ++i) {
      const double nrm = vecs.col(i).norm();
      if (nrm > 0) vecs.col(i) /= nrm;
    }
    for (int u = 0; u < k; ++u)
      for (int i = 0; i < k; ++i) score(u, i) = std::abs(basis.col(u).dot(vecs.col(i)));
    const auto perm = best_assignment(score);
    for (int u = 0; u < k; ++u) fit.y1(a, u) = ep.values(perm[static_cast<std::size_t>(u)]).real();
  }

  fit.diag.ordering.resize(static_cast<std::size_t>(k1));
  for (int a = 0; a < k1; ++a) fit.diag.ordering[static_cast<std::size_t>(a)] = argsort(fit.y1.row(a).transpose());
  return fit;
}

// Condition-2 check: for every Y1 level and every pair of latent classes the
// sign of the difference must agree across exposure levels.
inline bool ordering_consistent(const std::vector<Matrix>& y1_by_x, double tol) {
  if (y1_by_x.empty()) return true;
  const Index k1 = y1_by_x.front().rows();
  const Index k = y1_by_x.front().cols();
  for (Index a = 0; a < k1; ++a)
    for (Index u1 = 0; u1 < k; ++u1)
      for (Index u2 = u1 + 1; u2 < k; ++u2) {
        int sign = 0;
        for (const auto& m : y1_by_x) {
          const double d = m(a, u2) - m(a, u1);
          const int s = d > tol ? 1 : (d < -tol ? -1 : 0);
          if (s == 0) continue;
          if (sign == 0) sign = s;
          else if (s != sign) return false;
        }
      }
  return true;
}

inline void check_identifiable_shape(const Levels& lv) {
  if (lv.k_y[1] < 2 || lv.k_y[2] < 2) {
    throw Error(ErrorKind::TooFewOutcomes,
                "identification needs three informative outcomes; Y2 and Y3 must each have at "
                "least two levels (with two outcomes the observed law does not determine the "
                "potential-outcome distributions)");
  }
  if (lv.k_y[0] < 2) throw Error(ErrorKind::TooFewOutcomes, "Y1 must have at least two levels");
  if (lv.k_y[1] != lv.k_y[2]) {
    throw Error(ErrorKind::BadParams,
                "Y2 and Y3 must have the same number of levels (the latent class count); merge "
                "levels before fitting");
  }
}

}  // namespace detail

inline IdentifyResult plugin_identify(const EmpiricalTables& t, const IdentifyOptions& opt = {}) {
  const Levels& lv = t.levels;
  detail::check_identifiable_shape(lv);
  const int k = lv.k_y[1];
  IdentifyResult res;
  auto& diag = res.diagnostics;
  CategoricalParams& p = res.params;
  p.k_u = k;
  p.levels = lv;
  for (int j = 0; j < kOutcomes; ++j)
    p.pr_y_given_ux[static_cast<std::size_t>(j)].resize(lv.k_y[static_cast<std::size_t>(j)], k * lv.k_x);
  Matrix pu_given_x(k, lv.k_x);
  std::vector<Matrix> y1_by_x;

  for (int x = 0; x < lv.k_x; ++x) {
    detail::StratumFit fit = detail::decompose_stratum(t, x, opt);
    if (!(fit.diag.min_eigen_gap > opt.order_tolerance)) {
      std::ostringstream os;
      os << "pr(Y1=1|u,x=" << x << ") values are not separated (gap " << fit.diag.min_eigen_gap
         << "); latent classes cannot be ordered";
      throw Error(ErrorKind::OrderInstability, os.str());
    }
    // P_D(U|x) = P(Y2|U,x)^{-1} P23 P(Y3|U,x)^{-T}, using unclipped columns.
    const Matrix pd = fit.y2.partialPivLu().solve(t.p23[static_cast<std::size_t>(x)]) *
                      fit.y3.transpose().partialPivLu().inverse();
    Vector d = pd.diagonal();
    fit.diag.pd_offdiag = (pd - Matrix(d.asDiagonal())).cwiseAbs().maxCoeff();
    diag.clip_total += detail::clip_renormalize(d);
    pu_given_x.col(x) = d;
    for (int u = 0; u < k; ++u) {
      const int c = p.col(u, x);
      Vector c1 = fit.y1.col(u), c2 = fit.y2.col(u), c3 = fit.y3.col(u);
      diag.clip_total += detail::clip_renormalize(c1);
      diag.clip_total += detail::clip_renormalize(c2);
      diag.clip_total += detail::clip_renormalize(c3);
      p.pr_y_given_ux[0].col(c) = c1;
      p.pr_y_given_ux[1].col(c) = c2;
      p.pr_y_given_ux[2].col(c) = c3;
    }
    y1_by_x.push_back(fit.y1);
    diag.strata.push_back(std::move(fit.diag));
  }

  diag.order_consistent = detail::ordering_consistent(y1_by_x, opt.order_tolerance);
  if (!diag.order_consistent) {
    std::ostringstream os;
    os << "latent-class ordering of pr(Y1|u,x) differs across exposure levels:";
    for (std::size_t x = 0; x < diag.strata.size(); ++x) {
      os << " x=" << x << " [";
      for (const auto& ord : diag.strata[x].ordering) {
        os << "(";
        for (int u : ord) os << u;
        os << ")";
      }
      os << "]";
    }
    throw Error(ErrorKind::OrderInstability, os.str());
  }

  p.pr_u = pu_given_x * t.pr_x;
  diag.clip_total += detail::clip_renormalize(p.pr_u);
  p.pr_x_given_u.resize(lv.k_x, k);
  for (int u = 0; u < k; ++u) {
    Vector col(lv.k_x);
    for (int x = 0; x < lv.k_x; ++x)
      col(x) = p.pr_u(u) > 0.0 ? pu_given_x(u, x) * t.pr_x(x) / p.pr_u(u) : 1.0 / lv.k_x;
    diag.clip_total += detail::clip_renormalize(col);
    p.pr_x_given_u.col(u) = col;
  }
  return res;
}

struct ConditionReport {
  std::vector<double> condition_numbers;
  std::vector<bool> full_rank;
  std::vector<double> min_eigen_gaps;
  std::vector<std::vector<std::vector<int>>> orderings;  // [x][level] -> classes ascending
  bool all_full_rank = false;
  bool order_consistent = false;
  std::vector<std::string> notes;
};

// Never throws on data problems; every failure becomes a verdict or a note.
inline ConditionReport check_conditions(const EmpiricalTables& t, const IdentifyOptions& opt = {}) {
  ConditionReport rep;
  const int kx = t.levels.k_x;
  rep.all_full_rank = true;
  std::vector<Matrix> y1_by_x;
  bool decomposed = true;
  for (int x = 0; x < kx; ++x) {
    const Matrix& p23 = t.p23[static_cast<std::size_t>(x)];
    const double cn = p23.rows() == p23.cols() ? condition_number(p23)
                                               : std::numeric_limits<double>::infinity();
    rep.condition_numbers.push_back(cn);
    const bool fr = cn <= 1.0 / opt.eps_rank;
    rep.full_rank.push_back(fr);
    rep.all_full_rank = rep.all_full_rank && fr;
    rep.min_eigen_gaps.push_back(std::numeric_limits<double>::quiet_NaN());
    rep.orderings.emplace_back();
    if (!fr) {
      rep.notes.push_back("x=" + std::to_string(x) + ": P(Y2,Y3|x) is not of full rank");
      decomposed = false;
      continue;
    }
    try {
      detail::StratumFit fit = detail::decompose_stratum(t, x, opt);
      rep.min_eigen_gaps.back() = fit.diag.min_eigen_gap;
      rep.orderings.back() = fit.diag.ordering;
      y1_by_x.push_back(fit.y1);
      if (!(fit.diag.min_eigen_gap > opt.order_tolerance)) {
        rep.notes.push_back("x=" + std::to_string(x) + ": tied eigenvalues for pr(Y1=1|u,x)");
        decomposed = false;
      }
    } catch (const Error& e) {
      rep.notes.push_back("x=" + std::to_string(x) + ": " + e.what());
      decomposed = false;
    }
  }
  rep.order_consistent = decomposed && detail::ordering_consistent(y1_by_x, opt.order_tolerance);
  if (decomposed && !rep.order_consistent)
    rep.notes.push_back("ordering of latent classes differs across exposure levels");
  return rep;
}

// pr{y_j(x)} = sum_u pr(y_j | u, x) pr(u).
inline PotentialOutcomeDist g_formula(const CategoricalParams& p) {
  validate(p, 1e-8);
  PotentialOutcomeDist out;
  for (int j = 0; j < kOutcomes; ++j) {
    auto& dj = out.dist[static_cast<std::size_t>(j)];
    const auto& m = p.pr_y_given_ux[static_cast<std::size_t>(j)];
    for (int x = 0; x < p.levels.k_x; ++x) {
      Vector v = Vector::Zero(m.rows());
      for (int u = 0; u < p.k_u; ++u) v += p.pr_u(u) * m.col(p.col(u, x));
      dj.push_back(v);
    }
  }
  return out;
}

// Confounded baseline: the observed conditionals pr(y_j | x).
inline PotentialOutcomeDist crude_estimate(const EmpiricalTables& t) {
  PotentialOutcomeDist out;
  for (int x = 0; x < t.levels.k_x; ++x) {
    const auto sx = static_cast<std::size_t>(x);
    if (!(t.pr_x(x) > 0.0) || !(t.p23[sx].sum() > 0.0)) {
      throw Error(ErrorKind::EmptyStratum, "exposure level " + std::to_string(x) + " is empty");
    }
    Vector y1(t.levels.k_y[0]);
    for (int a = 0; a < t.levels.k_y[0]; ++a) y1(a) = t.p123[sx][static_cast<std::size_t>(a)].sum();
    out.dist[0].push_back(y1);
    out.dist[1].push_back(t.p23[sx].rowwise().sum());
    out.dist[2].push_back(t.p23[sx].colwise().sum().transpose());
  }
  return out;
}

// Unweighted least-squares distance between the tables' joint law and the
// model's, the objective minimized by gls_refine.
inline double gls_objective(const EmpiricalTables& t, const CategoricalParams& p) {
  const std::vector<double> emp = joint_from_tables(t);
  const JointTable model = forward_joint(p);
  double s = 0.0;
  for (std::size_t i = 0; i < emp.size(); ++i) {
    const double d = emp[i] - model.prob[i];
    s += d * d;
  }
  return s;
}

namespace detail {

// Unconstrained coordinates for CategoricalParams: softmax logits (first level
// as reference) for every simplex column, except that pr(Y1=first | u, x) is
// a logistic transform of a running sum with positive increments in u.
class GlsParameterization {
 public:
  GlsParameterization(int k_u, const Levels& lv) : k_u_(k_u), lv_(lv) {}

  Index size() const {
    const Index ku = k_u_, kx = lv_.k_x;
    Index n = (ku - 1) + ku * (kx - 1);
    n += kx * ku + ku * kx * std::max(0, lv_.k_y[0] - 2);
    n += ku * kx * (lv_.k_y[1] - 1) + ku * kx * (lv_.k_y[2] - 1);
    return n;
  }

  CategoricalParams decode(const Vector& th) const {
    CategoricalParams p;
    p.k_u = k_u_;
    p.levels = lv_;
    Index pos = 0;
    p.pr_u = softmax(th, pos, k_u_);
    p.pr_x_given_u.resize(lv_.k_x, k_u_);
    for (int u = 0; u < k_u_; ++u) p.pr_x_given_u.col(u) = softmax(th, pos, lv_.k_x);
    const int k1 = lv_.k_y[0];
    p.pr_y_given_ux[0].resize(k1, k_u_ * lv_.k_x);
    for (int x = 0; x < lv_.k_x; ++x) {
      double c = 0.0;
      for (int u = 0; u < k_u_; ++u) {
        c = u == 0 ? th(pos++) : c + std::exp(th(pos++));
        const double first = 1.0 / (1.0 + std::exp(-c));
        Vector col(k1);
        col(0) = first;
        if (k1 > 1) {
          const Vector rest = softmax(th, pos, k1 - 1);
          col.tail(k1 - 1) = (1.0 - first) * rest;
        }
        p.pr_y_given_ux[0].col(p.col(u, x)) = col;
      }
    }
    for (int j = 1; j < kOutcomes; ++j) {
      const int kj = lv_.k_y[static_cast<std::size_t>(j)];
      auto& m = p.pr_y_given_ux[static_cast<std::size_t>(j)];
      m.resize(kj, k_u_ * lv_.k_x);
      for (int x = 0; x < lv_.k_x; ++x)
        for (int u = 0; u < k_u_; ++u) m.col(p.col(u, x)) = softmax(th, pos, kj);
    }
    return p;
  }

  Vector encode(const CategoricalParams& p) const {
    Vector th(size());
    Index pos = 0;
    put_logits(th, pos, p.pr_u);
    for (int u = 0; u < k_u_; ++u) put_logits(th, pos, p.pr_x_given_u.col(u));
    const int k1 = lv_.k_y[0];
    for (int x = 0; x < lv_.k_x; ++x) {
      double prev = 0.0;
      for (int u = 0; u < k_u_; ++u) {
        const Vector col = p.pr_y_given_ux[0].col(p.col(u, x));
        const double f = std::clamp(col(0), 1e-10, 1.0 - 1e-10);
        const double c = std::log(f / (1.0 - f));
        th(pos++) = u == 0 ? c : std::log(std::max(c - prev, 1e-8));
        prev = u == 0 ? c : prev + std::max(c - prev, 1e-8);
        if (k1 > 1) put_logits(th, pos, col.tail(k1 - 1));
      }
    }
    for (int j = 1; j < kOutcomes; ++j)
      for (int x = 0; x < lv_.k_x; ++x)
        for (int u = 0; u < k_u_; ++u)
          put_logits(th, pos, p.pr_y_given_ux[static_cast<std::size_t>(j)].col(p.col(u, x)));
    return th;
  }

 private:
  static Vector softmax(const Vector& th, Index& pos, int k) {
    Vector v(k);
    v(0) = 0.0;
    for (int i = 1; i < k; ++i) v(i) = th(pos++);
    const double mx = v.maxCoeff();
    v = (v.array() - mx).exp();
    return v / v.sum();
  }

  static void put_logits(Vector& th, Index& pos, const Vector& probs) {
    const Index k = probs.size();
    Vector q = probs.cwiseMax(1e-10);
    q /= q.sum();
    for (Index i = 1; i < k; ++i) th(pos++) = std::log(q(i) / q(0));
  }

  int k_u_;
  Levels lv_;
};

}  // namespace detail

struct GlsOptions {
  int max_iterations = 500;
  double gradient_tolerance = 1e-10;
};

struct GlsResult {
  CategoricalParams params;
  double objective = 0.0;
  double warm_objective = 0.0;
  int iterations = 0;
  bool improved = false;
  // Set when the warm start had a positive objective and no iterate beat it;
  // params then equal the warm start.
  bool optim_failure = false;
};

inline GlsResult gls_refine(const EmpiricalTables& t, const CategoricalParams& warm,
                            const GlsOptions& opt = {}) {
  validate(warm, 1e-8);
  if (!(warm.levels == t.levels)) throw Error(ErrorKind::DimensionMismatch, "warm start levels");
  for (int x = 0; x < warm.levels.k_x; ++x)
    for (int u = 1; u < warm.k_u; ++u)
      if (warm.y(0, 0, u, x) < warm.y(0, 0, u - 1, x))
        throw Error(ErrorKind::BadParams, "warm start violates the latent-class ordering");

  GlsResult res;
  res.warm_objective = gls_objective(t, warm);
  res.params = warm;
  res.objective = res.warm_objective;
  if (res.warm_objective <= 1e-28) return res;

  const std::vector<double> emp = joint_from_tables(t);
  const detail::GlsParameterization par(warm.k_u, warm.levels);
  auto residual = [&](const Vector& th) -> Vector {
    const CategoricalParams p = par.decode(th);
    const auto& k = p.levels.k_y;
    Vector r(static_cast<Index>(emp.size()));
    Index idx = 0;
    for (int x = 0; x < p.levels.k_x; ++x)
      for (int a = 0; a < k[0]; ++a)
        for (int b = 0; b < k[1]; ++b)
          for (int c = 0; c < k[2]; ++c) {
            double m = 0.0;
            for (int u = 0; u < p.k_u; ++u)
              m += p.pr_u(u) * p.pr_x_given_u(x, u) * p.y(0, a, u, x) * p.y(1, b, u, x) *
                   p.y(2, c, u, x);
            r(idx) = emp[static_cast<std::size_t>(idx)] - m;
            ++idx;
          }
    return r;
  };
  LmOptions lm;
  lm.max_iterations = opt.max_iterations;
  lm.gradient_tolerance = opt.gradient_tolerance;
  const LmResult fit = levenberg_marquardt(residual, par.encode(warm), lm);
  res.iterations = fit.iterations;
  if (fit.x.allFinite()) {
    CategoricalParams cand = par.decode(fit.x);
    const double obj = gls_objective(t, cand);
    if (obj < res.warm_objective) {
      res.params = std::move(cand);
      res.objective = obj;
      res.improved = true;
    }
  }
  res.optim_failure = !res.improved;
  return res;
}

// Starting values drawn uniform on [0,1] and normalized per simplex; the
// latent-class columns of Y1 are then sorted per x so that pr(Y1=first|u,x)
// increases in u.
inline CategoricalParams random_start(int k_u, const Levels& lv, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto draw = [&](Index k) {
    Vector v(k);
    for (Index i = 0; i < k; ++i) v(i) = unif(rng);
    const double s = v.sum();
    return s > 0.0 ? Vector(v / s) : Vector(Vector::Constant(k, 1.0 / static_cast<double>(k)));
  };
  CategoricalParams p;
  p.k_u = k_u;
  p.levels = lv;
  p.pr_u = draw(k_u);
  p.pr_x_given_u.resize(lv.k_x, k_u);
  for (int u = 0; u < k_u; ++u) p.pr_x_given_u.col(u) = draw(lv.k_x);
  for (int j = 0; j < kOutcomes; ++j) {
    auto& m = p.pr_y_given_ux[static_cast<std::size_t>(j)];
    m.resize(lv.k_y[static_cast<std::size_t>(j)], k_u * lv.k_x);
    for (Index c = 0; c < m.cols(); ++c) m.col(c) = draw(m.rows());
  }
  for (int x = 0; x < lv.k_x; ++x) {
    Matrix block = p.pr_y_given_ux[0].middleCols(x * k_u, k_u);
    const auto order = detail::argsort(block.row(0).transpose());
    for (int u = 0; u < k_u; ++u)
      p.pr_y_given_ux[0].col(p.col(u, x)) = block.col(order[static_cast<std::size_t>(u)]);
  }
  return p;
}

}  // namespace parout::categorical
