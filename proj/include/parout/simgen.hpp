#pragma once

// Seeded generators for the binary latent-class design and the linear factor
// design, plus the Monte Carlo harness that rebuilds the reference tables.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "parout/categorical.hpp"
#include "parout/errors.hpp"
#include "parout/linear_sem.hpp"
#include "parout/numerics.hpp"

namespace parout::simgen {

using categorical::CategoricalParams;
using categorical::CategoricalRecord;

// U, X and every outcome binary; index 0 is the level labelled 1.
//   pr(U=1) = 0.65, pr(X=1 | U) = (0.4, 0.7)
//   pr(Y1=1 | u, x):  u=1: (0.4, 0.3)   u=2: (0.7, 0.6)   (columns x=1, x=2)
//   pr(Y2=1 | u, x):  u=1: (0.25, 0.45) u=2: (0.45, 0.75)
//   pr(Y3=1 | u, x):  u=1: (0.15, 0.25) u=2: (0.45, 0.65)
inline CategoricalParams categorical_design() {
  CategoricalParams p;
  p.k_u = 2;
  p.levels = categorical::Levels{2, {2, 2, 2}};
  p.pr_u = Vector(2);
  p.pr_u << 0.65, 0.35;
  p.pr_x_given_u = Matrix(2, 2);
  p.pr_x_given_u << 0.4, 0.7, 0.6, 0.3;
  const double first[3][2][2] = {{{0.4, 0.3}, {0.7, 0.6}}, {{0.25, 0.45}, {0.45, 0.75}}, {{0.15, 0.25}, {0.45, 0.65}}};
  for (int j = 0; j < 3; ++j) {
    auto& m = p.pr_y_given_ux[static_cast<std::size_t>(j)];
    m.resize(2, 4);
    for (int u = 0; u < 2; ++u)
      for (int x = 0; x < 2; ++x) {
        m(0, p.col(u, x)) = first[j][u][x];
        m(1, p.col(u, x)) = 1.0 - first[j][u][x];
      }
  }
  return p;
}

namespace detail {

inline int draw_level(const Eigen::Ref<const Vector>& probs, double r) {
  double c = 0.0;
  const Index k = probs.size();
  for (Index i = 0; i + 1 < k; ++i) {
    c += probs(i);
    if (r < c) return static_cast<int>(i);
  }
  return static_cast<int>(k - 1);
}

}  // namespace detail

// n iid records: U first, then X | U, then each outcome independently given (U, X).
inline std::vector<CategoricalRecord> sample_categorical(const CategoricalParams& p, std::size_t n, std::uint64_t seed) {
  categorical::validate(p, 1e-10);
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<CategoricalRecord> out(n);
  for (auto& rec : out) {
    rec.u = detail::draw_level(p.pr_u, unif(rng));
    rec.x = detail::draw_level(p.pr_x_given_u.col(rec.u), unif(rng));
    for (int j = 0; j < 3; ++j)
      rec.y[static_cast<std::size_t>(j)] =
          detail::draw_level(p.pr_y_given_ux[static_cast<std::size_t>(j)].col(p.col(rec.u, rec.x)), unif(rng));
  }
  return out;
}

inline std::vector<CategoricalRecord> gen_categorical(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw Error(ErrorKind::BadParams, "sample size must be at least 1");
  return sample_categorical(categorical_design(), n, seed);
}

// X = alpha_x'U + eps_X and Y_j = alpha_j'U + beta_j X + eps_j with
// U ~ N(0, I_r), eps_X ~ N(0, sigma_x^2), eps_j ~ N(0, sigma_j^2).
struct LinearDesign {
  int p = 0;
  int r = 2;
  double sigma_x = 1.0;
  Vector alpha_x;  // r
  Matrix alpha;    // p x r
  Vector sigma;    // p
  Vector beta;     // p

  // Loadings of Y on the orthonormal factors (eps_X / sigma_x, U).
  Matrix gamma_star() const {
    Matrix g(p, r + 1);
    g.col(0) = sigma_x * beta;
    g.rightCols(r) = alpha + beta * alpha_x.transpose();
    return g;
  }

  std::vector<int> zero_set() const {
    std::vector<int> s;
    for (int j = 0; j < p; ++j)
      if (beta(j) == 0.0) s.push_back(j);
    return s;
  }
};

// The factor design for p outcomes (1-based j in the comments):
//   sigma_j = 1.5 + 0.25 ((j+2) mod 3), alpha_x = (1, 1), sigma_x = 1,
//   with g cycling through (1.5, -1.8, 2.1, 2.4, -2.7, 3, -3.3), the U1
//   loadings of all outcomes are g_1..g_p and the U2 loadings g_{p+1}..g_{2p},
//   beta_j = (-1)^j (1 + ((j+3) mod 4)) for j <= 0.4p, else 0.
inline LinearDesign linear_design(int p) {
  if (p < 3) throw Error(ErrorKind::BadParams, "linear design needs p >= 3");
  static constexpr double block[7] = {1.5, -1.8, 2.1, 2.4, -2.7, 3.0, -3.3};
  LinearDesign d;
  d.p = p;
  d.alpha_x = Vector::Ones(2);
  d.alpha.resize(p, 2);
  d.sigma.resize(p);
  d.beta = Vector::Zero(p);
  const int s = static_cast<int>(std::floor(0.4 * p + 1e-9));
  for (int j = 1; j <= p; ++j) {
    const int i = j - 1;
    d.sigma(i) = 1.5 + 0.25 * ((j + 2) % 3);
    d.alpha(i, 0) = block[i % 7];
    d.alpha(i, 1) = block[(p + i) % 7];
    if (j <= s) d.beta(i) = (j % 2 == 0 ? 1.0 : -1.0) * (1 + ((j + 3) % 4));
  }
  return d;
}

// Returned uncentered; call linear_sem::centered before estimation.
inline linear_sem::Dataset gen_linear(const LinearDesign& d, Index n, std::uint64_t seed) {
  if (n < d.p + 2) throw Error(ErrorKind::BadParams, "need n >= p + 2");
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  linear_sem::Dataset out;
  out.x.resize(n);
  out.y.resize(n, d.p);
  Vector u(d.r);
  for (Index i = 0; i < n; ++i) {
    for (int k = 0; k < d.r; ++k) u(k) = nd(rng);
    const double x = d.alpha_x.dot(u) + d.sigma_x * nd(rng);
    out.x(i) = x;
    for (int j = 0; j < d.p; ++j) out.y(i, j) = d.alpha.row(j).dot(u) + d.beta(j) * x + d.sigma(j) * nd(rng);
  }
  return out;
}

enum class Table { Table1, Table2, TableS1 };

inline std::string to_string(Table t) {
  switch (t) {
    case Table::Table1: return "table1";
    case Table::Table2: return "table2";
    case Table::TableS1: return "tableS1";
  }
  return "?";
}

inline Table parse_table(const std::string& s) {
  if (s == "table1") return Table::Table1;
  if (s == "table2") return Table::Table2;
  if (s == "tableS1") return Table::TableS1;
  throw Error(ErrorKind::Usage, "unknown table '" + s + "' (expected table1, table2 or tableS1)");
}

struct ReportCell {
  std::string row;
  std::string column;
  double value = 0.0;
  double spread = std::numeric_limits<double>::quiet_NaN();  // SE (table2) or SD (tableS1)
  std::size_t count = 0;                                     // successful runs behind the cell
  double reference = std::numeric_limits<double>::quiet_NaN();
  double reference_spread = std::numeric_limits<double>::quiet_NaN();
};

struct ReplicationReport {
  Table table = Table::Table1;
  int runs = 0;
  std::uint64_t seed = 0;
  int attempts = 0;  // runs x cells
  int failures = 0;  // attempts in which at least one estimator failed
  int fallbacks = 0;  // tableS1: warm-start runs whose plug-in step failed
  double wall_seconds = 0.0;
  std::vector<ReportCell> cells;

  const ReportCell* find(const std::string& row, const std::string& column) const {
    for (const auto& c : cells)
      if (c.row == row && c.column == column) return &c;
    return nullptr;
  }
  double failure_rate() const { return attempts > 0 ? static_cast<double>(failures) / attempts : 0.0; }
};

struct ReplicateOptions {
  int threads = 0;  // 0: hardware concurrency
  // (n, p) cells; empty selects the table's default grid.
  std::vector<std::pair<int, int>> cells;
  int categorical_n = 1000;
};

namespace detail {

template <typename F>
void parallel_for(int count, int threads, F&& f) {
  int t = threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  t = std::min(t, std::max(count, 1));
  if (t <= 1) {
    for (int i = 0; i < count; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < t; ++w)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) f(i);
    });
  for (auto& th : pool) th.join();
}

struct Moments {
  std::size_t n = 0;
  double mean = 0.0, m2 = 0.0;
  void add(double v) {
    ++n;
    const double d = v - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (v - mean);
  }
  double sd() const { return n > 1 ? std::sqrt(m2 / static_cast<double>(n - 1)) : std::numeric_limits<double>::quiet_NaN(); }
};

inline double reference_fpr(int n, int p) {
  const int ni = n == 500 ? 0 : n == 1000 ? 1 : n == 2000 ? 2 : -1;
  const int pi = p == 30 ? 0 : p == 60 ? 1 : p == 100 ? 2 : -1;
  if (ni < 0 || pi < 0) return std::numeric_limits<double>::quiet_NaN();
  static constexpr double t[3][3] = {{58, 16, 10}, {54, 16, 54}, {37, 12, 5}};
  return t[ni][pi];
}

inline std::pair<double, double> reference_beta(int n, int p, int j) {
  const int ni = n == 500 ? 0 : n == 1000 ? 1 : n == 2000 ? 2 : -1;
  const int pi = p == 30 ? 0 : p == 60 ? 1 : p == 100 ? 2 : -1;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (ni < 0 || pi < 0) return {nan, nan};
  static constexpr double bias[3][3][4] = {
      {{0.75, 1.26, -0.52, 0.98}, {0.03, 0.61, -0.25, 0.78}, {-0.68, -0.12, 0.03, 0.10}},
      {{-1.40, 0.52, -1.27, 1.43}, {-0.58, 0.71, -1.81, 0.14}, {0.30, 0.04, -0.70, 0.15}},
      {{-0.57, 0.91, 0.63, 0.60}, {-1.06, 0.09, 1.10, 0.62}, {0.47, -0.30, -1.13, 0.45}}};
  static constexpr double se[3][3][4] = {
      {{0.75, 0.98, 1.06, 0.79}, {0.60, 0.67, 0.88, 0.63}, {0.45, 0.49, 0.49, 0.36}},
      {{0.74, 0.90, 0.94, 0.83}, {0.55, 0.55, 0.84, 0.60}, {0.40, 0.47, 0.58, 0.40}},
      {{0.75, 0.86, 0.93, 0.83}, {0.59, 0.70, 0.71, 0.55}, {0.34, 0.38, 0.54, 0.41}}};
  return {bias[pi][ni][j], se[pi][ni][j]};
}

// rows: pr{Y_j(X=x)=1} ordered (j, x); columns crude, random start, warm start.
inline std::pair<double, double> reference_s1(int row, int col) {
  static constexpr double bias[6][3] = {{-4.02, -2.71, -1.11}, {4.06, 7.43, 2.32}, {-2.75, 19.2, 0.87},
                                        {4.08, 5.78, 1.84},   {-4.16, 24.5, 0.02}, {5.47, 11.3, 3.19}};
  static constexpr double sd[6][3] = {{2.21, 11.8, 10.4}, {2.22, 12.0, 9.11}, {1.97, 22.0, 9.56},
                                      {2.24, 9.63, 8.85}, {1.89, 22.0, 10.5}, {2.23, 9.36, 10.9}};
  return {bias[row][col], sd[row][col]};
}

struct SelectionRates {
  double fpr = 0.0, fnr = 0.0;
};

// Selected zeros give beta_hat = 0 exactly and every other coordinate is
// estimated, so the rates follow from the selected pattern.
inline SelectionRates selection_rates(const std::vector<int>& s0_hat, const Vector& beta) {
  const Index p = beta.size();
  std::vector<bool> zero_hat(static_cast<std::size_t>(p), false);
  for (int j : s0_hat) zero_hat[static_cast<std::size_t>(j)] = true;
  int nonzero_hat = 0, false_pos = 0, zero_hat_n = 0, false_neg = 0;
  for (Index j = 0; j < p; ++j) {
    const bool truly_zero = beta(j) == 0.0;
    if (zero_hat[static_cast<std::size_t>(j)]) {
      ++zero_hat_n;
      if (!truly_zero) ++false_neg;
    } else {
      ++nonzero_hat;
      if (truly_zero) ++false_pos;
    }
  }
  SelectionRates r;
  r.fpr = nonzero_hat > 0 ? static_cast<double>(false_pos) / nonzero_hat : 0.0;
  r.fnr = zero_hat_n > 0 ? static_cast<double>(false_neg) / zero_hat_n : 0.0;
  return r;
}

}  // namespace detail

// One Table 2 run: estimated (beta_1..beta_4) from a fresh design draw.
inline Vector linear_run(const LinearDesign& design, int n, std::uint64_t seed, int keep = 4) {
  const auto data = linear_sem::centered(gen_linear(design, n, seed));
  const auto fit = linear_sem::fit_factors(data);
  const auto sel = linear_sem::select_negative_controls(fit);
  linear_sem::EffectOptions opt;
  opt.seed = sub_seed(seed, 7);
  const auto est = linear_sem::estimate_effects(data, sel, fit.num_factors - 1, opt);
  return est.beta_hat.head(keep);
}

inline ReplicationReport replicate(Table table, int runs, std::uint64_t seed, const ReplicateOptions& opt = {}) {
  if (runs < 10) throw Error(ErrorKind::BadParams, "replication needs at least 10 runs");
  const auto t0 = std::chrono::steady_clock::now();
  ReplicationReport rep;
  rep.table = table;
  rep.runs = runs;
  rep.seed = seed;
  const double nan = std::numeric_limits<double>::quiet_NaN();

  if (table == Table::Table1 || table == Table::Table2) {
    std::vector<std::pair<int, int>> cells = opt.cells;
    if (cells.empty()) {
      if (table == Table::Table1) {
        for (int n : {500, 1000, 2000})
          for (int p : {30, 60, 100}) cells.emplace_back(n, p);
      } else {
        cells.emplace_back(2000, 30);
      }
    }
    const int nc = static_cast<int>(cells.size());
    std::vector<LinearDesign> designs;
    for (const auto& c : cells) designs.push_back(linear_design(c.second));
    // Slot layout: cell-major, run-minor. Each slot keeps up to 4 numbers.
    std::vector<std::optional<Vector>> out(static_cast<std::size_t>(nc * runs));
    detail::parallel_for(nc * runs, opt.threads, [&](int slot) {
      const int c = slot / runs, i = slot % runs;
      const auto [n, p] = cells[static_cast<std::size_t>(c)];
      const std::uint64_t s = sub_seed(sub_seed(seed, static_cast<std::uint64_t>(c)), static_cast<std::uint64_t>(i));
      const auto& design = designs[static_cast<std::size_t>(c)];
      try {
        if (table == Table::Table1) {
          const auto data = linear_sem::centered(gen_linear(design, n, s));
          const auto sel = linear_sem::select_negative_controls(linear_sem::fit_factors(data));
          const auto r = detail::selection_rates(sel.s0_hat, design.beta);
          Vector v(2);
          v << r.fpr, r.fnr;
          out[static_cast<std::size_t>(slot)] = v;
        } else {
          out[static_cast<std::size_t>(slot)] = linear_run(design, n, s);
        }
      } catch (const Error&) {
      }
    });
    rep.attempts = nc * runs;
    for (int c = 0; c < nc; ++c) {
      const auto [n, p] = cells[static_cast<std::size_t>(c)];
      const std::string row = "n=" + std::to_string(n) + ",p=" + std::to_string(p);
      const int width = table == Table::Table1 ? 2 : 4;
      std::vector<detail::Moments> mom(static_cast<std::size_t>(width));
      for (int i = 0; i < runs; ++i) {
        const auto& o = out[static_cast<std::size_t>(c * runs + i)];
        if (!o) {
          ++rep.failures;
          continue;
        }
        for (int k = 0; k < width; ++k) {
          const double truth = table == Table::Table1 ? 0.0 : designs[static_cast<std::size_t>(c)].beta(k);
          mom[static_cast<std::size_t>(k)].add((*o)(k) - truth);
        }
      }
      if (table == Table::Table1) {
        ReportCell fp{row, "fpr_x10000", 1e4 * mom[0].mean, nan, mom[0].n, detail::reference_fpr(n, p), nan};
        ReportCell fn{row, "fnr_x10000", 1e4 * mom[1].mean, nan, mom[1].n, 0.0, nan};
        if (std::isnan(fp.reference)) fn.reference = nan;
        rep.cells.push_back(fp);
        rep.cells.push_back(fn);
      } else {
        for (int k = 0; k < 4; ++k) {
          const auto& m = mom[static_cast<std::size_t>(k)];
          const auto pub = detail::reference_beta(n, p, k);
          const double se = m.n > 1 ? 100.0 * m.sd() / std::sqrt(static_cast<double>(m.n)) : nan;
          rep.cells.push_back({row, "beta" + std::to_string(k + 1), 100.0 * m.mean, se, m.n, pub.first, pub.second});
        }
      }
    }
  } else {
    const auto design = categorical_design();
    const auto truth = categorical::g_formula(design);
    // Per run: 3 estimators x 6 estimands; NaN marks a failed estimator.
    std::vector<Matrix> out(static_cast<std::size_t>(runs));
    std::vector<char> fell_back(static_cast<std::size_t>(runs), 0);
    detail::parallel_for(runs, opt.threads, [&](int i) {
      Matrix m = Matrix::Constant(3, 6, nan);
      const std::uint64_t s = sub_seed(seed, static_cast<std::uint64_t>(i));
      auto fill = [&](int col, const categorical::PotentialOutcomeDist& d) {
        for (int j = 0; j < 3; ++j)
          for (int x = 0; x < 2; ++x) m(col, 2 * j + x) = d.at(j, x, 0) - truth.at(j, x, 0);
      };
      try {
        const auto t = categorical::empirical_tables(
            sample_categorical(design, static_cast<std::size_t>(opt.categorical_n), s), design.levels);
        fill(0, categorical::crude_estimate(t));
        try {
          Rng rng(sub_seed(s, 1));
          const auto start = categorical::random_start(2, design.levels, rng);
          fill(1, categorical::g_formula(categorical::gls_refine(t, start).params));
        } catch (const Error&) {
        }
        try {
          // When the spectral step fails on a noisy table (complex or tied
          // eigenvalues) the refinement starts from an independent random draw.
          CategoricalParams warm;
          try {
            warm = categorical::plugin_identify(t).params;
          } catch (const Error&) {
            fell_back[static_cast<std::size_t>(i)] = 1;
            Rng rng(sub_seed(s, 2));
            warm = categorical::random_start(2, design.levels, rng);
          }
          fill(2, categorical::g_formula(categorical::gls_refine(t, warm).params));
        } catch (const Error&) {
        }
      } catch (const Error&) {
      }
      out[static_cast<std::size_t>(i)] = m;
    });
    rep.attempts = runs;
    rep.fallbacks = static_cast<int>(std::count(fell_back.begin(), fell_back.end(), 1));
    static const char* columns[3] = {"crude", "random_start", "warm_start"};
    std::vector<std::vector<detail::Moments>> mom(3, std::vector<detail::Moments>(6));
    for (int i = 0; i < runs; ++i) {
      const Matrix& m = out[static_cast<std::size_t>(i)];
      if (m.hasNaN()) ++rep.failures;
      for (int c = 0; c < 3; ++c)
        for (int e = 0; e < 6; ++e)
          if (!std::isnan(m(c, e))) mom[static_cast<std::size_t>(c)][static_cast<std::size_t>(e)].add(m(c, e));
    }
    for (int e = 0; e < 6; ++e) {
      const std::string row = "pr{Y" + std::to_string(e / 2 + 1) + "(X=" + std::to_string(e % 2 + 1) + ")=1}";
      for (int c = 0; c < 3; ++c) {
        const auto& mm = mom[static_cast<std::size_t>(c)][static_cast<std::size_t>(e)];
        const auto pub = detail::reference_s1(e, c);
        rep.cells.push_back({row, columns[c], 100.0 * mm.mean, 100.0 * mm.sd(), mm.n, pub.first, pub.second});
      }
    }
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace parout::simgen
