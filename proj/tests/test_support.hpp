#pragma once

// Literal parameter sets and generators shared by the test binaries.

#include "parout/categorical.hpp"

namespace parout::testing {

using categorical::CategoricalParams;
using categorical::Levels;

// Binary params from per-u / per-(u,x) probabilities of the first level.
// y[j][u][x] = pr(Y_j = first | u, x); an outcome with a single level is
// constant.
inline CategoricalParams binary_params(double pu1, std::array<double, 2> px1_given_u,
                                       const double (&y)[3][2][2],
                                       std::array<int, 3> ky = {2, 2, 2}) {
  CategoricalParams p;
  p.k_u = 2;
  p.levels = Levels{2, ky};
  p.pr_u = Vector(2);
  p.pr_u << pu1, 1.0 - pu1;
  p.pr_x_given_u = Matrix(2, 2);
  p.pr_x_given_u << px1_given_u[0], px1_given_u[1], 1.0 - px1_given_u[0], 1.0 - px1_given_u[1];
  for (int j = 0; j < 3; ++j) {
    auto& m = p.pr_y_given_ux[static_cast<std::size_t>(j)];
    m.resize(ky[static_cast<std::size_t>(j)], 4);
    for (int x = 0; x < 2; ++x)
      for (int u = 0; u < 2; ++u) {
        const double f = y[j][u][x];
        if (m.rows() == 1) {
          m(0, p.col(u, x)) = 1.0;
        } else {
          m(0, p.col(u, x)) = f;
          m(1, p.col(u, x)) = 1.0 - f;
        }
      }
  }
  return p;
}

// The binary simulation design: U ~ Bernoulli(0.65) on level 1,
// pr(X=1|U) = (0.4, 0.7), outcome matrices indexed (u, x).
inline CategoricalParams binary_design() {
  return binary_params(0.65, {0.4, 0.7},
                       {{{0.4, 0.3}, {0.7, 0.6}}, {{0.25, 0.45}, {0.45, 0.75}}, {{0.15, 0.25}, {0.45, 0.65}}});
}

// Random parameters satisfying full rank and a consistent latent ordering.
inline CategoricalParams random_identifiable(Rng& rng, int k, int kx, int k1) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto simplex = [&](int n, double floor) {
    Vector v(n);
    for (int i = 0; i < n; ++i) v(i) = floor + unif(rng);
    return Vector(v / v.sum());
  };
  CategoricalParams p;
  p.k_u = k;
  p.levels = Levels{kx, {k1, k, k}};
  p.pr_u = simplex(k, 0.3);
  p.pr_x_given_u.resize(kx, k);
  for (int u = 0; u < k; ++u) p.pr_x_given_u.col(u) = simplex(kx, 0.3);

  // Y1: a base column per class, mixed per x with a class-independent column,
  // which preserves every pairwise ordering across x.
  Matrix base(k1, k);
  for (;;) {
    for (int u = 0; u < k; ++u) base.col(u) = simplex(k1, 0.05);
    std::vector<double> first(static_cast<std::size_t>(k));
    for (int u = 0; u < k; ++u) first[static_cast<std::size_t>(u)] = base(0, u);
    std::sort(first.begin(), first.end());
    bool separated = true;
    for (int u = 1; u < k; ++u) separated = separated && first[u] - first[u - 1] > 0.05;
    if (separated) break;
  }
  p.pr_y_given_ux[0].resize(k1, k * kx);
  for (int x = 0; x < kx; ++x) {
    const double s = 0.5 + 0.5 * unif(rng);
    const Vector common = simplex(k1, 0.1);
    for (int u = 0; u < k; ++u) p.pr_y_given_ux[0].col(p.col(u, x)) = s * base.col(u) + (1 - s) * common;
  }
  for (int j = 1; j < 3; ++j) {
    auto& m = p.pr_y_given_ux[static_cast<std::size_t>(j)];
    m.resize(k, k * kx);
    for (int c = 0; c < k * kx; ++c) m.col(c) = simplex(k, 0.05);
  }
  return p;
}

// Relabels latent classes so pr(Y1=first | u, x=0) increases in u.
inline CategoricalParams sorted_by_first_level(const CategoricalParams& p) {
  std::vector<int> order(static_cast<std::size_t>(p.k_u));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return p.y(0, 0, a, 0) < p.y(0, 0, b, 0); });
  CategoricalParams q = p;
  for (int nu = 0; nu < p.k_u; ++nu) {
    const int ou = order[static_cast<std::size_t>(nu)];
    q.pr_u(nu) = p.pr_u(ou);
    q.pr_x_given_u.col(nu) = p.pr_x_given_u.col(ou);
    for (int j = 0; j < 3; ++j)
      for (int x = 0; x < p.levels.k_x; ++x)
        q.pr_y_given_ux[static_cast<std::size_t>(j)].col(q.col(nu, x)) =
            p.pr_y_given_ux[static_cast<std::size_t>(j)].col(p.col(ou, x));
  }
  return q;
}

inline double max_param_diff(const CategoricalParams& a, const CategoricalParams& b) {
  double d = (a.pr_u - b.pr_u).cwiseAbs().maxCoeff();
  d = std::max(d, (a.pr_x_given_u - b.pr_x_given_u).cwiseAbs().maxCoeff());
  for (int j = 0; j < 3; ++j)
    d = std::max(d, (a.pr_y_given_ux[static_cast<std::size_t>(j)] - b.pr_y_given_ux[static_cast<std::size_t>(j)])
                        .cwiseAbs()
                        .maxCoeff());
  return d;
}

}  // namespace parout::testing
