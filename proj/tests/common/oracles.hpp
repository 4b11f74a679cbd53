#pragma once

// Brute-force reference implementations for tests. Everything here is
// written directly from the definitions, in long double, without reusing
// library kernels.

#include <algorithm>
#include <cmath>
#include <vector>

#include "sdfm/numerics.hpp"

namespace oracle {

using Vec = std::vector<double>;

struct Instance {
  sdfm::DenseMatrix y;  // N x d target points
  Vec b;                // target weights
  sdfm::DenseMatrix x;  // M x d source atoms
  Vec a;                // source weights
};

inline Vec random_simplex(sdfm::Rng& rng, std::size_t n, double floor = 0.2) {
  Vec w(n);
  double s = 0.0;
  for (double& v : w) {
    v = floor + rng.uniform();
    s += v;
  }
  for (double& v : w) v /= s;
  return w;
}

inline Instance random_instance(sdfm::Rng& rng, std::size_t n, std::size_t m, std::size_t d) {
  Instance inst;
  inst.y = sdfm::sample_gaussian(rng, n, d);
  inst.x = sdfm::sample_gaussian(rng, m, d);
  inst.b = random_simplex(rng, n);
  inst.a = random_simplex(rng, m);
  return inst;
}

inline long double negdot(std::span<const double> x, std::span<const double> y) {
  long double s = 0.0L;
  for (std::size_t c = 0; c < x.size(); ++c) s -= static_cast<long double>(x[c]) * y[c];
  return s;
}

/// Scores g_j + <x, y_j> for the neg-dot cost.
inline std::vector<long double> scores(const Instance& in, const Vec& g, std::size_t i) {
  std::vector<long double> z(in.b.size());
  for (std::size_t j = 0; j < z.size(); ++j) z[j] = g[j] - negdot(in.x.row(i), in.y.row(j));
  return z;
}

/// f(x_i) = -eps log sum_j b_j exp(z_j / eps), or -max z at eps = 0.
inline long double soft_c(const Instance& in, const Vec& g, std::size_t i, double eps) {
  const auto z = scores(in, g, i);
  const long double hi = *std::max_element(z.begin(), z.end());
  if (eps == 0.0) return -hi;
  long double s = 0.0L;
  for (std::size_t j = 0; j < z.size(); ++j) s += in.b[j] * std::exp((z[j] - hi) / eps);
  return -(hi + eps * std::log(s));
}

/// Responsibilities of source atom i (eps > 0, or a unique argmax at eps = 0).
inline std::vector<long double> resp(const Instance& in, const Vec& g, std::size_t i, double eps) {
  const auto z = scores(in, g, i);
  const long double hi = *std::max_element(z.begin(), z.end());
  std::vector<long double> s(z.size(), 0.0L);
  if (eps == 0.0) {
    long double tot = 0.0L;
    for (std::size_t j = 0; j < z.size(); ++j) {
      if (hi - z[j] <= 1e-12L) {
        s[j] = in.b[j];
        tot += in.b[j];
      }
    }
    for (auto& v : s) v /= tot;
    return s;
  }
  long double tot = 0.0L;
  for (std::size_t j = 0; j < z.size(); ++j) {
    s[j] = in.b[j] * std::exp((z[j] - hi) / eps);
    tot += s[j];
  }
  for (auto& v : s) v /= tot;
  return s;
}

inline double semidual(const Instance& in, const Vec& g, double eps) {
  long double v = 0.0L;
  for (std::size_t i = 0; i < in.a.size(); ++i) v += in.a[i] * soft_c(in, g, i, eps);
  for (std::size_t j = 0; j < in.b.size(); ++j) v += static_cast<long double>(in.b[j]) * g[j];
  return static_cast<double>(v);
}

inline Vec marginal(const Instance& in, const Vec& g, double eps) {
  std::vector<long double> m(in.b.size(), 0.0L);
  for (std::size_t i = 0; i < in.a.size(); ++i) {
    const auto s = resp(in, g, i, eps);
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += in.a[i] * s[j];
  }
  return Vec(m.begin(), m.end());
}

inline double chi2(const Vec& m, const Vec& b) {
  long double s = 0.0L;
  for (std::size_t j = 0; j < m.size(); ++j) s += static_cast<long double>(m[j]) * m[j] / b[j];
  return static_cast<double>(s - 1.0L);
}

/// Neg-dot cost matrix C_ij = -<x_i, y_j>.
inline sdfm::DenseMatrix cost_matrix(const Instance& in) {
  sdfm::DenseMatrix c(in.a.size(), in.b.size());
  for (std::size_t i = 0; i < in.a.size(); ++i) {
    for (std::size_t j = 0; j < in.b.size(); ++j) c(i, j) = static_cast<double>(negdot(in.x.row(i), in.y.row(j)));
  }
  return c;
}

/// Shifts g so that <b, g> = 0.
inline Vec gauge(Vec g, const Vec& b) {
  long double s = 0.0L;
  for (std::size_t j = 0; j < g.size(); ++j) s += static_cast<long double>(b[j]) * g[j];
  for (double& v : g) v -= static_cast<double>(s);
  return g;
}

inline double max_abs(const Vec& v) {
  double m = 0.0;
  for (double e : v) m = std::max(m, std::abs(e));
  return m;
}

/// Min cost over all permutations (n <= 8).
inline double brute_assignment(const sdfm::DenseMatrix& c) {
  const std::size_t n = c.rows();
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  double best = INFINITY;
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += c(i, p[i]);
    best = std::min(best, s);
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

}  // namespace oracle
