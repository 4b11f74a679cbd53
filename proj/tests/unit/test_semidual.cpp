#include <cmath>
#include <numeric>

#include "common/fixtures.hpp"
#include "doctest.h"
#include "sdfm/coupling.hpp"
#include "sdfm/error.hpp"
#include "sdfm/semidual.hpp"

using namespace sdfm;
using oracle::Vec;

namespace {

// y1 = (1, 0), y2 = (0, 1) or (-1, 0), uniform weights.
TargetMeasure two_points(double y2x, double y2y) {
  return TargetMeasure::create(fx::mat(2, 2, {1, 0, y2x, y2y}));
}

WeightedBatch point_mass(Vec x) {
  const std::size_t d = x.size();
  return {PointBatch{DenseMatrix(1, d, std::move(x)), std::nullopt}, {1.0}};
}

}  // namespace

TEST_CASE("TargetMeasure validation") {
  CHECK_THROWS_AS(TargetMeasure::create(DenseMatrix(0, 2)), DegenerateInputError);
  CHECK_THROWS_AS(TargetMeasure::create(fx::mat(2, 1, {0, 1}), std::nullopt, {0.5, 0.6}), DomainError);
  CHECK_THROWS(TargetMeasure::create(fx::mat(2, 1, {0, 1}), std::nullopt, {1.0, 0.0}));
  const auto t = TargetMeasure::create(fx::mat(2, 1, {0, 1}));
  CHECK(t.weights == Vec{0.5, 0.5});
  CHECK(t.fingerprint == TargetMeasure::create(fx::mat(2, 1, {0, 1})).fingerprint);
  CHECK(t.fingerprint != TargetMeasure::create(fx::mat(2, 1, {0, 2})).fingerprint);
}

TEST_CASE("check_binding rejects foreign potentials") {
  const auto t = two_points(0, 1);
  const auto other = two_points(0, 2);
  const Potential p = Potential::zeros(t, fx::negdot_cost(0.0));
  CHECK_NOTHROW(check_binding(t, p));
  CHECK_THROWS_AS(check_binding(other, p), ConfigError);
}

TEST_CASE("soft_c_transform examples") {
  const auto t = two_points(0, 1);
  const Vec x{1, 0};
  CHECK(soft_c_transform(t, fx::potential(t, {0, 0}, 0.0), {x}) == -1.0);
  // First-order expansion: f -> sum_j b_j c(x, y_j) = -0.5 as eps -> inf.
  CHECK(std::abs(soft_c_transform(t, fx::potential(t, {0, 0}, 1e6), {x}) - (-0.5)) <= 1e-3);
  for (double eps : {0.0, 0.3}) {
    const double f0 = soft_c_transform(t, fx::potential(t, {0.2, -0.4}, eps), {x});
    const double f1 = soft_c_transform(t, fx::potential(t, {0.2 + 1.75, -0.4 + 1.75}, eps), {x});
    CHECK(f1 == doctest::Approx(f0 - 1.75).epsilon(1e-14));
  }
}

TEST_CASE("soft_c_transform matches the definition") {
  Rng rng(3);
  for (double eps : {0.0, 0.05, 0.5, 5.0}) {
    const auto in = oracle::random_instance(rng, 7, 5, 3);
    const auto t = fx::target(in);
    Vec g(7);
    for (double& v : g) v = rng.normal();
    const auto pot = fx::potential(t, g, eps);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(std::abs(soft_c_transform(t, pot, {in.x.row(i)}) - static_cast<double>(oracle::soft_c(in, g, i, eps))) <=
            1e-12);
    }
  }
}

TEST_CASE("responsibilities examples") {
  const auto t = two_points(-1, 0);
  const Vec x{1, 0};
  const auto r0 = responsibilities(t, fx::potential(t, {0, 0}, 0.0), {x});
  CHECK(r0.to_dense(2) == Vec{1, 0});
  CHECK_FALSE(r0.dense());
  const auto r1 = responsibilities(t, fx::potential(t, {0, 2.5}, 0.0), {x});
  CHECK(r1.to_dense(2) == Vec{0, 1});
  const auto r2 = responsibilities(t, fx::potential(t, {0, 0}, 1e6), {x}).to_dense(2);
  CHECK(std::abs(r2[0] - 0.5) <= 1e-4);
  CHECK(std::abs(r2[1] - 0.5) <= 1e-4);
  // Orthogonal x ties the two atoms: dense output split by b.
  const Vec xt{0, 1};
  const auto tie = responsibilities(t, fx::potential(t, {0, 0}, 0.0), {xt});
  CHECK(tie.dense());
  CHECK(tie.to_dense(2) == Vec{0.5, 0.5});
}

TEST_CASE("responsibilities sum to one") {
  Rng rng(4);
  for (double eps : {0.0, 1e-3, 0.1, 10.0}) {
    const auto in = oracle::random_instance(rng, 12, 20, 2);
    const auto t = fx::target(in);
    Vec g(12);
    for (double& v : g) v = 3.0 * rng.normal();
    const auto pot = fx::potential(t, g, eps);
    for (std::size_t i = 0; i < 20; ++i) {
      const auto r = responsibilities(t, pot, {in.x.row(i)});
      CHECK(std::abs(r.total() - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("semidual_value examples") {
  const auto t = two_points(0, 1);
  CHECK(semidual_value(t, fx::potential(t, {0, 0}, 0.0), point_mass({1, 0})) == -1.0);

  Rng rng(5);
  for (double eps : {0.0, 0.1, 1.0}) {
    const auto in = oracle::random_instance(rng, 2, 2, 2);
    const auto tt = fx::target(in);
    const auto src = fx::source(in);
    Vec g{rng.normal(), rng.normal()};
    const double v = semidual_value(tt, fx::potential(tt, g, eps), src.enumerate());
    CHECK(std::abs(v - oracle::semidual(in, g, eps)) <= 1e-12);
    Vec gs = g;
    for (double& e : gs) e += 0.77;
    CHECK(std::abs(semidual_value(tt, fx::potential(tt, gs, eps), src.enumerate()) - v) <= 1e-12);
  }
}

TEST_CASE("stochastic_gradient finite differences") {
  Rng rng(6);
  const auto in = oracle::random_instance(rng, 2, 2, 2);
  const auto t = fx::target(in);
  const auto src = fx::source(in);
  const Vec g{0.3, -0.1};
  const double eps = 0.5;
  const Vec grad = stochastic_gradient(t, fx::potential(t, g, eps), src.enumerate());
  for (std::size_t j = 0; j < 2; ++j) {
    Vec gp = g, gm = g;
    gp[j] += 1e-5;
    gm[j] -= 1e-5;
    const double fd = (oracle::semidual(in, gp, eps) - oracle::semidual(in, gm, eps)) / 2e-5;
    CHECK(std::abs(grad[j] - fd) <= 1e-5 * std::max(std::abs(fd), 1e-3));
  }
  CHECK(std::abs(grad[0] + grad[1]) <= 1e-10);
}

TEST_CASE("stochastic_gradient vanishes in the independent limit and at the oracle optimum") {
  Rng rng(7);
  const auto in = oracle::random_instance(rng, 6, 10, 2);
  const auto t = fx::target(in);
  const auto src = fx::source(in);
  for (double v : stochastic_gradient(t, fx::potential(t, Vec(6, 0.0), 1e6), src.enumerate())) {
    CHECK(std::abs(v) <= 1e-5);
  }
  const auto sol = oracle_discrete_ot(oracle::cost_matrix(in), in.a, in.b, 0.1);
  const Vec grad = stochastic_gradient(t, fx::potential(t, sol.g, 0.1), src.enumerate());
  CHECK(oracle::max_abs(grad) <= 1e-8);
}

TEST_CASE("gradient equals b minus the enumerated marginal") {
  Rng rng(8);
  const auto in = oracle::random_instance(rng, 5, 9, 3);
  const auto t = fx::target(in);
  const auto src = fx::source(in);
  Vec g(5);
  for (double& v : g) v = rng.normal();
  const auto pot = fx::potential(t, g, 0.2);
  Rng r2(1);
  const auto m = marginal_estimate(t, pot, src, r2, 100, 10);
  const Vec grad = stochastic_gradient(t, pot, src.enumerate());
  const Vec mo = oracle::marginal(in, g, 0.2);
  for (std::size_t j = 0; j < 5; ++j) {
    CHECK(grad[j] == t.weights[j] - m.m[j]);
    CHECK(std::abs(m.m[j] - mo[j]) <= 1e-12);
  }
  CHECK(std::abs(std::accumulate(m.m.begin(), m.m.end(), 0.0) - 1.0) <= 1e-10);
}

TEST_CASE("marginal_estimate Monte-Carlo limits") {
  const auto t = two_points(-1, 0);
  const auto src = SourceMeasure::gaussian(2);
  Rng rng(9);
  const auto m = marginal_estimate(t, fx::potential(t, {0, 0}, 0.0), src, rng, 40000, 1000);
  CHECK(std::abs(m.m[0] - 0.5) <= 4.0 * std::sqrt(0.25 / 40000));
  const auto tw = TargetMeasure::create(fx::mat(2, 2, {1, 0, -1, 0}), std::nullopt, {0.3, 0.7});
  const auto mi = marginal_estimate(tw, fx::potential(tw, {0, 0}, 1e6), src, rng, 4000, 1000);
  CHECK(std::abs(mi.m[0] - 0.3) <= 1e-4);
}

TEST_CASE("chi2_exact examples") {
  CHECK(chi2_exact(Vec{0.3, 0.7}, Vec{0.3, 0.7}) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(chi2_exact(Vec{0.5, 0.5}, Vec{0.25, 0.75}) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  CHECK(chi2_exact(Vec{1, 0}, Vec{0.5, 0.5}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(chi2_exact(Vec{1, 0}, Vec{1, 0}), DomainError);
}

TEST_CASE("chi2_estimator on a batch that maps each atom to its own target") {
  // Each source atom sits on its own target point at eps = 0, so m = b and
  // the enumerated chi^2 is 0. The batch statistic drops the diagonal i = k
  // terms, leaving sum_j (1 - 1) / b_j / 2 - 1 = -1.
  const auto t = two_points(-1, 0);
  const auto pot = fx::potential(t, {0, 0}, 0.0);
  const WeightedBatch batch{PointBatch{fx::mat(2, 2, {1, 0, -1, 0}), std::nullopt}, {0.5, 0.5}};
  CHECK(chi2_estimator(t, pot, batch) == -1.0);
  CHECK(chi2_exact(batch_marginal(t, pot, batch), t.weights) == 0.0);
  CHECK_THROWS_AS(chi2_estimator(t, pot, point_mass({1, 0})), DomainError);
}

TEST_CASE("chi2_estimator is unbiased in the independent limit") {
  const auto t = TargetMeasure::create(fx::mat(3, 1, {-1, 0, 2}), std::nullopt, {0.2, 0.3, 0.5});
  const auto pot = fx::potential(t, {0.1, 0, -0.3}, 1e6);
  const auto src = SourceMeasure::gaussian(1);
  Rng rng(10);
  double s = 0.0, s2 = 0.0;
  const int n = 10000;
  for (int k = 0; k < n; ++k) {
    const double v = chi2_estimator(t, pot, src.sample(rng, 32));
    s += v;
    s2 += v * v;
  }
  const double mean = s / n;
  const double se = std::sqrt((s2 / n - mean * mean) / (n - 1));
  CHECK(std::abs(mean) <= 3.0 * se + 1e-12);
}

TEST_CASE("chi2 identities on enumerated instances") {
  Rng rng(11);
  for (int rep = 0; rep < 10; ++rep) {
    auto in = oracle::random_instance(rng, 8, 16, 2);
    in.b.assign(8, 1.0 / 8);
    const auto t = fx::target(in);
    Vec g(8);
    for (double& v : g) v = rng.normal();
    const auto m = batch_marginal(t, fx::potential(t, g, 0.3), fx::source(in).enumerate());
    const double chi = chi2_exact(m, in.b);
    double sq = 0.0, l1 = 0.0;
    for (std::size_t j = 0; j < 8; ++j) {
      sq += (in.b[j] - m[j]) * (in.b[j] - m[j]);
      l1 += std::abs(in.b[j] - m[j]);
    }
    CHECK(std::abs(chi - 8.0 * sq) <= 1e-10);
    CHECK(0.5 * l1 <= std::sqrt(0.5 * std::log1p(chi)) + 1e-12);
  }
}

TEST_CASE("semidual is concave along random chords") {
  Rng rng(12);
  for (double eps : {0.0, 0.1, 1.0}) {
    const auto in = oracle::random_instance(rng, 6, 12, 2);
    const auto t = fx::target(in);
    const auto src = fx::source(in);
    const auto& batch = src.enumerate();
    for (int rep = 0; rep < 20; ++rep) {
      Vec g1(6), g2(6), gm(6);
      const double lam = rng.uniform(0.05, 0.95);
      for (std::size_t j = 0; j < 6; ++j) {
        g1[j] = rng.normal();
        g2[j] = rng.normal();
        gm[j] = lam * g1[j] + (1 - lam) * g2[j];
      }
      const double f1 = semidual_value(t, fx::potential(t, g1, eps), batch);
      const double f2 = semidual_value(t, fx::potential(t, g2, eps), batch);
      const double fm = semidual_value(t, fx::potential(t, gm, eps), batch);
      CHECK(fm >= lam * f1 + (1 - lam) * f2 - 1e-9);
    }
  }
}

TEST_CASE("transport_cost examples") {
  SUBCASE("single atom forces the coupling") {
    const auto t = TargetMeasure::create(fx::mat(1, 2, {0.5, -1}));
    Rng rng(13);
    const auto in = oracle::random_instance(rng, 1, 6, 2);
    const auto src = SourceMeasure::discrete(PointBatch{in.x, std::nullopt}, in.a);
    double expect = 0.0;
    for (std::size_t i = 0; i < 6; ++i) expect += in.a[i] * -(in.x(i, 0) * 0.5 - in.x(i, 1));
    for (double eps : {0.0, 0.4}) {
      const auto c = transport_cost_estimate(t, fx::potential(t, {1.3}, eps), src, rng, 10);
      CHECK(std::abs(c.cost - expect) <= 1e-12);
      CHECK(std::abs(c.kl) <= 1e-12);
    }
  }
  SUBCASE("eps = 0 with oracle g matches the LP cost") {
    Rng rng(14);
    const auto in = oracle::random_instance(rng, 4, 512, 2);
    const auto t = fx::target(in);
    const DenseMatrix c = oracle::cost_matrix(in);
    const auto sol = oracle_discrete_ot(c, in.a, in.b, 0.0);
    const auto pot = fx::potential(t, sol.g, 0.0);
    // Strong duality: the semidual at the LP duals equals the LP value.
    CHECK(std::abs(semidual_value(t, pot, fx::source(in).enumerate()) - sol.value) <= 1e-9);
    // The LP splits at most N - 1 rows that the hard assignment does not,
    // each carrying mass 1/M.
    const auto [lo, hi] = std::minmax_element(c.flat().begin(), c.flat().end());
    Rng r(1);
    const auto est = transport_cost_estimate(t, pot, fx::source(in), r, 10);
    CHECK(std::abs(est.cost - sol.value) <= 3.0 / 512.0 * (*hi - *lo));
  }
  SUBCASE("independent limit has no divergence") {
    Rng rng(15);
    const auto in = oracle::random_instance(rng, 4, 8, 2);
    const auto t = fx::target(in);
    Rng r(1);
    const auto c = transport_cost_estimate(t, fx::potential(t, Vec(4, 0.0), 1e6), fx::source(in), r, 10);
    CHECK(std::abs(c.kl) <= 1e-9);
  }
}

TEST_CASE("calibrate_eps rescales by the cost standard deviation") {
  const auto t = TargetMeasure::create(fx::mat(4, 2, {1, 0, 0, 1, -1, 0, 0, -1}));
  CostConfig c = fx::negdot_cost(0.1);
  calibrate_eps(c, t, SourceMeasure::gaussian(2), Rng(1));
  CHECK(c.rescaled);
  CHECK(c.eps_effective == doctest::Approx(0.1 * c.cost_std));
  // E[(x.y)^2] = |y|^2 = 1 for unit y and standard normal x.
  CHECK(std::abs(c.cost_std - 1.0) < 0.1);
  CostConfig z = fx::negdot_cost(0.0);
  calibrate_eps(z, t, SourceMeasure::gaussian(2), Rng(1));
  CHECK(z.eps_effective == 0.0);
}

TEST_CASE("sharded evaluation does not depend on the thread count") {
  Rng rng(16);
  const auto in = oracle::random_instance(rng, 50, 3000, 4);
  const auto t = fx::target(in);
  Vec g(50);
  for (double& v : g) v = rng.normal();
  const auto pot = fx::potential(t, g, 0.05);
  const auto src = fx::source(in);
  const auto& batch = src.enumerate();
  setenv("SDFM_THREADS", "1", 1);
  const Vec a = stochastic_gradient(t, pot, batch);
  const double va = semidual_value(t, pot, batch);
  setenv("SDFM_THREADS", "3", 1);
  const Vec b = stochastic_gradient(t, pot, batch);
  const double vb = semidual_value(t, pot, batch);
  unsetenv("SDFM_THREADS");
  CHECK(a == b);
  CHECK(va == vb);
}
