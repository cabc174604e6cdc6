#include <cmath>

#include "doctest.h"
#include "mlens/numerics.hpp"
#include "mlens/rng.hpp"

using namespace mlens;

TEST_CASE("softmax basics") {
  auto p = softmax({0.0, 0.0, 0.0});
  CHECK(p[0] == doctest::Approx(1.0 / 3.0));
  CHECK(p[2] == doctest::Approx(1.0 / 3.0));

  auto single = softmax({42.0});
  CHECK(single[0] == doctest::Approx(1.0));

  // large magnitudes must not overflow thanks to max subtraction
  auto big = softmax({1000.0, 1000.0 + std::log(2.0)});
  CHECK(big[0] == doctest::Approx(1.0 / 3.0));
  CHECK(big[1] == doctest::Approx(2.0 / 3.0));

  CHECK_THROWS_AS(softmax({}), ConfigError);
}

TEST_CASE("softmax shift invariance and stability") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    Vec logits(8);
    for (double& x : logits) x = 1e4 * (rng.uniform() * 2.0 - 1.0);
    auto p = softmax(logits);
    double sum = 0.0;
    for (size_t i = 0; i < p.size(); ++i) sum += p[i];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    Vec shifted = logits;
    for (double& x : shifted) x += 123.456;
    auto q = softmax(shifted);
    for (size_t i = 0; i < p.size(); ++i) CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-9));
  }
}

TEST_CASE("kl divergence") {
  ProbVector half({0.5, 0.5});
  CHECK(kl_divergence(half, half) == doctest::Approx(0.0).epsilon(1e-7));

  ProbVector p({1.0, 0.0});
  ProbVector q({0.5, 0.5});
  CHECK(kl_divergence(p, q) == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  ProbVector u4({0.25, 0.25, 0.25, 0.25});
  CHECK(kl_divergence(u4, u4) == doctest::Approx(0.0).epsilon(1e-7));

  CHECK_THROWS_AS(kl_divergence(p, u4), ConfigError);
}

TEST_CASE("kl divergence properties on random distributions") {
  Rng rng(11);
  auto random_dist = [&](int n) {
    Vec v(static_cast<size_t>(n));
    double sum = 0.0;
    for (double& x : v) {
      x = -std::log(1.0 - rng.uniform());
      sum += x;
    }
    for (double& x : v) x /= sum;
    return ProbVector(v);
  };
  for (int trial = 0; trial < 1000; ++trial) {
    auto p = random_dist(16);
    CHECK(kl_divergence(p, p) <= 1e-7);  // zero within smoothing tolerance
    auto q = random_dist(16);
    CHECK(kl_divergence(p, q) >= 0.0);  // Gibbs' inequality
  }
}

TEST_CASE("cosine similarity") {
  CHECK(cosine_similarity({3, 4}, {3, 4}) == doctest::Approx(1.0));
  CHECK(cosine_similarity({1, 0}, {0, 1}) == doctest::Approx(0.0));
  CHECK(cosine_similarity({1, 1}, {1, 0}) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK_THROWS_AS(cosine_similarity({0, 0}, {1, 0}), ConfigError);
  CHECK_THROWS_AS(cosine_similarity({1, 0}, {1, 0, 0}), ConfigError);
}

TEST_CASE("cosine similarity symmetry and scale invariance") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Vec u(6), v(6);
    for (double& x : u) x = rng.gaussian();
    for (double& x : v) x = rng.gaussian();
    const double s = cosine_similarity(u, v);
    CHECK(cosine_similarity(v, u) == doctest::Approx(s).epsilon(1e-12));
    const double a = 0.37 + rng.uniform() * 5.0;
    const double b = 0.11 + rng.uniform() * 9.0;
    Vec ua = u, vb = v;
    for (double& x : ua) x *= a;
    for (double& x : vb) x *= b;
    CHECK(cosine_similarity(ua, vb) == doctest::Approx(s).epsilon(1e-9));
  }
}

TEST_CASE("cross entropy loss") {
  CHECK(cross_entropy_loss({0, 0, 0, 0}, 2) == doctest::Approx(std::log(4.0)));
  CHECK(cross_entropy_loss({1e9, 0, 0}, 0) == doctest::Approx(0.0));
  CHECK(cross_entropy_loss({0.0, std::log(3.0)}, 0) == doctest::Approx(std::log(4.0)));
  CHECK_THROWS_AS(cross_entropy_loss({0, 0}, 2), ConfigError);
  CHECK_THROWS_AS(cross_entropy_loss({0, 0}, -1), ConfigError);
}

TEST_CASE("finite difference gradient") {
  auto square = [](const Vec& x) { return x[0] * x[0]; };
  auto g = finite_difference_gradient(square, {3.0}, 1e-4);
  CHECK(g[0] == doctest::Approx(6.0).epsilon(1e-6));

  auto constant = [](const Vec&) { return 7.5; };
  auto gz = finite_difference_gradient(constant, {1.0, -2.0, 0.5}, 1e-4);
  for (double v : gz) CHECK(v == doctest::Approx(0.0));

  auto sumsq = [](const Vec& x) { return x[0] * x[0] + x[1] * x[1]; };
  auto g2 = finite_difference_gradient(sumsq, {1.0, 2.0}, 1e-4);
  CHECK(g2[0] == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(g2[1] == doctest::Approx(4.0).epsilon(1e-6));

  CHECK_THROWS_AS(finite_difference_gradient(square, {1.0}, 0.0), ConfigError);
}
