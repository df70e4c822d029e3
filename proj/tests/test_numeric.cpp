#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dab/numeric.hpp"

using namespace dab;
using Catch::Approx;

TEST_CASE("softmax basics") {
  SECTION("uniform input") {
    auto p = softmax({0.0, 0.0, 0.0}, 1.0);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(p[i] == Approx(1.0 / 3.0).margin(1e-15));
  }
  SECTION("two equal logits, any temperature") {
    for (double tau : {0.05, 0.5, 1.0, 7.0}) {
      auto p = softmax({5.0, 5.0}, tau);
      REQUIRE(p[0] == Approx(0.5).margin(1e-15));
      REQUIRE(p[1] == Approx(0.5).margin(1e-15));
    }
  }
  SECTION("direct formula evaluation at [2,1,0]") {
    // Oracle: evaluate the defining formula in extended precision.
    long double e[3] = {std::exp(2.0L), std::exp(1.0L), std::exp(0.0L)};
    long double z = e[0] + e[1] + e[2];
    auto p = softmax({2.0, 1.0, 0.0}, 1.0);
    for (int i = 0; i < 3; ++i) REQUIRE(p[i] == Approx(double(e[i] / z)).margin(1e-14));
    // frozen values of that evaluation
    REQUIRE(p[0] == Approx(0.66524095577482178).margin(1e-12));
    REQUIRE(p[1] == Approx(0.24472847105479764).margin(1e-12));
    REQUIRE(p[2] == Approx(0.09003057317038046).margin(1e-12));
  }
  SECTION("rejects bad input") {
    REQUIRE_THROWS_AS(softmax({1.0, std::nan("")}, 1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(softmax({1.0, 2.0}, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(softmax({1.0, 2.0}, -1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(softmax({}, 1.0), std::invalid_argument);
  }
}

TEST_CASE("softmax properties on random inputs") {
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t n = 1 + rng.next_u64() % 12;
    RealVec v(n);
    for (auto& x : v) x = (rng.next_unit() - 0.5) * 40.0;
    double tau = 0.01 + rng.next_unit() * 5.0;

    auto p = softmax(v, tau);  // ProbVec construction itself checks sum/nonneg
    REQUIRE(p.size() == n);

    // shift invariance
    double c = (rng.next_unit() - 0.5) * 100.0;
    RealVec shifted = v;
    for (auto& x : shifted) x += c * tau;  // add c to v/tau means add c*tau to v
    auto q = softmax(shifted, tau);
    for (std::size_t i = 0; i < n; ++i) REQUIRE(std::abs(p[i] - q[i]) <= 1e-12);
  }
}

TEST_CASE("sample_categorical") {
  SECTION("point mass") {
    Rng rng(7);
    ProbVec p({1.0, 0.0, 0.0});
    for (int i = 0; i < 1000; ++i) REQUIRE(sample_categorical(p, rng) == 0);
  }
  SECTION("same seed, same draw") {
    ProbVec p({0.3, 0.7});
    Rng a(123), b(123);
    for (int i = 0; i < 50; ++i) REQUIRE(sample_categorical(p, a) == sample_categorical(p, b));
  }
  SECTION("fair coin frequency") {
    ProbVec p({0.5, 0.5});
    Rng rng(2024);
    int zeros = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i)
      if (sample_categorical(p, rng) == 0) ++zeros;
    double freq = double(zeros) / draws;
    REQUIRE(freq >= 0.49);
    REQUIRE(freq <= 0.51);
  }
  SECTION("law of large numbers, 5 categories") {
    RealVec probs = {0.15, 0.3, 0.25, 0.05, 0.25};
    ProbVec p(probs);
    Rng rng(99);
    const int draws = 100000;
    std::vector<int> counts(probs.size(), 0);
    for (int i = 0; i < draws; ++i) ++counts[sample_categorical(p, rng)];
    for (std::size_t i = 0; i < probs.size(); ++i)
      REQUIRE(std::abs(double(counts[i]) / draws - probs[i]) < 0.01);
  }
  SECTION("degenerate distributions rejected") {
    REQUIRE_THROWS_AS(ProbVec({0.5, 0.4}), std::invalid_argument);
    REQUIRE_THROWS_AS(ProbVec({1.2, -0.2}), std::invalid_argument);
  }
}

TEST_CASE("l2_norm") {
  REQUIRE(l2_norm(RealVec{3.0, 4.0}) == Approx(5.0).margin(1e-15));
  REQUIRE(l2_norm(RealVec{0.0, 0.0}) == 0.0);
  REQUIRE(l2_norm(RealVec{1.0, 1.0, 1.0, 1.0}) == Approx(2.0).margin(1e-15));
}

TEST_CASE("finite_difference_grad") {
  SECTION("linear function gives all ones") {
    Matrix x(2, 3, 0.7);
    auto g = finite_difference_grad(
        [](const Matrix& m) {
          double s = 0.0;
          for (double v : m.data()) s += v;
          return s;
        },
        x, 1e-5);
    for (double v : g.data()) REQUIRE(v == Approx(1.0).margin(1e-9));
  }
  SECTION("constant function gives zeros") {
    Matrix x(3, 2, -1.4);
    auto g = finite_difference_grad([](const Matrix&) { return 4.2; }, x, 1e-4);
    for (double v : g.data()) REQUIRE(v == 0.0);
  }
  SECTION("quadratic form matches analytic gradient") {
    // f(x) = 0.5*sum_ij a_ij x_ij^2 + sum_ij c_ij x_ij + x_00*x_11
    Rng rng(5);
    Matrix a(2, 2), c(2, 2), x(2, 2);
    for (std::size_t i = 0; i < 4; ++i) {
      a.data()[i] = rng.next_unit() * 3.0 + 0.2;
      c.data()[i] = rng.next_unit() - 0.5;
      x.data()[i] = rng.next_unit() * 2.0 - 1.0;
    }
    auto f = [&](const Matrix& m) {
      double s = 0.0;
      for (std::size_t i = 0; i < 4; ++i)
        s += 0.5 * a.data()[i] * m.data()[i] * m.data()[i] + c.data()[i] * m.data()[i];
      return s + m(0, 0) * m(1, 1);
    };
    auto g = finite_difference_grad(f, x, 1e-5);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t cc = 0; cc < 2; ++cc) {
        double want = a(r, cc) * x(r, cc) + c(r, cc);
        if (r == 0 && cc == 0) want += x(1, 1);
        if (r == 1 && cc == 1) want += x(0, 0);
        double rel = std::abs(g(r, cc) - want) / std::max({1e-6, std::abs(want), std::abs(g(r, cc))});
        REQUIRE(rel < 1e-6);
      }
  }
  SECTION("step size outside sanctioned band rejected") {
    Matrix x(1, 1, 0.0);
    auto f = [](const Matrix&) { return 0.0; };
    REQUIRE_THROWS_AS(finite_difference_grad(f, x, 1e-7), std::invalid_argument);
    REQUIRE_THROWS_AS(finite_difference_grad(f, x, 1e-2), std::invalid_argument);
  }
}

TEST_CASE("rng behaves like a pure function of (seed, call sequence)") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

  SECTION("forks are decorrelated and position-independent") {
    Rng parent(42);
    Rng child_before = parent.fork(3);
    parent.next_u64();
    parent.next_u64();
    Rng child_after = parent.fork(3);
    REQUIRE(child_before.next_u64() == child_after.next_u64());

    Rng c0 = parent.fork(0), c1 = parent.fork(1);
    REQUIRE(c0.next_u64() != c1.next_u64());
    REQUIRE(c0.next_u64() != Rng(42).next_u64());
  }

  SECTION("unit draws live in [0,1)") {
    Rng r(11);
    for (int i = 0; i < 10000; ++i) {
      double u = r.next_unit();
      REQUIRE(u >= 0.0);
      REQUIRE(u < 1.0);
    }
  }

  SECTION("gaussian moments") {
    Rng r(314);
    const int n = 20000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
      double g = r.next_gaussian();
      sum += g;
      sq += g * g;
    }
    double mean = sum / n;
    double var = sq / n - mean * mean;
    REQUIRE(std::abs(mean) < 0.03);
    REQUIRE(var > 0.95);
    REQUIRE(var < 1.05);
  }
}
