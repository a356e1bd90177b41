// SPDX-License-Identifier: Apache-2.0
#include "soda/conformal.hpp"
#include "soda/errors.hpp"
#include "soda/special_functions.hpp"

#include "doctest.h"
#include "support/oracles.hpp"
#include "support/prop.hpp"
#include "support/tmp.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace soda;
using conformal::ScoreSet;

namespace {

using test::beta_mass_trapezoid;
using test::bisect_eigenvalue;

}  // namespace

TEST_CASE("nonconformity examples") {
  CHECK(conformal::nonconformity(Eigen::Matrix2d::Zero()) == 0.0);
  Eigen::Matrix2d d;
  d << 3, 0, 0, 1;
  CHECK(conformal::nonconformity(d) == doctest::Approx(3.0));
  Eigen::Matrix2d m;
  m << 2, 1, 1, 2;
  CHECK(conformal::nonconformity(m) == doctest::Approx(3.0));
  Eigen::Matrix2d bad;
  bad << 1, 0.1, 0.0, 1;
  CHECK_THROWS_AS(conformal::nonconformity(bad), ArgumentError);
}

TEST_CASE("property: closed-form eigenvalue matches an iterative root finder on random PSD matrices") {
  test::for_all(
      1000, 31,
      [](test::Rng& rng) {
        Eigen::Matrix2d b;
        for (int i = 0; i < 4; ++i) b.data()[i] = test::uniform(rng, -2, 2);
        Eigen::Matrix2d m = b * b.transpose();
        m(0, 0) += test::uniform(rng, 0.0, 0.5);
        return Eigen::Matrix2d(0.5 * (m + m.transpose()));
      },
      [](const Eigen::Matrix2d& m) {
        const double rho = conformal::nonconformity(m);
        CHECK(rho >= 0.0);
        CHECK(std::fabs(rho - bisect_eigenvalue(m)) <= 1e-9 * std::max(1.0, rho));
      });
}

TEST_CASE("quantile index and calibration") {
  CHECK(conformal::quantile_index(100, 0.0396) == 97);
  CHECK(conformal::quantile_index(1000, 0.04) == 961);

  std::vector<double> s(100);
  for (int i = 0; i < 96; ++i) s[static_cast<std::size_t>(i)] = 0.0001 * (i + 1);
  s[96] = 0.0114;  // rho^(97)
  s[97] = 0.02;
  s[98] = 0.03;
  s[99] = 0.04;
  std::shuffle(s.begin(), s.end(), std::mt19937_64(3));
  std::sort(s.begin(), s.end());
  REQUIRE(s[96] == 0.0114);
  const auto d = conformal::calibrate(ScoreSet(s), 0.0396);
  CHECK(d.K == 97);
  CHECK(d.N == 100);
  CHECK(d.C == doctest::Approx(0.012).epsilon(1e-12));
  CHECK(d.C >= 0.0114);
  CHECK(d.delta == doctest::Approx(1.0 - 97.0 / 101.0));

  const auto raw = conformal::calibrate(ScoreSet(s), 0.0396, conformal::RoundingRule{-1});
  CHECK(raw.C == 0.0114);

  CHECK_THROWS_AS(conformal::calibrate(ScoreSet({0.5}), 0.4), CalibrationError);
  try {
    conformal::calibrate(ScoreSet({0.5}), 0.4);
  } catch (const CalibrationError& e) {
    CHECK(std::string(e.what()).find("minimum feasible delta") != std::string::npos);
  }
}

TEST_CASE("round_up keeps exact grid values and always covers") {
  CHECK(conformal::round_up(0.012, 3) == 0.012);
  CHECK(conformal::round_up(0.0114, 3) == doctest::Approx(0.012));
  test::for_all(
      2000, 3, [](test::Rng& rng) { return test::uniform(rng, 0, 10); },
      [](double v) {
        const double c = conformal::round_up(v, 3);
        CHECK(c >= v);
        CHECK(c - v < 1e-3 + 1e-12);
      });
}

TEST_CASE("property: calibrating by delta equals calibrating by the implied K") {
  test::for_all(
      300, 4,
      [](test::Rng& rng) {
        const int n = test::uniform_int(rng, 5, 300);
        std::vector<double> s(static_cast<std::size_t>(n));
        for (auto& x : s) x = test::uniform(rng, 0, 1);
        return std::make_pair(s, test::uniform(rng, 1.0 / (n + 1) + 1e-3, 0.9));
      },
      [](const std::pair<std::vector<double>, double>& in) {
        const ScoreSet s(in.first);
        const auto a = conformal::calibrate(s, in.second);
        const auto b = conformal::calibrate_with_index(s, a.K);
        CHECK(a.C == b.C);
        CHECK(a.K == b.K);
        CHECK(a.C >= s.order_statistic(a.K));
      });
}

TEST_CASE("detect boundary and monotonicity") {
  conformal::Detector d;
  d.C = 0.012;
  CHECK_FALSE(conformal::detect(d, 0.012));
  CHECK_FALSE(conformal::detect(d, 0.0));
  CHECK(conformal::detect(d, 0.5));
  test::for_all(
      1000, 6, [](test::Rng& rng) { return std::make_pair(test::uniform(rng, 0, 0.03), test::uniform(rng, 0, 0.03)); },
      [&](std::pair<double, double> r) {
        const double lo = std::min(r.first, r.second);
        const double hi = std::max(r.first, r.second);
        if (conformal::detect(d, lo)) CHECK(conformal::detect(d, hi));
      });
}

TEST_CASE("coverage distribution") {
  const auto b = conformal::coverage_distribution(100, 97);
  CHECK(b.a == 97);
  CHECK(b.b == 4);
  CHECK(b.mean() == doctest::Approx(97.0 / 101.0));
  const auto u = conformal::coverage_distribution(1, 1);
  CHECK(u.a == 1);
  CHECK(u.b == 1);
  const auto big = conformal::coverage_distribution(1000, 961);
  CHECK(big.a == 961);
  CHECK(big.b == 40);
  CHECK_THROWS_AS(conformal::coverage_distribution(10, 11), ArgumentError);
}

TEST_CASE("regularized incomplete beta") {
  for (double x : {0.0, 0.3, 1.0}) CHECK(special::regularized_incomplete_beta(x, 1, 1) == doctest::Approx(x));
  CHECK(special::regularized_incomplete_beta(0.5, 5, 5) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK_THROWS_AS(special::regularized_incomplete_beta(1.5, 1, 1), ArgumentError);
  CHECK_THROWS_AS(special::regularized_incomplete_beta(0.5, 0, 1), ArgumentError);

  const double oracle = beta_mass_trapezoid(961, 40, 0.95, 0.96, 1000000);
  const double ours = special::regularized_incomplete_beta(0.96, 961, 40) - special::regularized_incomplete_beta(0.95, 961, 40);
  CHECK(std::fabs(ours - oracle) < 1e-8);

  test::for_all(
      2000, 8,
      [](test::Rng& rng) {
        return std::array<double, 3>{test::uniform(rng, 0, 1), test::uniform(rng, 0.2, 500), test::uniform(rng, 0.2, 500)};
      },
      [](const std::array<double, 3>& v) {
        const double i = special::regularized_incomplete_beta(v[0], v[1], v[2]);
        CHECK(i >= 0.0);
        CHECK(i <= 1.0);
        CHECK(std::fabs(i - (1.0 - special::regularized_incomplete_beta(1.0 - v[0], v[2], v[1]))) <= 1e-10);
        const double j = special::regularized_incomplete_beta(std::min(1.0, v[0] + 0.01), v[1], v[2]);
        CHECK(j >= i - 1e-14);
      });
}

TEST_CASE("calculate_probability") {
  const double p = conformal::calculate_probability(1000, 0.04, 0.95, 0.97);
  CHECK(std::fabs(p - 0.8965) <= 0.0005);
  CHECK(std::fabs(p - beta_mass_trapezoid(961, 40, 0.95, 0.97, 1000000)) < 1e-8);
  CHECK(conformal::calculate_probability(1000, 0.04, 0.0, 1.0) == doctest::Approx(1.0));

  // Monte-Carlo CDF of Beta(97, 4) at its mean
  const double analytic = conformal::coverage_distribution(100, 97).cdf(97.0 / 101.0);
  CHECK(analytic > 0.4);
  CHECK(analytic < 0.6);
  std::mt19937_64 rng(12);
  std::gamma_distribution<double> ga(97.0, 1.0);
  std::gamma_distribution<double> gb(4.0, 1.0);
  const int n = 1000000;
  int below = 0;
  for (int i = 0; i < n; ++i) {
    const double x = ga(rng);
    const double y = gb(rng);
    below += x / (x + y) <= 97.0 / 101.0;
  }
  const double mc = static_cast<double>(below) / n;
  CHECK(std::fabs(mc - analytic) < 4 * std::sqrt(analytic * (1 - analytic) / n));

  CHECK_THROWS_AS(conformal::calculate_probability(1000, 0.04, 0.97, 0.95), ArgumentError);
  CHECK_THROWS_AS(conformal::calculate_probability(10, 0.04, 0.95, 0.97), ArgumentError);
}

TEST_CASE("required_calibration_size against a linear scan") {
  conformal::SearchTrace tr;
  const int n = conformal::required_calibration_size(0.04, 0.89, 10, 0.95, 0.97, &tr);
  CHECK(tr.initial_lo == 49);
  CHECK(tr.initial_hi == 52);
  CHECK(n <= 1000);
  CHECK(conformal::calculate_probability(n, 0.04, 0.95, 0.97) >= 0.89);
  CHECK(tr.final_hi - tr.final_lo <= 10);

  int first = -1;
  for (int m = 100; m <= 1200; ++m) {
    if (conformal::calculate_probability(m, 0.04, 0.95, 0.97) >= 0.89) {
      first = m;
      break;
    }
  }
  REQUIRE(first > 0);
  CHECK(n >= first - 10);
  CHECK(n <= first + 10);

  const int exact = conformal::required_calibration_size(0.04, 0.89, 1, 0.95, 0.97);
  CHECK(conformal::calculate_probability(exact, 0.04, 0.95, 0.97) >= 0.89);
  CHECK(std::abs(exact - first) <= 1);

  CHECK_THROWS_AS(conformal::required_calibration_size(0.04, 0.89, 10, 0.95, 0.97, nullptr, 3), SearchError);
  CHECK_THROWS_AS(conformal::required_calibration_size(0.04, 0.89, 0, 0.95, 0.97), ArgumentError);
}

TEST_CASE("order-statistic oracle: mean coverage of uniforms is K/(N+1)") {
  // Coverage of a fresh uniform equals the threshold itself, so average the K-th order statistic.
  const int N = 100;
  const int K = 97;
  const int reps = 100000;
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> s(N);
  double sum = 0;
  double sum2 = 0;
  for (int r = 0; r < reps; ++r) {
    for (auto& x : s) x = u(rng);
    std::nth_element(s.begin(), s.begin() + (K - 1), s.end());
    const double t = s[K - 1];
    sum += t;
    sum2 += t * t;
  }
  const double mean = sum / reps;
  const double se = std::sqrt((sum2 / reps - mean * mean) / reps);
  CHECK(std::fabs(mean - 97.0 / 101.0) < 3 * se);
}

TEST_CASE("detector and score files round trip") {
  test::TempDir dir;
  const ScoreSet s({0.3, 0.1, 0.2});
  const auto d = conformal::calibrate_with_index(s, 2, conformal::RoundingRule{-1});
  conformal::save_detector(d, dir / "d.json");
  const auto back = conformal::load_detector(dir / "d.json");
  CHECK(back.C == d.C);
  CHECK(back.K == d.K);
  CHECK(back.N == d.N);
  CHECK(back.score_digest == d.score_digest);
  conformal::save_scores(s, dir / "s.csv");
  const auto sb = conformal::load_scores(dir / "s.csv");
  CHECK(sb.digest() == s.digest());
  CHECK(ScoreSet({0.1, 0.2, 0.3}).digest() == s.digest());
  CHECK_THROWS_AS(ScoreSet({-1.0}), ArgumentError);
}

TEST_CASE("beta-binomial interval oracle holds its mass under simulation") {
  const int n = 540;
  const auto [lo, hi] = test::beta_binomial_interval(n, 4, 97, 0.99);
  CHECK(lo < 0.04 * n);
  CHECK(hi > 0.04 * n);
  std::mt19937_64 rng(5);
  std::gamma_distribution<double> ga(4.0, 1.0);
  std::gamma_distribution<double> gb(97.0, 1.0);
  const int reps = 200000;
  int inside = 0;
  for (int i = 0; i < reps; ++i) {
    const double x = ga(rng);
    const double p = x / (x + gb(rng));
    const int k = std::binomial_distribution<int>(n, p)(rng);
    inside += k >= lo && k <= hi;
  }
  const double frac = static_cast<double>(inside) / reps;
  CHECK(frac >= 0.99 - 0.002);
  CHECK(frac <= 0.995);
}
