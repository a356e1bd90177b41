// SPDX-License-Identifier: Apache-2.0
#include "soda/errors.hpp"
#include "soda/qp.hpp"

#include "doctest.h"
#include "support/prop.hpp"

#include <cmath>
#include <limits>

using namespace soda;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

qp::Problem make(const MatrixXd& P, const VectorXd& q, const MatrixXd& A, const VectorXd& l, const VectorXd& u) {
  qp::Problem p;
  p.P = P.sparseView();
  p.q = q;
  p.A = A.sparseView();
  p.l = l;
  p.u = u;
  return p;
}

// Random strictly convex QP with a known feasible point, mixing equalities,
// one-sided rows and two-sided rows.
qp::Problem random_qp(test::Rng& rng) {
  const int n = test::uniform_int(rng, 2, 8);
  const int m = test::uniform_int(rng, 1, 10);
  MatrixXd B(n, n);
  for (int i = 0; i < B.size(); ++i) B.data()[i] = test::uniform(rng, -1, 1);
  const MatrixXd P = B * B.transpose() + 0.1 * MatrixXd::Identity(n, n);
  VectorXd q(n);
  for (int i = 0; i < n; ++i) q(i) = test::uniform(rng, -3, 3);
  MatrixXd A(m, n);
  for (int i = 0; i < A.size(); ++i) A.data()[i] = test::uniform(rng, -1, 1);
  VectorXd x0(n);
  for (int i = 0; i < n; ++i) x0(i) = test::uniform(rng, -1, 1);
  const VectorXd ax = A * x0;
  VectorXd l(m);
  VectorXd u(m);
  for (int i = 0; i < m; ++i) {
    switch (test::uniform_int(rng, 0, 3)) {
      case 0: l(i) = u(i) = ax(i); break;
      case 1: l(i) = -kInf; u(i) = ax(i) + test::uniform(rng, 0, 0.5); break;
      case 2: l(i) = ax(i) - test::uniform(rng, 0, 0.5); u(i) = kInf; break;
      default: l(i) = ax(i) - test::uniform(rng, 0, 0.5); u(i) = ax(i) + test::uniform(rng, 0, 0.5);
    }
  }
  // at most n-1 equalities keeps the system consistent
  int eq = 0;
  for (int i = 0; i < m; ++i) {
    if (l(i) == u(i) && ++eq > n - 1) u(i) = kInf;
  }
  return make(P, q, A, l, u);
}

double obj(const qp::Problem& p, const VectorXd& x) { return 0.5 * x.dot(p.P * x) + p.q.dot(x); }

}  // namespace

TEST_CASE("QP: unconstrained minimum and an active bound, both backends") {
  MatrixXd P(2, 2);
  P << 2, 0, 0, 2;
  VectorXd q(2);
  q << -2, -4;
  MatrixXd A = MatrixXd::Identity(2, 2);
  VectorXd l = VectorXd::Constant(2, -10);
  VectorXd u = VectorXd::Constant(2, 10);
  for (auto method : {qp::Method::InteriorPoint, qp::Method::Admm}) {
    qp::Settings s;
    s.method = method;
    auto r = qp::solve(make(P, q, A, l, u), s);
    CHECK(r.status == qp::Status::Solved);
    CHECK((r.x - VectorXd::Map(std::vector<double>{1, 2}.data(), 2)).norm() < 1e-6);
    u(1) = 1.5;
    r = qp::solve(make(P, q, A, l, u), s);
    CHECK(r.status == qp::Status::Solved);
    CHECK(r.x(1) == doctest::Approx(1.5).epsilon(1e-6));
    CHECK(r.y(1) > 0);  // positive multiplier on an active upper bound
    u(1) = 10;
  }
}

TEST_CASE("property: interior point and ADMM agree and satisfy KKT on random QPs") {
  test::for_all(300, 41, random_qp, [](const qp::Problem& p) {
    qp::Settings ipm;
    const auto a = qp::solve(p, ipm);
    qp::Settings admm;
    admm.method = qp::Method::Admm;
    const auto b = qp::solve(p, admm);
    REQUIRE(a.status == qp::Status::Solved);
    REQUIRE(b.status == qp::Status::Solved);
    const double scale = 1.0 + p.q.lpNorm<Eigen::Infinity>();
    CHECK(qp::primal_residual(p, a.x) <= 1e-6);
    CHECK(qp::dual_residual(p, a.x, a.y) <= 1e-6 * scale);
    CHECK(std::fabs(obj(p, a.x) - obj(p, b.x)) <= 1e-5 * (1.0 + std::fabs(obj(p, a.x))));
    CHECK((a.x - b.x).norm() <= 1e-4 * (1.0 + a.x.norm()));
  });
}

TEST_CASE("property: no feasible perturbation improves the interior-point solution") {
  // Local optimality check independent of multipliers: feasible random directions never lower the objective.
  test::for_all(100, 43, random_qp, [](const qp::Problem& p) {
    const auto r = qp::solve(p);
    REQUIRE(r.status == qp::Status::Solved);
    test::Rng rng(7);
    const double f = obj(p, r.x);
    for (int k = 0; k < 200; ++k) {
      VectorXd d(r.x.size());
      for (int i = 0; i < d.size(); ++i) d(i) = test::uniform(rng, -1, 1);
      const VectorXd y = r.x + 1e-3 * d;
      if (qp::primal_residual(p, y) <= 1e-12) CHECK(obj(p, y) >= f - 1e-9);
    }
  });
}

TEST_CASE("QP validation") {
  auto p = make(MatrixXd::Identity(2, 2), VectorXd::Zero(2), MatrixXd::Identity(2, 2), VectorXd::Constant(2, 1),
                VectorXd::Constant(2, 0));
  CHECK_THROWS_AS(qp::validate(p), ArgumentError);
  p.u = VectorXd::Constant(3, 2);
  CHECK_THROWS_AS(qp::validate(p), ArgumentError);
}

TEST_CASE("ADMM reports primal infeasibility") {
  MatrixXd A(2, 1);
  A << 1, 1;
  VectorXd l(2);
  VectorXd u(2);
  l << 1, -kInf;
  u << kInf, 0;
  qp::Settings s;
  s.method = qp::Method::Admm;
  const auto r = qp::solve(make(MatrixXd::Identity(1, 1), VectorXd::Zero(1), A, l, u), s);
  CHECK(r.status == qp::Status::PrimalInfeasible);
  CHECK(qp::solve(make(MatrixXd::Identity(1, 1), VectorXd::Zero(1), A, l, u)).status != qp::Status::Solved);
}

TEST_CASE("ADMM: upper-only rows are inequalities, not equalities") {
  // min (x-2)^2 subject to x <= 1: the bound is active but must not be treated as x == 1 from the start
  MatrixXd P(1, 1);
  P << 2;
  VectorXd q(1);
  q << -4;
  MatrixXd A(2, 1);
  A << 1, 1;
  VectorXd l(2);
  l << -kInf, -kInf;
  VectorXd u(2);
  u << 1, 5;
  qp::Settings s;
  s.method = qp::Method::Admm;
  const auto r = qp::solve(make(P, q, A, l, u), s);
  REQUIRE(r.status == qp::Status::Solved);
  CHECK(r.x(0) == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(r.y(1) == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(r.iterations < 500);
}
