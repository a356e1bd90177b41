// SPDX-License-Identifier: Apache-2.0
#include "soda/errors.hpp"
#include "soda/scp.hpp"
#include "soda/vehicle_mpc.hpp"

#include "doctest.h"
#include "support/oracles.hpp"
#include "support/prop.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>

using namespace soda;
using Eigen::VectorXd;
using mpc::Point;

namespace {

using test::lattice_optimum;
using test::straight_guess;
using Toy = test::ToyScp;
constexpr auto v2 = test::vec2;

mpc::MpcProblem lane_problem(int horizon) {
  mpc::MpcProblem p;
  p.horizon = horizon;
  return p;
}

std::vector<mpc::VehicleState> rollout_of(const mpc::MpcProblem& p, const std::vector<mpc::ControlInput>& us) {
  std::vector<mpc::VehicleState> xs{p.initial};
  for (const auto& u : us) xs.push_back(mpc::step_dynamics(xs.back(), u, p.h));
  return xs;
}

bool exact_rollout(const mpc::MpcProblem& p, const std::vector<mpc::VehicleState>& xs,
                   const std::vector<mpc::ControlInput>& us) {
  if (xs.size() != us.size() + 1) return false;
  const auto ref = rollout_of(p, us);
  for (std::size_t t = 0; t < xs.size(); ++t) {
    if ((ref[t].position - xs[t].position).norm() > 1e-9 || std::fabs(ref[t].V - xs[t].V) > 1e-9) return false;
  }
  for (const auto& u : us) {
    if (std::fabs(u.a) > p.limits.a_max + 1e-9 || std::fabs(u.p) > p.limits.p_max + 1e-9) return false;
  }
  return true;
}

// L1 sum of keep-out, road-band, speed and curvature excess over steps 1..T.
double plan_violation(const mpc::MpcProblem& p, const std::vector<mpc::KeepOutSpec>& keep_outs,
                      const std::vector<mpc::VehicleState>& xs) {
  const auto& l = p.limits;
  double v = 0.0;
  for (std::size_t t = 1; t < xs.size(); ++t) {
    const double y = xs[t].position.y();
    v += std::max({0.0, l.road_lo + l.road_margin - y, y - (l.road_hi - l.road_margin)});
    v += std::max(0.0, std::fabs(xs[t].V) - l.v_max);
    v += std::max(0.0, std::fabs(xs[t].kappa) - l.kappa_max);
  }
  for (const auto& k : keep_outs) {
    v += std::max(0.0, k.radius - (xs[static_cast<std::size_t>(k.step)].position - k.center).norm());
  }
  return v;
}

double min_distance_to(const std::vector<mpc::VehicleState>& xs, const Point& c) {
  double d = std::numeric_limits<double>::infinity();
  for (std::size_t t = 1; t < xs.size(); ++t) d = std::min(d, (xs[t].position - c).norm());
  return d;
}

}  // namespace

TEST_CASE("step_dynamics") {
  mpc::VehicleState s{Point(0, 0), 0.0, 10.0, 0.0};
  auto n = mpc::step_dynamics(s, {}, 0.1);
  CHECK(n.position.isApprox(Point(1.0, 0.0)));
  CHECK(n.theta == 0.0);
  CHECK(n.V == 10.0);
  s.theta = M_PI / 2;
  n = mpc::step_dynamics(s, {}, 0.1);
  CHECK(std::fabs(n.position.x()) < 1e-15);
  CHECK(n.position.y() == doctest::Approx(1.0));
  n = mpc::step_dynamics(s, {2.0, 0.5}, 0.1);
  CHECK(n.V == doctest::Approx(10.2));
  CHECK(n.kappa == doctest::Approx(0.05));

  // circular arc of radius 1/kappa centered at (0, 10)
  mpc::VehicleState c{Point(0, 0), 0.0, 10.0, 0.1};
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    c = mpc::step_dynamics(c, {}, 0.01);
    worst = std::max(worst, std::fabs((c.position - Point(0, 10)).norm() - 10.0));
  }
  CHECK(c.theta == doctest::Approx(10.0));
  CHECK(worst < 0.5);

  const mpc::VehicleState a = mpc::step_dynamics({Point(1, 2), 0.3, 4.0, 0.01}, {0.2, -0.1}, 0.04);
  for (int i = 0; i < 1000; ++i) {
    const auto b = mpc::step_dynamics({Point(1, 2), 0.3, 4.0, 0.01}, {0.2, -0.1}, 0.04);
    CHECK(b.to_vector() == a.to_vector());
  }
}

TEST_CASE("reach_step") {
  mpc::ReachableDisc d;
  const double r0 = d.radius;
  for (int i = 0; i < 10; ++i) {
    const auto n = mpc::reach_step(d, 4.5, 1.0 / 23.976);
    CHECK(n.radius > d.radius);
    CHECK(n.center == d.center);
    d = n;
  }
  CHECK(d.radius - r0 == doctest::Approx(45.0 / 23.976));
  CHECK(mpc::reach_step(d, 0.0, 0.1).radius == d.radius);
  CHECK_THROWS_AS(mpc::reach_step(d, -1.0, 0.1), ArgumentError);
  CHECK(mpc::ReachableDisc{}.radius_at(0) == 0.5);
}

TEST_CASE("property: bounded random walks stay inside the reachable disc") {
  const double h = 1.0 / 23.976;
  test::for_all(
      10000, 51, [](test::Rng& rng) { return rng(); },
      [&](std::uint64_t seed) {
        test::Rng rng(seed);
        mpc::ReachableDisc d{Point(3, -1), 0.5, 4.5, h};
        Point p = d.center;
        bool inside = true;
        for (int tau = 1; tau <= 40; ++tau) {
          const double ang = test::uniform(rng, 0, 2 * M_PI);
          p += test::uniform(rng, 0, 4.5 * h) * Point(std::cos(ang), std::sin(ang));
          inside = inside && (p - d.center).norm() <= d.radius_at(tau) + 1e-12;
        }
        CHECK(inside);
      });
}

TEST_CASE("property: MPC II keep-out contains MPC I's whenever the predicted point is in the disc") {
  const auto p = lane_problem(1);
  test::for_all(
      2000, 52,
      [](test::Rng& rng) {
        return std::array<double, 6>{test::uniform(rng, -5, 5), test::uniform(rng, -5, 5), test::uniform(rng, 0, 2),
                                     test::uniform(rng, 0, 2 * M_PI), test::uniform(rng, -8, 8), test::uniform(rng, -8, 8)};
      },
      [&](const std::array<double, 6>& v) {
        const mpc::ReachableDisc disc{Point(v[0], v[1]), 0.5 + v[2], 4.5, p.h};
        // the disc radius includes the body; the predicted center lies inside the shrunken disc
        const double reach = disc.radius - p.agent_radius;
        const Point predicted = disc.center + (reach * 0.999) * Point(std::cos(v[3]), std::sin(v[3]));
        const Point x = disc.center + Point(v[4], v[5]);
        const auto one = mpc::nominal_keep_outs(p, {predicted}).front();
        const auto two = mpc::reachable_keep_outs(p, {disc}).front();
        const bool ok_two = (x - two.center).norm() >= two.radius;
        const bool ok_one = (x - one.center).norm() >= one.radius;
        if (ok_two) CHECK(ok_one);
      });
}

TEST_CASE("SCP toy instance matches the lattice dynamic program within 2%") {
  Toy toy;
  std::vector<VectorXd> us;
  const auto xs = straight_guess(toy.prob, us);
  scp::Config cfg;
  cfg.max_iterations = 100;
  const auto r = scp::solve(toy.prob, cfg, xs, us);
  CHECK(r.status == scp::Status::Converged);
  CHECK(r.violation <= 1e-3);
  const double dp = lattice_optimum(toy.prob, 0.05);
  CAPTURE(r.objective);
  CAPTURE(dp);
  CHECK(std::fabs(r.objective - dp) <= 0.02 * dp);
}

TEST_CASE("SCP: convex instance converges in one iteration to the least-squares optimum") {
  Toy toy;
  toy.prob.keep_outs.clear();
  toy.prob.control_lo = v2(-100, -100);
  toy.prob.control_hi = v2(100, 100);
  std::vector<VectorXd> us;
  const auto xs = straight_guess(toy.prob, us);
  const auto r = scp::solve(toy.prob, {}, xs, us);
  CHECK(r.status == scp::Status::Converged);
  CHECK(r.iterations == 1);

  // x_t = sum_{s<t} u_s, so the cost is a linear least-squares problem in u
  const int T = 5;
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(2 * T + 2 * T, 2 * T);
  VectorXd rhs = VectorXd::Zero(4 * T);
  for (int t = 1; t <= T; ++t) {
    for (int s = 0; s < t; ++s) M.block(2 * (t - 1), 2 * s, 2, 2).setIdentity();
    rhs.segment(2 * (t - 1), 2) = v2(5, 0);
  }
  M.bottomRows(2 * T) = std::sqrt(0.1) * Eigen::MatrixXd::Identity(2 * T, 2 * T);
  const VectorXd u = M.colPivHouseholderQr().solve(rhs);
  const double best = (M * u - rhs).squaredNorm();
  CHECK(r.objective == doctest::Approx(best).epsilon(1e-6));
}

TEST_CASE("SCP: a vanishing trust region reports non-convergence") {
  Toy toy;
  std::vector<VectorXd> us;
  const auto xs = straight_guess(toy.prob, us);
  scp::Config cfg;
  cfg.trust_radius = 1e-6;
  cfg.min_trust_radius = 1e-5;
  const auto r = scp::solve(toy.prob, cfg, xs, us);
  CHECK(r.status == scp::Status::NonConvergent);
}

TEST_CASE("MPC I: open road reaches the goal") {
  auto p = lane_problem(168);  // 7 s at 10 m/s covers the 70 m
  const std::vector<Point> far(168, Point(35, 100));
  const auto s = mpc::solve_mpc_nominal(p, far);
  CHECK_FALSE(s.fallback);
  CHECK(s.status == scp::Status::Converged);
  CHECK((s.states.back().position - p.goal.position).norm() < 0.5);
  const auto rep = mpc::verify_solution(p, mpc::nominal_keep_outs(p, far), s.states, s.controls);
  CHECK(rep.passes());
  for (std::size_t i = 1; i < s.scp.merit_trace.size(); ++i) CHECK(s.scp.merit_trace[i] <= s.scp.merit_trace[i - 1]);

  // an off-road obstacle 100 m to the side changes nothing
  const std::vector<Point> none(168, Point(35, 1e4));
  const auto s2 = mpc::solve_mpc_nominal(p, none);
  for (std::size_t t = 0; t < s.states.size(); ++t) CHECK((s.states[t].position - s2.states[t].position).norm() < 1e-3);
}

TEST_CASE("MPC I: obstacle on the lane center is avoided") {
  auto p = lane_problem(150);
  const Point obstacle(35, -1.8);
  const std::vector<Point> pred(150, obstacle);
  const auto s = mpc::solve_mpc_nominal(p, pred);
  CHECK_FALSE(s.fallback);
  CHECK(min_distance_to(s.states, obstacle) >= 2.0 - 1e-3);
  CHECK(min_distance_to(s.states, obstacle) >= p.pedestrian_margin + p.agent_radius - 1e-3);
  const auto rep = mpc::verify_solution(p, mpc::nominal_keep_outs(p, pred), s.states, s.controls);
  CHECK(rep.passes());
  for (std::size_t i = 1; i < s.scp.merit_trace.size(); ++i) CHECK(s.scp.merit_trace[i] <= s.scp.merit_trace[i - 1]);
}

TEST_CASE("MPC II: growing disc ahead keeps the vehicle behind it") {
  auto p = lane_problem(150);
  const mpc::ReachableDisc start{Point(40, 2.0), 0.5, 4.5, p.h};
  const auto discs = mpc::grow_discs(start, 150);
  const auto s = mpc::solve_mpc_reachable(p, discs);
  for (const auto& x : s.states) CHECK(x.position.x() < 40.0);
  if (!s.fallback) CHECK(mpc::verify_solution(p, mpc::reachable_keep_outs(p, discs), s.states, s.controls).passes());
}

TEST_CASE("MPC II: static off-lane disc gives a near-nominal drive") {
  auto p = lane_problem(150);
  const mpc::ReachableDisc start{Point(35, 30), 0.5, 0.0, p.h};
  const auto s = mpc::solve_mpc_reachable(p, mpc::grow_discs(start, 150));
  CHECK_FALSE(s.fallback);
  for (const auto& x : s.states) CHECK(std::fabs(x.position.y() + 1.8) < 0.05);
  CHECK(s.states.back().position.x() > 55.0);
}

TEST_CASE("MPC II: disc covering the start falls back to a plan no worse than braking") {
  auto p = lane_problem(60);
  const mpc::ReachableDisc start{Point(3, -1.8), 0.5, 50.0, p.h};
  const auto discs = mpc::grow_discs(start, 60);
  const auto keep_outs = mpc::reachable_keep_outs(p, discs);
  const auto s = mpc::solve_mpc_reachable(p, discs);
  CHECK(s.fallback);
  REQUIRE(s.controls.size() == 60);
  CHECK(exact_rollout(p, s.states, s.controls));
  const auto brake = mpc::brake_profile(p);
  CHECK(plan_violation(p, keep_outs, s.states) <= plan_violation(p, keep_outs, rollout_of(p, brake)) + 1e-9);
}

TEST_CASE("MPC II: an unescapable chasing disc still backs the vehicle away") {
  // 20 m gap closing at 14.5 m/s; stopping from 10 m/s at 5 m/s^2 takes 10 m.
  auto p = lane_problem(115);
  p.initial = {Point(15, -1.8), 0.0, 10.0, 0.0};
  p.goal.position = Point(85, -1.8);
  const mpc::ReachableDisc start{Point(35, -1.8), 0.5, 4.5, p.h};
  const auto discs = mpc::grow_discs(start, 115);
  const auto keep_outs = mpc::reachable_keep_outs(p, discs);
  const auto s = mpc::solve_mpc_reachable(p, discs);
  CHECK(s.fallback);
  CHECK(exact_rollout(p, s.states, s.controls));
  const auto braked = rollout_of(p, mpc::brake_profile(p));
  CHECK(plan_violation(p, keep_outs, s.states) < plan_violation(p, keep_outs, braked));
  CHECK(s.states.back().V < 0.0);
  CHECK(s.states.back().position.x() < braked.back().position.x());
}

TEST_CASE("verify_solution catches a broken plan") {
  auto p = lane_problem(20);
  std::vector<mpc::ControlInput> us(20);
  std::vector<mpc::VehicleState> xs{p.initial};
  for (const auto& u : us) xs.push_back(mpc::step_dynamics(xs.back(), u, p.h));
  CHECK(mpc::verify_solution(p, {}, xs, us).passes());
  xs[5].position.x() += 0.01;
  CHECK_FALSE(mpc::verify_solution(p, {}, xs, us).passes());
  xs[5].position.x() -= 0.01;
  CHECK_FALSE(mpc::verify_solution(p, {{3, xs[3].position, 2.0}}, xs, us).passes());
}
