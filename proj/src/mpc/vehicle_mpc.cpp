// SPDX-License-Identifier: Apache-2.0
#include "soda/vehicle_mpc.hpp"

#include "soda/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace soda::mpc {

namespace {

using Eigen::VectorXd;

double wrap_angle(double a) { return std::remainder(a, 2.0 * std::numbers::pi); }

struct Built {
  VehicleDynamics dynamics;
  scp::Problem problem;
};

void build_problem(const MpcProblem& p, const std::vector<KeepOutSpec>& keep_outs, Built& b) {
  auto& sp = b.problem;
  sp.dynamics = &b.dynamics;
  sp.x0 = p.initial.to_vector();
  sp.horizon = p.horizon;
  const auto ref = reference_path(p);
  sp.state_ref.clear();
  sp.state_weight.clear();
  for (int t = 1; t <= p.horizon; ++t) {
    VectorXd r(5);
    r << ref[static_cast<std::size_t>(t)].x(), ref[static_cast<std::size_t>(t)].y(), 0.0, p.goal.V, 0.0;
    sp.state_ref.push_back(r);
    const double k = t == p.horizon ? p.weights.terminal : 1.0;
    VectorXd w(5);
    w << k * p.weights.w_pos, k * p.weights.w_pos, 0.0, k * p.weights.w_vel, 0.0;
    sp.state_weight.push_back(w);
  }
  sp.control_weight = VectorXd::Constant(2, p.weights.w_ctrl);
  sp.control_lo = VectorXd(2);
  sp.control_lo << -p.limits.a_max, -p.limits.p_max;
  sp.control_hi = -sp.control_lo;
  sp.state_bounds = {
      {1, p.limits.road_lo + p.limits.road_margin, p.limits.road_hi - p.limits.road_margin},
      {3, -p.limits.v_max, p.limits.v_max},
      {4, -p.limits.kappa_max, p.limits.kappa_max},
  };
  sp.keep_outs.clear();
  for (const auto& k : keep_outs) sp.keep_outs.push_back({k.step, k.center, k.radius});
  sp.pos_x = 0;
  sp.pos_y = 1;
}

// States and controls that follow a position sequence by finite differences.
void guess_from_positions(const MpcProblem& p, const std::vector<Point>& pos, std::vector<VectorXd>& xs,
                          std::vector<VectorXd>& us) {
  const auto T = static_cast<std::size_t>(p.horizon);
  std::vector<double> theta(T + 1, p.initial.theta);
  std::vector<double> speed(T + 1, p.initial.V);
  std::vector<double> kappa(T + 1, 0.0);
  for (std::size_t t = 1; t <= T; ++t) {
    const Point d = t < T ? Point(pos[t + 1] - pos[t]) : Point(pos[t] - pos[t - 1]);
    theta[t] = d.norm() > 1e-9 ? std::atan2(d.y(), d.x()) : theta[t - 1];
    speed[t] = d.norm() / p.h;
  }
  for (std::size_t t = 1; t < T; ++t) {
    kappa[t] = speed[t] > 0.1 ? wrap_angle(theta[t + 1] - theta[t]) / (speed[t] * p.h) : 0.0;
  }
  xs.assign(T + 1, VectorXd());
  us.assign(T, VectorXd());
  xs[0] = p.initial.to_vector();
  for (std::size_t t = 1; t <= T; ++t) {
    xs[t] = VectorXd(5);
    xs[t] << pos[t].x(), pos[t].y(), theta[t], speed[t], kappa[t];
  }
  for (std::size_t t = 0; t < T; ++t) {
    us[t] = VectorXd(2);
    us[t] << (xs[t + 1](3) - xs[t](3)) / p.h, (xs[t + 1](4) - xs[t](4)) / p.h;
  }
}

bool usable(const scp::Result& r, const scp::Config& cfg) {
  return r.status != scp::Status::SolverFailure && r.violation <= cfg.constraint_tolerance;
}

std::vector<VectorXd> control_vectors(const std::vector<ControlInput>& us, int horizon) {
  std::vector<VectorXd> out(static_cast<std::size_t>(horizon), VectorXd::Zero(2));
  for (std::size_t t = 0; t < out.size() && t < us.size(); ++t) out[t] << us[t].a, us[t].p;
  return out;
}

bool finite_plan(const scp::Result& r) {
  if (r.controls.empty() || r.states.size() != r.controls.size() + 1) return false;
  for (const auto& x : r.states) {
    if (!x.allFinite()) return false;
  }
  for (const auto& u : r.controls) {
    if (!u.allFinite()) return false;
  }
  return true;
}

// Without a feasible plan, brake to a stop unless the solver's best iterate
// violates the keep-outs by less. Stopping dead loses to an agent that keeps
// closing in, while the best iterate (an exact rollout within the control box)
// still backs away.
MpcSolution finish(const MpcProblem& p, const scp::Problem& prob, const scp::Result& r, const scp::Config& cfg) {
  MpcSolution s;
  s.scp = r;
  s.status = r.status;
  if (!usable(r, cfg)) {
    s.fallback = true;
    if (s.status != scp::Status::SolverFailure && s.status != scp::Status::NonConvergent) {
      s.status = scp::Status::Infeasible;
    }
    const auto brake = control_vectors(brake_profile(p), p.horizon);
    const auto brake_states = scp::rollout(*prob.dynamics, prob.x0, brake);
    const bool keep_best =
        r.status != scp::Status::SolverFailure && finite_plan(r) && r.violation < scp::violation(prob, brake_states);
    const auto& xs = keep_best ? r.states : brake_states;
    const auto& us = keep_best ? r.controls : brake;
    for (const auto& x : xs) s.states.push_back(VehicleState::from_vector(x));
    for (const auto& u : us) s.controls.push_back({u(0), u(1)});
    return s;
  }
  for (const auto& x : r.states) s.states.push_back(VehicleState::from_vector(x));
  for (const auto& u : r.controls) s.controls.push_back({u(0), u(1)});
  return s;
}

// A guess that ignores the keep-outs can settle in a local minimum that violates
// them. Later starts: the caller's retry controls (typically the previous plan)
// and the brake rollout, from which stopping short stays reachable.
MpcSolution solve_with_restart(const MpcProblem& p, const scp::Problem& prob, const scp::Config& cfg,
                               const std::vector<VectorXd>& xs, const std::vector<VectorXd>& us,
                               const std::vector<ControlInput>& retry_controls) {
  scp::Result r = scp::solve(prob, cfg, xs, us);
  std::vector<std::vector<VectorXd>> starts;
  if (!retry_controls.empty()) starts.push_back(control_vectors(retry_controls, p.horizon));
  starts.push_back(control_vectors(brake_profile(p), p.horizon));
  for (const auto& cu : starts) {
    if (usable(r, cfg)) break;
    scp::Result next = scp::solve(prob, cfg, scp::rollout(*prob.dynamics, prob.x0, cu), cu);
    if (usable(next, cfg) || next.violation < r.violation) r = std::move(next);
  }
  return finish(p, prob, r, cfg);
}

void require_valid(const MpcProblem& p) {
  if (const auto v = validate(p); !v.empty()) throw ArgumentError(v.front());
}

}  // namespace

VectorXd VehicleState::to_vector() const {
  VectorXd v(5);
  v << position.x(), position.y(), theta, V, kappa;
  return v;
}

VehicleState VehicleState::from_vector(const VectorXd& v) {
  if (v.size() != 5) throw ArgumentError("vehicle state vector must have 5 entries");
  return {Point(v(0), v(1)), v(2), v(3), v(4)};
}

VehicleState step_dynamics(const VehicleState& s, const ControlInput& u, double h) {
  VehicleState n = s;
  n.position.x() += h * s.V * std::cos(s.theta);
  n.position.y() += h * s.V * std::sin(s.theta);
  n.theta += h * s.V * s.kappa;
  n.V += h * u.a;
  n.kappa += h * u.p;
  return n;
}

VectorXd VehicleDynamics::step(const VectorXd& x, const VectorXd& u) const {
  return step_dynamics(VehicleState::from_vector(x), {u(0), u(1)}, h_).to_vector();
}

void VehicleDynamics::jacobians(const VectorXd& x, const VectorXd&, Eigen::MatrixXd& a, Eigen::MatrixXd& b) const {
  const double th = x(2);
  const double v = x(3);
  const double k = x(4);
  a = Eigen::MatrixXd::Identity(5, 5);
  a(0, 2) = -h_ * v * std::sin(th);
  a(0, 3) = h_ * std::cos(th);
  a(1, 2) = h_ * v * std::cos(th);
  a(1, 3) = h_ * std::sin(th);
  a(2, 3) = h_ * k;
  a(2, 4) = h_ * v;
  b = Eigen::MatrixXd::Zero(5, 2);
  b(3, 0) = h_;
  b(4, 1) = h_;
}

ReachableDisc reach_step(const ReachableDisc& d, double v_max, double h) {
  if (!(v_max >= 0.0)) throw ArgumentError("reach_step: v_max must be >= 0");
  if (!(h > 0.0)) throw ArgumentError("reach_step: h must be > 0");
  ReachableDisc out = d;
  out.radius += v_max * h;
  return out;
}

std::vector<ReachableDisc> grow_discs(const ReachableDisc& start, int horizon) {
  std::vector<ReachableDisc> out;
  out.reserve(static_cast<std::size_t>(std::max(horizon, 0)));
  ReachableDisc d = start;
  for (int t = 1; t <= horizon; ++t) {
    d = reach_step(d, start.v_max, start.h);
    out.push_back(d);
  }
  return out;
}

std::vector<std::string> validate(const MpcProblem& p) {
  std::vector<std::string> v;
  if (p.horizon < 1) v.emplace_back("mpc.horizon must be >= 1");
  if (!(p.h > 0.0)) v.emplace_back("mpc.h must be > 0");
  if (!(p.weights.w_pos > 0.0 && p.weights.w_vel > 0.0 && p.weights.w_ctrl > 0.0 && p.weights.terminal > 0.0)) {
    v.emplace_back("mpc.weights must all be > 0");
  }
  if (!(p.weights.w_pos > p.weights.w_vel)) v.emplace_back("mpc.weights.w_pos must exceed w_vel");
  const auto& l = p.limits;
  if (!(l.v_max > 0.0 && l.kappa_max > 0.0 && l.a_max > 0.0 && l.p_max > 0.0)) {
    v.emplace_back("mpc.limits must all be > 0");
  }
  if (!(l.road_hi - l.road_lo > 2.0 * l.road_margin)) v.emplace_back("mpc.limits road band narrower than margins");
  if (!(p.pedestrian_margin >= 0.0 && p.agent_radius >= 0.0)) v.emplace_back("mpc margins must be >= 0");
  return v;
}

std::vector<Point> reference_path(const MpcProblem& p) {
  const Point start = p.initial.position;
  const Point to_goal = p.goal.position - start;
  const double dist = to_goal.norm();
  const Point dir = dist > 1e-12 ? Point(to_goal / dist) : Point(1.0, 0.0);
  std::vector<Point> ref;
  ref.reserve(static_cast<std::size_t>(p.horizon) + 1);
  for (int t = 0; t <= p.horizon; ++t) {
    ref.push_back(start + std::min(t * p.h * std::fabs(p.goal.V), dist) * dir);
  }
  return ref;
}

std::vector<KeepOutSpec> nominal_keep_outs(const MpcProblem& p, const std::vector<Point>& predicted_agent) {
  if (predicted_agent.size() != static_cast<std::size_t>(p.horizon)) {
    throw ArgumentError("solve_mpc_nominal: need one predicted agent position per horizon step");
  }
  std::vector<KeepOutSpec> k;
  for (int t = 1; t <= p.horizon; ++t) {
    k.push_back({t, predicted_agent[static_cast<std::size_t>(t - 1)], p.pedestrian_margin + p.agent_radius});
  }
  return k;
}

std::vector<KeepOutSpec> reachable_keep_outs(const MpcProblem& p, const std::vector<ReachableDisc>& discs) {
  if (discs.size() != static_cast<std::size_t>(p.horizon)) {
    throw ArgumentError("solve_mpc_reachable: need one disc per horizon step");
  }
  std::vector<KeepOutSpec> k;
  for (int t = 1; t <= p.horizon; ++t) {
    const auto& d = discs[static_cast<std::size_t>(t - 1)];
    if (t > 1 && d.radius < discs[static_cast<std::size_t>(t - 2)].radius) {
      throw ArgumentError("solve_mpc_reachable: disc radii must be non-decreasing");
    }
    k.push_back({t, d.center, d.radius + p.pedestrian_margin});
  }
  return k;
}

MpcSolution solve_mpc_nominal(const MpcProblem& p, const std::vector<Point>& predicted_agent, const scp::Config& cfg,
                              const std::vector<ControlInput>& retry_controls) {
  require_valid(p);
  const auto keep_outs = nominal_keep_outs(p, predicted_agent);
  Built b{VehicleDynamics(p.h), {}};
  build_problem(p, keep_outs, b);

  // Straight line from the start to the end of the reference, pushed radially
  // out of every keep-out disc it enters.
  const auto ref = reference_path(p);
  const Point start = p.initial.position;
  const Point end = ref.back();
  std::vector<Point> pos(static_cast<std::size_t>(p.horizon) + 1);
  for (int t = 0; t <= p.horizon; ++t) {
    pos[static_cast<std::size_t>(t)] = start + (static_cast<double>(t) / p.horizon) * (end - start);
  }
  for (const auto& k : keep_outs) {
    Point& q = pos[static_cast<std::size_t>(k.step)];
    Point d = q - k.center;
    if (d.norm() < k.radius) {
      if (d.norm() < 1e-9) d = Point(0.0, start.y() >= k.center.y() ? 1.0 : -1.0);
      q = k.center + (k.radius * 1.001) * d.normalized();
    }
  }
  std::vector<VectorXd> xs;
  std::vector<VectorXd> us;
  guess_from_positions(p, pos, xs, us);
  return solve_with_restart(p, b.problem, cfg, xs, us, retry_controls);
}

MpcSolution solve_mpc_reachable(const MpcProblem& p, const std::vector<ReachableDisc>& discs, const scp::Config& cfg,
                                const std::vector<ControlInput>& retry_controls) {
  require_valid(p);
  const auto keep_outs = reachable_keep_outs(p, discs);
  Built b{VehicleDynamics(p.h), {}};
  build_problem(p, keep_outs, b);
  const auto T = static_cast<std::size_t>(p.horizon);
  std::vector<VectorXd> xs(T + 1, p.initial.to_vector());
  std::vector<VectorXd> us(T, VectorXd::Zero(2));
  return solve_with_restart(p, b.problem, cfg, xs, us, retry_controls);
}

std::vector<ControlInput> brake_profile(const MpcProblem& p) {
  std::vector<ControlInput> out;
  VehicleState s = p.initial;
  for (int t = 0; t < p.horizon; ++t) {
    ControlInput u{std::clamp(-s.V / p.h, -p.limits.a_max, p.limits.a_max),
                   std::clamp(-s.kappa / p.h, -p.limits.p_max, p.limits.p_max)};
    out.push_back(u);
    s = step_dynamics(s, u, p.h);
  }
  return out;
}

VerificationReport verify_solution(const MpcProblem& p, const std::vector<KeepOutSpec>& keep_outs,
                                   const std::vector<VehicleState>& states, const std::vector<ControlInput>& controls) {
  VerificationReport r;
  auto note = [&r](double v, const std::string& what) {
    if (v > r.max_violation) {
      r.max_violation = v;
      r.worst = what;
    }
  };
  if (states.size() != controls.size() + 1 || states.empty()) {
    r.max_dynamics_defect = std::numeric_limits<double>::infinity();
    r.worst = "state/control count mismatch";
    return r;
  }
  r.max_dynamics_defect = (states[0].to_vector() - p.initial.to_vector()).lpNorm<Eigen::Infinity>();
  for (std::size_t t = 0; t < controls.size(); ++t) {
    const auto next = step_dynamics(states[t], controls[t], p.h);
    r.max_dynamics_defect =
        std::max(r.max_dynamics_defect, (next.to_vector() - states[t + 1].to_vector()).lpNorm<Eigen::Infinity>());
    const std::string at = " at step " + std::to_string(t);
    note(std::fabs(controls[t].a) - p.limits.a_max, "acceleration bound" + at);
    note(std::fabs(controls[t].p) - p.limits.p_max, "pinch bound" + at);
  }
  const double y_lo = p.limits.road_lo + p.limits.road_margin;
  const double y_hi = p.limits.road_hi - p.limits.road_margin;
  for (std::size_t t = 1; t < states.size(); ++t) {
    const auto& s = states[t];
    const std::string at = " at step " + std::to_string(t);
    note(std::fabs(s.V) - p.limits.v_max, "speed bound" + at);
    note(std::fabs(s.kappa) - p.limits.kappa_max, "curvature bound" + at);
    note(std::max(y_lo - s.position.y(), s.position.y() - y_hi), "road margin" + at);
  }
  for (const auto& k : keep_outs) {
    if (k.step < 0 || static_cast<std::size_t>(k.step) >= states.size()) continue;
    note(k.radius - (states[static_cast<std::size_t>(k.step)].position - k.center).norm(),
         "keep-out" + std::string(" at step ") + std::to_string(k.step));
  }
  return r;
}

void save_solution_json(const MpcProblem& p, const MpcSolution& s, const std::filesystem::path& path) {
  nlohmann::json doc;
  doc["problem"] = {{"horizon", p.horizon},
                    {"h", p.h},
                    {"initial", {p.initial.position.x(), p.initial.position.y(), p.initial.theta, p.initial.V,
                                 p.initial.kappa}},
                    {"goal", {p.goal.position.x(), p.goal.position.y(), p.goal.theta, p.goal.V, p.goal.kappa}}};
  doc["status"] = scp::to_string(s.status);
  doc["fallback"] = s.fallback;
  auto& st = doc["states"] = nlohmann::json::array();
  for (const auto& x : s.states) st.push_back({x.position.x(), x.position.y(), x.theta, x.V, x.kappa});
  auto& ct = doc["controls"] = nlohmann::json::array();
  for (const auto& u : s.controls) ct.push_back({u.a, u.p});
  auto& tr = doc["trace"] = nlohmann::json::array();
  for (const auto& it : s.scp.trace) {
    tr.push_back({{"merit", it.merit},
                  {"objective", it.objective},
                  {"violation", it.violation},
                  {"trust_radius", it.trust_radius},
                  {"step", it.step_norm},
                  {"ratio", it.ratio},
                  {"accepted", it.accepted},
                  {"qp_status", qp::to_string(it.qp_status)},
                  {"qp_iterations", it.qp_iterations}});
  }
  doc["objective_trace"] = s.scp.merit_trace;
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << doc.dump(1) << '\n';
}

}  // namespace soda::mpc
