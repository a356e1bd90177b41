// SPDX-License-Identifier: Apache-2.0
#include "soda/scp.hpp"

#include "soda/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace soda::scp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kBig = 1e299;

struct Layout {
  int nx = 0;
  int nu = 0;
  int T = 0;
  int n_slack = 0;
  [[nodiscard]] int u(int t) const { return t * nu; }
  [[nodiscard]] int x(int t) const { return T * nu + (t - 1) * nx; }  // t >= 1
  [[nodiscard]] int slack(int k) const { return T * nu + T * nx + k; }
  [[nodiscard]] int size() const { return T * (nu + nx) + n_slack; }
};

struct Subproblem {
  qp::Problem qp;
  Layout layout;
};

Eigen::Vector2d position(const Problem& p, const VectorXd& x) { return {x(p.pos_x), x(p.pos_y)}; }

int count_slacks(const Problem& p) {
  int per_step = 0;
  for (const auto& b : p.state_bounds) {
    if (b.lo > -kBig || b.hi < kBig) ++per_step;
  }
  return per_step * p.horizon + static_cast<int>(p.keep_outs.size());
}

VectorXd control_half_range(const Problem& p) { return 0.5 * (p.control_hi - p.control_lo); }

Subproblem build(const Problem& p, const std::vector<VectorXd>& xs, const std::vector<VectorXd>& us, double radius,
                 double penalty) {
  const auto& dyn = *p.dynamics;
  Layout L{dyn.state_dim(), dyn.control_dim(), p.horizon, count_slacks(p)};
  const int n = L.size();
  std::vector<Eigen::Triplet<double>> pt;
  VectorXd q = VectorXd::Zero(n);
  std::vector<Eigen::Triplet<double>> at;
  std::vector<double> lo;
  std::vector<double> hi;
  auto add_row = [&](double l, double u) {
    lo.push_back(l);
    hi.push_back(u);
    return static_cast<int>(lo.size()) - 1;
  };

  // cost
  for (int t = 0; t < L.T; ++t) {
    for (int i = 0; i < L.nu; ++i) {
      const double w = p.control_weight(i);
      if (w == 0.0) continue;
      pt.emplace_back(L.u(t) + i, L.u(t) + i, 2.0 * w);
      q(L.u(t) + i) = 2.0 * w * us[static_cast<std::size_t>(t)](i);
    }
  }
  for (int t = 1; t <= L.T; ++t) {
    const auto& w = p.state_weight[static_cast<std::size_t>(t - 1)];
    const VectorXd err = xs[static_cast<std::size_t>(t)] - p.state_ref[static_cast<std::size_t>(t - 1)];
    for (int i = 0; i < L.nx; ++i) {
      if (w(i) == 0.0) continue;
      pt.emplace_back(L.x(t) + i, L.x(t) + i, 2.0 * w(i));
      q(L.x(t) + i) = 2.0 * w(i) * err(i);
    }
  }
  for (int k = 0; k < L.n_slack; ++k) q(L.slack(k)) = penalty;

  // dynamics: dx_{t+1} - A dx_t - B du_t = f(xbar_t, ubar_t) - xbar_{t+1}
  MatrixXd a;
  MatrixXd b;
  for (int t = 0; t < L.T; ++t) {
    const auto& xb = xs[static_cast<std::size_t>(t)];
    const auto& ub = us[static_cast<std::size_t>(t)];
    dyn.jacobians(xb, ub, a, b);
    const VectorXd defect = dyn.step(xb, ub) - xs[static_cast<std::size_t>(t + 1)];
    for (int i = 0; i < L.nx; ++i) {
      const int r = add_row(defect(i), defect(i));
      at.emplace_back(r, L.x(t + 1) + i, 1.0);
      if (t > 0) {
        for (int j = 0; j < L.nx; ++j) {
          if (a(i, j) != 0.0) at.emplace_back(r, L.x(t) + j, -a(i, j));
        }
      }
      for (int j = 0; j < L.nu; ++j) {
        if (b(i, j) != 0.0) at.emplace_back(r, L.u(t) + j, -b(i, j));
      }
    }
  }

  // control bounds intersected with the trust region
  const VectorXd half = control_half_range(p);
  for (int t = 0; t < L.T; ++t) {
    const auto& ub = us[static_cast<std::size_t>(t)];
    for (int i = 0; i < L.nu; ++i) {
      const double l = std::max(p.control_lo(i) - ub(i), -radius * half(i));
      const double u = std::min(p.control_hi(i) - ub(i), radius * half(i));
      const int r = add_row(std::min(l, u), u);
      at.emplace_back(r, L.u(t) + i, 1.0);
    }
  }

  // soft state bounds
  int slack = 0;
  for (int t = 1; t <= L.T; ++t) {
    const auto& xb = xs[static_cast<std::size_t>(t)];
    for (const auto& sb : p.state_bounds) {
      if (!(sb.lo > -kBig || sb.hi < kBig)) continue;
      if (sb.lo > -kBig) {
        const int r = add_row(sb.lo - xb(sb.index), kInf);
        at.emplace_back(r, L.x(t) + sb.index, 1.0);
        at.emplace_back(r, L.slack(slack), 1.0);
      }
      if (sb.hi < kBig) {
        const int r = add_row(-kInf, sb.hi - xb(sb.index));
        at.emplace_back(r, L.x(t) + sb.index, 1.0);
        at.emplace_back(r, L.slack(slack), -1.0);
      }
      ++slack;
    }
  }

  // keep-outs as supporting half-planes n'(pos - c) >= r
  for (const auto& ko : p.keep_outs) {
    const auto& xb = xs[static_cast<std::size_t>(ko.step)];
    const Eigen::Vector2d d = position(p, xb) - ko.center;
    const double dn = d.norm();
    const Eigen::Vector2d nrm = dn > 1e-9 ? Eigen::Vector2d(d / dn) : Eigen::Vector2d(0.0, -1.0);
    const int r = add_row(ko.radius - nrm.dot(d), kInf);
    at.emplace_back(r, L.x(ko.step) + p.pos_x, nrm.x());
    at.emplace_back(r, L.x(ko.step) + p.pos_y, nrm.y());
    at.emplace_back(r, L.slack(slack), 1.0);
    ++slack;
  }

  for (int k = 0; k < L.n_slack; ++k) {
    const int r = add_row(0.0, kInf);
    at.emplace_back(r, L.slack(k), 1.0);
  }

  Subproblem sp;
  sp.layout = L;
  sp.qp.P.resize(n, n);
  sp.qp.P.setFromTriplets(pt.begin(), pt.end());
  sp.qp.q = q;
  const auto m = static_cast<int>(lo.size());
  sp.qp.A.resize(m, n);
  sp.qp.A.setFromTriplets(at.begin(), at.end());
  sp.qp.l = Eigen::Map<const VectorXd>(lo.data(), m);
  sp.qp.u = Eigen::Map<const VectorXd>(hi.data(), m);
  return sp;
}

double merit(const Problem& p, const std::vector<VectorXd>& xs, const std::vector<VectorXd>& us, double penalty) {
  return objective(p, xs, us) + penalty * violation(p, xs);
}

void check_problem(const Problem& p) {
  if (p.dynamics == nullptr) throw ArgumentError("scp: dynamics missing");
  const int nx = p.dynamics->state_dim();
  const int nu = p.dynamics->control_dim();
  if (p.horizon < 1) throw ArgumentError("scp: horizon must be >= 1");
  if (p.x0.size() != nx) throw ArgumentError("scp: x0 has wrong dimension");
  if (p.state_ref.size() != static_cast<std::size_t>(p.horizon) ||
      p.state_weight.size() != static_cast<std::size_t>(p.horizon)) {
    throw ArgumentError("scp: state references and weights need one entry per step");
  }
  if (p.control_weight.size() != nu || p.control_lo.size() != nu || p.control_hi.size() != nu) {
    throw ArgumentError("scp: control weight/bounds have wrong dimension");
  }
  if ((p.control_hi - p.control_lo).minCoeff() <= 0.0) throw ArgumentError("scp: empty control box");
  for (const auto& ko : p.keep_outs) {
    if (ko.step < 1 || ko.step > p.horizon) throw ArgumentError("scp: keep-out step outside 1..T");
  }
  for (const auto& b : p.state_bounds) {
    if (b.index < 0 || b.index >= nx || b.lo > b.hi) throw ArgumentError("scp: malformed state bound");
  }
}

}  // namespace

std::vector<std::string> validate(const Config& c) {
  std::vector<std::string> v;
  if (c.max_iterations < 1) v.emplace_back("scp.max_iterations must be >= 1");
  if (!(c.tolerance > 0.0)) v.emplace_back("scp.tolerance must be > 0");
  if (!(c.trust_radius > 0.0)) v.emplace_back("scp.trust_radius must be > 0");
  if (!(c.shrink > 0.0 && c.shrink < 1.0)) v.emplace_back("scp.shrink must be in (0,1)");
  if (!(c.grow >= 1.0)) v.emplace_back("scp.grow must be >= 1");
  if (!(c.min_trust_radius > 0.0)) v.emplace_back("scp.min_trust_radius must be > 0");
  if (!(c.constraint_tolerance > 0.0)) v.emplace_back("scp.constraint_tolerance must be > 0");
  if (!(c.penalty > 0.0)) v.emplace_back("scp.penalty must be > 0");
  return v;
}

std::string to_string(Status s) {
  switch (s) {
    case Status::Converged: return "converged";
    case Status::MaxIterations: return "max_iterations";
    case Status::Infeasible: return "infeasible";
    case Status::NonConvergent: return "non_convergent";
    case Status::SolverFailure: return "solver_failure";
  }
  return "unknown";
}

std::vector<VectorXd> rollout(const Dynamics& dyn, const VectorXd& x0, const std::vector<VectorXd>& controls) {
  std::vector<VectorXd> xs;
  xs.reserve(controls.size() + 1);
  xs.push_back(x0);
  for (const auto& u : controls) xs.push_back(dyn.step(xs.back(), u));
  return xs;
}

double objective(const Problem& p, const std::vector<VectorXd>& xs, const std::vector<VectorXd>& us) {
  double j = 0.0;
  for (int t = 1; t <= p.horizon; ++t) {
    const VectorXd e = xs[static_cast<std::size_t>(t)] - p.state_ref[static_cast<std::size_t>(t - 1)];
    j += e.cwiseAbs2().dot(p.state_weight[static_cast<std::size_t>(t - 1)]);
  }
  for (const auto& u : us) j += u.cwiseAbs2().dot(p.control_weight);
  return j;
}

double violation(const Problem& p, const std::vector<VectorXd>& xs) {
  double v = 0.0;
  for (int t = 1; t <= p.horizon; ++t) {
    const auto& x = xs[static_cast<std::size_t>(t)];
    for (const auto& b : p.state_bounds) v += std::max({0.0, b.lo - x(b.index), x(b.index) - b.hi});
  }
  for (const auto& ko : p.keep_outs) {
    v += std::max(0.0, ko.radius - (position(p, xs[static_cast<std::size_t>(ko.step)]) - ko.center).norm());
  }
  return v;
}

Result solve(const Problem& p, const Config& cfg, const std::vector<VectorXd>& guess_states,
             const std::vector<VectorXd>& guess_controls) {
  check_problem(p);
  if (const auto v = validate(cfg); !v.empty()) throw ArgumentError(v.front());
  const auto T = static_cast<std::size_t>(p.horizon);
  if (guess_states.size() != T + 1 || guess_controls.size() != T) {
    throw ArgumentError("scp: guess must have T+1 states and T controls");
  }
  const auto& dyn = *p.dynamics;
  const double lam = cfg.penalty;
  const VectorXd half = control_half_range(p);

  // Linearization point of the first subproblem: the guess with controls
  // clipped into the box so the trust region and bounds intersect.
  std::vector<VectorXd> lin_x = guess_states;
  lin_x[0] = p.x0;
  std::vector<VectorXd> lin_u = guess_controls;
  for (auto& u : lin_u) u = u.cwiseMax(p.control_lo).cwiseMin(p.control_hi);

  Result res;
  res.controls = lin_u;
  res.states = rollout(dyn, p.x0, res.controls);
  double inc_merit = merit(p, res.states, res.controls, lam);
  res.merit_trace.push_back(inc_merit);
  bool linearized_at_incumbent = false;
  double radius = cfg.trust_radius;
  bool converged = false;
  bool solver_failed = false;

  for (int it = 1; it <= cfg.max_iterations; ++it) {
    if (radius < cfg.min_trust_radius) break;
    res.iterations = it;
    const auto sp = build(p, lin_x, lin_u, radius, lam);
    const auto qr = qp::solve(sp.qp, cfg.qp);
    IterationInfo info;
    info.trust_radius = radius;
    info.qp_status = qr.status;
    info.qp_iterations = qr.iterations;
    if (qr.status != qp::Status::Solved && qr.status != qp::Status::MaxIterations) {
      info.merit = inc_merit;
      res.trace.push_back(info);
      solver_failed = true;
      break;
    }
    const auto& L = sp.layout;
    std::vector<VectorXd> cand_u(T);
    std::vector<VectorXd> model_x(T + 1);
    model_x[0] = p.x0;
    double step = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const VectorXd du = qr.x.segment(L.u(static_cast<int>(t)), L.nu);
      cand_u[t] = (lin_u[t] + du).cwiseMax(p.control_lo).cwiseMin(p.control_hi);
      step = std::max(step, du.cwiseQuotient(half).lpNorm<Eigen::Infinity>());
      model_x[t + 1] = lin_x[t + 1] + qr.x.segment(L.x(static_cast<int>(t) + 1), L.nx);
    }
    double slack_sum = 0.0;
    for (int k = 0; k < L.n_slack; ++k) slack_sum += std::max(0.0, qr.x(L.slack(k)));
    const double model_merit = objective(p, model_x, cand_u) + lam * slack_sum;
    const auto cand_x = rollout(dyn, p.x0, cand_u);
    const double cand_merit = merit(p, cand_x, cand_u, lam);
    const double scale = 1.0 + std::fabs(inc_merit);
    const bool exact_model = std::fabs(cand_merit - model_merit) <= 1e-9 * scale;
    const bool trust_active = step >= 0.999 * radius;

    bool accept = false;
    double ratio = 0.0;
    if (!linearized_at_incumbent) {
      accept = cand_merit <= inc_merit || exact_model;
      ratio = accept ? 1.0 : 0.0;
    } else {
      const double predicted = inc_merit - model_merit;
      const double actual = inc_merit - cand_merit;
      if (predicted <= 1e-10 * scale) {
        // no model improvement left inside the trust region
        info.merit = inc_merit;
        info.ratio = 1.0;
        info.objective = objective(p, res.states, res.controls);
        info.violation = violation(p, res.states);
        res.trace.push_back(info);
        converged = !trust_active || step < cfg.tolerance;
        if (converged) break;
        radius *= cfg.shrink;
        continue;
      }
      ratio = actual / predicted;
      accept = ratio >= 0.1;
      if (ratio < 0.25) {
        radius *= cfg.shrink;
      } else if (ratio > 0.75 && trust_active) {
        radius = std::min(radius * cfg.grow, cfg.max_trust_radius);
      }
    }
    info.step_norm = step;
    info.ratio = ratio;
    info.accepted = accept;
    if (accept) {
      res.controls = cand_u;
      res.states = cand_x;
      inc_merit = cand_merit;
      res.merit_trace.push_back(inc_merit);
    }
    info.merit = inc_merit;
    info.objective = objective(p, res.states, res.controls);
    info.violation = violation(p, res.states);
    res.trace.push_back(info);

    lin_x = res.states;
    lin_u = res.controls;
    const bool was_guess = !linearized_at_incumbent;
    linearized_at_incumbent = true;
    if (accept && ((exact_model && !trust_active) || (!was_guess && step < cfg.tolerance))) {
      converged = true;
      break;
    }
  }

  res.objective = objective(p, res.states, res.controls);
  res.violation = violation(p, res.states);
  if (solver_failed) {
    res.status = Status::SolverFailure;
  } else if (radius < cfg.min_trust_radius && !converged) {
    res.status = Status::NonConvergent;
  } else {
    res.status = converged ? Status::Converged : Status::MaxIterations;
  }
  if (res.status != Status::SolverFailure && res.status != Status::NonConvergent &&
      res.violation > cfg.constraint_tolerance) {
    res.status = Status::Infeasible;
  }
  return res;
}

}  // namespace soda::scp
