// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soda/qp.hpp"

#include <Eigen/Core>

#include <string>
#include <vector>

namespace soda::scp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Discrete-time dynamics x' = f(x, u) with Jacobians.
class Dynamics {
 public:
  virtual ~Dynamics() = default;
  [[nodiscard]] virtual int state_dim() const = 0;
  [[nodiscard]] virtual int control_dim() const = 0;
  [[nodiscard]] virtual VectorXd step(const VectorXd& x, const VectorXd& u) const = 0;
  virtual void jacobians(const VectorXd& x, const VectorXd& u, MatrixXd& a, MatrixXd& b) const = 0;
};

/// x' = x + u (unit time step); the toy system used for solver checks.
class SingleIntegrator final : public Dynamics {
 public:
  explicit SingleIntegrator(int dim) : dim_(dim) {}
  [[nodiscard]] int state_dim() const override { return dim_; }
  [[nodiscard]] int control_dim() const override { return dim_; }
  [[nodiscard]] VectorXd step(const VectorXd& x, const VectorXd& u) const override { return x + u; }
  void jacobians(const VectorXd&, const VectorXd&, MatrixXd& a, MatrixXd& b) const override {
    a = MatrixXd::Identity(dim_, dim_);
    b = MatrixXd::Identity(dim_, dim_);
  }

 private:
  int dim_;
};

/// Soft bound lo <= x[index] <= hi on every state after the initial one.
struct StateBound {
  int index = 0;
  double lo = -1e300;
  double hi = 1e300;
};

/// Soft keep-out ||(x[px], x[py]) - center|| >= radius at one step (1..T).
struct KeepOut {
  int step = 1;
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  double radius = 0.0;
};

/// Quadratic tracking problem: sum_{t=1..T} (x_t - ref_t)' diag(q_t) (x_t - ref_t)
/// + sum_{t=0..T-1} u_t' diag(r) u_t, subject to the dynamics, hard control
/// bounds, and soft state bounds and keep-outs with an L1 penalty.
struct Problem {
  const Dynamics* dynamics = nullptr;
  VectorXd x0;
  int horizon = 1;
  std::vector<VectorXd> state_ref;     // T entries, for t = 1..T
  std::vector<VectorXd> state_weight;  // T entries (diagonals)
  VectorXd control_weight;             // diagonal
  VectorXd control_lo;
  VectorXd control_hi;
  std::vector<StateBound> state_bounds;
  std::vector<KeepOut> keep_outs;
  int pos_x = 0;
  int pos_y = 1;
};

struct Config {
  int max_iterations = 30;
  /// Converged once the accepted control change, as a fraction of each
  /// control's half-range, falls below this.
  double tolerance = 1e-4;
  /// Initial trust-region radius as a fraction of each control's half-range.
  double trust_radius = 0.5;
  double shrink = 0.5;
  double grow = 2.0;
  double min_trust_radius = 1e-5;
  double max_trust_radius = 2.0;
  double constraint_tolerance = 1e-3;
  double penalty = 1e5;
  qp::Settings qp;
};

/// Empty when valid; one message per violated field otherwise.
std::vector<std::string> validate(const Config& cfg);

enum class Status { Converged, MaxIterations, Infeasible, NonConvergent, SolverFailure };
std::string to_string(Status s);

struct IterationInfo {
  double merit = 0.0;  // objective plus penalty of the incumbent after this iteration
  double objective = 0.0;
  double violation = 0.0;
  double trust_radius = 0.0;
  double step_norm = 0.0;
  double ratio = 0.0;
  bool accepted = false;
  qp::Status qp_status = qp::Status::Solved;
  int qp_iterations = 0;
};

struct Result {
  std::vector<VectorXd> states;    // T+1, states[0] = x0, consistent with controls
  std::vector<VectorXd> controls;  // T
  Status status = Status::MaxIterations;
  int iterations = 0;
  double objective = 0.0;
  double violation = 0.0;
  std::vector<IterationInfo> trace;
  /// Merit of the incumbent after every accepted iteration (first entry: initial incumbent).
  std::vector<double> merit_trace;
};

std::vector<VectorXd> rollout(const Dynamics& dyn, const VectorXd& x0, const std::vector<VectorXd>& controls);

double objective(const Problem& prob, const std::vector<VectorXd>& states, const std::vector<VectorXd>& controls);
/// Sum of soft-constraint violation amounts (L1).
double violation(const Problem& prob, const std::vector<VectorXd>& states);

/// Sequential convex programming. The first subproblem is linearized about the
/// supplied guess (which need not satisfy the dynamics); afterwards about the
/// incumbent, which is always the exact rollout of its controls.
Result solve(const Problem& prob, const Config& cfg, const std::vector<VectorXd>& guess_states,
             const std::vector<VectorXd>& guess_controls);

}  // namespace soda::scp
