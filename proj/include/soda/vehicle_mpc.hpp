// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soda/scp.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <string>
#include <vector>

namespace soda::mpc {

using Point = Eigen::Vector2d;

inline constexpr double kDefaultStep = 1.0 / 23.976;

struct VehicleState {
  Point position = Point::Zero();
  double theta = 0.0;
  double V = 0.0;
  double kappa = 0.0;

  [[nodiscard]] Eigen::VectorXd to_vector() const;
  static VehicleState from_vector(const Eigen::VectorXd& v);
};

struct ControlInput {
  double a = 0.0;  // acceleration, m/s^2
  double p = 0.0;  // pinch, 1/(m s)
};

/// One forward-Euler step; no clamping.
VehicleState step_dynamics(const VehicleState& s, const ControlInput& u, double h);

/// Forward-Euler car model (x, y, theta, V, kappa) with inputs (a, p).
class VehicleDynamics final : public scp::Dynamics {
 public:
  explicit VehicleDynamics(double h) : h_(h) {}
  [[nodiscard]] int state_dim() const override { return 5; }
  [[nodiscard]] int control_dim() const override { return 2; }
  [[nodiscard]] Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const override;
  void jacobians(const Eigen::VectorXd& x, const Eigen::VectorXd& u, Eigen::MatrixXd& a,
                 Eigen::MatrixXd& b) const override;

 private:
  double h_;
};

/// Disc bounding every position an agent with speed <= v_max can reach.
struct ReachableDisc {
  Point center = Point::Zero();
  double radius = 0.5;
  double v_max = 4.5;
  double h = kDefaultStep;

  /// Radius tau steps after this disc.
  [[nodiscard]] double radius_at(int tau) const { return radius + tau * h * v_max; }
};

/// Grows the radius by exactly v_max * h; center unchanged. Throws on v_max < 0.
ReachableDisc reach_step(const ReachableDisc& d, double v_max, double h);

struct VehicleLimits {
  double v_max = 20.0;
  double kappa_max = 1.0 / 5.913;
  double a_max = 5.0;
  double p_max = 2.0;
  double road_lo = -3.6;
  double road_hi = 3.6;
  double road_margin = 0.9;
};

struct CostWeights {
  double w_pos = 10.0;
  double w_vel = 1.0;
  double w_ctrl = 0.1;
  double terminal = 10.0;
};

struct MpcProblem {
  VehicleState initial{Point(0.0, -1.8), 0.0, 10.0, 0.0};
  int horizon = 150;
  double h = kDefaultStep;
  VehicleState goal{Point(70.0, -1.8), 0.0, 10.0, 0.0};
  VehicleLimits limits;
  CostWeights weights;
  /// Vehicle clearance to the pedestrian (center to center).
  double pedestrian_margin = 2.0;
  /// Pedestrian body radius added to the margin around a predicted point.
  double agent_radius = 0.5;
};

std::vector<std::string> validate(const MpcProblem& p);

struct MpcSolution {
  std::vector<VehicleState> states;  // horizon + 1
  std::vector<ControlInput> controls;
  scp::Status status = scp::Status::MaxIterations;
  bool fallback = false;  // no feasible plan: brake-to-stop or the least-violating iterate, whichever violates less
  scp::Result scp;
};

/// Position reference: advances from the initial position toward the goal at
/// the goal speed and holds at the goal.
std::vector<Point> reference_path(const MpcProblem& p);

/// MPC I: keep `pedestrian_margin + agent_radius` from the predicted point at every step.
/// When the run from the standard guess ends infeasible, SCP is restarted from
/// `retry_controls` (padded with zeros or truncated to the horizon) if given, then
/// from the brake rollout.
MpcSolution solve_mpc_nominal(const MpcProblem& p, const std::vector<Point>& predicted_agent,
                              const scp::Config& cfg = {}, const std::vector<ControlInput>& retry_controls = {});
/// MPC II: keep `radius + pedestrian_margin` from the disc center at every step;
/// discs[tau-1] is the disc for step tau. Restarts as for MPC I.
MpcSolution solve_mpc_reachable(const MpcProblem& p, const std::vector<ReachableDisc>& discs,
                                const scp::Config& cfg = {}, const std::vector<ControlInput>& retry_controls = {});

/// Discs for steps 1..T grown from `start` (the disc at the observation time).
std::vector<ReachableDisc> grow_discs(const ReachableDisc& start, int horizon);

/// Controls that stop the vehicle as fast as the bounds allow and straighten the wheel.
std::vector<ControlInput> brake_profile(const MpcProblem& p);

struct KeepOutSpec {
  int step = 1;
  Point center = Point::Zero();
  double radius = 0.0;
};

struct VerificationReport {
  double max_dynamics_defect = 0.0;
  double max_violation = 0.0;
  std::string worst;
  [[nodiscard]] bool passes(double dyn_tol = 1e-6, double con_tol = 1e-3) const {
    return max_dynamics_defect <= dyn_tol && max_violation <= con_tol;
  }
};

/// Independent check of a plan: re-simulates the controls through step_dynamics
/// and evaluates every bound and keep-out on the stored states.
VerificationReport verify_solution(const MpcProblem& p, const std::vector<KeepOutSpec>& keep_outs,
                                   const std::vector<VehicleState>& states,
                                   const std::vector<ControlInput>& controls);

std::vector<KeepOutSpec> nominal_keep_outs(const MpcProblem& p, const std::vector<Point>& predicted_agent);
std::vector<KeepOutSpec> reachable_keep_outs(const MpcProblem& p, const std::vector<ReachableDisc>& discs);

/// JSON debug dump: problem summary, states, controls, per-iteration trace.
void save_solution_json(const MpcProblem& p, const MpcSolution& s, const std::filesystem::path& path);

}  // namespace soda::mpc
