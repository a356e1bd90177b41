// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soda/conformal.hpp"
#include "soda/ensemble.hpp"
#include "soda/trajectory_data.hpp"
#include "soda/vehicle_mpc.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace soda::sim {

using Point = Eigen::Vector2d;

enum class ControllerMode { Soda, EnsemblesOnly, ReachableOnly };
std::string to_string(ControllerMode m);
ControllerMode controller_mode_from_string(const std::string& s);

enum class SimOutcome { PassedSafely, StoppedSafely, Collision };
std::string to_string(SimOutcome o);

struct ScenarioConfig {
  int steps = 150;
  double rate_hz = 23.976;
  int replan_period = 5;
  double fraud_switch_time = 1.3;  // seconds of nominal behavior before the switch
  double ped_v_max = 4.5;
  double ped_radius = 0.5;
  double start_x_mean = 40.0;  // pedestrian start, relative to the vehicle start
  double start_x_std = 2.5;
  double collision_distance = 2.0;
  ControllerMode mode = ControllerMode::Soda;
  bool fraud = false;
  /// Vehicle start, goal, limits, weights and margins. `initial`, `horizon`
  /// and `h` are overwritten per replan.
  mpc::MpcProblem vehicle;
  scp::Config scp;

  [[nodiscard]] double h() const { return 1.0 / rate_hz; }
  [[nodiscard]] int switch_step() const;
};

std::vector<std::string> validate(const ScenarioConfig& c);

/// Nominal replay of a source trajectory, optionally switching at `switch_step`
/// to running straight at the vehicle.
class PedestrianBehavior {
 public:
  PedestrianBehavior(std::vector<Point> source, std::optional<int> switch_step, double v_max, double h);

  [[nodiscard]] bool fraud() const { return switch_step_.has_value(); }
  [[nodiscard]] std::optional<int> switch_step() const { return switch_step_; }

  /// Position at step t. `previous` is the position at t-1 and `vehicle` the
  /// vehicle position at t-1; both are ignored by the nominal segment.
  [[nodiscard]] Point position(int t, const Point& previous, const Point& vehicle) const;

 private:
  std::vector<Point> source_;
  std::optional<int> switch_step_;
  double step_length_;
};

struct Evaluation {
  int step = 0;
  double rho = 0.0;
  bool flag = false;
};

struct ReplanRecord {
  int step = 0;
  int horizon = 0;
  bool reachable = false;  // MPC II was solved
  bool fallback = false;
  scp::Status status = scp::Status::Converged;
  int scp_iterations = 0;
};

struct TrialRecord {
  std::string source_id;
  std::uint64_t seed = 0;
  ControllerMode mode = ControllerMode::Soda;
  bool fraud = false;
  int switch_step = -1;
  bool mirrored = false;  // source crossed upward; the ensemble saw it reflected
  std::vector<mpc::VehicleState> vehicle;  // steps + 1
  std::vector<Point> pedestrian;           // steps + 1
  std::vector<int> mode_flags;             // per step: 1 while following an MPC II plan
  std::vector<Evaluation> evaluations;
  std::vector<ReplanRecord> replans;
  double min_distance = 0.0;
  SimOutcome outcome = SimOutcome::StoppedSafely;
  /// Every accepted plan passed the independent verifier.
  bool plans_verified = true;
  double worst_plan_violation = 0.0;
  double worst_plan_defect = 0.0;
};

SimOutcome classify_outcome(const TrialRecord& r, double collision_distance = 2.0);

/// One closed-loop run. The source trajectory is shifted so its first point
/// lies at a horizontal offset drawn from N(start_x_mean, start_x_std) ahead of
/// the vehicle start; everything else is deterministic.
TrialRecord run_trial(const ScenarioConfig& cfg, const ensemble::Ensemble& ens, const conformal::Detector& det,
                      const data::Trajectory& source, std::uint64_t seed);

struct ConfusionMatrix {
  int nominal_pass = 0;  // ground truth nominal, not flagged
  int nominal_flag = 0;  // false positive
  int ood_pass = 0;      // missed
  int ood_flag = 0;

  [[nodiscard]] int nominal_total() const { return nominal_pass + nominal_flag; }
  [[nodiscard]] int ood_total() const { return ood_pass + ood_flag; }
  /// Zero when the denominator is zero.
  [[nodiscard]] double false_positive_rate() const;
  [[nodiscard]] double true_positive_rate() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& o);
};

/// Nominal trials count every evaluation as ground-truth nominal; fraud trials
/// count evaluations after the switch as ground-truth OOD.
ConfusionMatrix confusion_of(const TrialRecord& r);

struct BatchGroup {
  ControllerMode mode = ControllerMode::Soda;
  bool fraud = false;
  int passed = 0;
  int stopped = 0;
  int collisions = 0;
  ConfusionMatrix confusion;
  std::vector<TrialRecord> trials;
};

struct BatchConfig {
  ScenarioConfig scenario;
  std::vector<ControllerMode> modes{ControllerMode::Soda, ControllerMode::EnsemblesOnly,
                                    ControllerMode::ReachableOnly};
  bool nominal = true;
  bool fraud = true;
  int trials_per_group = 20;
  std::uint64_t seed = 1;
  int threads = 1;
};

struct BatchReport {
  std::vector<BatchGroup> groups;
  ConfusionMatrix confusion;  // over every group
};

/// Trial i of every group uses the same source trajectory and seed, so the
/// modes face identical pedestrians up to the fraud switch.
BatchReport run_batch(const BatchConfig& cfg, const ensemble::Ensemble& ens, const conformal::Detector& det,
                      const std::vector<data::Trajectory>& pool);

/// Scores of the ensemble prediction from one window per pair.
std::vector<double> pair_scores(const ensemble::Ensemble& ens, const std::vector<data::DataPair>& pairs);

struct CoverageConfig {
  data::SynthParams generator;
  int trials = 300;
  int cal_size = 100;
  int K = 97;
  int eval_trajectories = 150;
  std::uint64_t seed = 1;
  int threads = 1;
};

/// Per trial: a fresh calibration set (one random pair from each of `cal_size`
/// new trajectories), threshold at the K-th smallest score, and the fraction of
/// scores at or below it over every pair of `eval_trajectories` new trajectories.
std::vector<double> coverage_experiment(const CoverageConfig& cfg, const ensemble::Ensemble& ens);

struct CoverageSummary {
  int samples = 0;
  double mean = 0.0;
  double standard_error = 0.0;
  double beta_mean = 0.0;  // K/(N+1)
  /// Kolmogorov-Smirnov distance to Beta(K, N+1-K) and its 1% asymptotic critical value.
  double ks_statistic = 0.0;
  double ks_critical_1pct = 0.0;
};

CoverageSummary summarize_coverage(const std::vector<double>& samples, int n, int k);

void save_report_json(const BatchReport& r, const std::filesystem::path& path);
/// `step,x,y,theta,V,kappa,mode_flag`
void save_vehicle_csv(const TrialRecord& r, const std::filesystem::path& path);
/// Pedestrian positions in the trajectory CSV format.
void save_pedestrian_csv(const TrialRecord& r, const std::filesystem::path& path);
/// One `coverage` column with a header line.
void save_coverage_csv(const std::vector<double>& samples, const std::filesystem::path& path);

}  // namespace soda::sim
