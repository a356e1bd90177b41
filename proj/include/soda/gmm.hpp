// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace soda::gmm {

struct GmmStep {
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  Eigen::Matrix2d cov = Eigen::Matrix2d::Identity();
};

struct GmmMode {
  double p = 0.0;
  std::vector<GmmStep> steps;  // steps[0] is the one-step-ahead prediction
};

struct GmmPrediction {
  std::string agent;
  int t = 0;
  std::vector<GmmMode> modes;
};

inline constexpr double kProbabilityTolerance = 1e-6;

/// Throws FormatError when a probability is negative, the probabilities do not
/// sum to one within kProbabilityTolerance, a mode has no steps, or a
/// covariance is asymmetric or not PSD.
void validate(const GmmPrediction& pred);

/// Probability-weighted sum of the determinants of each mode's first-step covariance.
double gmm_score(const GmmPrediction& pred);

/// True (OOD) iff some score strictly exceeds C. Throws ArgumentError on an empty list.
bool classify_trajectory(const std::vector<double>& scores, double C);

/// Scores grouped per agent, ordered by time step.
std::map<std::string, std::vector<double>> scores_by_agent(const std::vector<GmmPrediction>& preds);

/// JSON: [{agent, t, modes: [{p, steps: [{mean: [x, y], cov: [[a, b], [b, d]]}]}]}].
/// Errors name the offending record index.
std::vector<GmmPrediction> load_gmm_predictions(const std::filesystem::path& path);
void save_gmm_predictions(const std::vector<GmmPrediction>& preds, const std::filesystem::path& path);

struct SynthGmmParams {
  int agents = 20;
  int steps_per_agent = 12;
  int modes = 25;
  int horizon = 6;
  double base_sigma = 0.3;    // per-axis standard deviation of the first step
  double sigma_jitter = 0.2;  // relative log-normal spread of the per-mode sigma
  /// Multiplies every covariance of the OOD agents' records.
  double ood_inflation = 1.5;
  double ood_fraction = 0.0;
};

/// Random multimodal predictions for tests and demos. Returns the records and,
/// per agent, whether it was generated as OOD.
std::vector<GmmPrediction> synth_gmm_predictions(const SynthGmmParams& params, std::uint64_t seed,
                                                 std::map<std::string, bool>* ood_agents = nullptr);

}  // namespace soda::gmm
