// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soda/mlp.hpp"
#include "soda/trajectory_data.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace soda::ensemble {

using Point = Eigen::Vector2d;

/// Coordinate frame the member networks see.
///
/// NewestOrigin translates each window so its newest position is the origin;
/// Absolute subtracts a fixed offset. Both divide by a fixed scale, and the
/// network output is mapped back through the same transform.
enum class InputFrame { Absolute, NewestOrigin };

struct FrameTransform {
  InputFrame mode = InputFrame::NewestOrigin;
  Point offset = Point::Zero();
  double scale = 1.0;
};

struct PredictionStats {
  Point mean = Point::Zero();
  Eigen::Matrix2d covariance = Eigen::Matrix2d::Zero();
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 32;
  int epochs = 200;
  int threads = 1;
};

std::vector<std::string> validate(const TrainConfig& cfg);

class Ensemble {
 public:
  Ensemble() = default;
  Ensemble(std::vector<nn::Mlp> members, std::vector<std::uint64_t> seeds, int window,
           FrameTransform frame);

  [[nodiscard]] const std::vector<nn::Mlp>& members() const noexcept { return members_; }
  [[nodiscard]] std::vector<nn::Mlp>& members() noexcept { return members_; }
  [[nodiscard]] const std::vector<std::uint64_t>& seeds() const noexcept { return seeds_; }
  [[nodiscard]] int window() const noexcept { return window_; }
  [[nodiscard]] std::size_t size() const noexcept { return members_.size(); }
  [[nodiscard]] const FrameTransform& frame() const noexcept { return frame_; }
  void set_frame(const FrameTransform& frame) { frame_ = frame; }

  /// Maps raw windows (2*window rows, one column per sample) into network input space.
  [[nodiscard]] Eigen::MatrixXd to_network_inputs(const Eigen::MatrixXd& windows) const;
  /// Maps raw targets (2 rows) into network output space for the matching windows.
  [[nodiscard]] Eigen::MatrixXd to_network_targets(const Eigen::MatrixXd& windows,
                                                   const Eigen::MatrixXd& targets) const;
  /// Inverse of to_network_targets.
  [[nodiscard]] Eigen::MatrixXd from_network_outputs(const Eigen::MatrixXd& windows,
                                                     const Eigen::MatrixXd& outputs) const;

  /// Raw-coordinate output of one member for a batch of windows.
  [[nodiscard]] Eigen::MatrixXd member_predict(std::size_t member, const Eigen::MatrixXd& windows) const;

 private:
  std::vector<nn::Mlp> members_;
  std::vector<std::uint64_t> seeds_;
  int window_ = data::kDefaultWindow;
  FrameTransform frame_;
};

/// Members use widths (2*window, hidden..., 2). Seeds must be pairwise distinct, n >= 2.
Ensemble init_ensemble(int n, const std::vector<std::uint64_t>& seeds, int window = data::kDefaultWindow,
                       const std::vector<int>& hidden = {32, 32}, FrameTransform frame = {});

/// Chooses the frame offset (Absolute mode only) and scale from the RMS spread of
/// the training windows around the frame origin.
FrameTransform fit_frame(const std::vector<data::DataPair>& pairs, InputFrame mode);

struct TrainReport {
  /// Per member: probe-batch MSE (m^2) before training followed by one entry per epoch.
  std::vector<std::vector<double>> probe_mse;
};

/// Trains every member independently with Adam on the same pairs; member i
/// shuffles with a stream derived from its own seed. Throws TrainingError on a
/// non-finite loss.
Ensemble train_ensemble(const Ensemble& e, const std::vector<data::DataPair>& pairs,
                        const TrainConfig& cfg, TrainReport* report = nullptr);

/// Sample mean and unbiased sample covariance of the member predictions.
PredictionStats ensemble_stats(const Ensemble& e, const Eigen::VectorXd& window);
std::vector<PredictionStats> ensemble_stats_batch(const Ensemble& e, const Eigen::MatrixXd& windows);
PredictionStats stats_from_outputs(const std::vector<Point>& outputs);

struct RolloutOptions {
  double sample_rate_hz = data::kDefaultSampleRateHz;
  double bootstrap_speed = 1.1;
  /// Unit direction of the constant-velocity bootstrap used while fewer than
  /// `window` positions are available.
  Point crossing_direction = Point(0.0, -1.0);
};

struct RolloutStep {
  Point position = Point::Zero();
  PredictionStats stats;
  bool bootstrapped = false;
};

/// Recursive multi-step prediction: each step feeds the ensemble mean back
/// into the input window. Returns exactly `horizon` entries.
std::vector<RolloutStep> rollout(const Ensemble& e, const std::vector<Point>& history, int horizon,
                                 const RolloutOptions& opts = {});

Eigen::VectorXd window_from(const std::vector<Point>& positions, std::size_t end, int window);

void save_weights(const Ensemble& e, const std::filesystem::path& path);
Ensemble load_weights(const std::filesystem::path& path);

}  // namespace soda::ensemble
