// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace soda::data {

inline constexpr double kDefaultSampleRateHz = 23.976;
inline constexpr int kDefaultWindow = 14;

using Point = Eigen::Vector2d;

/// Time-indexed pedestrian positions (meters) at a fixed sample rate.
struct Trajectory {
  std::string id;
  double sample_rate_hz = kDefaultSampleRateHz;
  std::vector<Point> positions;

  [[nodiscard]] std::size_t size() const noexcept { return positions.size(); }
};

/// One supervised example: `window` consecutive positions flattened as
/// (x0, y0, x1, y1, ...), oldest first, and the position that follows them.
struct DataPair {
  Eigen::VectorXd input;
  Point target = Point::Zero();
  std::string source_id;
  int start_index = 0;

  [[nodiscard]] int window() const noexcept { return static_cast<int>(input.size() / 2); }
};

bool operator==(const DataPair& a, const DataPair& b);

struct DatasetSplit {
  std::vector<DataPair> train_pairs;
  std::vector<DataPair> calibration_pairs;
  std::vector<Trajectory> test_trajectories;
  std::uint64_t seed = 0;
};

/// Parameters of the parametric crossing-trajectory generator.
///
/// Each trajectory walks a straight line at a per-trajectory nominal speed and
/// heading, perturbed by an AR(1) positional jitter whose stationary standard
/// deviation is `jitter_std`. Downward crossings start at y = +curb_offset,
/// upward ones at y = -curb_offset; the horizontal start is N(start_x_mean,
/// start_x_std^2).
struct SynthParams {
  double mean_speed = 1.1;
  double speed_std = 0.08;
  double heading_mean = 0.0;  // deviation from straight across, radians
  double heading_std = 0.05;
  double jitter_std = 0.02;
  double jitter_correlation = 0.5;
  int length = 154;
  double crossing_direction_prob = 0.5;  // probability of an upward crossing
  double start_x_mean = 40.0;
  double start_x_std = 2.5;
  double curb_offset = 4.0;
  double sample_rate_hz = kDefaultSampleRateHz;
};

/// Reads the `id,step,x,y` CSV format. Trajectories are returned in order of
/// first appearance of their id.
std::vector<Trajectory> load_trajectories(const std::filesystem::path& path,
                                          double sample_rate_hz = kDefaultSampleRateHz);
void save_trajectories(const std::filesystem::path& path, const std::vector<Trajectory>& trajs);

std::vector<DataPair> make_pairs(const Trajectory& traj, int window = kDefaultWindow);

DatasetSplit split_dataset(const std::vector<Trajectory>& trajs, int n_test, std::uint64_t seed,
                           int window = kDefaultWindow);

/// Mirrors upward crossings (end y above start y) about y = 0 so every
/// returned trajectory moves downward or horizontally.
std::vector<Trajectory> reflect_balance(const std::vector<Trajectory>& trajs);
[[nodiscard]] bool is_upward(const Trajectory& traj);
Trajectory reflect_y(Trajectory traj);

std::vector<Trajectory> synth_generate(const SynthParams& params, int n, std::uint64_t seed);

/// Empty when the parameters are valid; otherwise one message per violation.
std::vector<std::string> validate(const SynthParams& params);

}  // namespace soda::data
