// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soda/ensemble.hpp"
#include "soda/gmm.hpp"
#include "soda/scenario_sim.hpp"
#include "soda/trajectory_data.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace soda::cli {

inline constexpr const char* kVersion = "0.1.0";

/// Input and output locations. Empty inputs resolve to the file the producing
/// command writes inside `output_dir`, so commands chain without extra flags.
struct Paths {
  std::filesystem::path output_dir = "out";
  std::filesystem::path data;      // trajectories.csv
  std::filesystem::path weights;   // weights.json
  std::filesystem::path detector;  // detector.json
  std::filesystem::path scores;    // optional: calibrate from a score file instead of the model
  std::filesystem::path gmm_predictions;
  std::filesystem::path gmm_calibration;
};

struct SynthSection {
  data::SynthParams params;
  int count = 110;
};

struct TrainSection {
  ensemble::TrainConfig config;
  int members = 10;
  std::vector<int> hidden{32, 32};
  int window = data::kDefaultWindow;
  int n_test = 10;
  ensemble::InputFrame frame = ensemble::InputFrame::NewestOrigin;
};

struct CalibrateSection {
  double delta = 0.0396;
  int K = 0;  // > 0 overrides delta
  int decimals = -1;  // threshold round-up; negative keeps rho^(K)
};

struct SimulateSection {
  int source_index = 0;
};

struct BatchSection {
  int trials = 20;
  std::vector<sim::ControllerMode> modes{sim::ControllerMode::Soda, sim::ControllerMode::EnsemblesOnly,
                                         sim::ControllerMode::ReachableOnly};
  bool nominal = true;
  bool fraud = true;
};

struct CoverageSection {
  int trials = 300;
  int cal_size = 100;
  int K = 97;
  int eval_trajectories = 150;
};

struct BetaProbSection {
  int N = 1000;
  double delta = 0.04;
  double x1 = 0.95;
  double x2 = 0.97;
};

struct PlanSection {
  double delta = 0.04;
  double p_target = 0.89;
  int precision = 10;
  double x1 = 0.95;
  double x2 = 0.97;
};

struct GmmSection {
  double C = 0.0;  // > 0 skips calibration
  int K = 97;
  int decimals = 3;
  gmm::SynthGmmParams synth;  // used when no prediction files are given
  int calibration_agents = 100;
  int test_agents = 40;
  double test_ood_fraction = 0.5;
};

struct RunConfig {
  std::uint64_t seed = 1;
  int threads = 1;
  Paths paths;
  SynthSection synth;
  TrainSection train;
  CalibrateSection calibrate;
  sim::ScenarioConfig scenario;
  SimulateSection simulate;
  BatchSection batch;
  CoverageSection coverage;
  BetaProbSection beta_prob;
  PlanSection plan_calibration;
  GmmSection gmm;
};

const std::vector<std::string>& commands();
bool is_command(const std::string& name);

nlohmann::json to_json(const RunConfig& c);
/// Starts from the defaults and applies every key present in `j`. Unknown keys
/// and wrongly typed values throw FormatError naming the key.
RunConfig config_from_json(const nlohmann::json& j);
/// Reads a config file; a run manifest is accepted too (its `config` member is used).
RunConfig load_config(const std::filesystem::path& path);

/// Applies `dotted.key=value`; the value is parsed as JSON, else taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Inputs with empty paths replaced by their defaults under output_dir.
Paths resolved_paths(const RunConfig& c);

/// One "field: constraint" entry per violation. Input-path existence is only
/// checked for the inputs `command` reads; an empty command checks none.
std::vector<std::string> validate_config(const RunConfig& c, const std::string& command = "");

/// Hex FNV-1a digest of the canonical JSON form.
std::string config_digest(const RunConfig& c);

/// Runs one command. Human-readable progress and results go to `out`,
/// diagnostics to `err`. Returns the process exit status: 0 on success, 2 on a
/// usage or validation error, 1 on a runtime failure.
int dispatch(const std::string& command, const RunConfig& config, std::ostream& out, std::ostream& err);

}  // namespace soda::cli
