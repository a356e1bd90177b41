// SPDX-License-Identifier: Apache-2.0
#include "soda/cli.hpp"

#include "soda/conformal.hpp"
#include "soda/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>

namespace soda::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Independent stream seeds for each consumer of the run seed.
std::uint64_t derive(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum Stream : std::uint64_t { kSynth = 1, kSplit, kMembers, kSimulate, kBatch, kCoverage, kGmm };

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

struct Context {
  const RunConfig& cfg;
  Paths paths;
  std::ostream& out;
};

data::DatasetSplit load_split(const Context& c) {
  const auto trajs = data::reflect_balance(data::load_trajectories(c.paths.data, c.cfg.synth.params.sample_rate_hz));
  return data::split_dataset(trajs, c.cfg.train.n_test, derive(c.cfg.seed, kSplit), c.cfg.train.window);
}

void cmd_synth(const Context& c) {
  const auto trajs = data::synth_generate(c.cfg.synth.params, c.cfg.synth.count, derive(c.cfg.seed, kSynth));
  const auto path = c.cfg.paths.output_dir / "trajectories.csv";
  data::save_trajectories(path, trajs);
  c.out << "wrote " << trajs.size() << " trajectories to " << path.string() << '\n';
}

void cmd_train(const Context& c) {
  const auto split = load_split(c);
  const auto& t = c.cfg.train;
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < t.members; ++i) seeds.push_back(derive(derive(c.cfg.seed, kMembers), static_cast<std::uint64_t>(i)));
  const auto frame = ensemble::fit_frame(split.train_pairs, t.frame);
  auto e = ensemble::init_ensemble(t.members, seeds, t.window, t.hidden, frame);
  auto tc = t.config;
  tc.threads = c.cfg.threads;
  c.out << "training " << t.members << " members on " << split.train_pairs.size() << " pairs for " << tc.epochs
        << " epochs\n";
  ensemble::TrainReport report;
  e = ensemble::train_ensemble(e, split.train_pairs, tc, &report);
  const auto path = c.cfg.paths.output_dir / "weights.json";
  ensemble::save_weights(e, path);

  json members = json::array();
  for (std::size_t i = 0; i < report.probe_mse.size(); ++i) {
    const auto& m = report.probe_mse[i];
    members.push_back({{"member", i}, {"initial_probe_mse", m.front()}, {"final_probe_mse", m.back()}});
    c.out << "  member " << i << ": probe MSE " << m.front() << " -> " << m.back() << '\n';
  }
  write_json({{"train_pairs", split.train_pairs.size()},
              {"calibration_pairs", split.calibration_pairs.size()},
              {"test_trajectories", split.test_trajectories.size()},
              {"members", members}},
             c.cfg.paths.output_dir / "train_report.json");
  c.out << "wrote " << path.string() << '\n';
}

void cmd_calibrate(const Context& c) {
  conformal::ScoreSet scores;
  if (!c.paths.scores.empty()) {
    scores = conformal::load_scores(c.paths.scores);
  } else {
    const auto split = load_split(c);
    const auto e = ensemble::load_weights(c.paths.weights);
    scores = conformal::ScoreSet(sim::pair_scores(e, split.calibration_pairs));
  }
  const conformal::RoundingRule rounding{c.cfg.calibrate.decimals};
  const auto det = c.cfg.calibrate.K > 0 ? conformal::calibrate_with_index(scores, c.cfg.calibrate.K, rounding)
                                         : conformal::calibrate(scores, c.cfg.calibrate.delta, rounding);
  conformal::save_scores(scores, c.cfg.paths.output_dir / "scores.csv");
  const auto path = c.cfg.paths.output_dir / "detector.json";
  conformal::save_detector(det, path);
  c.out << std::setprecision(10) << "calibrated on N=" << det.N << " scores: K=" << det.K << " C=" << det.C
        << " delta=" << det.delta << '\n'
        << "wrote " << path.string() << '\n';
}

struct SimInputs {
  ensemble::Ensemble ens;
  conformal::Detector det;
  std::vector<data::Trajectory> pool;
};

SimInputs sim_inputs(const Context& c) {
  auto split = load_split(c);
  if (split.test_trajectories.empty()) throw ArgumentError("train.n_test: the simulation pool is empty");
  return {ensemble::load_weights(c.paths.weights), conformal::load_detector(c.paths.detector),
          std::move(split.test_trajectories)};
}

void print_group(std::ostream& out, const sim::BatchGroup& g) {
  out << std::left << std::setw(16) << sim::to_string(g.mode) << std::setw(9) << (g.fraud ? "fraud" : "nominal")
      << std::right << " passed " << std::setw(3) << g.passed << "  stopped " << std::setw(3) << g.stopped
      << "  collisions " << std::setw(3) << g.collisions << "  flags " << g.confusion.nominal_flag + g.confusion.ood_flag
      << "/" << g.confusion.nominal_total() + g.confusion.ood_total() << '\n';
}

void cmd_simulate(const Context& c) {
  const auto in = sim_inputs(c);
  const auto& source = in.pool[static_cast<std::size_t>(c.cfg.simulate.source_index) % in.pool.size()];
  const auto trial = sim::run_trial(c.cfg.scenario, in.ens, in.det, source, derive(c.cfg.seed, kSimulate));

  sim::BatchReport report;
  sim::BatchGroup g;
  g.mode = trial.mode;
  g.fraud = trial.fraud;
  g.passed = trial.outcome == sim::SimOutcome::PassedSafely;
  g.stopped = trial.outcome == sim::SimOutcome::StoppedSafely;
  g.collisions = trial.outcome == sim::SimOutcome::Collision;
  g.confusion = sim::confusion_of(trial);
  g.trials.push_back(trial);
  report.confusion = g.confusion;
  report.groups.push_back(std::move(g));

  const auto& dir = c.cfg.paths.output_dir;
  sim::save_report_json(report, dir / "report.json");
  sim::save_vehicle_csv(trial, dir / "vehicle.csv");
  sim::save_pedestrian_csv(trial, dir / "pedestrian.csv");
  c.out << "source " << trial.source_id << ": " << sim::to_string(trial.outcome) << ", min distance "
        << std::setprecision(4) << trial.min_distance << " m, " << trial.evaluations.size() << " evaluations\n";
  print_group(c.out, report.groups.front());
  c.out << "wrote report.json, vehicle.csv, pedestrian.csv to " << dir.string() << '\n';
}

void cmd_batch(const Context& c) {
  const auto in = sim_inputs(c);
  sim::BatchConfig bc;
  bc.scenario = c.cfg.scenario;
  bc.modes = c.cfg.batch.modes;
  bc.nominal = c.cfg.batch.nominal;
  bc.fraud = c.cfg.batch.fraud;
  bc.trials_per_group = c.cfg.batch.trials;
  bc.seed = derive(c.cfg.seed, kBatch);
  bc.threads = c.cfg.threads;
  const auto report = sim::run_batch(bc, in.ens, in.det, in.pool);
  for (const auto& g : report.groups) print_group(c.out, g);
  const auto& m = report.confusion;
  c.out << "evaluations: nominal " << m.nominal_total() << " (false positives " << m.nominal_flag << "), ood "
        << m.ood_total() << " (detected " << m.ood_flag << ")\n";
  sim::save_report_json(report, c.cfg.paths.output_dir / "report.json");
  c.out << "wrote " << (c.cfg.paths.output_dir / "report.json").string() << '\n';
}

void cmd_coverage(const Context& c) {
  const auto e = ensemble::load_weights(c.paths.weights);
  sim::CoverageConfig cc;
  cc.generator = c.cfg.synth.params;
  cc.trials = c.cfg.coverage.trials;
  cc.cal_size = c.cfg.coverage.cal_size;
  cc.K = c.cfg.coverage.K;
  cc.eval_trajectories = c.cfg.coverage.eval_trajectories;
  cc.seed = derive(c.cfg.seed, kCoverage);
  cc.threads = c.cfg.threads;
  const auto samples = sim::coverage_experiment(cc, e);
  const auto s = sim::summarize_coverage(samples, cc.cal_size, cc.K);
  sim::save_coverage_csv(samples, c.cfg.paths.output_dir / "coverage.csv");
  write_json({{"trials", s.samples},
              {"N", cc.cal_size},
              {"K", cc.K},
              {"mean", s.mean},
              {"standard_error", s.standard_error},
              {"beta_mean", s.beta_mean},
              {"ks_statistic", s.ks_statistic},
              {"ks_critical_1pct", s.ks_critical_1pct}},
             c.cfg.paths.output_dir / "coverage_summary.json");
  c.out << std::setprecision(5) << "coverage over " << s.samples << " trials: mean " << s.mean << " (se "
        << s.standard_error << "), Beta(" << cc.K << "," << cc.cal_size + 1 - cc.K << ") mean " << s.beta_mean
        << "\nKS distance " << s.ks_statistic << " (1% critical value " << s.ks_critical_1pct << ")\n";
}

void cmd_beta_prob(const Context& c) {
  const auto& b = c.cfg.beta_prob;
  const double p = conformal::calculate_probability(b.N, b.delta, b.x1, b.x2);
  write_json({{"N", b.N}, {"delta", b.delta}, {"x1", b.x1}, {"x2", b.x2}, {"probability", p}},
             c.cfg.paths.output_dir / "beta_prob.json");
  c.out << "P(" << b.x1 << " <= coverage <= " << b.x2 << " | N=" << b.N << ", delta=" << b.delta
        << ") = " << std::fixed << std::setprecision(4) << p << std::defaultfloat << '\n';
}

void cmd_plan_calibration(const Context& c) {
  const auto& p = c.cfg.plan_calibration;
  conformal::SearchTrace trace;
  const int n = conformal::required_calibration_size(p.delta, p.p_target, p.precision, p.x1, p.x2, &trace);
  const double achieved = conformal::calculate_probability(n, p.delta, p.x1, p.x2);
  write_json({{"delta", p.delta},
              {"p_target", p.p_target},
              {"precision", p.precision},
              {"x1", p.x1},
              {"x2", p.x2},
              {"N", n},
              {"probability", achieved},
              {"bracket", {trace.final_lo, trace.final_hi}},
              {"iterations", trace.iterations}},
             c.cfg.paths.output_dir / "plan_calibration.json");
  c.out << "calibration size N=" << n << " gives P(" << p.x1 << " <= coverage <= " << p.x2
        << ") = " << std::fixed << std::setprecision(4) << achieved << std::defaultfloat << " (target "
        << p.p_target << ", bracket [" << trace.final_lo << ", " << trace.final_hi << "])\n";
}

void cmd_gmm_detect(const Context& c) {
  const auto& g = c.cfg.gmm;
  const auto& dir = c.cfg.paths.output_dir;
  const std::uint64_t seed = derive(c.cfg.seed, kGmm);

  double C = g.C;
  int K = 0;
  int N = 0;
  if (C <= 0.0) {
    std::vector<gmm::GmmPrediction> cal;
    if (!c.paths.gmm_calibration.empty()) {
      cal = gmm::load_gmm_predictions(c.paths.gmm_calibration);
    } else {
      auto params = g.synth;
      params.agents = g.calibration_agents;
      params.ood_fraction = 0.0;
      cal = gmm::synth_gmm_predictions(params, derive(seed, 1));
      gmm::save_gmm_predictions(cal, dir / "gmm_calibration.json");
    }
    // One step per agent keeps the calibration scores exchangeable.
    std::mt19937_64 rng(derive(seed, 2));
    std::vector<double> picks;
    for (const auto& [agent, scores] : gmm::scores_by_agent(cal)) {
      std::uniform_int_distribution<std::size_t> pick(0, scores.size() - 1);
      picks.push_back(scores[pick(rng)]);
    }
    const auto det =
        conformal::calibrate_with_index(conformal::ScoreSet(picks), g.K, conformal::RoundingRule{g.decimals});
    C = det.C;
    K = det.K;
    N = det.N;
    c.out << "calibrated on N=" << N << " agents: K=" << K << " C=" << std::setprecision(6) << C << '\n';
  }

  std::vector<gmm::GmmPrediction> preds;
  std::map<std::string, bool> truth;
  if (!c.paths.gmm_predictions.empty()) {
    preds = gmm::load_gmm_predictions(c.paths.gmm_predictions);
  } else {
    auto params = g.synth;
    params.agents = g.test_agents;
    params.ood_fraction = g.test_ood_fraction;
    preds = gmm::synth_gmm_predictions(params, derive(seed, 3), &truth);
    gmm::save_gmm_predictions(preds, dir / "gmm_predictions.json");
  }

  json agents = json::array();
  int flagged = 0;
  int tp = 0;
  int fp = 0;
  int truth_ood = 0;
  for (const auto& [agent, scores] : gmm::scores_by_agent(preds)) {
    const bool ood = gmm::classify_trajectory(scores, C);
    flagged += ood;
    json a{{"agent", agent},
           {"steps", scores.size()},
           {"max_score", *std::max_element(scores.begin(), scores.end())},
           {"ood", ood}};
    if (auto it = truth.find(agent); it != truth.end()) {
      a["generated_ood"] = it->second;
      truth_ood += it->second;
      tp += ood && it->second;
      fp += ood && !it->second;
    }
    agents.push_back(std::move(a));
  }
  json report{{"C", C}, {"K", K}, {"N", N}, {"agents", agents}, {"flagged", flagged}};
  if (!truth.empty()) {
    report["generated_ood"] = truth_ood;
    report["true_positives"] = tp;
    report["false_positives"] = fp;
  }
  write_json(report, dir / "gmm_report.json");
  c.out << "flagged " << flagged << " of " << agents.size() << " agents as OOD at C=" << C << '\n';
  if (!truth.empty()) {
    c.out << "generated OOD agents " << truth_ood << ": detected " << tp << ", false positives " << fp << '\n';
  }
}

void write_manifest(const std::string& command, const RunConfig& cfg) {
  write_json({{"command", command},
              {"version", kVersion},
              {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                            std::to_string(EIGEN_MINOR_VERSION)},
              {"seed", cfg.seed},
              {"config_digest", config_digest(cfg)},
              {"config", to_json(cfg)}},
             cfg.paths.output_dir / (command + ".manifest.json"));
}

}  // namespace

int dispatch(const std::string& command, const RunConfig& config, std::ostream& out, std::ostream& err) {
  if (!is_command(command)) {
    err << "unknown command '" << command << "'; expected one of:";
    for (const auto& c : commands()) err << ' ' << c;
    err << '\n';
    return 2;
  }
  if (const auto v = validate_config(config, command); !v.empty()) {
    err << "invalid configuration for '" << command << "':\n";
    for (const auto& m : v) err << "  " << m << '\n';
    return 2;
  }
  try {
    fs::create_directories(config.paths.output_dir);
    const Context ctx{config, resolved_paths(config), out};
    if (command == "synth") cmd_synth(ctx);
    else if (command == "train") cmd_train(ctx);
    else if (command == "calibrate") cmd_calibrate(ctx);
    else if (command == "simulate") cmd_simulate(ctx);
    else if (command == "batch") cmd_batch(ctx);
    else if (command == "coverage") cmd_coverage(ctx);
    else if (command == "beta-prob") cmd_beta_prob(ctx);
    else if (command == "plan-calibration") cmd_plan_calibration(ctx);
    else cmd_gmm_detect(ctx);
    write_manifest(command, config);
  } catch (const std::exception& e) {
    err << command << " failed: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace soda::cli
