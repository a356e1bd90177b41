// SPDX-License-Identifier: Apache-2.0
#include "soda/scenario_sim.hpp"

#include "soda/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <thread>

namespace soda::sim {

namespace {

using nlohmann::json;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Point mirror(const Point& p) { return {p.x(), -p.y()}; }

template <class Fn>
void parallel_for(int n, int threads, Fn fn) {
  const int workers = std::max(1, std::min(threads, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) err = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(17);
  return out;
}

}  // namespace

std::string to_string(ControllerMode m) {
  switch (m) {
    case ControllerMode::Soda: return "soda";
    case ControllerMode::EnsemblesOnly: return "ensembles_only";
    case ControllerMode::ReachableOnly: return "reachable_only";
  }
  return "unknown";
}

ControllerMode controller_mode_from_string(const std::string& s) {
  if (s == "soda") return ControllerMode::Soda;
  if (s == "ensembles_only") return ControllerMode::EnsemblesOnly;
  if (s == "reachable_only") return ControllerMode::ReachableOnly;
  throw ArgumentError("unknown controller mode '" + s + "' (soda, ensembles_only, reachable_only)");
}

std::string to_string(SimOutcome o) {
  switch (o) {
    case SimOutcome::PassedSafely: return "passed_safely";
    case SimOutcome::StoppedSafely: return "stopped_safely";
    case SimOutcome::Collision: return "collision";
  }
  return "unknown";
}

int ScenarioConfig::switch_step() const { return static_cast<int>(std::floor(fraud_switch_time * rate_hz + 1e-9)); }

std::vector<std::string> validate(const ScenarioConfig& c) {
  std::vector<std::string> v;
  if (c.steps < 1) v.emplace_back("scenario.steps must be >= 1");
  if (!(c.rate_hz > 0.0)) v.emplace_back("scenario.rate_hz must be > 0");
  if (c.replan_period < 1) v.emplace_back("scenario.replan_period must be >= 1");
  if (!(c.fraud_switch_time >= 0.0)) v.emplace_back("scenario.fraud_switch_time must be >= 0");
  if (!(c.ped_v_max > 0.0)) v.emplace_back("scenario.ped_v_max must be > 0");
  if (!(c.ped_radius > 0.0)) v.emplace_back("scenario.ped_radius must be > 0");
  if (!(c.start_x_std >= 0.0)) v.emplace_back("scenario.start_x_std must be >= 0");
  if (!(c.collision_distance > 0.0)) v.emplace_back("scenario.collision_distance must be > 0");
  for (auto& m : mpc::validate(c.vehicle)) v.push_back(m);
  for (auto& m : scp::validate(c.scp)) v.push_back(m);
  return v;
}

PedestrianBehavior::PedestrianBehavior(std::vector<Point> source, std::optional<int> switch_step, double v_max,
                                       double h)
    : source_(std::move(source)), switch_step_(switch_step), step_length_(v_max * h) {
  if (source_.empty()) throw ArgumentError("pedestrian: empty source trajectory");
  if (!(v_max >= 0.0) || !(h > 0.0)) throw ArgumentError("pedestrian: v_max must be >= 0 and h > 0");
  if (switch_step_ && *switch_step_ < 1) throw ArgumentError("pedestrian: switch step must be >= 1");
}

Point PedestrianBehavior::position(int t, const Point& previous, const Point& vehicle) const {
  if (switch_step_ && t >= *switch_step_) {
    const Point d = vehicle - previous;
    const double n = d.norm();
    if (n == 0.0) return previous;
    return previous + (step_length_ / n) * d;
  }
  if (t < 0 || static_cast<std::size_t>(t) >= source_.size()) {
    throw ArgumentError("pedestrian: step " + std::to_string(t) + " outside the source trajectory");
  }
  return source_[static_cast<std::size_t>(t)];
}

SimOutcome classify_outcome(const TrialRecord& r, double collision_distance) {
  if (r.min_distance < collision_distance) return SimOutcome::Collision;
  if (!r.vehicle.empty() && !r.pedestrian.empty() &&
      r.vehicle.back().position.x() > r.pedestrian.back().x()) {
    return SimOutcome::PassedSafely;
  }
  return SimOutcome::StoppedSafely;
}

TrialRecord run_trial(const ScenarioConfig& cfg, const ensemble::Ensemble& ens, const conformal::Detector& det,
                      const data::Trajectory& source, std::uint64_t seed) {
  if (const auto v = validate(cfg); !v.empty()) throw ArgumentError(v.front());
  const auto n_steps = static_cast<std::size_t>(cfg.steps);
  if (source.size() < n_steps + 1) {
    throw ArgumentError("run_trial: source trajectory '" + source.id + "' has " + std::to_string(source.size()) +
                        " points, need " + std::to_string(n_steps + 1));
  }
  const double h = cfg.h();
  const int window = ens.window();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> offset(cfg.start_x_mean, cfg.start_x_std);
  const double shift = cfg.vehicle.initial.position.x() + offset(rng) - source.positions.front().x();
  std::vector<Point> src(source.positions.begin(), source.positions.begin() + static_cast<std::ptrdiff_t>(n_steps + 1));
  for (auto& p : src) p.x() += shift;

  TrialRecord rec;
  rec.source_id = source.id;
  rec.seed = seed;
  rec.mode = cfg.mode;
  rec.fraud = cfg.fraud;
  rec.switch_step = cfg.fraud ? cfg.switch_step() : -1;
  rec.mirrored = data::is_upward(source);
  const PedestrianBehavior ped(src, cfg.fraud ? std::optional<int>(cfg.switch_step()) : std::nullopt, cfg.ped_v_max,
                               h);

  rec.vehicle.push_back(cfg.vehicle.initial);
  rec.pedestrian.push_back(ped.position(0, src.front(), cfg.vehicle.initial.position));
  std::vector<Point> seen;  // observations in the ensemble's frame
  seen.push_back(rec.mirrored ? mirror(rec.pedestrian.back()) : rec.pedestrian.back());

  ensemble::RolloutOptions ro;
  ro.sample_rate_hz = cfg.rate_hz;
  ro.crossing_direction = Point(0.0, -1.0);

  std::vector<mpc::ControlInput> plan;
  int plan_start = 0;
  bool plan_reachable = false;
  bool plan_fallback = true;

  for (int t = 0; t < cfg.steps; ++t) {
    if (t % cfg.replan_period == 0) {
      bool flagged = false;
      if (seen.size() >= static_cast<std::size_t>(window) + 1) {
        const auto stats = ensemble::ensemble_stats(ens, ensemble::window_from(seen, seen.size(), window));
        Evaluation ev{t, conformal::nonconformity(stats.covariance), false};
        ev.flag = conformal::detect(det, ev.rho);
        flagged = ev.flag;
        rec.evaluations.push_back(ev);
      }
      const bool reachable = cfg.mode == ControllerMode::ReachableOnly || (cfg.mode == ControllerMode::Soda && flagged);

      mpc::MpcProblem prob = cfg.vehicle;
      prob.initial = rec.vehicle.back();
      prob.horizon = cfg.steps - t;
      prob.h = h;
      // The unexecuted tail of the previous solver plan is a restart candidate.
      std::vector<mpc::ControlInput> retry;
      if (!plan_fallback) retry.assign(plan.begin() + (t - plan_start), plan.end());
      mpc::MpcSolution sol;
      std::vector<mpc::KeepOutSpec> keep_outs;
      if (reachable) {
        const mpc::ReachableDisc start{rec.pedestrian.back(), cfg.ped_radius, cfg.ped_v_max, h};
        const auto discs = mpc::grow_discs(start, prob.horizon);
        sol = mpc::solve_mpc_reachable(prob, discs, cfg.scp, retry);
        keep_outs = mpc::reachable_keep_outs(prob, discs);
      } else {
        const auto roll = ensemble::rollout(ens, seen, prob.horizon, ro);
        std::vector<Point> predicted;
        predicted.reserve(roll.size());
        for (const auto& r : roll) predicted.push_back(rec.mirrored ? mirror(r.position) : r.position);
        sol = mpc::solve_mpc_nominal(prob, predicted, cfg.scp, retry);
        keep_outs = mpc::nominal_keep_outs(prob, predicted);
      }
      if (!sol.fallback) {
        const auto report = mpc::verify_solution(prob, keep_outs, sol.states, sol.controls);
        rec.worst_plan_violation = std::max(rec.worst_plan_violation, report.max_violation);
        rec.worst_plan_defect = std::max(rec.worst_plan_defect, report.max_dynamics_defect);
        if (!report.passes(1e-6, cfg.scp.constraint_tolerance)) rec.plans_verified = false;
      }
      rec.replans.push_back({t, prob.horizon, reachable, sol.fallback, sol.status, sol.scp.iterations});
      plan = std::move(sol.controls);
      plan_start = t;
      plan_reachable = reachable;
      plan_fallback = sol.fallback;
    }

    const auto& u = plan[static_cast<std::size_t>(t - plan_start)];
    const Point vehicle_now = rec.vehicle.back().position;
    rec.vehicle.push_back(mpc::step_dynamics(rec.vehicle.back(), u, h));
    rec.mode_flags.push_back(plan_reachable ? 1 : 0);
    rec.pedestrian.push_back(ped.position(t + 1, rec.pedestrian.back(), vehicle_now));
    seen.push_back(rec.mirrored ? mirror(rec.pedestrian.back()) : rec.pedestrian.back());
  }

  rec.min_distance = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < rec.vehicle.size(); ++i) {
    rec.min_distance = std::min(rec.min_distance, (rec.vehicle[i].position - rec.pedestrian[i]).norm());
  }
  rec.outcome = classify_outcome(rec, cfg.collision_distance);
  return rec;
}

double ConfusionMatrix::false_positive_rate() const {
  return nominal_total() == 0 ? 0.0 : static_cast<double>(nominal_flag) / nominal_total();
}

double ConfusionMatrix::true_positive_rate() const {
  return ood_total() == 0 ? 0.0 : static_cast<double>(ood_flag) / ood_total();
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  nominal_pass += o.nominal_pass;
  nominal_flag += o.nominal_flag;
  ood_pass += o.ood_pass;
  ood_flag += o.ood_flag;
  return *this;
}

ConfusionMatrix confusion_of(const TrialRecord& r) {
  ConfusionMatrix m;
  for (const auto& e : r.evaluations) {
    if (!r.fraud) {
      (e.flag ? m.nominal_flag : m.nominal_pass) += 1;
    } else if (e.step >= r.switch_step) {
      (e.flag ? m.ood_flag : m.ood_pass) += 1;
    }
  }
  return m;
}

BatchReport run_batch(const BatchConfig& cfg, const ensemble::Ensemble& ens, const conformal::Detector& det,
                      const std::vector<data::Trajectory>& pool) {
  if (cfg.trials_per_group < 0) throw ArgumentError("batch: trials_per_group must be >= 0");
  BatchReport report;
  std::vector<bool> behaviors;
  if (cfg.nominal) behaviors.push_back(false);
  if (cfg.fraud) behaviors.push_back(true);
  for (bool fraud : behaviors) {
    for (auto mode : cfg.modes) {
      BatchGroup g;
      g.mode = mode;
      g.fraud = fraud;
      g.trials.resize(static_cast<std::size_t>(cfg.trials_per_group));
      report.groups.push_back(std::move(g));
    }
  }
  if (cfg.trials_per_group == 0 || report.groups.empty()) return report;
  if (pool.empty()) throw ArgumentError("batch: trajectory pool is empty");

  const int per = cfg.trials_per_group;
  const int jobs = per * static_cast<int>(report.groups.size());
  parallel_for(jobs, cfg.threads, [&](int j) {
    auto& g = report.groups[static_cast<std::size_t>(j / per)];
    const int i = j % per;
    const std::uint64_t seed = mix(cfg.seed, static_cast<std::uint64_t>(i));
    const auto& src = pool[static_cast<std::size_t>(mix(seed, 0xA5) % pool.size())];
    ScenarioConfig sc = cfg.scenario;
    sc.mode = g.mode;
    sc.fraud = g.fraud;
    g.trials[static_cast<std::size_t>(i)] = run_trial(sc, ens, det, src, seed);
  });

  for (auto& g : report.groups) {
    for (const auto& t : g.trials) {
      switch (t.outcome) {
        case SimOutcome::PassedSafely: ++g.passed; break;
        case SimOutcome::StoppedSafely: ++g.stopped; break;
        case SimOutcome::Collision: ++g.collisions; break;
      }
      g.confusion += confusion_of(t);
    }
    report.confusion += g.confusion;
  }
  return report;
}

std::vector<double> pair_scores(const ensemble::Ensemble& ens, const std::vector<data::DataPair>& pairs) {
  if (pairs.empty()) return {};
  Eigen::MatrixXd windows(2 * ens.window(), static_cast<Eigen::Index>(pairs.size()));
  for (std::size_t i = 0; i < pairs.size(); ++i) windows.col(static_cast<Eigen::Index>(i)) = pairs[i].input;
  const auto stats = ensemble::ensemble_stats_batch(ens, windows);
  std::vector<double> out;
  out.reserve(stats.size());
  for (const auto& s : stats) out.push_back(conformal::nonconformity(s.covariance));
  return out;
}

std::vector<double> coverage_experiment(const CoverageConfig& cfg, const ensemble::Ensemble& ens) {
  if (cfg.trials < 0) throw ArgumentError("coverage: trials must be >= 0");
  if (cfg.cal_size < 1 || cfg.K < 1 || cfg.K > cfg.cal_size) {
    throw ArgumentError("coverage: need 1 <= K <= cal_size");
  }
  if (cfg.eval_trajectories < 1) throw ArgumentError("coverage: eval_trajectories must be >= 1");
  if (const auto v = data::validate(cfg.generator); !v.empty()) throw ArgumentError(v.front());

  std::vector<double> out(static_cast<std::size_t>(cfg.trials));
  parallel_for(cfg.trials, cfg.threads, [&](int trial) {
    const std::uint64_t s = mix(cfg.seed, static_cast<std::uint64_t>(trial));
    std::mt19937_64 rng(s);
    const auto cal = data::reflect_balance(data::synth_generate(cfg.generator, cfg.cal_size, mix(s, 1)));
    std::vector<data::DataPair> picks;
    for (const auto& tr : cal) {
      auto pairs = data::make_pairs(tr, ens.window());
      if (pairs.empty()) throw ArgumentError("coverage: generated trajectory shorter than the window");
      std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
      picks.push_back(std::move(pairs[pick(rng)]));
    }
    const conformal::ScoreSet cal_scores(pair_scores(ens, picks));
    const double threshold = cal_scores.order_statistic(cfg.K);

    const auto eval = data::reflect_balance(data::synth_generate(cfg.generator, cfg.eval_trajectories, mix(s, 2)));
    std::vector<data::DataPair> all;
    for (const auto& tr : eval) {
      auto pairs = data::make_pairs(tr, ens.window());
      all.insert(all.end(), std::make_move_iterator(pairs.begin()), std::make_move_iterator(pairs.end()));
    }
    const auto scores = pair_scores(ens, all);
    const auto covered = std::count_if(scores.begin(), scores.end(), [&](double r) { return r <= threshold; });
    out[static_cast<std::size_t>(trial)] = scores.empty() ? 0.0 : static_cast<double>(covered) / scores.size();
  });
  return out;
}

CoverageSummary summarize_coverage(const std::vector<double>& samples, int n, int k) {
  const auto dist = conformal::coverage_distribution(n, k);
  CoverageSummary s;
  s.samples = static_cast<int>(samples.size());
  s.beta_mean = dist.mean();
  if (samples.empty()) return s;
  double sum = 0.0;
  for (double x : samples) sum += x;
  s.mean = sum / s.samples;
  double ss = 0.0;
  for (double x : samples) ss += (x - s.mean) * (x - s.mean);
  s.standard_error = s.samples > 1 ? std::sqrt(ss / (s.samples - 1) / s.samples) : 0.0;

  auto sorted = samples;
  std::sort(sorted.begin(), sorted.end());
  const double m = static_cast<double>(sorted.size());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const double f = dist.cdf(sorted[i]);
    s.ks_statistic = std::max({s.ks_statistic, (i + 1) / m - f, f - i / m});
  }
  // asymptotic Kolmogorov quantile at 1%
  s.ks_critical_1pct = 1.6276 / std::sqrt(m);
  return s;
}

void save_report_json(const BatchReport& r, const std::filesystem::path& path) {
  auto cm = [](const ConfusionMatrix& m) {
    return json{{"nominal_pass", m.nominal_pass}, {"nominal_flag", m.nominal_flag},
                {"ood_pass", m.ood_pass},         {"ood_flag", m.ood_flag},
                {"false_positive_rate", m.false_positive_rate()},
                {"true_positive_rate", m.true_positive_rate()}};
  };
  json doc;
  doc["confusion"] = cm(r.confusion);
  doc["groups"] = json::array();
  for (const auto& g : r.groups) {
    json jg{{"mode", to_string(g.mode)},
            {"behavior", g.fraud ? "fraud" : "nominal"},
            {"trials", g.trials.size()},
            {"passed_safely", g.passed},
            {"stopped_safely", g.stopped},
            {"collisions", g.collisions},
            {"confusion", cm(g.confusion)},
            {"trial_summaries", json::array()}};
    for (const auto& t : g.trials) {
      int fallbacks = 0;
      int first_flag = -1;
      for (const auto& rp : t.replans) fallbacks += rp.fallback ? 1 : 0;
      for (const auto& e : t.evaluations) {
        if (e.flag && (!t.fraud || e.step >= t.switch_step)) {
          first_flag = e.step;
          break;
        }
      }
      jg["trial_summaries"].push_back({{"source_id", t.source_id},
                                       {"seed", t.seed},
                                       {"outcome", to_string(t.outcome)},
                                       {"min_distance", t.min_distance},
                                       {"evaluations", t.evaluations.size()},
                                       {"flags", std::count_if(t.evaluations.begin(), t.evaluations.end(),
                                                               [](const Evaluation& e) { return e.flag; })},
                                       {"first_flag_step", first_flag},
                                       {"fallbacks", fallbacks},
                                       {"plans_verified", t.plans_verified},
                                       {"final_x", t.vehicle.back().position.x()}});
    }
    doc["groups"].push_back(std::move(jg));
  }
  auto out = open_out(path);
  out << doc.dump(2) << '\n';
}

void save_vehicle_csv(const TrialRecord& r, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "step,x,y,theta,V,kappa,mode_flag\n";
  for (std::size_t i = 0; i < r.vehicle.size(); ++i) {
    const auto& s = r.vehicle[i];
    const int flag = r.mode_flags.empty() ? 0 : r.mode_flags[std::min(i, r.mode_flags.size() - 1)];
    out << i << ',' << s.position.x() << ',' << s.position.y() << ',' << s.theta << ',' << s.V << ',' << s.kappa
        << ',' << flag << '\n';
  }
}

void save_pedestrian_csv(const TrialRecord& r, const std::filesystem::path& path) {
  data::Trajectory t;
  t.id = r.source_id.empty() ? "pedestrian" : r.source_id;
  t.positions = r.pedestrian;
  data::save_trajectories(path, {t});
}

void save_coverage_csv(const std::vector<double>& samples, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "coverage\n";
  for (double s : samples) out << s << '\n';
}

}  // namespace soda::sim
