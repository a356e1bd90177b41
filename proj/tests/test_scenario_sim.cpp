// SPDX-License-Identifier: Apache-2.0
#include "soda/errors.hpp"
#include "soda/scenario_sim.hpp"

#include "doctest.h"
#include "support/tmp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

using namespace soda;
using sim::Point;

namespace {

// Small, quickly trained ensemble; detection quality is not under test here.
struct Fixture {
  ensemble::Ensemble ens;
  conformal::Detector det;
  std::vector<data::Trajectory> pool;
  std::vector<double> cal_scores;

  Fixture() {
    const auto trajs = data::reflect_balance(data::synth_generate({}, 40, 1));
    const auto split = data::split_dataset(trajs, 5, 2);
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < 10; ++i) seeds.push_back(10 + static_cast<std::uint64_t>(i));
    ens = ensemble::init_ensemble(10, seeds, 14, {32, 32},
                                  ensemble::fit_frame(split.train_pairs, ensemble::InputFrame::NewestOrigin));
    ensemble::TrainConfig cfg;
    cfg.epochs = 3;
    ens = ensemble::train_ensemble(ens, split.train_pairs, cfg);
    cal_scores = sim::pair_scores(ens, split.calibration_pairs);
    det = conformal::calibrate_with_index(conformal::ScoreSet(cal_scores), static_cast<int>(cal_scores.size() / 2), conformal::RoundingRule{-1});
    pool = data::synth_generate({}, 6, 77);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

sim::TrialRecord record_with(double min_d, double vx, double px) {
  sim::TrialRecord r;
  r.min_distance = min_d;
  r.vehicle.push_back({Point(vx, -1.8), 0, 0, 0});
  r.pedestrian.push_back(Point(px, 0));
  return r;
}

}  // namespace

TEST_CASE("switch step is floor(1.3 * 23.976) = 31") { CHECK(sim::ScenarioConfig{}.switch_step() == 31); }

TEST_CASE("pedestrian behavior") {
  std::vector<Point> src;
  for (int i = 0; i < 60; ++i) src.emplace_back(40, 4 - 0.05 * i);
  const double h = 1.0 / 23.976;
  const sim::PedestrianBehavior nominal(src, std::nullopt, 4.5, h);
  for (int t = 0; t < 60; ++t) CHECK(nominal.position(t, Point(0, 0), Point(0, 0)) == src[static_cast<std::size_t>(t)]);

  const sim::PedestrianBehavior fraud(src, 31, 4.5, h);
  const Point prev(10, 0);
  const Point d = fraud.position(31, prev, Point(20, 0)) - prev;
  CHECK(d.x() == doctest::Approx(4.5 / 23.976));
  CHECK(d.y() == doctest::Approx(0.0));
  CHECK(fraud.position(30, prev, Point(20, 0)) == src[30]);
  Point p = src[30];
  Point car(0, -1.8);
  for (int t = 31; t < 80; ++t) {
    const Point n = fraud.position(t, p, car);
    CHECK((n - p).norm() == doctest::Approx(4.5 * h));
    p = n;
    car.x() += 0.3;
  }
}

TEST_CASE("classify_outcome") {
  CHECK(sim::classify_outcome(record_with(1.9, 50, 40)) == sim::SimOutcome::Collision);
  CHECK(sim::classify_outcome(record_with(2.5, 50, 40)) == sim::SimOutcome::PassedSafely);
  CHECK(sim::classify_outcome(record_with(2.5, 30, 40)) == sim::SimOutcome::StoppedSafely);
  CHECK(sim::classify_outcome(record_with(2.5, 40, 40)) == sim::SimOutcome::StoppedSafely);
}

TEST_CASE("confusion bookkeeping") {
  sim::TrialRecord n;
  n.evaluations = {{15, 0, false}, {20, 0, true}, {25, 0, false}};
  const auto cn = sim::confusion_of(n);
  CHECK(cn.nominal_pass == 2);
  CHECK(cn.nominal_flag == 1);
  CHECK(cn.ood_total() == 0);

  sim::TrialRecord f;
  f.fraud = true;
  f.switch_step = 31;
  f.evaluations = {{25, 0, true}, {30, 0, false}, {35, 0, false}, {40, 0, true}};
  const auto cf = sim::confusion_of(f);
  CHECK(cf.nominal_total() == 0);
  CHECK(cf.ood_pass == 1);
  CHECK(cf.ood_flag == 1);

  sim::ConfusionMatrix empty;
  CHECK(empty.false_positive_rate() == 0.0);
  CHECK(empty.true_positive_rate() == 0.0);
  auto sum = cn;
  sum += cf;
  CHECK(sum.nominal_total() == 3);
  CHECK(sum.ood_total() == 2);
}

TEST_CASE("zero-trial batch is empty and well defined") {
  const auto& f = fixture();
  sim::BatchConfig bc;
  bc.trials_per_group = 0;
  const auto r = sim::run_batch(bc, f.ens, f.det, f.pool);
  CHECK(r.groups.size() == 6);
  for (const auto& g : r.groups) CHECK(g.trials.empty());
  CHECK(r.confusion.false_positive_rate() == 0.0);
}

TEST_CASE("nominal trial: 27 evaluations, plans verified, modes follow flags") {
  const auto& f = fixture();
  sim::ScenarioConfig cfg;
  const auto r = sim::run_trial(cfg, f.ens, f.det, f.pool[0], 5);
  CHECK(r.vehicle.size() == 151);
  CHECK(r.pedestrian.size() == 151);
  REQUIRE(r.evaluations.size() == 27);
  CHECK(r.evaluations.front().step == 15);
  CHECK(r.evaluations.back().step == 145);
  CHECK(r.plans_verified);
  CHECK(r.outcome == sim::classify_outcome(r));
  double d = 1e300;
  for (std::size_t i = 0; i < r.vehicle.size(); ++i) d = std::min(d, (r.vehicle[i].position - r.pedestrian[i]).norm());
  CHECK(r.min_distance == d);
  CHECK((r.pedestrian[0] - r.vehicle[0].position).x() == doctest::Approx(40).epsilon(0.3));

  // memoryless switching: each evaluation sets the mode until the next replan,
  // so a false positive followed by a nominal score returns to MPC I
  int flagged = 0;
  for (const auto& e : r.evaluations) {
    flagged += e.flag;
    for (int t = e.step; t < std::min(e.step + 5, 150); ++t) CHECK(r.mode_flags[static_cast<std::size_t>(t)] == (e.flag ? 1 : 0));
  }
  CHECK(flagged > 0);
  CHECK(flagged < 27);
}

TEST_CASE("fraud trial: 23 post-switch evaluations; deterministic per seed") {
  const auto& f = fixture();
  sim::ScenarioConfig cfg;
  cfg.fraud = true;
  cfg.mode = sim::ControllerMode::ReachableOnly;
  const auto r = sim::run_trial(cfg, f.ens, f.det, f.pool[1], 9);
  CHECK(r.switch_step == 31);
  const auto post = std::count_if(r.evaluations.begin(), r.evaluations.end(), [](const sim::Evaluation& e) { return e.step >= 31; });
  CHECK(post == 23);
  CHECK(sim::confusion_of(r).ood_total() == 23);
  for (int flag : r.mode_flags) CHECK(flag == 1);
  // post-switch pedestrian steps have constant length
  for (std::size_t t = 32; t < r.pedestrian.size(); ++t) {
    CHECK((r.pedestrian[t] - r.pedestrian[t - 1]).norm() == doctest::Approx(4.5 / 23.976));
  }

  cfg.steps = 40;
  const auto a = sim::run_trial(cfg, f.ens, f.det, f.pool[2], 3);
  const auto b = sim::run_trial(cfg, f.ens, f.det, f.pool[2], 3);
  REQUIRE(a.vehicle.size() == b.vehicle.size());
  for (std::size_t i = 0; i < a.vehicle.size(); ++i) {
    CHECK(a.vehicle[i].to_vector() == b.vehicle[i].to_vector());
    CHECK(a.pedestrian[i] == b.pedestrian[i]);
  }
}

TEST_CASE("run_trial rejects a short source") {
  const auto& f = fixture();
  data::Trajectory t;
  t.id = "short";
  t.positions.assign(20, Point(40, 4));
  CHECK_THROWS_AS(sim::run_trial({}, f.ens, f.det, t, 1), ArgumentError);
}

TEST_CASE("coverage experiment") {
  const auto& f = fixture();
  sim::CoverageConfig cc;
  cc.trials = 1;
  cc.eval_trajectories = 5;
  const auto one = sim::coverage_experiment(cc, f.ens);
  REQUIRE(one.size() == 1);
  CHECK(one[0] >= 0.0);
  CHECK(one[0] <= 1.0);

  // K = N: the threshold is the calibration maximum, Beta(100, 1) with mean 100/101
  cc.trials = 200;
  cc.K = 100;
  cc.eval_trajectories = 10;
  const auto s = sim::coverage_experiment(cc, f.ens);
  const auto sum = sim::summarize_coverage(s, 100, 100);
  CHECK(sum.beta_mean == doctest::Approx(100.0 / 101.0));
  CHECK(std::fabs(sum.mean - sum.beta_mean) < 4 * sum.standard_error + 2e-3);
  const double median = [&] {
    auto c = s;
    std::nth_element(c.begin(), c.begin() + c.size() / 2, c.end());
    return c[c.size() / 2];
  }();
  CHECK(median > sum.mean);  // left skew
}

TEST_CASE("report writers") {
  test::TempDir dir;
  sim::TrialRecord r;
  r.vehicle = {{Point(0, -1.8), 0, 10, 0}, {Point(0.4, -1.8), 0, 10, 0}};
  r.pedestrian = {Point(40, 4), Point(40, 3.95)};
  r.mode_flags = {1};
  sim::save_vehicle_csv(r, dir / "v.csv");
  std::ifstream in(dir / "v.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,x,y,theta,V,kappa,mode_flag");
  sim::save_pedestrian_csv(r, dir / "p.csv");
  CHECK(data::load_trajectories(dir / "p.csv").front().size() == 2);
  sim::save_coverage_csv({0.95, 0.97}, dir / "c.csv");
  std::ifstream cin(dir / "c.csv");
  std::getline(cin, header);
  CHECK(header == "coverage");
}
