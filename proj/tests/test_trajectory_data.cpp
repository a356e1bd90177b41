// SPDX-License-Identifier: Apache-2.0
#include "soda/errors.hpp"
#include "soda/trajectory_data.hpp"

#include "doctest.h"
#include "support/prop.hpp"
#include "support/tmp.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

using namespace soda;
using data::Point;
using data::Trajectory;

namespace {

Trajectory line(const std::string& id, int n, Point start, Point step) {
  Trajectory t;
  t.id = id;
  for (int i = 0; i < n; ++i) t.positions.push_back(start + i * step);
  return t;
}

std::string csv_for(const std::vector<Trajectory>& ts) {
  std::ostringstream os;
  os << "id,step,x,y\n";
  for (const auto& t : ts) {
    for (std::size_t i = 0; i < t.size(); ++i) os << t.id << ',' << i << ',' << t.positions[i].x() << ',' << t.positions[i].y() << '\n';
  }
  return os.str();
}

}  // namespace

TEST_CASE("load_trajectories preserves ids, counts and lengths") {
  test::TempDir dir;
  const auto p = dir.write("t.csv", csv_for({line("a", 154, {0, 4}, {0, -0.05}), line("b", 154, {1, -4}, {0, 0.05})}));
  const auto ts = data::load_trajectories(p);
  REQUIRE(ts.size() == 2);
  CHECK(ts[0].id == "a");
  CHECK(ts[1].id == "b");
  CHECK(ts[0].size() == 154);
  CHECK(ts[1].size() == 154);
  CHECK(ts[1].positions[10].y() == doctest::Approx(-3.5));
}

TEST_CASE("load_trajectories: empty file gives an empty list") {
  test::TempDir dir;
  CHECK(data::load_trajectories(dir.write("e.csv", "")).empty());
  CHECK(data::load_trajectories(dir.write("h.csv", "id,step,x,y\n")).empty());
}

TEST_CASE("load_trajectories rejects duplicates, gaps and malformed rows") {
  test::TempDir dir;
  CHECK_THROWS_AS(data::load_trajectories(dir.write("d.csv", "id,step,x,y\na,0,0,0\na,0,1,1\n")), FormatError);
  CHECK_THROWS_AS(data::load_trajectories(dir.write("g.csv", "id,step,x,y\na,0,0,0\na,2,1,1\n")), FormatError);
  try {
    data::load_trajectories(dir.write("m.csv", "id,step,x,y\na,0,0,0\na,1,zz,1\n"));
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("save/load round trip is exact") {
  test::TempDir dir;
  const auto ts = data::synth_generate({}, 3, 5);
  data::save_trajectories(dir / "r.csv", ts);
  const auto back = data::load_trajectories(dir / "r.csv");
  REQUIRE(back.size() == ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    CHECK(back[i].id == ts[i].id);
    CHECK(back[i].positions == ts[i].positions);
  }
}

TEST_CASE("make_pairs counts and window layout") {
  CHECK(data::make_pairs(line("a", 154, {0, 0}, {0.1, 0}), 14).size() == 140);
  CHECK(data::make_pairs(line("a", 15, {0, 0}, {0.1, 0}), 14).size() == 1);
  CHECK(data::make_pairs(line("a", 14, {0, 0}, {0.1, 0}), 14).empty());

  const auto pairs = data::make_pairs(line("a", 20, {0, 0}, {1, 2}), 14);
  const auto& p = pairs[3];
  CHECK(p.start_index == 3);
  CHECK(p.input.size() == 28);
  CHECK(p.input(0) == 3.0);
  CHECK(p.input(1) == 6.0);
  CHECK(p.input(26) == 16.0);
  CHECK(p.target == Point(17, 34));
}

TEST_CASE("split_dataset: 110 trajectories, 10 test") {
  const auto ts = data::synth_generate({}, 110, 3);
  const auto s = data::split_dataset(ts, 10, 9);
  CHECK(s.calibration_pairs.size() == 100);
  CHECK(s.test_trajectories.size() == 10);

  std::size_t total = 0;
  for (const auto& t : ts) {
    const bool test = std::any_of(s.test_trajectories.begin(), s.test_trajectories.end(),
                                  [&](const Trajectory& x) { return x.id == t.id; });
    if (!test) total += data::make_pairs(t).size();
  }
  CHECK(s.train_pairs.size() + s.calibration_pairs.size() == total);

  // partition: no calibration pair also appears in training
  for (const auto& c : s.calibration_pairs) {
    CHECK(std::none_of(s.train_pairs.begin(), s.train_pairs.end(), [&](const data::DataPair& t) { return t == c; }));
    CHECK(std::none_of(s.test_trajectories.begin(), s.test_trajectories.end(),
                       [&](const Trajectory& t) { return t.id == c.source_id; }));
  }

  const auto again = data::split_dataset(ts, 10, 9);
  REQUIRE(again.calibration_pairs.size() == s.calibration_pairs.size());
  for (std::size_t i = 0; i < s.calibration_pairs.size(); ++i) CHECK(again.calibration_pairs[i] == s.calibration_pairs[i]);
  CHECK(again.train_pairs.size() == s.train_pairs.size());

  CHECK_THROWS_AS(data::split_dataset(ts, 110, 1), ArgumentError);
}

TEST_CASE("calibration selection is uniform over a trajectory's pairs") {
  // Over many seeds every start index of one trajectory is chosen about equally often.
  const std::vector<Trajectory> ts{line("a", 24, {0, 0}, {0, -0.05}), line("b", 24, {1, 0}, {0, -0.05})};
  std::vector<int> hits(10, 0);
  const int seeds = 5000;
  for (int s = 0; s < seeds; ++s) hits[static_cast<std::size_t>(data::split_dataset(ts, 0, s).calibration_pairs[0].start_index)]++;
  for (int h : hits) CHECK(std::abs(h - seeds / 10) < 5 * std::sqrt(seeds * 0.1 * 0.9));
}

TEST_CASE("reflect_balance") {
  const auto down = line("d", 10, {0, 4}, {0.01, -0.5});
  const auto up = line("u", 10, {2, -4}, {0.01, 0.5});
  const auto flat = line("f", 10, {0, 1}, {0.1, 0});
  const auto out = data::reflect_balance({down, up, flat});
  CHECK(out[0].positions == down.positions);
  CHECK(out[2].positions == flat.positions);
  for (std::size_t i = 0; i < up.size(); ++i) {
    CHECK(out[1].positions[i].x() == up.positions[i].x());
    CHECK(out[1].positions[i].y() == -up.positions[i].y());
  }
  const auto twice = data::reflect_balance(out);
  for (std::size_t k = 0; k < out.size(); ++k) CHECK(twice[k].positions == out[k].positions);
}

TEST_CASE("property: reflection keeps pair counts and leaves no upward crosser") {
  test::for_all(
      50, 11,
      [](test::Rng& rng) {
        data::SynthParams p;
        p.length = test::uniform_int(rng, 10, 60);
        p.crossing_direction_prob = test::uniform(rng, 0.0, 1.0);
        return data::synth_generate(p, 8, rng());
      },
      [](const std::vector<Trajectory>& ts) {
        const auto r = data::reflect_balance(ts);
        for (std::size_t i = 0; i < ts.size(); ++i) {
          CHECK(data::make_pairs(r[i]).size() == data::make_pairs(ts[i]).size());
          CHECK_FALSE(data::is_upward(r[i]));
        }
      });
}

TEST_CASE("synth_generate: zero noise is rectilinear at the mean speed") {
  data::SynthParams p;
  p.speed_std = 0;
  p.heading_std = 0;
  p.jitter_std = 0;
  const auto ts = data::synth_generate(p, 4, 1);
  const double expected = p.mean_speed / p.sample_rate_hz;
  for (const auto& t : ts) {
    REQUIRE(t.size() == 154);
    for (std::size_t i = 1; i < t.size(); ++i) {
      CHECK(std::fabs((t.positions[i] - t.positions[i - 1]).norm() - expected) < 1e-12);
      CHECK(std::fabs(t.positions[i].x() - t.positions[0].x()) < 1e-12);
    }
  }
}

TEST_CASE("synth_generate: mean step displacement within 3 standard errors") {
  data::SynthParams p;
  const auto ts = data::synth_generate(p, 1000, 42);
  std::vector<double> per;
  for (const auto& t : ts) per.push_back((t.positions.back() - t.positions.front()).norm() / (t.size() - 1));
  double mean = 0;
  for (double v : per) mean += v;
  mean /= per.size();
  double var = 0;
  for (double v : per) var += (v - mean) * (v - mean);
  const double se = std::sqrt(var / (per.size() - 1) / per.size());
  CHECK(std::fabs(mean - p.mean_speed / p.sample_rate_hz) < 3 * se);
}

TEST_CASE("synth_generate is deterministic per seed") {
  const auto a = data::synth_generate({}, 5, 77);
  const auto b = data::synth_generate({}, 5, 77);
  const auto c = data::synth_generate({}, 5, 78);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].positions == b[i].positions);
  CHECK(a[0].positions != c[0].positions);
}

TEST_CASE("SynthParams validation") {
  data::SynthParams p;
  CHECK(data::validate(p).empty());
  p.speed_std = -1;
  p.crossing_direction_prob = 1.5;
  CHECK(data::validate(p).size() == 2);
}

TEST_CASE("property: trajectory order does not change the calibration distribution") {
  // Two-sample KS over 100 seeds between the original and a reversed trajectory order.
  const auto ts = data::synth_generate({}, 60, 8);
  auto rev = ts;
  std::reverse(rev.begin(), rev.end());
  std::vector<double> a;
  std::vector<double> b;
  for (int s = 0; s < 100; ++s) {
    for (const auto& p : data::split_dataset(ts, 0, s).calibration_pairs) a.push_back(p.target.y() - p.input(27));
    for (const auto& p : data::split_dataset(rev, 0, s).calibration_pairs) b.push_back(p.target.y() - p.input(27));
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double d = 0;
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::fabs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  const double n = static_cast<double>(a.size());
  CHECK(d < 1.63 * std::sqrt(2.0 / n));
}
