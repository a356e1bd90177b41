// SPDX-License-Identifier: Apache-2.0
#include "soda/trajectory_data.hpp"

#include "soda/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string_view>
#include <unordered_map>

namespace soda::data {

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? comma : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

bool operator==(const DataPair& a, const DataPair& b) {
  return a.input.size() == b.input.size() && a.input == b.input && a.target == b.target;
}

std::vector<Trajectory> load_trajectories(const std::filesystem::path& path, double sample_rate_hz) {
  if (!(sample_rate_hz > 0.0)) throw ArgumentError("sample_rate_hz must be positive");
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open trajectory file " + path.string());

  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> order;
  std::unordered_map<std::string, std::map<long, Point>> rows;

  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    const auto view = trim(line);
    if (view.empty()) continue;
    if (!header_seen) {
      header_seen = true;
      const auto fields = split_fields(view);
      if (fields.size() != 4 || trim(fields[0]) != "id" || trim(fields[1]) != "step" ||
          trim(fields[2]) != "x" || trim(fields[3]) != "y") {
        throw FormatError("line 1: expected header 'id,step,x,y'");
      }
      continue;
    }
    const auto fields = split_fields(view);
    long step = 0;
    double x = 0.0;
    double y = 0.0;
    if (fields.size() != 4 || trim(fields[0]).empty() || !parse_number(fields[1], step) ||
        !parse_number(fields[2], x) || !parse_number(fields[3], y)) {
      throw FormatError("line " + std::to_string(line_no) + ": malformed row '" + line + "'");
    }
    if (!std::isfinite(x) || !std::isfinite(y)) {
      throw FormatError("line " + std::to_string(line_no) + ": non-finite position");
    }
    std::string id(trim(fields[0]));
    auto [it, inserted] = rows.try_emplace(id);
    if (inserted) order.push_back(id);
    if (!it->second.emplace(step, Point(x, y)).second) {
      throw FormatError("line " + std::to_string(line_no) + ": duplicate (id, step) = (" + id +
                        ", " + std::to_string(step) + ")");
    }
  }

  std::vector<Trajectory> out;
  out.reserve(order.size());
  for (const auto& id : order) {
    const auto& steps = rows.at(id);
    Trajectory traj{id, sample_rate_hz, {}};
    traj.positions.reserve(steps.size());
    long expected = 0;
    for (const auto& [step, p] : steps) {
      if (step != expected) {
        throw FormatError("trajectory '" + id + "': step indices must be contiguous from 0, missing " +
                          std::to_string(expected));
      }
      traj.positions.push_back(p);
      ++expected;
    }
    out.push_back(std::move(traj));
  }
  return out;
}

void save_trajectories(const std::filesystem::path& path, const std::vector<Trajectory>& trajs) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write trajectory file " + path.string());
  out << "id,step,x,y\n" << std::setprecision(17);
  for (const auto& t : trajs) {
    for (std::size_t k = 0; k < t.positions.size(); ++k) {
      out << t.id << ',' << k << ',' << t.positions[k].x() << ',' << t.positions[k].y() << '\n';
    }
  }
}

std::vector<DataPair> make_pairs(const Trajectory& traj, int window) {
  if (window <= 0) throw ArgumentError("window must be positive");
  std::vector<DataPair> pairs;
  const auto n = static_cast<int>(traj.size());
  if (n < window + 1) return pairs;
  pairs.reserve(static_cast<std::size_t>(n - window));
  for (int k = 0; k + window < n; ++k) {
    DataPair pair;
    pair.input.resize(2 * window);
    for (int j = 0; j < window; ++j) pair.input.segment<2>(2 * j) = traj.positions[k + j];
    pair.target = traj.positions[k + window];
    pair.source_id = traj.id;
    pair.start_index = k;
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

DatasetSplit split_dataset(const std::vector<Trajectory>& trajs, int n_test, std::uint64_t seed,
                           int window) {
  if (n_test < 0 || static_cast<std::size_t>(n_test) >= trajs.size()) {
    throw ArgumentError("n_test must satisfy 0 <= n_test < number of trajectories (" +
                        std::to_string(trajs.size()) + ")");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(trajs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<char> is_test(trajs.size(), 0);
  for (int i = 0; i < n_test; ++i) is_test[order[static_cast<std::size_t>(i)]] = 1;

  DatasetSplit split;
  split.seed = seed;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    if (is_test[i]) {
      split.test_trajectories.push_back(trajs[i]);
      continue;
    }
    auto pairs = make_pairs(trajs[i], window);
    if (pairs.empty()) {
      throw ArgumentError("trajectory '" + trajs[i].id + "' is too short to donate a calibration pair");
    }
    std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
    const auto held = pick(rng);
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      if (k == held) {
        split.calibration_pairs.push_back(std::move(pairs[k]));
      } else {
        split.train_pairs.push_back(std::move(pairs[k]));
      }
    }
  }
  return split;
}

bool is_upward(const Trajectory& traj) {
  if (traj.positions.size() < 2) return false;
  return traj.positions.back().y() - traj.positions.front().y() > 0.0;
}

Trajectory reflect_y(Trajectory traj) {
  for (auto& p : traj.positions) p.y() = -p.y();
  return traj;
}

std::vector<Trajectory> reflect_balance(const std::vector<Trajectory>& trajs) {
  std::vector<Trajectory> out;
  out.reserve(trajs.size());
  for (const auto& t : trajs) out.push_back(is_upward(t) ? reflect_y(t) : t);
  return out;
}

std::vector<std::string> validate(const SynthParams& p) {
  std::vector<std::string> v;
  if (!(p.mean_speed >= 0.0)) v.emplace_back("synth.mean_speed must be >= 0");
  if (!(p.speed_std >= 0.0)) v.emplace_back("synth.speed_std must be >= 0");
  if (!(p.heading_std >= 0.0)) v.emplace_back("synth.heading_std must be >= 0");
  if (!(p.jitter_std >= 0.0)) v.emplace_back("synth.jitter_std must be >= 0");
  if (!(p.jitter_correlation >= 0.0 && p.jitter_correlation < 1.0)) {
    v.emplace_back("synth.jitter_correlation must be in [0,1)");
  }
  if (!(p.start_x_std >= 0.0)) v.emplace_back("synth.start_x_std must be >= 0");
  if (p.length < 2) v.emplace_back("synth.length must be >= 2");
  if (!(p.crossing_direction_prob >= 0.0 && p.crossing_direction_prob <= 1.0)) {
    v.emplace_back("synth.crossing_direction_prob must be in [0,1]");
  }
  if (!(p.sample_rate_hz > 0.0)) v.emplace_back("synth.sample_rate_hz must be > 0");
  return v;
}

std::vector<Trajectory> synth_generate(const SynthParams& params, int n, std::uint64_t seed) {
  if (n <= 0) throw ArgumentError("synth_generate: n must be positive");
  if (const auto v = validate(params); !v.empty()) throw ArgumentError(v.front());

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::bernoulli_distribution upward(params.crossing_direction_prob);
  const double dt = 1.0 / params.sample_rate_hz;
  const double phi = params.jitter_correlation;
  const double innovation = std::sqrt(1.0 - phi * phi) * params.jitter_std;

  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const bool up = upward(rng);
    const double speed = std::max(0.0, params.mean_speed + params.speed_std * unit(rng));
    const double deviation = params.heading_mean + params.heading_std * unit(rng);
    const double start_x = params.start_x_mean + params.start_x_std * unit(rng);
    // Downward crossings head along -y, upward along +y; the deviation turns
    // both toward +x so that mirrored copies are identically distributed.
    const double heading = up ? std::numbers::pi / 2.0 - deviation : -std::numbers::pi / 2.0 + deviation;
    const Point step = speed * dt * Point(std::cos(heading), std::sin(heading));
    const Point start(start_x, up ? -params.curb_offset : params.curb_offset);

    Trajectory traj{"s" + std::to_string(i), params.sample_rate_hz, {}};
    traj.positions.reserve(static_cast<std::size_t>(params.length));
    Point jitter(params.jitter_std * unit(rng), params.jitter_std * unit(rng));
    for (int k = 0; k < params.length; ++k) {
      if (k > 0) jitter = phi * jitter + innovation * Point(unit(rng), unit(rng));
      traj.positions.push_back(start + static_cast<double>(k) * step + jitter);
    }
    out.push_back(std::move(traj));
  }
  return out;
}

}  // namespace soda::data
