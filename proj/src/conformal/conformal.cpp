// SPDX-License-Identifier: Apache-2.0
#include "soda/conformal.hpp"

#include "soda/errors.hpp"
#include "soda/special_functions.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace soda::conformal {

namespace {

// Excess over an integer that quantile_index treats as rounding noise in delta.
constexpr double kIndexSlack = 1e-3;

void check_bounds(double delta, double x1, double x2) {
  if (!(delta > 0.0 && delta < 1.0)) throw ArgumentError("delta must lie in (0, 1)");
  if (!(x1 >= 0.0 && x1 < 1.0 - delta && 1.0 - delta < x2 && x2 <= 1.0)) {
    throw ArgumentError("bounds must satisfy 0 <= x1 < 1 - delta < x2 <= 1");
  }
}

// Probability for a candidate size; sizes too small to host the index get 0.
double probability_or_zero(int n, double delta, double x1, double x2) {
  if (n < 1) return 0.0;
  const int k = quantile_index(n, delta);
  if (k > n || k < 1) return 0.0;
  const auto dist = coverage_distribution(n, k);
  return special::regularized_incomplete_beta(x2, dist.a, dist.b) -
         special::regularized_incomplete_beta(x1, dist.a, dist.b);
}

int ceil_half(long long v) { return static_cast<int>((v + 1) / 2); }

}  // namespace

double nonconformity(const Eigen::Matrix2d& cov) {
  if (!cov.allFinite()) throw ArgumentError("nonconformity: covariance has non-finite entries");
  if (std::fabs(cov(0, 1) - cov(1, 0)) > 1e-9) throw ArgumentError("nonconformity: covariance is not symmetric");
  const double a = cov(0, 0);
  const double d = cov(1, 1);
  const double b = 0.5 * (cov(0, 1) + cov(1, 0));
  const double rho = 0.5 * ((a + d) + std::hypot(a - d, 2.0 * b));
  return std::max(rho, 0.0);
}

ScoreSet::ScoreSet(std::vector<double> scores) : scores_(std::move(scores)) {
  for (std::size_t i = 0; i < scores_.size(); ++i) {
    if (!std::isfinite(scores_[i]) || scores_[i] < 0.0) {
      throw ArgumentError("score " + std::to_string(i) + " is negative or non-finite");
    }
  }
  sorted_ = std::is_sorted(scores_.begin(), scores_.end());
}

void ScoreSet::sort() {
  std::sort(scores_.begin(), scores_.end());
  sorted_ = true;
}

double ScoreSet::order_statistic(int k) const {
  if (k < 1 || static_cast<std::size_t>(k) > scores_.size()) {
    throw ArgumentError("order statistic index " + std::to_string(k) + " outside [1, " +
                        std::to_string(scores_.size()) + "]");
  }
  if (sorted_) return scores_[static_cast<std::size_t>(k - 1)];
  std::vector<double> copy = scores_;
  std::nth_element(copy.begin(), copy.begin() + (k - 1), copy.end());
  return copy[static_cast<std::size_t>(k - 1)];
}

std::string ScoreSet::digest() const {
  std::vector<double> s = scores_;
  std::sort(s.begin(), s.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const double v : s) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= bits & 0xffU;
      h *= 0x100000001b3ULL;
      bits >>= 8;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

int quantile_index(int n, double delta) {
  if (n < 1) throw ArgumentError("calibration size must be >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw ArgumentError("delta must lie in (0, 1)");
  const double target = (static_cast<double>(n) + 1.0) * (1.0 - delta);
  return static_cast<int>(std::ceil(target - kIndexSlack));
}

double round_up(double value, int decimals) {
  if (decimals < 0) return value;
  const double scale = std::pow(10.0, decimals);
  double units = std::ceil(value * scale);
  // value*scale can land just above an integer through representation error
  // (0.012 * 1000 = 12.000000000000002); step back when the lower grid point
  // still covers the value.
  if ((units - 1.0) / scale >= value) units -= 1.0;
  double c = units / scale;
  if (c < value) c = std::nextafter(c, std::numeric_limits<double>::infinity());
  return c;
}

Detector calibrate_with_index(const ScoreSet& scores, int k, RoundingRule rounding) {
  const auto n = static_cast<int>(scores.size());
  if (n < 1) throw CalibrationError("calibration needs at least one score");
  if (k < 1 || k > n) {
    throw CalibrationError("index K=" + std::to_string(k) + " outside [1, N=" + std::to_string(n) + "]");
  }
  Detector d;
  d.N = n;
  d.K = k;
  d.delta = 1.0 - static_cast<double>(k) / (static_cast<double>(n) + 1.0);
  d.C = round_up(scores.order_statistic(k), rounding.decimals);
  d.score_digest = scores.digest();
  return d;
}

Detector calibrate(const ScoreSet& scores, double delta, RoundingRule rounding) {
  const auto n = static_cast<int>(scores.size());
  if (n < 1) throw CalibrationError("calibration needs at least one score");
  if (!(delta > 0.0 && delta < 1.0)) throw ArgumentError("delta must lie in (0, 1)");
  const int k = quantile_index(n, delta);
  if (k > n) {
    std::ostringstream msg;
    msg << "delta=" << delta << " is too small for N=" << n << " (K=" << k
        << " > N); the minimum feasible delta is 1/(N+1) = " << 1.0 / (n + 1.0);
    throw CalibrationError(msg.str());
  }
  return calibrate_with_index(scores, k, rounding);
}

double CoverageDistribution::cdf(double x) const {
  return special::regularized_incomplete_beta(std::clamp(x, 0.0, 1.0), a, b);
}

CoverageDistribution coverage_distribution(int n, int k) {
  if (n < 1 || k < 1 || k > n) throw ArgumentError("coverage_distribution requires 1 <= K <= N");
  return {static_cast<double>(k), static_cast<double>(n + 1 - k)};
}

double calculate_probability(int n, double delta, double x1, double x2) {
  check_bounds(delta, x1, x2);
  if (n < 1) throw ArgumentError("calibration size must be >= 1");
  const int k = quantile_index(n, delta);
  if (k > n) {
    throw ArgumentError("N=" + std::to_string(n) + " is too small for delta (K=" + std::to_string(k) + " > N)");
  }
  return probability_or_zero(n, delta, x1, x2);
}

int required_calibration_size(double delta, double p_target, int precision, double x1, double x2,
                              SearchTrace* trace, int max_iterations) {
  check_bounds(delta, x1, x2);
  if (precision < 1) throw ArgumentError("precision must be >= 1");
  if (!(p_target > 0.0 && p_target < 1.0)) throw ArgumentError("target probability must lie in (0, 1)");

  long long lo = static_cast<long long>(std::ceil((2.0 - delta) / delta));
  long long hi = lo + static_cast<long long>(std::ceil(2.0 / (1.0 - delta)));
  if (trace != nullptr) {
    trace->initial_lo = static_cast<int>(lo);
    trace->initial_hi = static_cast<int>(hi);
  }
  constexpr long long kMaxSize = 1LL << 30;
  auto prob = [&](long long n) { return probability_or_zero(static_cast<int>(n), delta, x1, x2); };
  double p_lo = prob(lo);
  double p_hi = prob(hi);
  int iter = 0;
  // The precision test alone would stop at once whenever the starting bracket is
  // already narrower than `precision`, before the target is ever bracketed.
  while (hi - lo > precision || p_hi < p_target || p_lo > p_target) {
    if (++iter > max_iterations) {
      throw SearchError("calibration-size search did not terminate within " + std::to_string(max_iterations) +
                        " iterations (bracket [" + std::to_string(lo) + ", " + std::to_string(hi) + "])");
    }
    if (p_hi < p_target) {
      hi *= 2;
      if (hi > kMaxSize) throw SearchError("calibration-size search exceeded N = 2^30");
      p_hi = prob(hi);
    } else if (p_lo > p_target) {
      lo = ceil_half(lo);
      p_lo = prob(lo);
    } else {
      const long long mid = ceil_half(lo + hi);
      const double p_mid = prob(mid);
      if (p_mid < p_target) {
        lo = mid;
        p_lo = p_mid;
      } else {
        hi = mid;
        p_hi = p_mid;
      }
    }
  }
  if (trace != nullptr) {
    trace->final_lo = static_cast<int>(lo);
    trace->final_hi = static_cast<int>(hi);
    trace->iterations = iter;
  }
  const long long n = ceil_half(lo + hi);
  // The midpoint can sit on a dip of the saw-tooth probability curve; the upper
  // end of the bracket is known to meet the target.
  if (prob(n) < p_target && p_hi >= p_target) return static_cast<int>(hi);
  return static_cast<int>(n);
}

void save_detector(const Detector& d, const std::filesystem::path& path) {
  nlohmann::json doc{{"C", d.C}, {"K", d.K}, {"N", d.N}, {"delta", d.delta}, {"score_digest", d.score_digest}};
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write detector file " + path.string());
  out << doc.dump(2) << '\n';
}

Detector load_detector(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open detector file " + path.string());
  try {
    const auto doc = nlohmann::json::parse(in);
    Detector d;
    d.C = doc.at("C").get<double>();
    d.K = doc.at("K").get<int>();
    d.N = doc.at("N").get<int>();
    d.delta = doc.at("delta").get<double>();
    d.score_digest = doc.value("score_digest", std::string{});
    if (d.N < 1 || d.K < 1 || d.K > d.N || !std::isfinite(d.C)) {
      throw FormatError("detector file " + path.string() + ": inconsistent C/K/N");
    }
    return d;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("detector file " + path.string() + ": " + ex.what());
  }
}

void save_scores(const ScoreSet& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write score file " + path.string());
  out << "rho\n" << std::setprecision(17);
  for (const double v : s.scores()) out << v << '\n';
}

ScoreSet load_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open score file " + path.string());
  std::string line;
  std::vector<double> values;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "rho") throw FormatError("score file: line 1 must be the header 'rho'");
      continue;
    }
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), v);
    if (ec != std::errc() || ptr != line.data() + line.size()) {
      throw FormatError("score file: malformed value on line " + std::to_string(line_no));
    }
    values.push_back(v);
  }
  try {
    return ScoreSet(std::move(values));
  } catch (const ArgumentError& ex) {
    throw FormatError(std::string("score file: ") + ex.what());
  }
}

}  // namespace soda::conformal
