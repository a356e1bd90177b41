// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace soda::conformal {

/// Largest eigenvalue of a symmetric PSD 2x2 covariance (its spectral norm).
/// Throws ArgumentError when the off-diagonals differ by more than 1e-9.
double nonconformity(const Eigen::Matrix2d& covariance);

class ScoreSet {
 public:
  ScoreSet() = default;
  /// Throws ArgumentError on negative or non-finite scores.
  explicit ScoreSet(std::vector<double> scores);

  [[nodiscard]] const std::vector<double>& scores() const noexcept { return scores_; }
  [[nodiscard]] std::size_t size() const noexcept { return scores_.size(); }
  [[nodiscard]] bool sorted() const noexcept { return sorted_; }
  void sort();
  /// rho^(k), 1-based, of the sorted scores.
  [[nodiscard]] double order_statistic(int k) const;
  /// Order-independent FNV-1a digest of the score bit patterns, as hex.
  [[nodiscard]] std::string digest() const;

 private:
  std::vector<double> scores_;
  bool sorted_ = false;
};

struct Detector {
  double C = 0.0;
  int K = 0;
  int N = 0;
  double delta = 0.0;  // 1 - K/(N+1)
  std::string score_digest;
};

/// Threshold rounding applied by calibrate. A negative value keeps rho^(K) as is.
struct RoundingRule {
  int decimals = 3;
};

/// K = ceil((N+1)(1-delta)), except that an excess of at most 1e-3 over an
/// integer is dropped. Deltas quoted to a few decimals (0.0396 for 1 - 97/101)
/// would otherwise land one index too high. The lost coverage is below
/// 1e-3/(N+1).
int quantile_index(int n, double delta);

/// Smallest multiple of 10^-decimals that is >= value.
double round_up(double value, int decimals);

Detector calibrate(const ScoreSet& scores, double delta, RoundingRule rounding = {});
Detector calibrate_with_index(const ScoreSet& scores, int k, RoundingRule rounding = {});

/// Flag 1 iff rho > C; rho == C is in-distribution.
[[nodiscard]] inline bool detect(const Detector& d, double rho) { return rho > d.C; }

struct CoverageDistribution {
  double a = 1.0;
  double b = 1.0;
  [[nodiscard]] double mean() const { return a / (a + b); }
  [[nodiscard]] double variance() const { return a * b / ((a + b) * (a + b) * (a + b + 1.0)); }
  [[nodiscard]] double cdf(double x) const;
};

CoverageDistribution coverage_distribution(int n, int k);

/// P(x1 <= coverage <= x2) for a calibration set of size n at failure rate delta.
double calculate_probability(int n, double delta, double x1, double x2);

struct SearchTrace {
  int initial_lo = 0;
  int initial_hi = 0;
  int final_lo = 0;
  int final_hi = 0;
  int iterations = 0;
};

/// Bisection over the calibration-set size. Sizes whose index would exceed the
/// size are treated as having probability 0. Throws SearchError after
/// `max_iterations` loop passes.
int required_calibration_size(double delta, double p_target, int precision, double x1, double x2,
                              SearchTrace* trace = nullptr, int max_iterations = 10000);

void save_detector(const Detector& d, const std::filesystem::path& path);
Detector load_detector(const std::filesystem::path& path);

/// One `rho` column with a header line.
void save_scores(const ScoreSet& s, const std::filesystem::path& path);
ScoreSet load_scores(const std::filesystem::path& path);

}  // namespace soda::conformal
