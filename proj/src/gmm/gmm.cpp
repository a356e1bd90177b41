// SPDX-License-Identifier: Apache-2.0
#include "soda/gmm.hpp"

#include "soda/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

namespace soda::gmm {

namespace {

using nlohmann::json;

constexpr double kSymmetryTolerance = 1e-9;

void check_cov(const Eigen::Matrix2d& c, const std::string& where) {
  if (!c.allFinite()) throw FormatError(where + ": covariance has non-finite entries");
  if (std::fabs(c(0, 1) - c(1, 0)) > kSymmetryTolerance * std::max(1.0, c.cwiseAbs().maxCoeff())) {
    throw FormatError(where + ": covariance is not symmetric");
  }
  const double det = c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0);
  const double tol = -kSymmetryTolerance * std::max(1.0, c.squaredNorm());
  if (c(0, 0) < 0.0 || c(1, 1) < 0.0 || det < tol) throw FormatError(where + ": covariance is not PSD");
}

GmmPrediction parse_record(const json& r) {
  GmmPrediction p;
  p.agent = r.at("agent").is_string() ? r.at("agent").get<std::string>() : r.at("agent").dump();
  p.t = r.at("t").get<int>();
  for (const auto& m : r.at("modes")) {
    GmmMode mode;
    mode.p = m.at("p").get<double>();
    for (const auto& s : m.at("steps")) {
      GmmStep st;
      const auto& mean = s.at("mean");
      const auto& cov = s.at("cov");
      if (mean.size() != 2 || cov.size() != 2 || cov[0].size() != 2 || cov[1].size() != 2) {
        throw FormatError("mean must have 2 entries and cov must be 2x2");
      }
      st.mean = {mean[0].get<double>(), mean[1].get<double>()};
      st.cov << cov[0][0].get<double>(), cov[0][1].get<double>(), cov[1][0].get<double>(), cov[1][1].get<double>();
      mode.steps.push_back(st);
    }
    p.modes.push_back(std::move(mode));
  }
  return p;
}

}  // namespace

void validate(const GmmPrediction& pred) {
  if (pred.modes.empty()) throw FormatError("prediction has no modes");
  double total = 0.0;
  for (std::size_t z = 0; z < pred.modes.size(); ++z) {
    const auto& m = pred.modes[z];
    const std::string where = "mode " + std::to_string(z);
    if (!(m.p >= 0.0) || !std::isfinite(m.p)) throw FormatError(where + ": probability must be finite and >= 0");
    if (m.steps.empty()) throw FormatError(where + ": no steps");
    for (std::size_t k = 0; k < m.steps.size(); ++k) check_cov(m.steps[k].cov, where + " step " + std::to_string(k));
    total += m.p;
  }
  if (std::fabs(total - 1.0) > kProbabilityTolerance) {
    throw FormatError("mode probabilities sum to " + std::to_string(total) + ", expected 1");
  }
}

double gmm_score(const GmmPrediction& pred) {
  validate(pred);
  double rho = 0.0;
  for (const auto& m : pred.modes) {
    const auto& c = m.steps.front().cov;
    rho += m.p * (c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0));
  }
  return std::max(rho, 0.0);
}

bool classify_trajectory(const std::vector<double>& scores, double C) {
  if (scores.empty()) throw ArgumentError("classify_trajectory: empty score list");
  return *std::max_element(scores.begin(), scores.end()) > C;
}

std::map<std::string, std::vector<double>> scores_by_agent(const std::vector<GmmPrediction>& preds) {
  std::map<std::string, std::vector<std::pair<int, double>>> tmp;
  for (const auto& p : preds) tmp[p.agent].emplace_back(p.t, gmm_score(p));
  std::map<std::string, std::vector<double>> out;
  for (auto& [agent, v] : tmp) {
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    auto& dst = out[agent];
    for (const auto& e : v) dst.push_back(e.second);
  }
  return out;
}

std::vector<GmmPrediction> load_gmm_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw FormatError(path.string() + ": expected a JSON array of records");
  std::vector<GmmPrediction> out;
  out.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    try {
      auto p = parse_record(doc[i]);
      validate(p);
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ": record " + std::to_string(i) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ": record " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

void save_gmm_predictions(const std::vector<GmmPrediction>& preds, const std::filesystem::path& path) {
  json doc = json::array();
  for (const auto& p : preds) {
    json modes = json::array();
    for (const auto& m : p.modes) {
      json steps = json::array();
      for (const auto& s : m.steps) {
        steps.push_back({{"mean", {s.mean.x(), s.mean.y()}},
                         {"cov", {{s.cov(0, 0), s.cov(0, 1)}, {s.cov(1, 0), s.cov(1, 1)}}}});
      }
      modes.push_back({{"p", m.p}, {"steps", steps}});
    }
    doc.push_back({{"agent", p.agent}, {"t", p.t}, {"modes", modes}});
  }
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << doc.dump() << '\n';
}

std::vector<GmmPrediction> synth_gmm_predictions(const SynthGmmParams& params, std::uint64_t seed,
                                                 std::map<std::string, bool>* ood_agents) {
  if (params.agents < 0 || params.steps_per_agent < 1 || params.modes < 1 || params.horizon < 1) {
    throw ArgumentError("synth_gmm: agents >= 0, steps_per_agent, modes and horizon >= 1 required");
  }
  if (!(params.base_sigma > 0.0) || !(params.sigma_jitter >= 0.0) || !(params.ood_inflation > 0.0) ||
      !(params.ood_fraction >= 0.0 && params.ood_fraction <= 1.0)) {
    throw ArgumentError("synth_gmm: sigma > 0, jitter >= 0, inflation > 0 and ood_fraction in [0, 1] required");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<GmmPrediction> out;
  for (int a = 0; a < params.agents; ++a) {
    const std::string id = "agent" + std::to_string(a);
    const bool ood = uni(rng) < params.ood_fraction;
    if (ood_agents) (*ood_agents)[id] = ood;
    const double infl = ood ? params.ood_inflation : 1.0;
    for (int t = 0; t < params.steps_per_agent; ++t) {
      GmmPrediction p;
      p.agent = id;
      p.t = t;
      std::vector<double> w(static_cast<std::size_t>(params.modes));
      double total = 0.0;
      for (auto& x : w) total += (x = -std::log(1.0 - uni(rng)));
      for (int z = 0; z < params.modes; ++z) {
        GmmMode m;
        m.p = w[static_cast<std::size_t>(z)] / total;
        const double sx = params.base_sigma * std::exp(params.sigma_jitter * unit(rng));
        const double sy = params.base_sigma * std::exp(params.sigma_jitter * unit(rng));
        const double corr = 0.5 * std::tanh(unit(rng));
        const Eigen::Vector2d v(std::cos(uni(rng) * 6.283185307179586), std::sin(uni(rng) * 6.283185307179586));
        Eigen::Vector2d pos = Eigen::Vector2d::Zero();
        for (int k = 1; k <= params.horizon; ++k) {
          pos += 0.05 * v;
          GmmStep s;
          s.mean = pos;
          s.cov << sx * sx, corr * sx * sy, corr * sx * sy, sy * sy;
          s.cov *= infl * k;
          m.steps.push_back(s);
        }
        p.modes.push_back(std::move(m));
      }
      // renormalize so the stored probabilities sum to one after rounding in JSON
      double sum = 0.0;
      for (const auto& m : p.modes) sum += m.p;
      for (auto& m : p.modes) m.p /= sum;
      out.push_back(std::move(p));
    }
  }
  return out;
}

}  // namespace soda::gmm
