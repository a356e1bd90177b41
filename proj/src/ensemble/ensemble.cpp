// SPDX-License-Identifier: Apache-2.0
#include "soda/ensemble.hpp"

#include "soda/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <thread>

namespace soda::ensemble {

namespace {

constexpr int kWeightFormatVersion = 1;
constexpr std::uint64_t kShuffleStream = 0x9E3779B97F4A7C15ULL;

const char* frame_name(InputFrame f) { return f == InputFrame::Absolute ? "absolute" : "newest_origin"; }

InputFrame parse_frame(const std::string& s) {
  if (s == "absolute") return InputFrame::Absolute;
  if (s == "newest_origin") return InputFrame::NewestOrigin;
  throw FormatError("unknown input frame '" + s + "'");
}

// Per-column origin of the frame: the newest window position or the fixed offset.
Eigen::Matrix2Xd frame_origins(const FrameTransform& frame, const Eigen::MatrixXd& windows) {
  const auto n = windows.cols();
  Eigen::Matrix2Xd origins(2, n);
  if (frame.mode == InputFrame::NewestOrigin) {
    origins = windows.bottomRows(2);
  } else {
    origins.colwise() = frame.offset;
  }
  return origins;
}

}  // namespace

std::vector<std::string> validate(const TrainConfig& cfg) {
  std::vector<std::string> v;
  if (!(cfg.learning_rate > 0.0)) v.emplace_back("train.learning_rate must be > 0");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0)) v.emplace_back("train.beta1 must be in [0,1)");
  if (!(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) v.emplace_back("train.beta2 must be in [0,1)");
  if (!(cfg.epsilon > 0.0)) v.emplace_back("train.epsilon must be > 0");
  if (cfg.batch_size < 1) v.emplace_back("train.batch_size must be >= 1");
  if (cfg.epochs < 1) v.emplace_back("train.epochs must be >= 1");
  if (cfg.threads < 1) v.emplace_back("train.threads must be >= 1");
  return v;
}

Ensemble::Ensemble(std::vector<nn::Mlp> members, std::vector<std::uint64_t> seeds, int window,
                   FrameTransform frame)
    : members_(std::move(members)), seeds_(std::move(seeds)), window_(window), frame_(frame) {
  if (members_.size() < 2) throw ArgumentError("an ensemble needs n >= 2 members");
  if (seeds_.size() != members_.size()) throw ArgumentError("one seed per ensemble member required");
  for (std::size_t i = 0; i < members_.size(); ++i) {
    if (members_[i].input_size() != 2 * window_ || members_[i].output_size() != 2) {
      throw ArgumentError("member " + std::to_string(i) + " does not map 2*window inputs to 2 outputs");
    }
  }
  if (!(frame_.scale > 0.0)) throw ArgumentError("frame scale must be positive");
}

Eigen::MatrixXd Ensemble::to_network_inputs(const Eigen::MatrixXd& windows) const {
  const Eigen::Matrix2Xd origins = frame_origins(frame_, windows);
  Eigen::MatrixXd out(windows.rows(), windows.cols());
  for (int j = 0; j < window_; ++j) out.middleRows(2 * j, 2) = windows.middleRows(2 * j, 2) - origins;
  return out / frame_.scale;
}

Eigen::MatrixXd Ensemble::to_network_targets(const Eigen::MatrixXd& windows,
                                             const Eigen::MatrixXd& targets) const {
  return (targets - frame_origins(frame_, windows)) / frame_.scale;
}

Eigen::MatrixXd Ensemble::from_network_outputs(const Eigen::MatrixXd& windows,
                                               const Eigen::MatrixXd& outputs) const {
  return outputs * frame_.scale + frame_origins(frame_, windows);
}

Eigen::MatrixXd Ensemble::member_predict(std::size_t member, const Eigen::MatrixXd& windows) const {
  return from_network_outputs(windows, members_.at(member).forward(to_network_inputs(windows)));
}

Ensemble init_ensemble(int n, const std::vector<std::uint64_t>& seeds, int window,
                       const std::vector<int>& hidden, FrameTransform frame) {
  if (n < 2) throw ArgumentError("init_ensemble: n must be >= 2 for an unbiased covariance");
  if (static_cast<std::size_t>(n) != seeds.size()) throw ArgumentError("init_ensemble: n must equal len(seeds)");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ArgumentError("init_ensemble: seeds must be pairwise distinct");
  }
  if (window < 1) throw ArgumentError("init_ensemble: window must be positive");
  std::vector<int> widths{2 * window};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(2);
  std::vector<nn::Mlp> members;
  members.reserve(seeds.size());
  for (const auto s : seeds) members.push_back(nn::Mlp::initialized(widths, s));
  return Ensemble(std::move(members), seeds, window, frame);
}

FrameTransform fit_frame(const std::vector<data::DataPair>& pairs, InputFrame mode) {
  if (pairs.empty()) throw ArgumentError("fit_frame: no pairs");
  FrameTransform frame;
  frame.mode = mode;
  if (mode == InputFrame::Absolute) {
    Point sum = Point::Zero();
    double count = 0.0;
    for (const auto& p : pairs) {
      for (int j = 0; j < p.window(); ++j) sum += p.input.segment<2>(2 * j);
      count += p.window();
    }
    frame.offset = sum / count;
  }
  double sq = 0.0;
  double count = 0.0;
  for (const auto& p : pairs) {
    const Point origin = mode == InputFrame::NewestOrigin ? Point(p.input.tail<2>()) : frame.offset;
    for (int j = 0; j < p.window(); ++j) {
      sq += (p.input.segment<2>(2 * j) - origin).squaredNorm();
      count += 2.0;
    }
  }
  const double rms = std::sqrt(sq / count);
  frame.scale = rms > 1e-12 ? rms : 1.0;
  return frame;
}

Ensemble train_ensemble(const Ensemble& e, const std::vector<data::DataPair>& pairs,
                        const TrainConfig& cfg, TrainReport* report) {
  if (pairs.empty()) throw ArgumentError("train_ensemble: no training pairs");
  if (const auto v = validate(cfg); !v.empty()) throw ArgumentError(v.front());
  const int window = e.window();
  const auto n = static_cast<Eigen::Index>(pairs.size());
  Eigen::MatrixXd windows(2 * window, n);
  Eigen::MatrixXd targets(2, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    if (p.window() != window) throw ArgumentError("train_ensemble: pair window does not match ensemble");
    windows.col(i) = p.input;
    targets.col(i) = p.target;
  }
  const Eigen::MatrixXd inputs = e.to_network_inputs(windows);
  const Eigen::MatrixXd net_targets = e.to_network_targets(windows, targets);
  const Eigen::Index probe_n = std::min<Eigen::Index>(256, n);
  const double scale2 = e.frame().scale * e.frame().scale;

  Ensemble out = e;
  std::vector<std::vector<double>> history(e.size());
  std::vector<std::exception_ptr> failures(e.size());

  auto train_member = [&](std::size_t m) {
    try {
      nn::Mlp& model = out.members()[m];
      nn::Adam adam(model, {cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon});
      std::mt19937_64 rng(e.seeds()[m] ^ kShuffleStream);
      std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
      std::iota(order.begin(), order.end(), Eigen::Index{0});
      auto probe = [&] {
        return model.mse(inputs.leftCols(probe_n), net_targets.leftCols(probe_n)) * scale2;
      };
      history[m].push_back(probe());

      nn::Gradients grads;
      Eigen::MatrixXd xb(inputs.rows(), cfg.batch_size);
      Eigen::MatrixXd yb(2, cfg.batch_size);
      for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
          const Eigen::Index b = std::min<Eigen::Index>(cfg.batch_size, n - start);
          xb.resize(inputs.rows(), b);
          yb.resize(2, b);
          for (Eigen::Index k = 0; k < b; ++k) {
            xb.col(k) = inputs.col(order[static_cast<std::size_t>(start + k)]);
            yb.col(k) = net_targets.col(order[static_cast<std::size_t>(start + k)]);
          }
          const double loss = model.loss_and_gradients(xb, yb, grads);
          if (!std::isfinite(loss)) {
            throw TrainingError("member " + std::to_string(m) + ": non-finite loss in epoch " +
                                    std::to_string(epoch),
                                epoch);
          }
          adam.step(model, grads);
        }
        const double probe_mse = probe();
        if (!std::isfinite(probe_mse) || !model.all_finite()) {
          throw TrainingError("member " + std::to_string(m) + ": diverged in epoch " + std::to_string(epoch),
                              epoch);
        }
        history[m].push_back(probe_mse);
      }
    } catch (...) {
      failures[m] = std::current_exception();
    }
  };

  const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(cfg.threads, static_cast<int>(e.size()))));
  if (workers == 1) {
    for (std::size_t m = 0; m < e.size(); ++m) train_member(m);
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        while (true) {
          std::size_t m = 0;
          {
            std::lock_guard lock(mu);
            if (next >= e.size()) return;
            m = next++;
          }
          train_member(m);
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }
  if (report != nullptr) report->probe_mse = std::move(history);
  return out;
}

PredictionStats stats_from_outputs(const std::vector<Point>& outputs) {
  const auto n = outputs.size();
  if (n < 2) throw ArgumentError("stats_from_outputs: need at least two outputs");
  PredictionStats s;
  for (const auto& o : outputs) s.mean += o;
  s.mean /= static_cast<double>(n);
  double c00 = 0.0;
  double c01 = 0.0;
  double c11 = 0.0;
  for (const auto& o : outputs) {
    const Point d = o - s.mean;
    c00 += d.x() * d.x();
    c01 += d.x() * d.y();
    c11 += d.y() * d.y();
  }
  const double denom = static_cast<double>(n - 1);
  s.covariance << c00 / denom, c01 / denom, c01 / denom, c11 / denom;
  return s;
}

std::vector<PredictionStats> ensemble_stats_batch(const Ensemble& e, const Eigen::MatrixXd& windows) {
  if (windows.rows() != 2 * e.window()) throw ArgumentError("ensemble_stats: window has wrong length");
  const Eigen::MatrixXd inputs = e.to_network_inputs(windows);
  std::vector<Eigen::MatrixXd> outs;
  outs.reserve(e.size());
  for (const auto& m : e.members()) outs.push_back(e.from_network_outputs(windows, m.forward(inputs)));

  std::vector<PredictionStats> stats(static_cast<std::size_t>(windows.cols()));
  std::vector<Point> col(e.size());
  for (Eigen::Index c = 0; c < windows.cols(); ++c) {
    for (std::size_t m = 0; m < e.size(); ++m) col[m] = outs[m].col(c);
    stats[static_cast<std::size_t>(c)] = stats_from_outputs(col);
  }
  return stats;
}

PredictionStats ensemble_stats(const Ensemble& e, const Eigen::VectorXd& window) {
  if (window.size() != 2 * e.window()) throw ArgumentError("ensemble_stats: window has wrong length");
  if (!window.allFinite()) throw ArgumentError("ensemble_stats: window has non-finite entries");
  return ensemble_stats_batch(e, window).front();
}

Eigen::VectorXd window_from(const std::vector<Point>& positions, std::size_t end, int window) {
  if (end < static_cast<std::size_t>(window) || end > positions.size()) {
    throw ArgumentError("window_from: not enough positions");
  }
  Eigen::VectorXd w(2 * window);
  const std::size_t first = end - static_cast<std::size_t>(window);
  for (int j = 0; j < window; ++j) w.segment<2>(2 * j) = positions[first + static_cast<std::size_t>(j)];
  return w;
}

std::vector<RolloutStep> rollout(const Ensemble& e, const std::vector<Point>& history, int horizon,
                                 const RolloutOptions& opts) {
  if (horizon < 1) throw ArgumentError("rollout: horizon must be >= 1");
  if (history.empty()) throw ArgumentError("rollout: history must contain at least one position");
  if (!(opts.sample_rate_hz > 0.0)) throw ArgumentError("rollout: sample rate must be positive");

  const auto window = static_cast<std::size_t>(e.window());
  std::vector<Point> seq = history;
  seq.reserve(history.size() + static_cast<std::size_t>(horizon));
  const double dn = opts.crossing_direction.norm();
  const Point dir = dn > 0.0 ? Point(opts.crossing_direction / dn) : Point(0.0, -1.0);
  const Point bootstrap_step = dir * (opts.bootstrap_speed / opts.sample_rate_hz);

  std::vector<RolloutStep> out;
  out.reserve(static_cast<std::size_t>(horizon));
  for (int k = 0; k < horizon; ++k) {
    RolloutStep step;
    if (seq.size() < window) {
      step.position = seq.back() + bootstrap_step;
      step.stats.mean = step.position;
      step.bootstrapped = true;
    } else {
      step.stats = ensemble_stats(e, window_from(seq, seq.size(), e.window()));
      step.position = step.stats.mean;
    }
    seq.push_back(step.position);
    out.push_back(step);
  }
  return out;
}

void save_weights(const Ensemble& e, const std::filesystem::path& path) {
  nlohmann::json doc;
  doc["version"] = kWeightFormatVersion;
  doc["n"] = e.size();
  doc["window"] = e.window();
  doc["seeds"] = e.seeds();
  doc["frame"] = {{"mode", frame_name(e.frame().mode)},
                  {"offset", {e.frame().offset.x(), e.frame().offset.y()}},
                  {"scale", e.frame().scale}};
  auto& members = doc["members"] = nlohmann::json::array();
  for (const auto& m : e.members()) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : m.layers()) {
      std::vector<double> w;
      w.reserve(static_cast<std::size_t>(l.weights.size()));
      for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
        for (Eigen::Index c = 0; c < l.weights.cols(); ++c) w.push_back(l.weights(r, c));
      }
      layers.push_back({{"rows", l.weights.rows()},
                        {"cols", l.weights.cols()},
                        {"weights", w},
                        {"biases", std::vector<double>(l.biases.data(), l.biases.data() + l.biases.size())}});
    }
    members.push_back({{"layers", layers}});
  }
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write weight file " + path.string());
  out << doc.dump(1) << '\n';
}

Ensemble load_weights(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open weight file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("weight file " + path.string() + ": " + ex.what());
  }
  try {
    if (doc.at("version").get<int>() != kWeightFormatVersion) {
      throw FormatError("weight file: unsupported version " + doc.at("version").dump());
    }
    const int window = doc.at("window").get<int>();
    const auto n = doc.at("n").get<std::size_t>();
    const auto seeds = doc.at("seeds").get<std::vector<std::uint64_t>>();
    FrameTransform frame;
    frame.mode = parse_frame(doc.at("frame").at("mode").get<std::string>());
    const auto off = doc.at("frame").at("offset").get<std::vector<double>>();
    if (off.size() != 2) throw FormatError("weight file: frame offset must have two entries");
    frame.offset = Point(off[0], off[1]);
    frame.scale = doc.at("frame").at("scale").get<double>();

    const auto& members_doc = doc.at("members");
    if (members_doc.size() != n || seeds.size() != n) {
      throw FormatError("weight file: n does not match the number of members/seeds");
    }
    std::vector<nn::Mlp> members;
    for (std::size_t m = 0; m < n; ++m) {
      std::vector<nn::DenseLayer> layers;
      const auto& layers_doc = members_doc[m].at("layers");
      for (std::size_t li = 0; li < layers_doc.size(); ++li) {
        const auto& ld = layers_doc[li];
        const auto rows = ld.at("rows").get<Eigen::Index>();
        const auto cols = ld.at("cols").get<Eigen::Index>();
        const auto w = ld.at("weights").get<std::vector<double>>();
        const auto b = ld.at("biases").get<std::vector<double>>();
        const std::string where = "member " + std::to_string(m) + " layer " + std::to_string(li);
        const Eigen::Index expected_cols = li == 0 ? 2 * window : layers.back().weights.rows();
        if (rows <= 0 || cols != expected_cols || w.size() != static_cast<std::size_t>(rows * cols) ||
            b.size() != static_cast<std::size_t>(rows)) {
          throw FormatError("weight file: shape mismatch in " + where);
        }
        nn::DenseLayer layer{Eigen::MatrixXd(rows, cols), Eigen::VectorXd(rows)};
        for (Eigen::Index r = 0; r < rows; ++r) {
          for (Eigen::Index c = 0; c < cols; ++c) layer.weights(r, c) = w[static_cast<std::size_t>(r * cols + c)];
          layer.biases(r) = b[static_cast<std::size_t>(r)];
        }
        layers.push_back(std::move(layer));
      }
      if (layers.empty() || layers.back().weights.rows() != 2) {
        throw FormatError("weight file: member " + std::to_string(m) + " output layer must have 2 rows");
      }
      members.emplace_back(std::move(layers));
    }
    return Ensemble(std::move(members), seeds, window, frame);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("weight file " + path.string() + ": " + ex.what());
  } catch (const ArgumentError& ex) {
    throw FormatError("weight file " + path.string() + ": " + ex.what());
  }
}

}  // namespace soda::ensemble
