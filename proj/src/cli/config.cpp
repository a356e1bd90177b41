// SPDX-License-Identifier: Apache-2.0
#include "soda/cli.hpp"

#include "soda/conformal.hpp"
#include "soda/errors.hpp"

#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace soda::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json state_json(const mpc::VehicleState& s) {
  return {{"x", s.position.x()}, {"y", s.position.y()}, {"theta", s.theta}, {"V", s.V}, {"kappa", s.kappa}};
}

std::string frame_name(ensemble::InputFrame f) {
  return f == ensemble::InputFrame::Absolute ? "absolute" : "newest_origin";
}

std::string method_name(qp::Method m) { return m == qp::Method::Admm ? "admm" : "interior_point"; }

// Typed reader that reports the dotted key on failure.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

  [[nodiscard]] Reader at(const std::string& key) const {
    if (!j_.contains(key) || !j_.at(key).is_object()) throw FormatError("config key '" + join(key) + "' must be an object");
    return Reader(j_.at(key), join(key));
  }

  template <typename T>
  void get(const std::string& key, T& dst) const {
    try {
      dst = j_.at(key).get<T>();
    } catch (const json::exception&) {
      if (!j_.contains(key)) throw FormatError("config key '" + join(key) + "' is missing");
      throw FormatError("config key '" + join(key) + "' has the wrong type (" + j_.at(key).dump() + ")");
    }
  }

  void path(const std::string& key, fs::path& dst) const {
    std::string s;
    get(key, s);
    dst = s;
  }

  template <typename F>
  void convert(const std::string& key, F&& f) const {
    std::string s;
    get(key, s);
    try {
      f(s);
    } catch (const std::exception& e) {
      throw FormatError("config key '" + join(key) + "': " + e.what());
    }
  }

  void state(const std::string& key, mpc::VehicleState& s) const {
    const auto r = at(key);
    double x = 0.0;
    double y = 0.0;
    r.get("x", x);
    r.get("y", y);
    s.position = {x, y};
    r.get("theta", s.theta);
    r.get("V", s.V);
    r.get("kappa", s.kappa);
  }

 private:
  [[nodiscard]] std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
};

void reject_unknown(const json& user, const json& defaults, const std::string& path) {
  if (!user.is_object()) return;
  if (!defaults.is_object()) throw FormatError("config key '" + path + "' must not be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) throw FormatError("unknown config key '" + p + "'");
    if (value.is_object()) reject_unknown(value, defaults.at(key), p);
  }
}

bool writable_dir(const fs::path& dir) {
  fs::path probe = dir.empty() ? fs::path(".") : dir;
  std::error_code ec;
  while (!fs::exists(probe, ec)) {
    if (!probe.has_parent_path() || probe.parent_path() == probe) {
      probe = ".";
      break;
    }
    probe = probe.parent_path();
  }
  return fs::is_directory(probe, ec) && ::access(probe.c_str(), W_OK) == 0;
}

void need_file(std::vector<std::string>& v, const std::string& field, const fs::path& p) {
  std::error_code ec;
  if (!fs::is_regular_file(p, ec)) v.push_back(field + ": file '" + p.string() + "' does not exist");
}

bool in_open_unit(double x) { return x > 0.0 && x < 1.0; }

}  // namespace

const std::vector<std::string>& commands() {
  static const std::vector<std::string> names{"synth",    "train",     "calibrate",        "simulate",  "batch",
                                              "coverage", "beta-prob", "plan-calibration", "gmm-detect"};
  return names;
}

bool is_command(const std::string& name) {
  const auto& c = commands();
  return std::find(c.begin(), c.end(), name) != c.end();
}

json to_json(const RunConfig& c) {
  const auto& sp = c.synth.params;
  const auto& tc = c.train.config;
  const auto& sc = c.scenario;
  const auto& v = sc.vehicle;
  json modes = json::array();
  for (auto m : c.batch.modes) modes.push_back(sim::to_string(m));
  const auto& g = c.gmm.synth;
  return {
      {"seed", c.seed},
      {"threads", c.threads},
      {"paths",
       {{"output_dir", c.paths.output_dir.string()},
        {"data", c.paths.data.string()},
        {"weights", c.paths.weights.string()},
        {"detector", c.paths.detector.string()},
        {"scores", c.paths.scores.string()},
        {"gmm_predictions", c.paths.gmm_predictions.string()},
        {"gmm_calibration", c.paths.gmm_calibration.string()}}},
      {"synth",
       {{"count", c.synth.count},
        {"params",
         {{"mean_speed", sp.mean_speed},
          {"speed_std", sp.speed_std},
          {"heading_mean", sp.heading_mean},
          {"heading_std", sp.heading_std},
          {"jitter_std", sp.jitter_std},
          {"jitter_correlation", sp.jitter_correlation},
          {"length", sp.length},
          {"crossing_direction_prob", sp.crossing_direction_prob},
          {"start_x_mean", sp.start_x_mean},
          {"start_x_std", sp.start_x_std},
          {"curb_offset", sp.curb_offset},
          {"sample_rate_hz", sp.sample_rate_hz}}}}},
      {"train",
       {{"members", c.train.members},
        {"hidden", c.train.hidden},
        {"window", c.train.window},
        {"n_test", c.train.n_test},
        {"frame", frame_name(c.train.frame)},
        {"learning_rate", tc.learning_rate},
        {"beta1", tc.beta1},
        {"beta2", tc.beta2},
        {"epsilon", tc.epsilon},
        {"batch_size", tc.batch_size},
        {"epochs", tc.epochs}}},
      {"calibrate", {{"delta", c.calibrate.delta}, {"K", c.calibrate.K}, {"decimals", c.calibrate.decimals}}},
      {"scenario",
       {{"steps", sc.steps},
        {"rate_hz", sc.rate_hz},
        {"replan_period", sc.replan_period},
        {"fraud_switch_time", sc.fraud_switch_time},
        {"ped_v_max", sc.ped_v_max},
        {"ped_radius", sc.ped_radius},
        {"start_x_mean", sc.start_x_mean},
        {"start_x_std", sc.start_x_std},
        {"collision_distance", sc.collision_distance},
        {"mode", sim::to_string(sc.mode)},
        {"fraud", sc.fraud},
        {"vehicle",
         {{"initial", state_json(v.initial)},
          {"goal", state_json(v.goal)},
          {"limits",
           {{"v_max", v.limits.v_max},
            {"kappa_max", v.limits.kappa_max},
            {"a_max", v.limits.a_max},
            {"p_max", v.limits.p_max},
            {"road_lo", v.limits.road_lo},
            {"road_hi", v.limits.road_hi},
            {"road_margin", v.limits.road_margin}}},
          {"weights",
           {{"w_pos", v.weights.w_pos},
            {"w_vel", v.weights.w_vel},
            {"w_ctrl", v.weights.w_ctrl},
            {"terminal", v.weights.terminal}}},
          {"pedestrian_margin", v.pedestrian_margin},
          {"agent_radius", v.agent_radius}}},
        {"scp",
         {{"max_iterations", sc.scp.max_iterations},
          {"tolerance", sc.scp.tolerance},
          {"trust_radius", sc.scp.trust_radius},
          {"shrink", sc.scp.shrink},
          {"grow", sc.scp.grow},
          {"min_trust_radius", sc.scp.min_trust_radius},
          {"max_trust_radius", sc.scp.max_trust_radius},
          {"constraint_tolerance", sc.scp.constraint_tolerance},
          {"penalty", sc.scp.penalty},
          {"qp",
           {{"method", method_name(sc.scp.qp.method)},
            {"eps_abs", sc.scp.qp.eps_abs},
            {"eps_rel", sc.scp.qp.eps_rel},
            {"max_iter", sc.scp.qp.max_iter},
            {"ipm_max_iter", sc.scp.qp.ipm_max_iter}}}}}}},
      {"simulate", {{"source_index", c.simulate.source_index}}},
      {"batch",
       {{"trials", c.batch.trials}, {"modes", modes}, {"nominal", c.batch.nominal}, {"fraud", c.batch.fraud}}},
      {"coverage",
       {{"trials", c.coverage.trials},
        {"cal_size", c.coverage.cal_size},
        {"K", c.coverage.K},
        {"eval_trajectories", c.coverage.eval_trajectories}}},
      {"beta_prob",
       {{"N", c.beta_prob.N}, {"delta", c.beta_prob.delta}, {"x1", c.beta_prob.x1}, {"x2", c.beta_prob.x2}}},
      {"plan_calibration",
       {{"delta", c.plan_calibration.delta},
        {"p_target", c.plan_calibration.p_target},
        {"precision", c.plan_calibration.precision},
        {"x1", c.plan_calibration.x1},
        {"x2", c.plan_calibration.x2}}},
      {"gmm",
       {{"C", c.gmm.C},
        {"K", c.gmm.K},
        {"decimals", c.gmm.decimals},
        {"calibration_agents", c.gmm.calibration_agents},
        {"test_agents", c.gmm.test_agents},
        {"test_ood_fraction", c.gmm.test_ood_fraction},
        {"synth",
         {{"steps_per_agent", g.steps_per_agent},
          {"modes", g.modes},
          {"horizon", g.horizon},
          {"base_sigma", g.base_sigma},
          {"sigma_jitter", g.sigma_jitter},
          {"ood_inflation", g.ood_inflation}}}}},
  };
}

RunConfig config_from_json(const json& user) {
  if (!user.is_object()) throw FormatError("config must be a JSON object");
  const RunConfig defaults;
  json doc = to_json(defaults);
  reject_unknown(user, doc, "");
  doc.merge_patch(user);

  RunConfig c;
  const Reader r(doc, "");
  r.get("seed", c.seed);
  r.get("threads", c.threads);

  const auto p = r.at("paths");
  p.path("output_dir", c.paths.output_dir);
  p.path("data", c.paths.data);
  p.path("weights", c.paths.weights);
  p.path("detector", c.paths.detector);
  p.path("scores", c.paths.scores);
  p.path("gmm_predictions", c.paths.gmm_predictions);
  p.path("gmm_calibration", c.paths.gmm_calibration);

  const auto sy = r.at("synth");
  sy.get("count", c.synth.count);
  const auto sp = sy.at("params");
  auto& s = c.synth.params;
  sp.get("mean_speed", s.mean_speed);
  sp.get("speed_std", s.speed_std);
  sp.get("heading_mean", s.heading_mean);
  sp.get("heading_std", s.heading_std);
  sp.get("jitter_std", s.jitter_std);
  sp.get("jitter_correlation", s.jitter_correlation);
  sp.get("length", s.length);
  sp.get("crossing_direction_prob", s.crossing_direction_prob);
  sp.get("start_x_mean", s.start_x_mean);
  sp.get("start_x_std", s.start_x_std);
  sp.get("curb_offset", s.curb_offset);
  sp.get("sample_rate_hz", s.sample_rate_hz);

  const auto tr = r.at("train");
  tr.get("members", c.train.members);
  tr.get("hidden", c.train.hidden);
  tr.get("window", c.train.window);
  tr.get("n_test", c.train.n_test);
  tr.convert("frame", [&](const std::string& f) {
    if (f == "newest_origin") c.train.frame = ensemble::InputFrame::NewestOrigin;
    else if (f == "absolute") c.train.frame = ensemble::InputFrame::Absolute;
    else throw ArgumentError("expected newest_origin or absolute");
  });
  tr.get("learning_rate", c.train.config.learning_rate);
  tr.get("beta1", c.train.config.beta1);
  tr.get("beta2", c.train.config.beta2);
  tr.get("epsilon", c.train.config.epsilon);
  tr.get("batch_size", c.train.config.batch_size);
  tr.get("epochs", c.train.config.epochs);

  const auto ca = r.at("calibrate");
  ca.get("delta", c.calibrate.delta);
  ca.get("K", c.calibrate.K);
  ca.get("decimals", c.calibrate.decimals);

  const auto sc = r.at("scenario");
  auto& S = c.scenario;
  sc.get("steps", S.steps);
  sc.get("rate_hz", S.rate_hz);
  sc.get("replan_period", S.replan_period);
  sc.get("fraud_switch_time", S.fraud_switch_time);
  sc.get("ped_v_max", S.ped_v_max);
  sc.get("ped_radius", S.ped_radius);
  sc.get("start_x_mean", S.start_x_mean);
  sc.get("start_x_std", S.start_x_std);
  sc.get("collision_distance", S.collision_distance);
  sc.convert("mode", [&](const std::string& m) { S.mode = sim::controller_mode_from_string(m); });
  sc.get("fraud", S.fraud);
  const auto ve = sc.at("vehicle");
  ve.state("initial", S.vehicle.initial);
  ve.state("goal", S.vehicle.goal);
  const auto li = ve.at("limits");
  li.get("v_max", S.vehicle.limits.v_max);
  li.get("kappa_max", S.vehicle.limits.kappa_max);
  li.get("a_max", S.vehicle.limits.a_max);
  li.get("p_max", S.vehicle.limits.p_max);
  li.get("road_lo", S.vehicle.limits.road_lo);
  li.get("road_hi", S.vehicle.limits.road_hi);
  li.get("road_margin", S.vehicle.limits.road_margin);
  const auto we = ve.at("weights");
  we.get("w_pos", S.vehicle.weights.w_pos);
  we.get("w_vel", S.vehicle.weights.w_vel);
  we.get("w_ctrl", S.vehicle.weights.w_ctrl);
  we.get("terminal", S.vehicle.weights.terminal);
  ve.get("pedestrian_margin", S.vehicle.pedestrian_margin);
  ve.get("agent_radius", S.vehicle.agent_radius);
  const auto sq = sc.at("scp");
  sq.get("max_iterations", S.scp.max_iterations);
  sq.get("tolerance", S.scp.tolerance);
  sq.get("trust_radius", S.scp.trust_radius);
  sq.get("shrink", S.scp.shrink);
  sq.get("grow", S.scp.grow);
  sq.get("min_trust_radius", S.scp.min_trust_radius);
  sq.get("max_trust_radius", S.scp.max_trust_radius);
  sq.get("constraint_tolerance", S.scp.constraint_tolerance);
  sq.get("penalty", S.scp.penalty);
  const auto qq = sq.at("qp");
  qq.convert("method", [&](const std::string& m) {
    if (m == "interior_point") S.scp.qp.method = qp::Method::InteriorPoint;
    else if (m == "admm") S.scp.qp.method = qp::Method::Admm;
    else throw ArgumentError("expected interior_point or admm");
  });
  qq.get("eps_abs", S.scp.qp.eps_abs);
  qq.get("eps_rel", S.scp.qp.eps_rel);
  qq.get("max_iter", S.scp.qp.max_iter);
  qq.get("ipm_max_iter", S.scp.qp.ipm_max_iter);

  r.at("simulate").get("source_index", c.simulate.source_index);

  const auto ba = r.at("batch");
  ba.get("trials", c.batch.trials);
  std::vector<std::string> modes;
  ba.get("modes", modes);
  c.batch.modes.clear();
  for (const auto& m : modes) {
    try {
      c.batch.modes.push_back(sim::controller_mode_from_string(m));
    } catch (const ArgumentError& e) {
      throw FormatError(std::string("config key 'batch.modes': ") + e.what());
    }
  }
  ba.get("nominal", c.batch.nominal);
  ba.get("fraud", c.batch.fraud);

  const auto co = r.at("coverage");
  co.get("trials", c.coverage.trials);
  co.get("cal_size", c.coverage.cal_size);
  co.get("K", c.coverage.K);
  co.get("eval_trajectories", c.coverage.eval_trajectories);

  const auto bp = r.at("beta_prob");
  bp.get("N", c.beta_prob.N);
  bp.get("delta", c.beta_prob.delta);
  bp.get("x1", c.beta_prob.x1);
  bp.get("x2", c.beta_prob.x2);

  const auto pc = r.at("plan_calibration");
  pc.get("delta", c.plan_calibration.delta);
  pc.get("p_target", c.plan_calibration.p_target);
  pc.get("precision", c.plan_calibration.precision);
  pc.get("x1", c.plan_calibration.x1);
  pc.get("x2", c.plan_calibration.x2);

  const auto gm = r.at("gmm");
  gm.get("C", c.gmm.C);
  gm.get("K", c.gmm.K);
  gm.get("decimals", c.gmm.decimals);
  gm.get("calibration_agents", c.gmm.calibration_agents);
  gm.get("test_agents", c.gmm.test_agents);
  gm.get("test_ood_fraction", c.gmm.test_ood_fraction);
  const auto gs = gm.at("synth");
  gs.get("steps_per_agent", c.gmm.synth.steps_per_agent);
  gs.get("modes", c.gmm.synth.modes);
  gs.get("horizon", c.gmm.synth.horizon);
  gs.get("base_sigma", c.gmm.synth.base_sigma);
  gs.get("sigma_jitter", c.gmm.synth.sigma_jitter);
  gs.get("ood_inflation", c.gmm.synth.ood_inflation);
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (doc.is_object() && doc.contains("config") && doc.contains("command")) return config_from_json(doc["config"]);
  return config_from_json(doc);
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ArgumentError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  std::string pointer;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) {
    if (part.empty()) throw ArgumentError("override key '" + key + "' has an empty component");
    pointer += "/" + part;
  }
  doc[json::json_pointer(pointer)] = value;
}

Paths resolved_paths(const RunConfig& c) {
  Paths p = c.paths;
  const auto& out = c.paths.output_dir;
  if (p.data.empty()) p.data = out / "trajectories.csv";
  if (p.weights.empty()) p.weights = out / "weights.json";
  if (p.detector.empty()) p.detector = out / "detector.json";
  return p;
}

std::vector<std::string> validate_config(const RunConfig& c, const std::string& command) {
  std::vector<std::string> v;
  if (!command.empty() && !is_command(command)) v.push_back("command: unknown command '" + command + "'");
  if (c.threads < 1) v.emplace_back("threads: threads >= 1");

  if (c.paths.output_dir.empty()) v.emplace_back("paths.output_dir: must not be empty");
  else if (!writable_dir(c.paths.output_dir)) v.push_back("paths.output_dir: '" + c.paths.output_dir.string() + "' is not writable");

  if (c.synth.count < 1) v.emplace_back("synth.count: count >= 1");
  for (const auto& m : data::validate(c.synth.params)) v.push_back("synth.params: " + m);

  for (const auto& m : ensemble::validate(c.train.config)) v.push_back("train: " + m);
  if (c.train.members < 2) v.emplace_back("train.members: members >= 2");
  if (c.train.hidden.empty() || std::any_of(c.train.hidden.begin(), c.train.hidden.end(), [](int w) { return w < 1; })) {
    v.emplace_back("train.hidden: at least one layer, every width >= 1");
  }
  if (c.train.window < 1) v.emplace_back("train.window: window >= 1");
  if (c.train.n_test < 0) v.emplace_back("train.n_test: n_test >= 0");

  if (!in_open_unit(c.calibrate.delta)) v.emplace_back("calibrate.delta: delta in (0,1)");
  if (c.calibrate.K < 0) v.emplace_back("calibrate.K: K >= 0 (0 derives K from delta)");
  if (c.calibrate.decimals > 12) v.emplace_back("calibrate.decimals: decimals <= 12");

  for (const auto& m : sim::validate(c.scenario)) v.push_back("scenario: " + m);
  if (c.simulate.source_index < 0) v.emplace_back("simulate.source_index: source_index >= 0");

  if (c.batch.trials < 1) v.emplace_back("batch.trials: trials >= 1");
  if (c.batch.modes.empty()) v.emplace_back("batch.modes: at least one mode");
  if (!c.batch.nominal && !c.batch.fraud) v.emplace_back("batch.nominal: nominal or fraud must be enabled");

  if (c.coverage.trials < 1) v.emplace_back("coverage.trials: trials >= 1");
  if (c.coverage.cal_size < 1) v.emplace_back("coverage.cal_size: cal_size >= 1");
  if (c.coverage.K < 1 || c.coverage.K > c.coverage.cal_size) v.emplace_back("coverage.K: 1 <= K <= cal_size");
  if (c.coverage.eval_trajectories < 1) v.emplace_back("coverage.eval_trajectories: eval_trajectories >= 1");

  if (c.beta_prob.N < 1) v.emplace_back("beta_prob.N: N >= 1");
  if (!in_open_unit(c.beta_prob.delta)) v.emplace_back("beta_prob.delta: delta in (0,1)");
  if (!(0.0 <= c.beta_prob.x1 && c.beta_prob.x1 <= c.beta_prob.x2 && c.beta_prob.x2 <= 1.0)) {
    v.emplace_back("beta_prob.x1: 0 <= x1 <= x2 <= 1");
  }

  if (!in_open_unit(c.plan_calibration.delta)) v.emplace_back("plan_calibration.delta: delta in (0,1)");
  if (!in_open_unit(c.plan_calibration.p_target)) v.emplace_back("plan_calibration.p_target: p_target in (0,1)");
  if (c.plan_calibration.precision < 1) v.emplace_back("plan_calibration.precision: precision >= 1");
  if (!(0.0 <= c.plan_calibration.x1 && c.plan_calibration.x1 < c.plan_calibration.x2 &&
        c.plan_calibration.x2 <= 1.0)) {
    v.emplace_back("plan_calibration.x1: 0 <= x1 < x2 <= 1");
  }

  if (!(c.gmm.C >= 0.0)) v.emplace_back("gmm.C: C >= 0 (0 calibrates)");
  if (c.gmm.K < 1) v.emplace_back("gmm.K: K >= 1");
  if (c.gmm.C == 0.0 && c.paths.gmm_calibration.empty() && c.gmm.K > c.gmm.calibration_agents) {
    v.emplace_back("gmm.K: K <= calibration_agents");
  }
  if (c.gmm.decimals > 12) v.emplace_back("gmm.decimals: decimals <= 12");
  if (c.gmm.calibration_agents < 1) v.emplace_back("gmm.calibration_agents: calibration_agents >= 1");
  if (c.gmm.test_agents < 1) v.emplace_back("gmm.test_agents: test_agents >= 1");
  if (!(c.gmm.test_ood_fraction >= 0.0 && c.gmm.test_ood_fraction <= 1.0)) {
    v.emplace_back("gmm.test_ood_fraction: test_ood_fraction in [0,1]");
  }
  const auto& g = c.gmm.synth;
  if (g.steps_per_agent < 1 || g.modes < 1 || g.horizon < 1) {
    v.emplace_back("gmm.synth: steps_per_agent, modes and horizon >= 1");
  }
  if (!(g.base_sigma > 0.0) || !(g.sigma_jitter >= 0.0) || !(g.ood_inflation > 0.0)) {
    v.emplace_back("gmm.synth: base_sigma > 0, sigma_jitter >= 0, ood_inflation > 0");
  }

  const Paths p = resolved_paths(c);
  if (command == "train") {
    need_file(v, "paths.data", p.data);
  } else if (command == "calibrate") {
    if (!p.scores.empty()) {
      need_file(v, "paths.scores", p.scores);
    } else {
      need_file(v, "paths.data", p.data);
      need_file(v, "paths.weights", p.weights);
    }
  } else if (command == "simulate" || command == "batch") {
    need_file(v, "paths.data", p.data);
    need_file(v, "paths.weights", p.weights);
    need_file(v, "paths.detector", p.detector);
  } else if (command == "coverage") {
    need_file(v, "paths.weights", p.weights);
  } else if (command == "gmm-detect") {
    if (!p.gmm_predictions.empty()) need_file(v, "paths.gmm_predictions", p.gmm_predictions);
    if (!p.gmm_calibration.empty()) need_file(v, "paths.gmm_calibration", p.gmm_calibration);
  }
  return v;
}

std::string config_digest(const RunConfig& c) {
  const std::string text = to_json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace soda::cli
