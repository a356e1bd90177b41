// SPDX-License-Identifier: Apache-2.0
#include "soda/cli.hpp"
#include "soda/conformal.hpp"
#include "soda/errors.hpp"

#include "doctest.h"
#include "support/tmp.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

using namespace soda;

namespace {

bool has_message(const std::vector<std::string>& v, const std::string& needle) {
  return std::any_of(v.begin(), v.end(), [&](const std::string& s) { return s.find(needle) != std::string::npos; });
}

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST_CASE("command table") {
  CHECK(cli::commands().size() == 9);
  CHECK(cli::is_command("beta-prob"));
  CHECK_FALSE(cli::is_command("fly"));
}

TEST_CASE("default config validates; violations name the field") {
  cli::RunConfig c;
  CHECK(cli::validate_config(c).empty());
  c.calibrate.delta = 1.5;
  const auto errs = cli::validate_config(c);
  CHECK(has_message(errs, "calibrate.delta"));

  test::TempDir dir;
  cli::RunConfig t;
  t.paths.output_dir = dir.path();
  CHECK(has_message(cli::validate_config(t, "train"), "paths.data"));
}

TEST_CASE("json round trip, unknown keys, overrides") {
  cli::RunConfig c;
  c.seed = 42;
  c.train.config.epochs = 7;
  c.calibrate.delta = 0.05;
  const auto j = cli::to_json(c);
  const auto back = cli::config_from_json(j);
  CHECK(back.seed == 42);
  CHECK(back.train.config.epochs == 7);
  CHECK(back.calibrate.delta == 0.05);
  CHECK(cli::config_digest(back) == cli::config_digest(c));

  auto bad = j;
  bad["calibrate"]["delt"] = 0.1;
  try {
    (void)cli::config_from_json(bad);
    FAIL("unknown key accepted");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("delt") != std::string::npos);
  }

  auto doc = j;
  cli::apply_override(doc, "train.epochs=3");
  CHECK(cli::config_from_json(doc).train.config.epochs == 3);
  CHECK_THROWS(cli::apply_override(doc, "no_equals_sign"));
}

TEST_CASE("beta-prob prints the probability and writes a manifest") {
  test::TempDir dir;
  cli::RunConfig c;
  c.paths.output_dir = dir.path();
  std::ostringstream out, err;
  REQUIRE(cli::dispatch("beta-prob", c, out, err) == 0);
  CHECK(out.str().find("0.8965") != std::string::npos);
  const auto m = read_json(dir / "beta-prob.manifest.json");
  CHECK(m.at("command") == "beta-prob");
  CHECK(m.at("version") == cli::kVersion);
  CHECK(m.at("config_digest") == cli::config_digest(c));
  // a manifest doubles as a config
  const auto again = cli::load_config(dir / "beta-prob.manifest.json");
  CHECK(cli::config_digest(again) == cli::config_digest(c));
}

TEST_CASE("calibrate from a score file") {
  test::TempDir dir;
  std::string text = "rho\n";
  for (int i = 1; i <= 100; ++i) text += std::to_string(i * 0.001) + "\n";
  dir.write("s.csv", text);
  cli::RunConfig c;
  c.paths.output_dir = dir.path();
  c.paths.scores = dir / "s.csv";
  std::ostringstream out, err;
  REQUIRE(cli::dispatch("calibrate", c, out, err) == 0);
  const auto d = conformal::load_detector(dir / "detector.json");
  CHECK(d.K == 97);
  CHECK(d.N == 100);
  CHECK(d.C == doctest::Approx(0.097));
}

TEST_CASE("errors map to exit codes") {
  test::TempDir dir;
  cli::RunConfig c;
  c.paths.output_dir = dir.path();
  std::ostringstream out, err;
  CHECK(cli::dispatch("fly", c, out, err) == 2);
  CHECK(cli::dispatch("train", c, out, err) == 2);  // no data file
  CHECK(err.str().find("paths.data") != std::string::npos);
}

TEST_CASE("synth -> train -> calibrate chain is deterministic") {
  auto run = [](const std::filesystem::path& dir) {
    cli::RunConfig c;
    c.paths.output_dir = dir;
    c.synth.count = 30;
    c.train.n_test = 2;
    c.calibrate.delta = 0.1;
    c.train.members = 3;
    c.train.config.epochs = 2;
    std::ostringstream out, err;
    for (const char* cmd : {"synth", "train", "calibrate"}) {
      INFO(cmd << ": " << err.str());
      REQUIRE(cli::dispatch(cmd, c, out, err) == 0);
    }
    return conformal::load_detector(dir / "detector.json");
  };
  test::TempDir a, b;
  const auto da = run(a.path());
  const auto db = run(b.path());
  CHECK(da.C == db.C);
  CHECK(da.score_digest == db.score_digest);
  CHECK(da.N >= 10);
}
