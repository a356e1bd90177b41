// SPDX-License-Identifier: Apache-2.0
#include "soda/cli.hpp"
#include "soda/errors.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>

int main(int argc, char** argv) {
  using namespace soda::cli;
  CLI::App app{"Runtime OOD monitoring with conformal calibration for a planning stack"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", std::string(kVersion));

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string output_dir;
  std::string data;
  std::string weights;
  std::string detector;
  bool print_config = false;

  app.add_option("-c,--config", config_path, "JSON config or run manifest")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Override a config field, e.g. --set calibrate.delta=0.05");
  app.add_option("--seed", seed, "Seed for every random stream");
  app.add_option("--threads", threads, "Worker thread cap");
  app.add_option("-o,--output-dir", output_dir, "Artifact directory");
  app.add_option("--data", data, "Trajectory CSV");
  app.add_option("--weights", weights, "Ensemble weights JSON");
  app.add_option("--detector", detector, "Detector JSON");
  app.add_flag("--print-config", print_config, "Print the effective config and exit");
  app.fallthrough();

  const char* help[] = {
      "Generate synthetic pedestrian crossings",
      "Train the prediction ensemble",
      "Score calibration pairs and fit the detector threshold",
      "Run one closed-loop scenario",
      "Run seeded scenario batches for every controller",
      "Empirical coverage distribution over fresh calibration sets",
      "Probability that coverage lies in a band",
      "Smallest calibration size meeting a coverage probability target",
      "Classify GMM prediction tracks against a calibrated threshold",
  };
  for (std::size_t i = 0; i < commands().size(); ++i) app.add_subcommand(commands()[i], help[i]);

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  RunConfig cfg;
  try {
    nlohmann::json doc = config_path.empty() ? to_json(RunConfig{}) : to_json(load_config(config_path));
    if (seed) doc["seed"] = *seed;
    if (threads) doc["threads"] = *threads;
    if (!output_dir.empty()) doc["paths"]["output_dir"] = output_dir;
    if (!data.empty()) doc["paths"]["data"] = data;
    if (!weights.empty()) doc["paths"]["weights"] = weights;
    if (!detector.empty()) doc["paths"]["detector"] = detector;
    for (const auto& o : overrides) apply_override(doc, o);
    cfg = config_from_json(doc);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }
  if (print_config) {
    std::cout << to_json(cfg).dump(2) << '\n';
    return 0;
  }
  return dispatch(command, cfg, std::cout, std::cerr);
}
