// Command-line front end for the experiment runner.
//
//   mixmatch run <config>
//   mixmatch ablate <preset> <base-config>
//   mixmatch eval <checkpoint> <config>
//
// MIXMATCH_OUTPUT_ROOT overrides the config's `output` directory.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mixmatch/mixmatch.hpp"

namespace {

mixmatch::ExperimentConfig read_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return mixmatch::parse_config(ss.str());
  } catch (const mixmatch::ConfigError& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

std::filesystem::path output_root(const mixmatch::ExperimentConfig& c) {
  if (const char* env = std::getenv("MIXMATCH_OUTPUT_ROOT"); env && *env) return env;
  return c.output;
}

int report(const mixmatch::ExperimentResult& r) {
  for (const auto& run : r.runs) {
    std::cout << "seed " << run.seed << ": ";
    if (run.ok)
      std::cout << "median error " << run.median_error * 100 << "%" << (run.reused ? " (reused)" : "")
                << "\n";
    else
      std::cout << "FAILED: " << run.error << "\n";
  }
  std::cout << "mean " << r.mean_error * 100 << "% std " << r.std_error * 100 << "%\n"
            << "results in " << r.dir.string() << "\n";
  return r.all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MixMatch semi-supervised learning experiments"};
  app.require_subcommand(1);

  std::string config_path, preset, checkpoint_path;
  auto* run = app.add_subcommand("run", "train one run per configured seed");
  run->add_option("config", config_path, "config file")->required();

  auto* ablate = app.add_subcommand("ablate", "run a MixMatch config with an ablation preset applied");
  ablate->add_option("preset", preset, "preset name")->required();
  ablate->add_option("base-config", config_path, "base config file")->required();

  auto* eval = app.add_subcommand("eval", "test error of a saved checkpoint");
  eval->add_option("checkpoint", checkpoint_path, "checkpoint file")->required();
  eval->add_option("config", config_path, "config the checkpoint was trained with")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    auto config = read_config(config_path);
    if (*run) return report(mixmatch::run_experiment(config, output_root(config)));
    if (*ablate) {
      if (config.train.method != mixmatch::Method::mixmatch)
        throw std::runtime_error("ablation presets require method = mixmatch");
      config = mixmatch::apply_delta(config, mixmatch::ablation_preset(preset));
      return report(mixmatch::run_experiment(config, output_root(config)));
    }
    const auto data = mixmatch::load_data(config);
    const auto spec = mixmatch::model_spec(config, data.train);
    const auto params = mixmatch::load_checkpoint(checkpoint_path);
    const auto expected = mixmatch::init_params<float>(spec, 0);
    if (!params.same_structure(expected))
      throw std::runtime_error("checkpoint does not match the model described by " + config_path);
    const double err = mixmatch::evaluate(spec, params, data.test);
    std::cout << "test error " << err * 100 << "% on " << data.test.size() << " examples\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
