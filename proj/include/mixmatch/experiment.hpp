#pragma once

// Experiment runner: builds data for a config, trains one run per seed and
// writes per-run metrics plus a cross-seed summary.
//
// Layout under the output root:
//   <config-hash>/manifest.txt
//   <config-hash>/summary.json
//   <config-hash>/seed_<s>/{manifest.txt, metrics.csv, log.csv, checkpoint.mmckpt}
// Run directories are keyed by config hash and seed, so rerunning a config
// reuses finished runs instead of overwriting them.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mixmatch/checkpoint.hpp"
#include "mixmatch/config.hpp"
#include "mixmatch/data.hpp"
#include "mixmatch/train.hpp"

namespace mixmatch {

inline constexpr std::string_view artifact_version = "mixmatch-lab 1.0.0";

struct ExperimentData {
  Dataset train;
  Dataset test;
};

/// Training pool and a disjoint test set, both determined by data_seed.
inline ExperimentData load_data(const ExperimentConfig& c) {
  switch (c.dataset) {
    case DatasetKind::two_moons:
      return {gen_two_moons(c.n_train, c.noise, Stream::derive(c.data_seed, "data.train").key()),
              gen_two_moons(c.n_test, c.noise, Stream::derive(c.data_seed, "data.test").key())};
    case DatasetKind::shapes:
      return {gen_shapes(c.n_train, c.image_side, c.classes, c.noise,
                         Stream::derive(c.data_seed, "data.train").key()),
              gen_shapes(c.n_test, c.image_side, c.classes, c.noise,
                         Stream::derive(c.data_seed, "data.test").key())};
    case DatasetKind::idx:
      return {load_idx(c.idx_train_images, c.idx_train_labels),
              load_idx(c.idx_test_images, c.idx_test_labels)};
  }
  throw std::logic_error("unreachable dataset kind");
}

inline ModelSpec model_spec(const ExperimentConfig& c, const Dataset& d) {
  ModelSpec spec;
  spec.arch = c.model;
  spec.input_shape = d.example_shape;
  spec.classes = d.classes;
  spec.hidden = c.hidden;
  spec.channels = c.channels;
  spec.validate();
  return spec;
}

/// Training parameters with the augmentation kind matched to the features.
inline TrainConfig train_config(const ExperimentConfig& c, const Dataset& d) {
  TrainConfig t = c.train;
  t.augment.kind = d.example_shape.size() == 1 ? AugmentKind::jitter2d : AugmentKind::image_flip_crop;
  return t;
}

// ---------------------------------------------------------------------------
// Files

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  const auto d = detail::format_double;
  std::string out = "step,lambda_u,loss_x,loss_u,loss_total,ema_test_error\n";
  for (const auto& r : rows)
    out += std::to_string(r.step) + ',' + d(r.lambda_u) + ',' + d(r.loss_x) + ',' + d(r.loss_u) +
           ',' + d(r.loss_total) + ',' + d(r.ema_test_error) + '\n';
  return out;
}

inline std::string checkpoint_log_csv(const CheckpointLog& log) {
  std::string out = "step,error_rate\n";
  for (const auto& e : log.entries)
    out += std::to_string(e.step) + ',' + detail::format_double(e.error_rate) + '\n';
  return out;
}

inline CheckpointLog parse_checkpoint_log_csv(std::string_view text) {
  CheckpointLog log;
  std::istringstream in{std::string(text)};
  std::string line;
  std::getline(in, line);
  if (line != "step,error_rate") throw std::runtime_error("log.csv: unexpected header '" + line + "'");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error("log.csv: malformed row '" + line + "'");
    log.append(std::stoull(line.substr(0, comma)), std::stod(line.substr(comma + 1)));
  }
  return log;
}

/// Per-run manifest; independent of the seed list, output root and job count
/// so that a finished run is recognized from any of them.
inline std::string run_manifest(const ExperimentConfig& c, std::uint64_t seed) {
  return std::string("version = ") + std::string(artifact_version) + "\nconfig_hash = " +
         config_hash(c) + "\nrun_seed = " + std::to_string(seed) + "\n\n" + serialize(run_key(c));
}

// ---------------------------------------------------------------------------
// Runs

struct SeedRun {
  std::uint64_t seed = 0;
  bool ok = false;
  bool reused = false;
  std::string error;
  double median_error = 0;
  CheckpointLog log;
  std::filesystem::path dir;
};

struct ExperimentResult {
  std::filesystem::path dir;
  std::vector<SeedRun> runs;
  double mean_error = 0;
  double std_error = 0;  // sample standard deviation over successful runs
  bool all_ok = true;
};

/// Trains (or reuses) a single seed and writes its run directory.
inline SeedRun run_seed(const ExperimentConfig& c, const ExperimentData& data,
                        const std::filesystem::path& dir, std::uint64_t seed) {
  SeedRun run;
  run.seed = seed;
  run.dir = dir;
  try {
    std::filesystem::create_directories(dir);
    const std::string manifest = run_manifest(c, seed);
    const auto log_path = dir / "log.csv";
    if (std::filesystem::exists(log_path) && std::filesystem::exists(dir / "metrics.csv") &&
        std::filesystem::exists(dir / "manifest.txt") &&
        detail::read_text(dir / "manifest.txt") == manifest) {
      run.log = parse_checkpoint_log_csv(detail::read_text(log_path));
      run.reused = true;
    } else {
      const Split parts = split(data.train, {c.labeled, c.balanced, seed});
      const ModelSpec spec = model_spec(c, data.train);
      const auto ckpt = dir / "checkpoint.mmckpt";
      auto result = run_training<float>(
          spec, train_config(c, data.train), seed, parts.labeled, parts.unlabeled, data.test,
          [&](const TrainState<float>& s, const MetricsRow&) { save_checkpoint(ckpt, s.ema); });
      detail::write_text(dir / "metrics.csv", metrics_csv(result.metrics));
      detail::write_text(log_path, checkpoint_log_csv(result.log));
      detail::write_text(dir / "manifest.txt", manifest);
      run.log = std::move(result.log);
    }
    run.median_error = report_median(run.log, c.train.report_window);
    run.ok = true;
  } catch (const std::exception& e) {
    run.error = e.what();
  }
  return run;
}

inline nlohmann::json summary_json(const ExperimentConfig& c, const ExperimentResult& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& s : r.runs) {
    nlohmann::json j{{"seed", s.seed}, {"status", s.ok ? "ok" : "failed"},
                     {"dir", s.dir.filename().string()}};
    if (s.ok) j["median_error"] = s.median_error;
    else j["error"] = s.error;
    runs.push_back(std::move(j));
  }
  return {{"version", artifact_version},
          {"config_hash", config_hash(c)},
          {"method", to_string(c.train.method)},
          {"report_window", c.train.report_window},
          {"runs", std::move(runs)},
          {"mean_error", r.mean_error},
          {"std_error", r.std_error},
          {"failed", std::count_if(r.runs.begin(), r.runs.end(), [](const SeedRun& s) { return !s.ok; })}};
}

/// One run per seed (up to `jobs` concurrently), then summary.json.
/// A failing seed is recorded and the remaining seeds still run.
inline ExperimentResult run_experiment(const ExperimentConfig& c,
                                       const std::filesystem::path& output_root) {
  validate(c);
  ExperimentResult result;
  result.dir = output_root / config_hash(c);
  std::filesystem::create_directories(result.dir);
  detail::write_text(result.dir / "manifest.txt",
                     std::string("version = ") + std::string(artifact_version) + "\n\n" + serialize(c));

  result.runs.resize(c.seeds.size());
  std::optional<ExperimentData> data;
  std::string data_error;
  try {
    data = load_data(c);
  } catch (const std::exception& e) {
    data_error = e.what();
  }
  auto work = [&](std::size_t i) {
    const auto dir = result.dir / ("seed_" + std::to_string(c.seeds[i]));
    if (data) {
      result.runs[i] = run_seed(c, *data, dir, c.seeds[i]);
    } else {
      result.runs[i] = SeedRun{c.seeds[i], false, false, data_error, 0, {}, dir};
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(c.jobs, c.seeds.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < c.seeds.size(); ++i) work(i);
  } else {
    std::mutex m;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j)
      pool.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard lock(m);
            if (next >= c.seeds.size()) return;
            i = next++;
          }
          work(i);
        }
      });
    for (auto& t : pool) t.join();
  }

  std::vector<double> errors;
  for (const auto& r : result.runs) {
    if (r.ok) errors.push_back(r.median_error);
    else result.all_ok = false;
  }
  if (!errors.empty()) {
    double sum = 0;
    for (double e : errors) sum += e;
    result.mean_error = sum / static_cast<double>(errors.size());
    if (errors.size() > 1) {
      double sq = 0;
      for (double e : errors) sq += (e - result.mean_error) * (e - result.mean_error);
      result.std_error = std::sqrt(sq / static_cast<double>(errors.size() - 1));
    }
  }
  detail::write_text(result.dir / "summary.json", summary_json(c, result).dump(2) + "\n");
  return result;
}

}  // namespace mixmatch
