#pragma once

// Experiment configuration: a flat `key = value` document with `#` comments.
// Unknown keys are rejected and every diagnostic carries its line number.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "mixmatch/train.hpp"

namespace mixmatch {

enum class DatasetKind { two_moons, shapes, idx };

struct ExperimentConfig {
  // data
  DatasetKind dataset = DatasetKind::two_moons;
  std::size_t n_train = 2000;
  std::size_t n_test = 1000;
  double noise = 0.1;
  std::size_t image_side = 8;
  std::size_t classes = 4;  // shapes only
  std::string idx_train_images, idx_train_labels, idx_test_images, idx_test_labels;
  std::uint64_t data_seed = 0;
  std::size_t labeled = 250;
  bool balanced = true;
  // model
  Architecture model = Architecture::mlp;
  std::size_t hidden = 64;
  std::size_t channels = 32;
  // method and training
  TrainConfig train{};
  // runs
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string output = "runs";
  std::size_t jobs = 1;

  ExperimentConfig() { train.steps = 20000; }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::size_t line, const std::string& what)
      : std::runtime_error(line ? "config line " + std::to_string(line) + ": " + what
                                : "config: " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// ---------------------------------------------------------------------------
// Enum names

inline std::string to_string(DatasetKind d) {
  switch (d) {
    case DatasetKind::two_moons: return "two_moons";
    case DatasetKind::shapes: return "shapes";
    case DatasetKind::idx: return "idx";
  }
  return "?";
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::mixmatch: return "mixmatch";
    case Method::pi_model: return "pi_model";
    case Method::pseudo_label: return "pseudo_label";
    case Method::mixup: return "mixup";
    case Method::mean_teacher: return "mean_teacher";
    case Method::supervised: return "supervised";
  }
  return "?";
}

inline std::string to_string(MixupMode m) {
  switch (m) {
    case MixupMode::full: return "full";
    case MixupMode::labeled_only: return "labeled_only";
    case MixupMode::unlabeled_only: return "unlabeled_only";
    case MixupMode::separate: return "separate";
    case MixupMode::off: return "off";
  }
  return "?";
}

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

struct ValueReader {
  std::size_t line;
  std::string_view key;
  std::string_view text;

  [[noreturn]] void fail(const std::string& why) const {
    throw ConfigError(line, std::string(key) + ": " + why);
  }

  double real() const {
    double v = 0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size())
      fail("expected a number, got '" + std::string(text) + "'");
    if (!std::isfinite(v)) fail("expected a finite number, got '" + std::string(text) + "'");
    return v;
  }

  std::uint64_t integer() const {
    std::uint64_t v = 0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size())
      fail("expected a non-negative integer, got '" + std::string(text) + "'");
    return v;
  }

  bool boolean() const {
    if (text == "true") return true;
    if (text == "false") return false;
    fail("expected true or false, got '" + std::string(text) + "'");
  }

  template <typename E>
  E choice(std::initializer_list<std::pair<std::string_view, E>> options) const {
    std::string names;
    for (const auto& [name, value] : options) {
      if (name == text) return value;
      names += (names.empty() ? "" : ", ") + std::string(name);
    }
    fail("expected one of {" + names + "}, got '" + std::string(text) + "'");
  }

  void require(bool ok, const std::string& constraint) const {
    if (!ok) fail("constraint violated: " + constraint);
  }
};

}  // namespace detail

/// Assigns one key. Throws ConfigError naming `line` on any problem.
inline void apply_setting(ExperimentConfig& c, std::string_view key, std::string_view value,
                          std::size_t line = 0) {
  const detail::ValueReader v{line, key, value};
  auto& t = c.train;
  auto positive_int = [&](const char* what) {
    const auto n = v.integer();
    v.require(n > 0, std::string(what) + " > 0");
    return static_cast<std::size_t>(n);
  };
  auto fraction = [&](const char* constraint, double lo, double hi, bool hi_open) {
    const double x = v.real();
    v.require(x >= lo && (hi_open ? x < hi : x <= hi), constraint);
    return x;
  };

  if (key == "dataset") {
    c.dataset = v.choice<DatasetKind>({{"two_moons", DatasetKind::two_moons},
                                       {"shapes", DatasetKind::shapes},
                                       {"idx", DatasetKind::idx}});
  } else if (key == "n_train") {
    c.n_train = positive_int("n_train");
  } else if (key == "n_test") {
    c.n_test = positive_int("n_test");
  } else if (key == "noise") {
    c.noise = v.real();
    v.require(c.noise >= 0, "noise >= 0");
  } else if (key == "image_side") {
    c.image_side = static_cast<std::size_t>(v.integer());
    v.require(c.image_side >= 8, "image_side >= 8");
  } else if (key == "classes") {
    c.classes = static_cast<std::size_t>(v.integer());
    v.require(c.classes >= 2 && c.classes <= 4, "2 <= classes <= 4");
  } else if (key == "idx_train_images") {
    c.idx_train_images = value;
  } else if (key == "idx_train_labels") {
    c.idx_train_labels = value;
  } else if (key == "idx_test_images") {
    c.idx_test_images = value;
  } else if (key == "idx_test_labels") {
    c.idx_test_labels = value;
  } else if (key == "data_seed") {
    c.data_seed = v.integer();
  } else if (key == "labeled") {
    c.labeled = positive_int("labeled");
  } else if (key == "balanced") {
    c.balanced = v.boolean();
  } else if (key == "model") {
    c.model = v.choice<Architecture>(
        {{"mlp", Architecture::mlp}, {"small_convnet", Architecture::small_convnet}});
  } else if (key == "hidden") {
    c.hidden = positive_int("hidden");
  } else if (key == "channels") {
    c.channels = positive_int("channels");
  } else if (key == "method") {
    t.method = v.choice<Method>({{"mixmatch", Method::mixmatch},
                                 {"pi_model", Method::pi_model},
                                 {"pseudo_label", Method::pseudo_label},
                                 {"mixup", Method::mixup},
                                 {"mean_teacher", Method::mean_teacher},
                                 {"supervised", Method::supervised}});
  } else if (key == "T") {
    t.mixmatch.temperature = v.real();
    v.require(t.mixmatch.temperature > 0, "T > 0");
  } else if (key == "K") {
    t.mixmatch.augmentations = positive_int("K");
  } else if (key == "alpha") {
    t.mixmatch.alpha = v.real();
    v.require(t.mixmatch.alpha > 0, "alpha > 0");
  } else if (key == "lambda_u") {
    t.mixmatch.lambda_u = v.real();
    v.require(t.mixmatch.lambda_u >= 0, "lambda_u >= 0");
  } else if (key == "rampup_steps") {
    t.mixmatch.rampup_steps = static_cast<std::size_t>(v.integer());
  } else if (key == "mixup_mode") {
    t.mixmatch.mixup_mode = v.choice<MixupMode>({{"full", MixupMode::full},
                                                 {"labeled_only", MixupMode::labeled_only},
                                                 {"unlabeled_only", MixupMode::unlabeled_only},
                                                 {"separate", MixupMode::separate},
                                                 {"off", MixupMode::off}});
  } else if (key == "ema_guessing") {
    t.mixmatch.ema_guessing = v.boolean();
  } else if (key == "baseline_weight") {
    t.baseline.weight = v.real();
    v.require(t.baseline.weight >= 0, "baseline_weight >= 0");
  } else if (key == "threshold") {
    t.baseline.threshold = v.real();
    v.require(t.baseline.threshold > 0 && t.baseline.threshold <= 1, "0 < threshold <= 1");
  } else if (key == "teacher_decay") {
    t.baseline.teacher_decay = fraction("0 <= teacher_decay < 1", 0, 1, true);
  } else if (key == "mixup_alpha") {
    t.baseline.alpha = v.real();
    v.require(t.baseline.alpha > 0, "mixup_alpha > 0");
  } else if (key == "jitter_sigma") {
    t.augment.jitter_sigma = v.real();
    v.require(t.augment.jitter_sigma >= 0, "jitter_sigma >= 0");
  } else if (key == "crop_padding") {
    t.augment.crop_padding = static_cast<std::size_t>(v.integer());
  } else if (key == "flip_probability") {
    t.augment.flip_probability = fraction("0 <= flip_probability <= 1", 0, 1, false);
  } else if (key == "steps") {
    t.steps = static_cast<std::size_t>(v.integer());
  } else if (key == "batch") {
    t.batch_size = positive_int("batch");
  } else if (key == "lr") {
    t.adam.learning_rate = v.real();
    v.require(t.adam.learning_rate > 0, "lr > 0");
  } else if (key == "weight_decay") {
    t.weight_decay = fraction("0 <= weight_decay < 1", 0, 1, true);
  } else if (key == "ema_decay") {
    t.ema_decay = fraction("0 <= ema_decay < 1", 0, 1, true);
  } else if (key == "checkpoint_every") {
    t.checkpoint_every = positive_int("checkpoint_every");
  } else if (key == "report_window") {
    t.report_window = positive_int("report_window");
  } else if (key == "seeds") {
    c.seeds.clear();
    std::set<std::uint64_t> seen;
    std::string_view rest = value;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const auto item = detail::trim(rest.substr(0, comma));
      const std::uint64_t s = detail::ValueReader{line, key, item}.integer();
      v.require(seen.insert(s).second, "seeds must be distinct");
      c.seeds.push_back(s);
      rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    }
    v.require(!c.seeds.empty(), "seeds non-empty");
  } else if (key == "output") {
    v.require(!value.empty(), "output non-empty");
    c.output = value;
  } else if (key == "jobs") {
    c.jobs = positive_int("jobs");
  } else {
    throw ConfigError(line, "unknown key '" + std::string(key) + "'");
  }
}

/// Cross-key constraints that no single line can violate.
inline void validate(const ExperimentConfig& c) {
  const std::size_t classes = c.dataset == DatasetKind::two_moons ? 2 : c.classes;
  if (c.dataset != DatasetKind::idx) {
    if (c.labeled > c.n_train)
      throw ConfigError(0, "labeled (" + std::to_string(c.labeled) + ") exceeds n_train (" +
                               std::to_string(c.n_train) + ")");
    if (c.balanced && c.labeled % classes)
      throw ConfigError(0, "balanced split needs labeled divisible by " + std::to_string(classes));
    if (c.dataset == DatasetKind::two_moons && (c.n_train % 2 || c.n_test % 2))
      throw ConfigError(0, "two_moons needs even n_train and n_test");
    if (c.dataset == DatasetKind::shapes && (c.n_train % classes || c.n_test % classes))
      throw ConfigError(0, "shapes needs n_train and n_test divisible by classes");
  } else if (c.idx_train_images.empty() || c.idx_train_labels.empty() ||
             c.idx_test_images.empty() || c.idx_test_labels.empty()) {
    throw ConfigError(0, "dataset idx needs idx_train_images, idx_train_labels, "
                         "idx_test_images and idx_test_labels");
  }
  if (c.dataset == DatasetKind::two_moons && c.model == Architecture::small_convnet)
    throw ConfigError(0, "small_convnet needs an image dataset");
}

/// Parses a whole document; missing keys keep their defaults.
inline ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig c;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(line_no, "expected 'key = value'");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(line_no, "missing key before '='");
    if (!seen.insert(std::string(key)).second)
      throw ConfigError(line_no, "duplicate key '" + std::string(key) + "'");
    apply_setting(c, key, value, line_no);
  }
  validate(c);
  return c;
}

/// Canonical document listing every key in a fixed order.
inline std::string serialize(const ExperimentConfig& c) {
  const auto& t = c.train;
  const auto d = detail::format_double;
  const auto u = [](std::uint64_t v) { return std::to_string(v); };
  const auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  std::string seeds;
  for (auto s : c.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
  const std::vector<std::pair<std::string, std::string>> entries = {
      {"dataset", to_string(c.dataset)},
      {"n_train", u(c.n_train)},
      {"n_test", u(c.n_test)},
      {"noise", d(c.noise)},
      {"image_side", u(c.image_side)},
      {"classes", u(c.classes)},
      {"idx_train_images", c.idx_train_images},
      {"idx_train_labels", c.idx_train_labels},
      {"idx_test_images", c.idx_test_images},
      {"idx_test_labels", c.idx_test_labels},
      {"data_seed", u(c.data_seed)},
      {"labeled", u(c.labeled)},
      {"balanced", b(c.balanced)},
      {"model", to_string(c.model)},
      {"hidden", u(c.hidden)},
      {"channels", u(c.channels)},
      {"method", to_string(t.method)},
      {"T", d(t.mixmatch.temperature)},
      {"K", u(t.mixmatch.augmentations)},
      {"alpha", d(t.mixmatch.alpha)},
      {"lambda_u", d(t.mixmatch.lambda_u)},
      {"rampup_steps", u(t.mixmatch.rampup_steps)},
      {"mixup_mode", to_string(t.mixmatch.mixup_mode)},
      {"ema_guessing", b(t.mixmatch.ema_guessing)},
      {"baseline_weight", d(t.baseline.weight)},
      {"threshold", d(t.baseline.threshold)},
      {"teacher_decay", d(t.baseline.teacher_decay)},
      {"mixup_alpha", d(t.baseline.alpha)},
      {"jitter_sigma", d(t.augment.jitter_sigma)},
      {"crop_padding", u(t.augment.crop_padding)},
      {"flip_probability", d(t.augment.flip_probability)},
      {"steps", u(t.steps)},
      {"batch", u(t.batch_size)},
      {"lr", d(t.adam.learning_rate)},
      {"weight_decay", d(t.weight_decay)},
      {"ema_decay", d(t.ema_decay)},
      {"checkpoint_every", u(t.checkpoint_every)},
      {"report_window", u(t.report_window)},
      {"seeds", seeds},
      {"output", c.output},
      {"jobs", u(c.jobs)},
  };
  std::string out;
  for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
  return out;
}

/// `c` with the settings that cannot change a single run's results (seed
/// list, output location, parallelism) reset to fixed placeholders.
inline ExperimentConfig run_key(const ExperimentConfig& c) {
  ExperimentConfig key = c;
  key.seeds = {0};
  key.output = "-";
  key.jobs = 1;
  return key;
}

/// Stable identifier of everything that affects a single run's results.
inline std::string config_hash(const ExperimentConfig& c) {
  const ExperimentConfig key = run_key(c);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(detail::fnv1a(serialize(key))));
  return buf;
}

// ---------------------------------------------------------------------------
// Ablation presets

using ConfigDelta = std::vector<std::pair<std::string, std::string>>;

inline const std::map<std::string, ConfigDelta, std::less<>>& ablation_presets() {
  static const std::map<std::string, ConfigDelta, std::less<>> presets = {
      {"k1", {{"K", "1"}}},
      {"k3", {{"K", "3"}}},
      {"k4", {{"K", "4"}}},
      {"t1", {{"T", "1"}}},
      {"ema_guess", {{"ema_guessing", "true"}}},
      {"no_mixup", {{"mixup_mode", "off"}}},
      {"mixup_labeled_only", {{"mixup_mode", "labeled_only"}}},
      {"mixup_unlabeled_only", {{"mixup_mode", "unlabeled_only"}}},
      {"mixup_separate", {{"mixup_mode", "separate"}}},
      {"ict", {{"mixup_mode", "unlabeled_only"}, {"T", "1"}, {"ema_guessing", "true"}}},
  };
  return presets;
}

inline const ConfigDelta& ablation_preset(std::string_view name) {
  const auto& presets = ablation_presets();
  if (const auto it = presets.find(name); it != presets.end()) return it->second;
  std::string names;
  for (const auto& [n, _] : presets) names += (names.empty() ? "" : ", ") + n;
  throw ConfigError(0, "unknown ablation preset '" + std::string(name) + "'; valid presets: " + names);
}

inline ExperimentConfig apply_delta(ExperimentConfig c, const ConfigDelta& delta) {
  for (const auto& [k, v] : delta) apply_setting(c, k, v);
  validate(c);
  return c;
}

}  // namespace mixmatch
