#pragma once

// Optimization loop: Adam, decoupled weight decay, parameter EMA, periodic
// EMA evaluation and median-of-checkpoints reporting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mixmatch/baselines.hpp"
#include "mixmatch/data.hpp"
#include "mixmatch/model.hpp"
#include "mixmatch/ssl.hpp"

namespace mixmatch {

enum class Method { mixmatch, pi_model, pseudo_label, mixup, mean_teacher, supervised };

struct AdamConfig {
  double learning_rate = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<std::vector<T>> first;
  std::vector<std::vector<T>> second;
  std::size_t step = 0;

  AdamState() = default;
  AdamState(const ParamSet<T>& params, AdamConfig cfg) : config(cfg) {
    for (const auto& p : params) {
      first.emplace_back(p.tensor.size(), T{0});
      second.emplace_back(p.tensor.size(), T{0});
    }
  }

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam update from the gradients currently held by
/// `params` (a parameter without a gradient is treated as zero-gradient).
template <typename T>
void adam_step(ParamSet<T>& params, AdamState<T>& state) {
  if (state.first.size() != params.size())
    throw std::invalid_argument("adam: optimizer state does not match parameters");
  if (!(state.config.epsilon > 0)) throw std::invalid_argument("adam: epsilon must be > 0");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params[i].tensor;
    if (!t.has_grad()) continue;
    for (T g : t.grad())
      if (!std::isfinite(g))
        throw NonFiniteError("adam: non-finite gradient at step " +
                             std::to_string(state.step + 1) + " in parameter " + params[i].name);
  }
  ++state.step;
  const auto& c = state.config;
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T correction1 = static_cast<T>(1.0 - std::pow(c.beta1, static_cast<double>(state.step)));
  const T correction2 = static_cast<T>(1.0 - std::pow(c.beta2, static_cast<double>(state.step)));
  const T lr = static_cast<T>(c.learning_rate), eps = static_cast<T>(c.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    const bool has_grad = t.has_grad();
    auto grad = t.grad();
    auto values = t.mutable_values();
    auto& m = state.first[i];
    auto& v = state.second[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const T g = has_grad ? grad[j] : T{0};
      m[j] = b1 * m[j] + (T{1} - b1) * g;
      v[j] = b2 * v[j] + (T{1} - b2) * g * g;
      const T m_hat = m[j] / correction1;
      const T v_hat = v[j] / correction2;
      values[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

/// Multiplicative shrink of every decaying (non-bias) parameter.
template <typename T>
void weight_decay_step(ParamSet<T>& params, double rate) {
  if (!(rate >= 0 && rate < 1)) throw std::invalid_argument("weight_decay: rate must be in [0, 1)");
  if (rate == 0) return;
  const T keep = static_cast<T>(1.0 - rate);
  for (auto& p : params) {
    if (!p.decays) continue;
    for (auto& v : p.tensor.mutable_values()) v *= keep;
  }
}

struct TrainConfig {
  Method method = Method::mixmatch;
  MixMatchConfig mixmatch;
  BaselineConfig baseline;
  AugmentPolicy augment;
  AdamConfig adam;
  double weight_decay = 0.0004;
  double ema_decay = 0.999;
  std::size_t batch_size = 64;
  std::size_t steps = 4000;
  std::size_t checkpoint_every = 65536;  // training samples between evaluations
  std::size_t report_window = 20;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

template <typename T>
struct TrainState {
  std::shared_ptr<const TrainConfig> config;
  ModelSpec spec;
  ParamSet<T> params;
  ParamSet<T> ema;
  std::optional<ParamSet<T>> teacher;  // Mean Teacher only
  AdamState<T> optimizer;
  std::size_t step = 0;
  std::uint64_t seed = 0;
};

template <typename T>
TrainState<T> make_train_state(const ModelSpec& spec, TrainConfig config, std::uint64_t seed) {
  TrainState<T> s;
  s.config = std::make_shared<const TrainConfig>(std::move(config));
  s.spec = spec;
  s.params = init_params<T>(spec, seed);
  s.ema = s.params;
  if (s.config->method == Method::mean_teacher) s.teacher = s.params;
  s.optimizer = AdamState<T>(s.params, s.config->adam);
  s.seed = seed;
  return s;
}

template <typename T>
bool bit_identical(const TrainState<T>& a, const TrainState<T>& b) {
  return a.step == b.step && bit_identical(a.params, b.params) && bit_identical(a.ema, b.ema) &&
         a.optimizer == b.optimizer && a.teacher.has_value() == b.teacher.has_value() &&
         (!a.teacher || bit_identical(*a.teacher, *b.teacher));
}

struct StepStats {
  double lambda = 0;  // unsupervised weight used at this step
  double loss_x = 0;  // supervised term
  double loss_u = 0;  // unsupervised term (unweighted)
  double total = 0;
};

/// The differentiable loss of one step, before any parameter update.
template <typename T>
struct StepLoss {
  Tensor<T> loss_x;
  Tensor<T> loss_u;  // undefined for the supervised method
  Tensor<T> total;
  double lambda = 0;
};

/// Builds the method's loss for one step on raw batches `x`, `u`.
template <typename T>
StepLoss<T> build_step_loss(const TrainState<T>& state, const LabeledBatch& x,
                            const UnlabeledBatch& u) {
  const TrainConfig& cfg = *state.config;
  const Stream stream = Stream::derive(state.seed, "train_step", state.step);
  const auto model = as_logit_fn(state.spec, state.params);
  StepLoss<T> out;

  if (cfg.method == Method::mixmatch) {
    const auto guess_model =
        cfg.mixmatch.ema_guessing ? as_logit_fn(state.spec, state.ema) : model;
    const auto pair = mixmatch_transform(x, u, cfg.mixmatch, guess_model, cfg.augment, stream);
    out.lambda = lambda_schedule(state.step, cfg.mixmatch.lambda_u, cfg.mixmatch.rampup_steps);
    auto loss = mixmatch_loss(pair, model, out.lambda);
    out.loss_x = loss.loss_x;
    out.loss_u = loss.loss_u;
    out.total = loss.total;
    return out;
  }

  const auto x_hat = augment_labeled<T>(x, cfg.augment, stream.fork("supervised"));
  out.loss_x = loss_labeled(one_hot<T>(x.labels, x.classes), model(x_hat));
  if (cfg.method == Method::supervised) {
    out.total = out.loss_x;
    return out;
  }
  out.lambda = lambda_schedule(state.step, cfg.baseline.weight, cfg.mixmatch.rampup_steps);
  const Stream unsup = stream.fork("unsupervised");
  switch (cfg.method) {
    case Method::pi_model:
      out.loss_u = pi_model_loss(u, model, cfg.augment, unsup);
      break;
    case Method::pseudo_label:
      out.loss_u = pseudo_label_loss(augment_unlabeled<T>(u, 1, cfg.augment, unsup), model,
                                     cfg.baseline.threshold);
      break;
    case Method::mixup:
      out.loss_u = mixup_ssl_loss(x, u, model, cfg.baseline.alpha, cfg.augment, unsup);
      break;
    case Method::mean_teacher:
      out.loss_u = mean_teacher_loss(u, model, as_logit_fn(state.spec, *state.teacher),
                                     cfg.augment, unsup);
      break;
    default:
      break;
  }
  out.total = add(out.loss_x, scale(out.loss_u, static_cast<T>(out.lambda)));
  return out;
}

/// Loss, backward, Adam, weight decay, EMA maintenance; advances the step.
template <typename T>
StepStats train_step(TrainState<T>& state, const LabeledBatch& x, const UnlabeledBatch& u) {
  const TrainConfig& cfg = *state.config;
  StepStats stats;
  {
    const StepLoss<T> loss = build_step_loss(state, x, u);
    stats.lambda = loss.lambda;
    stats.loss_x = static_cast<double>(loss.loss_x.item());
    stats.loss_u = loss.loss_u.defined() ? static_cast<double>(loss.loss_u.item()) : 0.0;
    stats.total = static_cast<double>(loss.total.item());
    if (!std::isfinite(stats.total))
      throw NonFiniteError("train: non-finite loss at step " + std::to_string(state.step));
    state.params.zero_grad();
    backward(loss.total);
  }
  adam_step(state.params, state.optimizer);
  weight_decay_step(state.params, cfg.weight_decay);
  ema_update(state.ema, state.params, cfg.ema_decay);
  if (state.teacher) ema_update(*state.teacher, state.params, cfg.baseline.teacher_decay);
  state.params.zero_grad();
  ++state.step;
  return stats;
}

// ---------------------------------------------------------------------------
// Evaluation and reporting

/// Rows whose argmax (lowest index on ties) differs from the label.
template <typename T>
std::size_t count_errors(std::span<const T> scores, std::size_t classes,
                         std::span<const int> labels) {
  std::size_t wrong = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const T* row = scores.data() + r * classes;
    const auto best = static_cast<int>(std::max_element(row, row + classes) - row);
    wrong += best != labels[r];
  }
  return wrong;
}

template <typename T>
double error_rate(std::span<const T> scores, std::size_t classes, std::span<const int> labels) {
  if (labels.empty()) throw std::invalid_argument("evaluate: empty test set");
  return static_cast<double>(count_errors(scores, classes, labels)) /
         static_cast<double>(labels.size());
}

/// Test error rate of `params`, evaluated in chunks.
template <typename T>
double evaluate(const ModelSpec& spec, const ParamSet<T>& params, const Dataset& test,
                std::size_t chunk = 512) {
  if (test.size() == 0) throw std::invalid_argument("evaluate: empty test set");
  std::size_t wrong = 0;
  for (std::size_t begin = 0; begin < test.size(); begin += chunk) {
    const std::size_t end = std::min(test.size(), begin + chunk);
    const auto idx = detail::range(begin, end);
    const LabeledBatch batch = gather(test, idx);
    Shape shape{end - begin};
    shape.insert(shape.end(), test.example_shape.begin(), test.example_shape.end());
    const auto logits =
        forward(spec, params,
                Tensor<T>::constant(std::move(shape),
                                    std::vector<T>(batch.features.begin(), batch.features.end())));
    wrong += count_errors<T>(logits.values(), spec.classes, batch.labels);
  }
  return static_cast<double>(wrong) / static_cast<double>(test.size());
}

struct CheckpointLog {
  struct Entry {
    std::size_t step;
    double error_rate;
    friend bool operator==(const Entry&, const Entry&) = default;
  };
  std::vector<Entry> entries;

  void append(std::size_t step, double error) {
    if (!entries.empty() && step <= entries.back().step)
      throw std::invalid_argument("checkpoint log: steps must be strictly increasing");
    entries.push_back({step, error});
  }
  bool empty() const { return entries.empty(); }
  std::size_t size() const { return entries.size(); }
};

/// Median of the last min(window, size) error rates; even counts average the
/// two central values.
inline double report_median(const CheckpointLog& log, std::size_t window = 20) {
  if (log.empty()) throw std::invalid_argument("report_median: empty checkpoint log");
  if (window == 0) throw std::invalid_argument("report_median: window must be >= 1");
  const std::size_t n = std::min(window, log.size());
  std::vector<double> tail;
  for (std::size_t i = log.size() - n; i < log.size(); ++i) tail.push_back(log.entries[i].error_rate);
  std::sort(tail.begin(), tail.end());
  return n % 2 ? tail[n / 2] : 0.5 * (tail[n / 2 - 1] + tail[n / 2]);
}

struct MetricsRow {
  std::size_t step = 0;
  double lambda_u = 0;
  double loss_x = 0;   // means over the steps since the previous row
  double loss_u = 0;
  double loss_total = 0;
  double ema_test_error = 0;
};

template <typename T>
struct TrainingResult {
  CheckpointLog log;
  std::vector<MetricsRow> metrics;
  TrainState<T> state;
};

/// Called after every evaluation with the state that was evaluated.
template <typename T>
using CheckpointSink = std::function<void(const TrainState<T>&, const MetricsRow&)>;

/// True when a checkpoint falls after `step`: the sample counter crossed a
/// multiple of `every`, or this is the first or final step.
inline bool is_checkpoint(std::size_t step, std::size_t batch_size, std::size_t every,
                          std::size_t total_steps) {
  if (step == 0 || step == total_steps) return true;
  if (every == 0) return false;
  return (step * batch_size) / every > ((step - 1) * batch_size) / every;
}

/// Trains from a fresh state seeded by `seed`, evaluating the EMA parameters
/// on `test` at every checkpoint.
template <typename T>
TrainingResult<T> run_training(const ModelSpec& spec, const TrainConfig& config, std::uint64_t seed,
                               const Dataset& labeled, const UnlabeledSet& unlabeled,
                               const Dataset& test, const CheckpointSink<T>& sink = {}) {
  config.mixmatch.validate();
  config.baseline.validate();
  const bool needs_unlabeled = config.method != Method::supervised;
  if (needs_unlabeled && unlabeled.size() == 0)
    throw std::invalid_argument("train: method needs a non-empty unlabeled set");

  TrainingResult<T> result{{}, {}, make_train_state<T>(spec, config, seed)};
  auto& state = result.state;
  StepStats acc;
  std::size_t acc_steps = 0;
  auto checkpoint = [&] {
    MetricsRow row;
    row.step = state.step;
    if (acc_steps) {
      row.lambda_u = acc.lambda;
      row.loss_x = acc.loss_x / static_cast<double>(acc_steps);
      row.loss_u = acc.loss_u / static_cast<double>(acc_steps);
      row.loss_total = acc.total / static_cast<double>(acc_steps);
    }
    row.ema_test_error = evaluate(spec, state.ema, test);
    result.log.append(row.step, row.ema_test_error);
    result.metrics.push_back(row);
    if (sink) sink(state, row);
    acc = {};
    acc_steps = 0;
  };

  checkpoint();
  // The schedule always spans the unlabeled pool when one is given, so every
  // method sees the same labeled batch sequence for a given seed.
  const std::size_t n_unlabeled = unlabeled.size();
  std::vector<BatchIndices> epoch_batches;
  std::size_t epoch = 0, cursor = 0;
  while (state.step < config.steps) {
    if (cursor == epoch_batches.size()) {
      epoch_batches = batches(labeled.size(), n_unlabeled, config.batch_size, seed, epoch++);
      cursor = 0;
    }
    const auto& idx = epoch_batches[cursor++];
    const auto x = gather(labeled, idx.labeled);
    const auto u = needs_unlabeled ? gather(unlabeled, idx.unlabeled)
                                   : UnlabeledBatch{labeled.example_shape, {}};
    const StepStats s = train_step(state, x, u);
    acc.lambda = s.lambda;
    acc.loss_x += s.loss_x;
    acc.loss_u += s.loss_u;
    acc.total += s.total;
    ++acc_steps;
    if (is_checkpoint(state.step, config.batch_size, config.checkpoint_every, config.steps))
      checkpoint();
  }
  return result;
}

}  // namespace mixmatch
