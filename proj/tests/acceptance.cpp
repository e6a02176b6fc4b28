// Acceptance runner: one PASS/FAIL line per criterion. With no arguments
// every criterion runs; otherwise only the listed numbers. Exit status is
// nonzero when any selected criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>

#include "properties.hpp"

using namespace mixmatch;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int number;
  std::string title;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string pct(double e) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f%%", 100 * e);
  return buf;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

fs::path config_dir() {
  if (const char* env = std::getenv("MIXMATCH_CONFIG_DIR")) return env;
  return MIXMATCH_CONFIG_DIR;
}

ExperimentConfig load_config(const std::string& name) {
  return parse_config(detail::read_text(config_dir() / name));
}

// Scratch output root, removed when the runner exits.
struct Scratch {
  fs::path root = fs::temp_directory_path() / ("mixmatch_acceptance_" + std::to_string(::getpid()));
  Scratch() { fs::remove_all(root); }
  ~Scratch() { fs::remove_all(root); }
};

Scratch& scratch() {
  static Scratch s;
  return s;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Median over seeds of the per-seed reported error; throws if a seed failed.
double median_error(const ExperimentConfig& c, const std::string& tag) {
  const auto r = run_experiment(c, scratch().root / tag);
  std::vector<double> errors;
  for (const auto& run : r.runs) {
    if (!run.ok) throw std::runtime_error(tag + " seed " + std::to_string(run.seed) + ": " + run.error);
    errors.push_back(run.median_error);
  }
  return median(errors);
}

// ---------------------------------------------------------------------------
// Shared fixtures for the 64-bit gradient criteria

struct GradientFixture {
  ModelSpec spec;
  ParamSet<double> params;
  LabeledBatch x{{2}, 3, {}, {}};
  UnlabeledBatch u{{2}, {}};
  MixMatchConfig config;
  AugmentPolicy policy{AugmentKind::jitter2d, 0.1, 0, 0};
  Stream stream{Stream::derive(7, "acceptance.gradient")};
  double lambda = 75;

  GradientFixture() {
    spec.input_shape = {2};
    spec.classes = 3;
    spec.hidden = 6;
    params = init_params<double>(spec, 3);
    config.augmentations = 2;
    Stream s(11);
    for (int i = 0; i < 4; ++i) {
      x.features.push_back(static_cast<float>(s.uniform() * 2 - 1));
      x.features.push_back(static_cast<float>(s.uniform() * 2 - 1));
      x.labels.push_back(static_cast<int>(s.below(3)));
      u.features.push_back(static_cast<float>(s.uniform() * 2 - 1));
      u.features.push_back(static_cast<float>(s.uniform() * 2 - 1));
    }
  }

  LogitFn<double> model() const { return as_logit_fn(spec, params); }

  BatchPair<double> pair() const { return mixmatch_transform(x, u, config, model(), policy, stream); }

  std::vector<std::vector<double>> gradient(const Tensor<double>& loss) {
    params.zero_grad();
    backward(loss);
    std::vector<std::vector<double>> g;
    for (const auto& p : params) {
      if (p.tensor.has_grad()) g.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
      else g.emplace_back(p.tensor.size(), 0.0);
    }
    return g;
  }
};

Tensor<double> frozen(const Tensor<double>& t) {
  return Tensor<double>::constant(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
}

BatchPair<double> freeze_targets(BatchPair<double> p) {
  p.x_targets = frozen(p.x_targets);
  p.u_targets = frozen(p.u_targets);
  return p;
}

double max_abs_diff(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
  return worst;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome invariant_suite() {
  const auto results = properties::all(250);
  std::size_t passed = 0;
  std::string failures;
  for (const auto& r : results) {
    if (r.ok()) ++passed;
    else failures += "; " + r.name + ": " + r.first_failure;
  }
  return {passed == results.size(), std::to_string(passed) + "/" + std::to_string(results.size()) +
                                        " properties at 250 cases each" + failures};
}

Outcome gradient_verification() {
  // Autodiff through the whole pipeline (guessing, mixing, both losses)
  // against central differences of the combined loss with the transform's
  // output held fixed; the guessed targets carry no gradient by contract.
  GradientFixture f;
  const auto analytic = f.gradient(mixmatch_loss(f.pair(), f.model(), f.lambda).total);
  const auto fixed = freeze_targets(f.pair());
  const auto model = f.model();
  const double h = 1e-5;
  double worst = 0;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < f.params.size(); ++i) {
    auto values = f.params[i].tensor.mutable_values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + h;
      const double up = mixmatch_loss(fixed, model, f.lambda).total.item();
      values[j] = saved - h;
      const double down = mixmatch_loss(fixed, model, f.lambda).total.item();
      values[j] = saved;
      worst = std::max(worst, testing_support::relative_error(analytic[i][j], (up - down) / (2 * h)));
      ++checked;
    }
  }
  return {worst <= 1e-4, "max relative error " + sci(worst) + " over " + std::to_string(checked) +
                             " parameters (B=4, K=2, float64)"};
}

Outcome stop_gradient_firewall() {
  GradientFixture f;
  const auto pair = f.pair();
  const auto through = f.gradient(mixmatch_loss(pair, f.model(), f.lambda).total);
  const auto constants = f.gradient(mixmatch_loss(freeze_targets(pair), f.model(), f.lambda).total);
  const double diff = max_abs_diff(through, constants);

  // Negative control: the same targets built from unstopped guesses must
  // leak gradient, otherwise the comparison above proves nothing.
  const std::size_t b = f.x.size(), k = f.config.augmentations;
  const auto u_hat = augment_unlabeled<double>(f.u, k, f.policy, f.stream);
  const auto guesses = guess_labels_unstopped(softmax(f.model()(u_hat)), b, k, f.config.temperature);
  std::vector<std::size_t> owner(k * b);
  for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = i % b;
  const auto pool_targets =
      concat0<double>({one_hot<double>(f.x.labels, f.x.classes), gather_rows(guesses, owner)});
  auto leaky = pair;
  leaky.x_targets = detail::mix_rows(pool_targets, detail::range(0, b), pair.x_partner, pair.x_weight);
  leaky.u_targets = detail::mix_rows(pool_targets, detail::range(b, b + k * b), pair.u_partner, pair.u_weight);
  double same_values = 0;
  for (std::size_t i = 0; i < leaky.u_targets.size(); ++i)
    same_values = std::max(same_values, std::abs(leaky.u_targets[i] - pair.u_targets[i]));
  const double leak = max_abs_diff(f.gradient(mixmatch_loss(leaky, f.model(), f.lambda).total), constants);

  const bool pass = diff <= 1e-10 && same_values <= 1e-12 && leak > 1e-6;
  return {pass, "max |grad - grad(frozen targets)| = " + sci(diff) + "; unstopped control differs by " +
                    sci(leak)};
}

Outcome pairing_oracle() {
  // Reference: rebuild the pool row by row, enumerate the seeded
  // Fisher-Yates permutation with its own loop, and recompute each mixed row.
  std::size_t configs = 0, rows = 0;
  double worst = 0;
  bool all_used_once = true;
  for (std::size_t b = 1; b <= 3; ++b)
    for (std::size_t k = 1; k <= 3; ++k)
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        ++configs;
        Stream data(100 * b + 10 * k + seed);
        LabeledBatch x{{2}, 2, {}, {}};
        UnlabeledBatch u{{2}, {}};
        for (std::size_t i = 0; i < b; ++i) {
          for (int d = 0; d < 2; ++d) {
            x.features.push_back(static_cast<float>(data.uniform()));
            u.features.push_back(static_cast<float>(data.uniform()));
          }
          x.labels.push_back(static_cast<int>(data.below(2)));
        }
        MixMatchConfig cfg;
        cfg.augmentations = k;
        const AugmentPolicy policy{AugmentKind::jitter2d, 0.2, 0, 0};
        const auto model = properties::gen::random_linear_model(2, 2, data);
        const Stream stream = Stream::derive(seed, "acceptance.pairing", b, k);
        const auto pair = mixmatch_transform(x, u, cfg, model, policy, stream);

        const std::size_t n = b + k * b;
        std::vector<std::vector<double>> pool_x(n), pool_p(n);
        for (std::size_t i = 0; i < b; ++i) {
          Stream s = stream.fork("augment.labeled", i);
          const auto e = augment(Example{{x.features[2 * i], x.features[2 * i + 1]}, {2}, x.labels[i]}, policy, s);
          pool_x[i].assign(e.features.begin(), e.features.end());
          pool_p[i] = {x.labels[i] == 0 ? 1.0 : 0.0, x.labels[i] == 1 ? 1.0 : 0.0};
        }
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t i = 0; i < b; ++i) {
            Stream s = stream.fork("augment.unlabeled", a * b + i);
            const auto e = augment(Example{{u.features[2 * i], u.features[2 * i + 1]}, {2}, std::nullopt}, policy, s);
            pool_x[b + a * b + i].assign(e.features.begin(), e.features.end());
            const auto q = pair.guesses.values().subspan(i * 2, 2);
            pool_p[b + a * b + i].assign(q.begin(), q.end());
          }

        std::vector<std::size_t> w(n);
        for (std::size_t i = 0; i < n; ++i) w[i] = i;
        Stream shuffle_stream = stream.fork("shuffle.pool");
        for (std::size_t top = n; top > 1; --top) std::swap(w[top - 1], w[shuffle_stream.below(top)]);

        std::vector<std::size_t> uses(n, 0);
        auto check_row = [&](std::size_t self, std::size_t slot, const char* purpose, std::size_t index,
                             const TargetedExample<double>& got) {
          ++uses[w[slot]];
          Stream ls = stream.fork(purpose, index);
          const double lam = ls.beta(cfg.alpha, cfg.alpha);
          const double weight = std::max(lam, 1 - lam);
          for (std::size_t d = 0; d < 2; ++d) {
            worst = std::max(worst, std::abs(got.features[d] - (weight * pool_x[self][d] + (1 - weight) * pool_x[w[slot]][d])));
            worst = std::max(worst, std::abs(got.target[d] - (weight * pool_p[self][d] + (1 - weight) * pool_p[w[slot]][d])));
          }
          ++rows;
        };
        for (std::size_t i = 0; i < b; ++i) check_row(i, i, "mixup.labeled", i, pair.x_example(i));
        for (std::size_t i = 0; i < k * b; ++i) check_row(b + i, b + i, "mixup.unlabeled", i, pair.u_example(i));
        for (std::size_t c : uses) all_used_once = all_used_once && c == 1;
      }
  return {worst <= 1e-12 && all_used_once,
          std::to_string(configs) + " transforms, " + std::to_string(rows) + " rows; max deviation " + sci(worst) +
              (all_used_once ? "; every W element used once" : "; W element reuse detected")};
}

Outcome ssl_benefit_moons() {
  const double mm = median_error(load_config("moons_mixmatch.cfg"), "moons_mixmatch");
  const double sup10 = median_error(load_config("moons_supervised_10.cfg"), "moons_supervised_10");
  const double sup_all = median_error(load_config("moons_supervised_all.cfg"), "moons_supervised_all");
  const bool pass = mm <= sup10 - 0.05 && mm <= sup_all + 0.03;
  return {pass, "median error mixmatch " + pct(mm) + ", supervised-10 " + pct(sup10) + ", supervised-all " +
                    pct(sup_all) + " (need gap >= 5 points and within 3 points)"};
}

Outcome ssl_benefit_shapes() {
  const double mm = median_error(load_config("shapes_mixmatch.cfg"), "shapes_mixmatch");
  const double sup = median_error(load_config("shapes_supervised.cfg"), "shapes_supervised");
  return {mm < sup, "median error mixmatch " + pct(mm) + ", supervised " + pct(sup)};
}

Outcome ablation_direction() {
  const auto base = load_config("moons_mixmatch.cfg");
  const double full = median_error(base, "moons_mixmatch");  // reused from criterion 5 when it ran
  const double t1 = median_error(apply_delta(base, ablation_preset("t1")), "moons_t1");
  const double no_mix = median_error(apply_delta(base, ablation_preset("no_mixup")), "moons_no_mixup");
  const bool pass = t1 >= full - 0.01 && no_mix >= full - 0.01;
  return {pass, "median error full " + pct(full) + ", t1 " + pct(t1) + ", no_mixup " + pct(no_mix) +
                    " (each must be >= full - 1 point)"};
}

Outcome determinism() {
  auto c = load_config("moons_mixmatch.cfg");
  c.seeds = {1};
  const auto a = run_experiment(c, scratch().root / "determinism_a");
  const auto b = run_experiment(c, scratch().root / "determinism_b");
  if (!a.all_ok || !b.all_ok) return {false, "run failed: " + a.runs[0].error + b.runs[0].error};
  const auto ma = detail::read_text(a.runs[0].dir / "metrics.csv");
  const auto mb = detail::read_text(b.runs[0].dir / "metrics.csv");
  const bool reused = a.runs[0].reused || b.runs[0].reused;
  return {ma == mb && !reused && !ma.empty(),
          "metrics.csv " + std::to_string(ma.size()) + " bytes, " + (ma == mb ? "identical" : "DIFFERENT") +
              " across two fresh runs"};
}

Outcome schedule_and_reporting() {
  std::vector<std::string> problems;
  const std::size_t ramp = 16000;
  if (lambda_schedule(0, 100, ramp) != 0) problems.push_back("lambda(0) != 0");
  if (lambda_schedule(ramp / 2, 100, ramp) != 50) problems.push_back("lambda(mid) != 50");
  if (lambda_schedule(ramp, 100, ramp) != 100) problems.push_back("lambda(end) != 100");
  if (lambda_schedule(3 * ramp, 100, ramp) != 100) problems.push_back("lambda past the ramp != 100");

  const auto medians = properties::report_median_oracle(1000);
  if (!medians.ok()) problems.push_back("report_median: " + medians.first_failure);

  // EMA toward a fixed target t from e0: e_n = t + (e0 - t) * d^n.
  ParamSet<double> current, ema;
  Stream s(5);
  current.add("w", testing_support::random_tensor({32}, s), true);
  ema.add("w", testing_support::random_tensor({32}, s), true);
  const auto start = ema;
  const double decay = 0.999;
  const std::size_t steps = 10000;
  for (std::size_t n = 0; n < steps; ++n) ema_update(ema, current, decay);
  double worst = 0;
  for (std::size_t j = 0; j < 32; ++j) {
    const double closed = current[0].tensor[j] + (start[0].tensor[j] - current[0].tensor[j]) * std::pow(decay, steps);
    worst = std::max(worst, std::abs(ema[0].tensor[j] - closed));
  }
  if (worst > 1e-12) problems.push_back("EMA closed form off by " + sci(worst));

  std::string detail = "lambda endpoints/midpoint exact; report_median matched on 1000 logs; EMA error " + sci(worst) +
                       " after 10^4 steps";
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

Outcome baseline_reduction() {
  const Dataset train = gen_two_moons(400, 0.1, Stream::derive(0, "acceptance.reduction").key());
  const Dataset test = gen_two_moons(200, 0.1, Stream::derive(1, "acceptance.reduction").key());
  const Split parts = split(train, {10, true, 1});
  ModelSpec spec;
  spec.hidden = 16;
  TrainConfig base;
  base.batch_size = 8;
  base.steps = 100;
  base.checkpoint_every = base.batch_size;  // observe the state after every step
  base.augment = {AugmentKind::jitter2d, 0.1, 0, 0};
  base.mixmatch.rampup_steps = 25;
  base.baseline.weight = 0;

  using Trajectory = std::vector<std::pair<ParamSet<float>, ParamSet<float>>>;
  auto trajectory = [&](Method m) {
    TrainConfig c = base;
    c.method = m;
    Trajectory t;
    run_training<float>(spec, c, 3, parts.labeled, parts.unlabeled, test,
                        [&](const TrainState<float>& s, const MetricsRow&) { t.emplace_back(s.params, s.ema); });
    return t;
  };
  const auto reference = trajectory(Method::supervised);
  std::string detail;
  bool pass = reference.size() == base.steps + 1;
  for (Method m : {Method::pi_model, Method::pseudo_label, Method::mixup, Method::mean_teacher}) {
    const auto t = trajectory(m);
    std::size_t same = 0;
    for (std::size_t i = 0; i < std::min(t.size(), reference.size()); ++i)
      same += bit_identical(t[i].first, reference[i].first) && bit_identical(t[i].second, reference[i].second);
    const bool ok = t.size() == reference.size() && same == reference.size();
    pass = pass && ok;
    detail += (detail.empty() ? "" : ", ") + to_string(m) + " " + std::to_string(same) + "/" +
              std::to_string(reference.size());
  }
  return {pass, "states bit-identical to supervised: " + detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "invariant suite", 60, invariant_suite},
      {2, "gradient verification", 60, gradient_verification},
      {3, "stop-gradient firewall", 10, stop_gradient_firewall},
      {4, "pairing oracle", 10, pairing_oracle},
      {5, "desk-scale SSL benefit (two-moons)", 300, ssl_benefit_moons},
      {6, "desk-scale SSL benefit (shapes)", 900, ssl_benefit_shapes},
      {7, "ablation direction (two-moons)", 600, ablation_direction},
      {8, "determinism regression", 120, determinism},
      {9, "schedule and reporting checks", 60, schedule_and_reporting},
      {10, "baseline reduction", 60, baseline_reduction},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.number)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (seconds > c.budget_seconds) {
      o.pass = false;
      o.detail += "; over the " + std::to_string(static_cast<int>(c.budget_seconds)) + "s budget";
    }
    failed += !o.pass;
    char timing[32];
    std::snprintf(timing, sizeof(timing), "%.1fs", seconds);
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.number << ". " << c.title << ": " << o.detail << " ["
              << timing << "]" << std::endl;
  }
  return failed ? 1 : 0;
}
