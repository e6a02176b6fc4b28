#pragma once

// MixMatch: label guessing with temperature sharpening, order-preserving
// MixUp, the batch transform, its loss terms and the unsupervised-weight ramp.
//
// Random streams used by mixmatch_transform, all forked from the caller's
// `stream`:
//   "augment.labeled", b          augmentation of labeled example b
//   "augment.unlabeled", k*B + b  k-th augmentation of unlabeled example b
//   "shuffle.pool"                permutation of the combined pool (mode full)
//   "shuffle.labeled"             permutation of the labeled pool (labeled_only, separate)
//   "shuffle.unlabeled"           permutation of the unlabeled pool (unlabeled_only, separate)
//   "mixup.labeled", i            Beta draw for X'_i
//   "mixup.unlabeled", i          Beta draw for U'_i
// The pool is X-hat (indices 0..B-1) followed by U-hat (indices B..B+KB-1),
// where U-hat row k*B + b is the k-th augmentation of u_b.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixmatch/data.hpp"
#include "mixmatch/model.hpp"
#include "mixmatch/rng.hpp"
#include "mixmatch/tensor.hpp"

namespace mixmatch {

enum class MixupMode { full, labeled_only, unlabeled_only, separate, off };

struct MixMatchConfig {
  double temperature = 0.5;
  std::size_t augmentations = 2;  // K
  double alpha = 0.75;
  double lambda_u = 100.0;        // maximum unsupervised weight
  std::size_t rampup_steps = 16000;
  MixupMode mixup_mode = MixupMode::full;
  bool ema_guessing = false;

  void validate() const {
    if (!(temperature > 0)) throw std::invalid_argument("mixmatch: T must be > 0");
    if (augmentations < 1) throw std::invalid_argument("mixmatch: K must be >= 1");
    if (!(alpha > 0)) throw std::invalid_argument("mixmatch: alpha must be > 0");
    if (!(lambda_u >= 0)) throw std::invalid_argument("mixmatch: lambda_u must be >= 0");
  }

  friend bool operator==(const MixMatchConfig&, const MixMatchConfig&) = default;
};

/// Features plus a soft target on the simplex.
template <typename T>
struct TargetedExample {
  std::vector<T> features;
  std::vector<T> target;
};

// ---------------------------------------------------------------------------
// Sharpening and label guessing

/// p_i^(1/T) / sum_j p_j^(1/T) for a single distribution.
template <typename T>
std::vector<T> sharpen(std::span<const T> p, T temperature) {
  const auto row = Tensor<T>::constant({1, p.size()}, std::vector<T>(p.begin(), p.end()));
  const auto out = sharpen_rows(row, temperature);
  return {out.values().begin(), out.values().end()};
}

template <typename T>
std::vector<T> sharpen(const std::vector<T>& p, T temperature) {
  return sharpen(std::span<const T>(p), temperature);
}

/// Average of the K prediction blocks of `probs` ([K*B, L], row k*B + b),
/// sharpened, still attached to the graph. Callers normally want guess_labels.
template <typename T>
Tensor<T> guess_labels_unstopped(const Tensor<T>& probs, std::size_t batch, std::size_t k,
                                 T temperature) {
  if (probs.rank() != 2 || probs.dim(0) != batch * k)
    detail::shape_error("guess_labels", probs.shape(), "expected [K*B, L]");
  Tensor<T> total;
  for (std::size_t a = 0; a < k; ++a) {
    std::vector<std::size_t> rows(batch);
    std::iota(rows.begin(), rows.end(), a * batch);
    auto block = gather_rows(probs, std::move(rows));
    total = total.defined() ? add(total, block) : block;
  }
  return sharpen_rows(scale(total, T{1} / static_cast<T>(k)), temperature);
}

/// q_b = Sharpen(mean_k p(y | u_hat_{b,k}), T) with gradients blocked.
template <typename T>
Tensor<T> guess_labels(const Tensor<T>& probs, std::size_t batch, std::size_t k, T temperature) {
  return stop_gradient(guess_labels_unstopped(probs, batch, k, temperature));
}

/// K augmentations of every example of `u`, laid out as row k*B + b.
template <typename T>
Tensor<T> augment_unlabeled(const UnlabeledBatch& u, std::size_t k, const AugmentPolicy& policy,
                            const Stream& stream) {
  const std::size_t b = u.size(), d = numel(u.example_shape);
  std::vector<float> buf(k * b * d);
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t i = 0; i < b; ++i) {
      Stream s = stream.fork("augment.unlabeled", a * b + i);
      augment_into(u.example(i), std::span(buf).subspan((a * b + i) * d, d), u.example_shape,
                   policy, s);
    }
  Shape shape{k * b};
  shape.insert(shape.end(), u.example_shape.begin(), u.example_shape.end());
  return Tensor<T>::constant(std::move(shape), std::vector<T>(buf.begin(), buf.end()));
}

template <typename T>
Tensor<T> augment_labeled(const LabeledBatch& x, const AugmentPolicy& policy,
                          const Stream& stream) {
  const std::size_t b = x.size(), d = numel(x.example_shape);
  std::vector<float> buf(b * d);
  for (std::size_t i = 0; i < b; ++i) {
    Stream s = stream.fork("augment.labeled", i);
    augment_into(x.example(i), std::span(buf).subspan(i * d, d), x.example_shape, policy, s);
  }
  Shape shape{b};
  shape.insert(shape.end(), x.example_shape.begin(), x.example_shape.end());
  return Tensor<T>::constant(std::move(shape), std::vector<T>(buf.begin(), buf.end()));
}

template <typename T>
Tensor<T> one_hot(std::span<const int> labels, std::size_t classes) {
  std::vector<T> v(labels.size() * classes, T{0});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw std::out_of_range("one_hot: label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(classes) + ")");
    v[i * classes + static_cast<std::size_t>(labels[i])] = T{1};
  }
  return Tensor<T>::constant({labels.size(), classes}, std::move(v));
}

/// Label guess for a single unlabeled example: K augmentations through
/// `model`, averaged and sharpened.
template <typename T>
std::vector<T> guess_label(const Example& u, const LogitFn<T>& model, std::size_t k,
                           T temperature, const AugmentPolicy& policy, const Stream& stream) {
  UnlabeledBatch batch{u.shape, u.features};
  const auto probs = softmax(model(augment_unlabeled<T>(batch, k, policy, stream)));
  const auto q = guess_labels(probs, 1, k, temperature);
  return {q.values().begin(), q.values().end()};
}

// ---------------------------------------------------------------------------
// MixUp

/// lambda ~ Beta(alpha, alpha); returns max(lambda, 1 - lambda) when
/// `favor_first`, the raw draw otherwise.
inline double mixup_weight(double alpha, bool favor_first, Stream& stream) {
  const double lambda = stream.beta(alpha, alpha);
  return favor_first ? std::max(lambda, 1.0 - lambda) : lambda;
}

template <typename T>
TargetedExample<T> mixup_with_weight(const TargetedExample<T>& a, const TargetedExample<T>& b,
                                     T weight) {
  if (a.features.size() != b.features.size() || a.target.size() != b.target.size())
    throw std::invalid_argument("mixup: mismatched features or targets");
  TargetedExample<T> out{std::vector<T>(a.features.size()), std::vector<T>(a.target.size())};
  for (std::size_t i = 0; i < a.features.size(); ++i)
    out.features[i] = weight * a.features[i] + (T{1} - weight) * b.features[i];
  for (std::size_t i = 0; i < a.target.size(); ++i)
    out.target[i] = weight * a.target[i] + (T{1} - weight) * b.target[i];
  return out;
}

/// MixMatch's MixUp: the result stays closer to `a` (weight >= 1/2 on a).
template <typename T>
TargetedExample<T> mixup_pair(const TargetedExample<T>& a, const TargetedExample<T>& b,
                              double alpha, Stream& stream) {
  if (!(alpha > 0)) throw std::invalid_argument("mixup: alpha must be > 0");
  return mixup_with_weight(a, b, static_cast<T>(mixup_weight(alpha, true, stream)));
}

namespace detail {

/// weights[i] * rows(self[i]) + (1 - weights[i]) * rows(partner[i]) of `pool`.
template <typename T>
Tensor<T> mix_rows(const Tensor<T>& pool, std::vector<std::size_t> self,
                   std::vector<std::size_t> partner, const std::vector<T>& weights) {
  std::vector<T> rest(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) rest[i] = T{1} - weights[i];
  return add(scale_rows(gather_rows(pool, std::move(self)), weights),
             scale_rows(gather_rows(pool, std::move(partner)), std::move(rest)));
}

inline std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Batch transform

inline constexpr std::size_t no_partner = std::numeric_limits<std::size_t>::max();

/// Output of the MixMatch transform, stored batch-major. Targets may hang off
/// the autodiff graph only through stop_gradient.
template <typename T>
struct BatchPair {
  Tensor<T> x_features;  // [B, ...]
  Tensor<T> x_targets;   // [B, L]
  Tensor<T> u_features;  // [K*B, ...]
  Tensor<T> u_targets;   // [K*B, L]
  Tensor<T> guesses;     // [B, L] sharpened guesses q_b before mixing

  // Pool index of each row's MixUp partner (no_partner when unmixed) and the
  // weight on the row's own example.
  std::vector<std::size_t> x_partner, u_partner;
  std::vector<T> x_weight, u_weight;

  std::size_t batch_size() const { return x_features.dim(0); }

  TargetedExample<T> x_example(std::size_t i) const { return row(x_features, x_targets, i); }
  TargetedExample<T> u_example(std::size_t i) const { return row(u_features, u_targets, i); }

 private:
  static TargetedExample<T> row(const Tensor<T>& f, const Tensor<T>& t, std::size_t i) {
    const std::size_t d = f.size() / f.dim(0), l = t.dim(1);
    return {{f.values().begin() + i * d, f.values().begin() + (i + 1) * d},
            {t.values().begin() + i * l, t.values().begin() + (i + 1) * l}};
  }
};

/// Runs the MixMatch transform on one labeled and one equally sized unlabeled
/// batch. `guess_model` produces the logits used for label guessing.
template <typename T>
BatchPair<T> mixmatch_transform(const LabeledBatch& x, const UnlabeledBatch& u,
                                const MixMatchConfig& config, const LogitFn<T>& guess_model,
                                const AugmentPolicy& policy, const Stream& stream) {
  config.validate();
  const std::size_t b = x.size();
  if (u.size() != b)
    throw std::invalid_argument("mixmatch: labeled batch has " + std::to_string(b) +
                                " examples but unlabeled batch has " + std::to_string(u.size()));
  if (b == 0) throw std::invalid_argument("mixmatch: empty batch");
  if (x.example_shape != u.example_shape)
    detail::shape_error("mixmatch", x.example_shape, u.example_shape);
  const std::size_t k = config.augmentations;
  const std::size_t classes = x.classes;

  BatchPair<T> out;
  const auto x_hat = augment_labeled<T>(x, policy, stream);
  const auto u_hat = augment_unlabeled<T>(u, k, policy, stream);
  const auto probs = softmax(guess_model(u_hat));
  if (probs.dim(1) != classes)
    detail::shape_error("mixmatch", probs.shape(), "guess model class count differs from labels");
  out.guesses = guess_labels(probs, b, k, static_cast<T>(config.temperature));

  std::vector<std::size_t> owner(k * b);
  for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = i % b;
  const auto pool_features = concat0<T>({x_hat, u_hat});
  const auto pool_targets =
      concat0<T>({one_hot<T>(x.labels, classes), gather_rows(out.guesses, owner)});

  const std::size_t n_pool = b + k * b;
  out.x_partner.assign(b, no_partner);
  out.u_partner.assign(k * b, no_partner);
  auto permuted = [&](std::size_t begin, std::size_t end, std::string_view purpose) {
    auto perm = detail::range(begin, end);
    Stream s = stream.fork(purpose);
    shuffle(std::span(perm), s);
    return perm;
  };
  const MixupMode mode = config.mixup_mode;
  if (mode == MixupMode::full) {
    const auto w = permuted(0, n_pool, "shuffle.pool");
    std::copy_n(w.begin(), b, out.x_partner.begin());
    std::copy(w.begin() + b, w.end(), out.u_partner.begin());
  }
  if (mode == MixupMode::labeled_only || mode == MixupMode::separate)
    out.x_partner = permuted(0, b, "shuffle.labeled");
  if (mode == MixupMode::unlabeled_only || mode == MixupMode::separate)
    out.u_partner = permuted(b, n_pool, "shuffle.unlabeled");

  auto assemble = [&](const std::vector<std::size_t>& partner, std::size_t offset,
                      std::string_view purpose, std::vector<T>& weights, Tensor<T>& features,
                      Tensor<T>& targets) {
    auto self = detail::range(offset, offset + partner.size());
    if (partner.empty() || partner.front() == no_partner) {
      weights.assign(partner.size(), T{1});
      features = gather_rows(pool_features, self);
      targets = gather_rows(pool_targets, std::move(self));
      return;
    }
    weights.resize(partner.size());
    for (std::size_t i = 0; i < partner.size(); ++i) {
      Stream s = stream.fork(purpose, i);
      weights[i] = static_cast<T>(mixup_weight(config.alpha, true, s));
    }
    features = detail::mix_rows(pool_features, self, partner, weights);
    targets = detail::mix_rows(pool_targets, std::move(self), partner, weights);
  };
  assemble(out.x_partner, 0, "mixup.labeled", out.x_weight, out.x_features, out.x_targets);
  assemble(out.u_partner, b, "mixup.unlabeled", out.u_weight, out.u_features, out.u_targets);
  return out;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean cross-entropy H(target, softmax(logits)), via log-softmax.
template <typename T>
Tensor<T> loss_labeled(const Tensor<T>& targets, const Tensor<T>& logits) {
  detail::require_same("loss_labeled", targets, logits);
  if (logits.rank() != 2 || logits.dim(0) == 0)
    detail::shape_error("loss_labeled", logits.shape(), "expected non-empty [N, L]");
  return scale(sum(mul(targets, log_softmax(logits))), T{-1} / static_cast<T>(logits.dim(0)));
}

/// Brier score: sum ||target - softmax(logits)||^2 / (L * N).
template <typename T>
Tensor<T> loss_unlabeled(const Tensor<T>& targets, const Tensor<T>& logits) {
  detail::require_same("loss_unlabeled", targets, logits);
  if (logits.rank() != 2 || logits.dim(0) == 0)
    detail::shape_error("loss_unlabeled", logits.shape(), "expected non-empty [N, L]");
  const auto diff = sub(softmax(logits), targets);
  return scale(sum(mul(diff, diff)), T{1} / static_cast<T>(logits.dim(0) * logits.dim(1)));
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& loss_x, const Tensor<T>& loss_u, double lambda_u) {
  if (!(lambda_u >= 0)) throw std::invalid_argument("combined_loss: lambda_u must be >= 0");
  return add(loss_x, scale(loss_u, static_cast<T>(lambda_u)));
}

template <typename T>
struct MixMatchLoss {
  Tensor<T> loss_x;
  Tensor<T> loss_u;
  Tensor<T> total;
};

/// L_X on X', L_U on U' and their weighted sum, through `model`.
template <typename T>
MixMatchLoss<T> mixmatch_loss(const BatchPair<T>& pair, const LogitFn<T>& model,
                              double lambda_u) {
  MixMatchLoss<T> out;
  out.loss_x = loss_labeled(pair.x_targets, model(pair.x_features));
  out.loss_u = loss_unlabeled(pair.u_targets, model(pair.u_features));
  out.total = combined_loss(out.loss_x, out.loss_u, lambda_u);
  return out;
}

/// Linear ramp lambda_max * min(1, step / rampup_steps); constant when rampup_steps == 0.
inline double lambda_schedule(std::size_t step, double lambda_max, std::size_t rampup_steps) {
  if (rampup_steps == 0) return lambda_max;
  const double frac = static_cast<double>(step) / static_cast<double>(rampup_steps);
  return lambda_max * std::min(1.0, frac);
}

}  // namespace mixmatch
