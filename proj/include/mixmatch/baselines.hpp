#pragma once

// Comparison methods sharing the MixMatch model, data and training harness:
// Pi-model, Pseudo-Label, MixUp used for SSL, and Mean Teacher. Each returns
// only its unsupervised term; the trainer adds the supervised cross-entropy.
//
// The squared-distance losses are averaged over the batch but, unlike the
// MixMatch Brier term, not divided by the class count.

#include <optional>
#include <stdexcept>
#include <vector>

#include "mixmatch/ssl.hpp"

namespace mixmatch {

struct BaselineConfig {
  double weight = 10.0;          // maximum unsupervised weight, ramped like lambda_u
  double threshold = 0.95;       // Pseudo-Label confidence
  double teacher_decay = 0.999;  // Mean Teacher EMA
  double alpha = 0.75;           // MixUp Beta parameter

  void validate() const {
    if (!(weight >= 0)) throw std::invalid_argument("baseline: weight must be >= 0");
    if (!(threshold > 0 && threshold <= 1))
      throw std::invalid_argument("baseline: threshold must be in (0, 1]");
    if (!(teacher_decay >= 0 && teacher_decay < 1))
      throw std::invalid_argument("baseline: teacher_decay must be in [0, 1)");
    if (!(alpha > 0)) throw std::invalid_argument("baseline: alpha must be > 0");
  }

  friend bool operator==(const BaselineConfig&, const BaselineConfig&) = default;
};

namespace detail {

template <typename T>
Tensor<T> mean_squared_distance(const Tensor<T>& a, const Tensor<T>& b) {
  const auto diff = sub(a, b);
  return scale(sum(mul(diff, diff)), T{1} / static_cast<T>(a.dim(0)));
}

}  // namespace detail

/// Mean over the batch of ||p(aug1(u)) - p(aug2(u))||^2; both branches carry gradient.
template <typename T>
Tensor<T> pi_model_loss(const UnlabeledBatch& u, const LogitFn<T>& model,
                        const AugmentPolicy& policy, const Stream& stream) {
  const auto first = softmax(model(augment_unlabeled<T>(u, 1, policy, stream.fork("pi.first"))));
  const auto second =
      softmax(model(augment_unlabeled<T>(u, 1, policy, stream.fork("pi.second"))));
  return detail::mean_squared_distance(first, second);
}

/// Rows of `probs` whose top probability reaches `threshold`.
template <typename T>
std::vector<std::size_t> confident_rows(const Tensor<T>& probs, double threshold) {
  const std::size_t classes = probs.dim(1);
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < probs.dim(0); ++r) {
    T top = probs[r * classes];
    for (std::size_t j = 1; j < classes; ++j) top = std::max(top, probs[r * classes + j]);
    if (static_cast<double>(top) >= threshold) rows.push_back(r);
  }
  return rows;
}

/// Cross-entropy against hard argmax labels of the confident rows of
/// `batch`; zero when no row is confident.
template <typename T>
Tensor<T> pseudo_label_loss(const Tensor<T>& batch, const LogitFn<T>& model, double threshold) {
  if (!(threshold > 0 && threshold <= 1))
    throw std::invalid_argument("pseudo_label: threshold must be in (0, 1]");
  const auto logits = model(batch);
  const auto probs = stop_gradient(softmax(logits));
  const auto rows = confident_rows(probs, threshold);
  if (rows.empty()) return scale(sum(logits), T{0});
  const std::size_t classes = probs.dim(1);
  std::vector<int> labels;
  for (std::size_t r : rows) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < classes; ++j)
      if (probs[r * classes + j] > probs[r * classes + best]) best = j;
    labels.push_back(static_cast<int>(best));
  }
  return loss_labeled(one_hot<T>(labels, classes), gather_rows(logits, rows));
}

/// MixUp across augmented labeled examples and augmented unlabeled examples
/// whose targets are the model's own (frozen, unsharpened) predictions.
/// Vanilla mixing weight; returns CE(mixed labeled) + CE(mixed unlabeled).
/// `forced_weight` replaces the Beta draws (testing hook).
template <typename T>
Tensor<T> mixup_ssl_loss(const LabeledBatch& x, const UnlabeledBatch& u, const LogitFn<T>& model,
                         double alpha, const AugmentPolicy& policy, const Stream& stream,
                         std::optional<double> forced_weight = std::nullopt) {
  const std::size_t b = x.size();
  if (u.size() != b) throw std::invalid_argument("mixup_ssl: batch sizes differ");
  const auto x_hat = augment_labeled<T>(x, policy, stream.fork("mixup_ssl"));
  const auto u_hat = augment_unlabeled<T>(u, 1, policy, stream.fork("mixup_ssl"));
  const auto guesses = stop_gradient(softmax(model(u_hat)));
  const auto pool_features = concat0<T>({x_hat, u_hat});
  const auto pool_targets = concat0<T>({one_hot<T>(x.labels, x.classes), guesses});

  auto perm = detail::range(0, 2 * b);
  Stream s = stream.fork("mixup_ssl.shuffle");
  shuffle(std::span(perm), s);
  std::vector<T> weights(2 * b);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    Stream ws = stream.fork("mixup_ssl.weight", i);
    weights[i] = static_cast<T>(forced_weight ? *forced_weight : mixup_weight(alpha, false, ws));
  }
  auto mixed = [&](std::size_t begin) {
    std::vector<std::size_t> partner(perm.begin() + begin, perm.begin() + begin + b);
    std::vector<T> w(weights.begin() + begin, weights.begin() + begin + b);
    auto self = detail::range(begin, begin + b);
    return loss_labeled(detail::mix_rows(pool_targets, self, partner, w),
                        model(detail::mix_rows(pool_features, self, partner, w)));
  };
  return add(mixed(0), mixed(b));
}

/// Mean over the batch of ||student(aug1(u)) - teacher(aug2(u))||^2 with the
/// teacher branch frozen.
template <typename T>
Tensor<T> mean_teacher_loss(const UnlabeledBatch& u, const LogitFn<T>& student,
                            const LogitFn<T>& teacher, const AugmentPolicy& policy,
                            const Stream& stream) {
  const auto s = softmax(student(augment_unlabeled<T>(u, 1, policy, stream.fork("mt.student"))));
  const auto t = stop_gradient(
      softmax(teacher(augment_unlabeled<T>(u, 1, policy, stream.fork("mt.teacher")))));
  return detail::mean_squared_distance(s, t);
}

}  // namespace mixmatch
