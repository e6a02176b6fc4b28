#pragma once

// Counter-based keyed random streams.
//
// Every random decision in the library draws from a Stream whose key is
// derived from (root seed, purpose, epoch/step, index). Results therefore do
// not depend on the order in which batches or examples are processed.
// Distributions are implemented here rather than taken from <random> because
// the standard distributions are not specified bit-for-bit across platforms.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace mixmatch {

namespace detail {

constexpr std::uint64_t golden_gamma = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view text) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

constexpr std::uint64_t combine(std::uint64_t key, std::uint64_t value) noexcept {
  return mix64(key ^ mix64(value + golden_gamma));
}

}  // namespace detail

/// Deterministic random stream: the n-th draw is a pure function of (key, n).
/// Satisfies UniformRandomBitGenerator so it can drive std algorithms when
/// cross-platform reproducibility is not needed.
class Stream {
 public:
  using result_type = std::uint64_t;

  constexpr explicit Stream(std::uint64_t key) noexcept : key_(key) {}

  /// Root stream for one purpose of one run.
  static constexpr Stream derive(std::uint64_t seed, std::string_view purpose,
                                 std::uint64_t epoch = 0, std::uint64_t index = 0) noexcept {
    std::uint64_t k = detail::combine(detail::mix64(seed), detail::fnv1a(purpose));
    k = detail::combine(k, epoch);
    k = detail::combine(k, index);
    return Stream(k);
  }

  /// Independent child stream; does not advance this stream.
  constexpr Stream fork(std::string_view purpose, std::uint64_t index = 0) const noexcept {
    return Stream(detail::combine(detail::combine(key_, detail::fnv1a(purpose)), index));
  }

  constexpr std::uint64_t key() const noexcept { return key_; }
  constexpr std::uint64_t position() const noexcept { return counter_; }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept { return next_u64(); }

  constexpr std::uint64_t next_u64() noexcept {
    ++counter_;
    return detail::mix64(key_ + counter_ * detail::golden_gamma);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  constexpr double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n), unbiased (rejection on the top range).
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return r % n;
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Standard normal via Box-Muller; consumes two uniforms per draw.
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  /// Gamma(shape, 1) by Marsaglia-Tsang; shape < 1 uses the U^(1/shape) boost.
  double gamma(double shape) noexcept {
    if (shape < 1.0) {
      double u = uniform();
      while (u <= 0.0) u = uniform();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = 0.0;
      double v = 0.0;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  /// Beta(a, b) as X / (X + Y) with X ~ Gamma(a), Y ~ Gamma(b).
  double beta(double a, double b) noexcept {
    const double x = gamma(a);
    const double y = gamma(b);
    const double s = x + y;
    return s > 0.0 ? x / s : 0.5;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// In-place Fisher-Yates shuffle driven by `stream`.
template <typename T>
void shuffle(std::span<T> items, Stream& stream) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(stream.below(i));
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

}  // namespace mixmatch
