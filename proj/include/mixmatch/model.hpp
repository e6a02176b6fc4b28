#pragma once

// Small classifiers (MLP, two-block ConvNet) and parameter EMA.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mixmatch/rng.hpp"
#include "mixmatch/tensor.hpp"

namespace mixmatch {

enum class Architecture { mlp, small_convnet };

inline std::string to_string(Architecture arch) {
  return arch == Architecture::mlp ? "mlp" : "small_convnet";
}

struct ModelSpec {
  Architecture arch = Architecture::mlp;
  Shape input_shape{2};          // per example: {D} or {C, H, W}
  std::size_t classes = 2;
  std::size_t hidden = 64;       // mlp: width of both hidden layers
  std::size_t channels = 32;     // convnet: channels of both conv blocks

  void validate() const {
    if (classes < 2) throw std::invalid_argument("model: class count must be >= 2");
    if (input_shape.empty() || numel(input_shape) == 0)
      throw std::invalid_argument("model: empty input shape");
    if (arch == Architecture::mlp && hidden == 0)
      throw std::invalid_argument("model: mlp hidden width must be > 0");
    if (arch == Architecture::small_convnet) {
      if (input_shape.size() != 3)
        throw std::invalid_argument("model: small_convnet expects input shape [C,H,W], got " +
                                    shape_str(input_shape));
      if (input_shape[1] % 2 || input_shape[2] % 2)
        throw std::invalid_argument("model: small_convnet needs even spatial size");
      if (channels == 0) throw std::invalid_argument("model: convnet channels must be > 0");
    }
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decays = true;  // false for biases: exempt from weight decay
};

/// Ordered, named parameter list. Copies are deep.
template <typename T>
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(const ParamSet& other) { *this = other; }
  ParamSet& operator=(const ParamSet& other) {
    if (this == &other) return *this;
    entries_.clear();
    entries_.reserve(other.entries_.size());
    for (const auto& e : other.entries_) entries_.push_back({e.name, e.tensor.clone(), e.decays});
    return *this;
  }
  ParamSet(ParamSet&&) noexcept = default;
  ParamSet& operator=(ParamSet&&) noexcept = default;

  void add(std::string name, Tensor<T> tensor, bool decays) {
    entries_.push_back({std::move(name), std::move(tensor), decays});
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  NamedParam<T>& operator[](std::size_t i) { return entries_[i]; }
  const NamedParam<T>& operator[](std::size_t i) const { return entries_[i]; }

  const Tensor<T>& at(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e.tensor;
    throw std::out_of_range("params: no parameter named " + std::string(name));
  }

  bool same_structure(const ParamSet& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name != other.entries_[i].name ||
          entries_[i].tensor.shape() != other.entries_[i].tensor.shape())
        return false;
    return true;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// Value-converted copy, e.g. float parameters promoted to double.
  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& e : entries_) {
      std::vector<U> v(e.tensor.values().begin(), e.tensor.values().end());
      out.add(e.name, Tensor<U>::parameter(e.tensor.shape(), std::move(v)), e.decays);
    }
    return out;
  }

 private:
  std::vector<NamedParam<T>> entries_;
};

template <typename T>
bool bit_identical(const ParamSet<T>& a, const ParamSet<T>& b) {
  if (!a.same_structure(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto x = a[i].tensor.values();
    auto y = b[i].tensor.values();
    if (std::memcmp(x.data(), y.data(), x.size_bytes()) != 0) return false;
  }
  return true;
}

namespace detail {

template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Stream& stream) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(stream.normal() * stddev);
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

}  // namespace detail

/// Deterministic in (spec, seed): weights ~ N(0, 2 / fan_in), biases zero.
template <typename T>
ParamSet<T> init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamSet<T> params;
  auto layer_stream = [seed](std::string_view name) { return Stream::derive(seed, "init").fork(name); };
  auto dense = [&](const std::string& name, std::size_t in, std::size_t out) {
    auto s = layer_stream(name);
    params.add(name + ".weight", detail::he_normal<T>({in, out}, in, s), true);
    params.add(name + ".bias", Tensor<T>::zeros({out}, true), false);
  };
  if (spec.arch == Architecture::mlp) {
    dense("fc1", numel(spec.input_shape), spec.hidden);
    dense("fc2", spec.hidden, spec.hidden);
    dense("out", spec.hidden, spec.classes);
  } else {
    const std::size_t cin = spec.input_shape[0];
    const std::size_t ch = spec.channels;
    auto conv = [&](const std::string& name, std::size_t in) {
      auto s = layer_stream(name);
      params.add(name + ".weight", detail::he_normal<T>({ch, in, 3, 3}, in * 9, s), true);
      params.add(name + ".bias", Tensor<T>::zeros({ch}, true), false);
    };
    conv("conv1", cin);
    conv("conv2", ch);
    dense("out", ch * (spec.input_shape[1] / 2) * (spec.input_shape[2] / 2), spec.classes);
  }
  return params;
}

/// Logits [N, L] for a batch [N, input_shape...].
template <typename T>
Tensor<T> forward(const ModelSpec& spec, const ParamSet<T>& params, const Tensor<T>& batch) {
  const Shape& s = batch.shape();
  if (s.size() != spec.input_shape.size() + 1 ||
      !std::equal(spec.input_shape.begin(), spec.input_shape.end(), s.begin() + 1))
    throw std::invalid_argument("predict: batch shape " + shape_str(s) +
                                " does not match model input " + shape_str(spec.input_shape));
  const std::size_t n = s[0];
  auto dense = [&](const Tensor<T>& x, const std::string& name) {
    return add(matmul(x, params.at(name + ".weight")),
               expand_rows(params.at(name + ".bias"), n));
  };
  if (spec.arch == Architecture::mlp) {
    Tensor<T> h = reshape(batch, {n, numel(spec.input_shape)});
    h = relu(dense(h, "fc1"));
    h = relu(dense(h, "fc2"));
    return dense(h, "out");
  }
  const std::size_t height = spec.input_shape[1], width = spec.input_shape[2];
  auto block = [&](const Tensor<T>& x, const std::string& name) {
    return relu(add(conv2d(x, params.at(name + ".weight"), 1),
                    expand_channels(params.at(name + ".bias"), n, height, width)));
  };
  Tensor<T> h = block(batch, "conv1");
  h = block(h, "conv2");
  h = mean_pool2(h);
  h = reshape(h, {n, h.size() / std::max<std::size_t>(n, 1)});
  return dense(h, "out");
}

/// Class-probability rows.
template <typename T>
Tensor<T> predict(const ModelSpec& spec, const ParamSet<T>& params, const Tensor<T>& batch) {
  return softmax(forward(spec, params, batch));
}

/// Anything mapping a feature batch to logits. Lets the SSL code run against
/// real models and against hand-built stand-ins in tests.
template <typename T>
using LogitFn = std::function<Tensor<T>(const Tensor<T>&)>;

template <typename T>
LogitFn<T> as_logit_fn(const ModelSpec& spec, const ParamSet<T>& params) {
  return [&spec, &params](const Tensor<T>& batch) { return forward(spec, params, batch); };
}

/// ema <- decay * ema + (1 - decay) * current, in place on `ema`. Evaluated
/// as ema + (1 - decay) * (current - ema) so that ema == current is an exact
/// fixed point.
template <typename T>
void ema_update(ParamSet<T>& ema, const ParamSet<T>& current, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("ema: decay must be in [0, 1)");
  if (!ema.same_structure(current)) throw std::invalid_argument("ema: parameter structure mismatch");
  const T rest = static_cast<T>(1.0 - decay);
  for (std::size_t i = 0; i < ema.size(); ++i) {
    auto dst = ema[i].tensor.mutable_values();
    auto src = current[i].tensor.values();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += rest * (src[j] - dst[j]);
  }
}

}  // namespace mixmatch
