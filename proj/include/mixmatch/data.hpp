#pragma once

// Datasets, labeled/unlabeled splits, stochastic augmentation and batching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixmatch/rng.hpp"
#include "mixmatch/tensor.hpp"

namespace mixmatch {

/// Labeled examples stored contiguously: example i occupies
/// features[i * example_size() .. (i + 1) * example_size()).
struct Dataset {
  Shape example_shape;
  std::size_t classes = 0;
  std::vector<float> features;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t example_size() const { return numel(example_shape); }
  std::span<const float> example(std::size_t i) const {
    return std::span<const float>(features).subspan(i * example_size(), example_size());
  }
};

/// Unlabeled pool. Carries no labels by construction; the true labels of a
/// split live in HiddenLabels, which only the evaluator receives.
struct UnlabeledSet {
  Shape example_shape;
  std::size_t classes = 0;
  std::vector<float> features;

  std::size_t size() const {
    const std::size_t d = numel(example_shape);
    return d ? features.size() / d : 0;
  }
  std::size_t example_size() const { return numel(example_shape); }
  std::span<const float> example(std::size_t i) const {
    return std::span<const float>(features).subspan(i * example_size(), example_size());
  }
};

struct HiddenLabels {
  std::vector<int> labels;
};

struct Example {
  std::vector<float> features;
  Shape shape;
  std::optional<int> label;
};

// ---------------------------------------------------------------------------
// Generators

/// Two interleaved unit half-circles with isotropic Gaussian noise. Even
/// indices belong to class 0 (upper arc), odd to class 1 (lower arc).
inline Dataset gen_two_moons(std::size_t n, double noise, std::uint64_t seed) {
  if (n % 2) throw std::invalid_argument("two_moons: n must be even");
  if (noise < 0) throw std::invalid_argument("two_moons: noise must be >= 0");
  Dataset d{{2}, 2, std::vector<float>(2 * n), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    Stream s = Stream::derive(seed, "two_moons", 0, i);
    const double t = std::numbers::pi * s.uniform();
    const int label = static_cast<int>(i % 2);
    double x = label == 0 ? std::cos(t) : 1.0 - std::cos(t);
    double y = label == 0 ? std::sin(t) : 0.5 - std::sin(t);
    if (noise > 0) {
      x += noise * s.normal();
      y += noise * s.normal();
    }
    d.features[2 * i] = static_cast<float>(x);
    d.features[2 * i + 1] = static_cast<float>(y);
    d.labels[i] = label;
  }
  return d;
}

enum class ShapeKind { filled_square, hollow_square, cross, diagonal };

/// Side length of the rendered glyph inside a `side` x `side` canvas.
inline std::size_t glyph_size(std::size_t side) { return side / 2 + 1; }

/// Renders one clean glyph of `kind` with its top-left corner at (top, left).
inline void draw_glyph(std::span<float> canvas, std::size_t side, ShapeKind kind,
                       std::size_t top, std::size_t left) {
  const std::size_t m = glyph_size(side);
  for (std::size_t y = 0; y < m; ++y)
    for (std::size_t x = 0; x < m; ++x) {
      bool on = false;
      switch (kind) {
        case ShapeKind::filled_square: on = true; break;
        case ShapeKind::hollow_square: on = y == 0 || x == 0 || y == m - 1 || x == m - 1; break;
        case ShapeKind::cross: on = y == m / 2 || x == m / 2; break;
        case ShapeKind::diagonal: on = x == y; break;
      }
      if (on) canvas[(top + y) * side + left + x] = 1.0f;
    }
}

/// Single-channel images of simple glyphs at random offsets with additive
/// pixel noise, clipped to [0, 1]. Class i renders ShapeKind(i).
inline Dataset gen_shapes(std::size_t n, std::size_t side, std::size_t classes, double noise,
                          std::uint64_t seed) {
  if (side < 8) throw std::invalid_argument("shapes: side must be >= 8");
  if (classes < 2 || classes > 4) throw std::invalid_argument("shapes: classes must be 2, 3 or 4");
  if (n % classes) throw std::invalid_argument("shapes: n must be divisible by classes");
  Dataset d{{1, side, side}, classes, std::vector<float>(n * side * side, 0.0f),
            std::vector<int>(n)};
  const std::size_t slack = side - glyph_size(side) + 1;
  for (std::size_t i = 0; i < n; ++i) {
    Stream s = Stream::derive(seed, "shapes", 0, i);
    const int label = static_cast<int>(i % classes);
    std::span<float> img(d.features.data() + i * side * side, side * side);
    const auto top = static_cast<std::size_t>(s.below(slack));
    const auto left = static_cast<std::size_t>(s.below(slack));
    draw_glyph(img, side, static_cast<ShapeKind>(label), top, left);
    if (noise > 0)
      for (auto& px : img) px = std::clamp(static_cast<float>(px + noise * s.normal()), 0.0f, 1.0f);
    d.labels[i] = label;
  }
  return d;
}

// ---------------------------------------------------------------------------
// IDX ingestion

class IdxError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, count_mismatch };
  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::io, "idx: cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::string& bytes, std::size_t pos) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[pos + i]);
  return v;
}

/// Validates the header of an unsigned-byte IDX array of `rank` and returns its dims.
inline std::vector<std::uint32_t> idx_header(const std::string& bytes, std::uint32_t rank,
                                             const std::filesystem::path& path) {
  if (bytes.size() < 4)
    throw IdxError(IdxError::Kind::truncated, "idx: " + path.string() + " is truncated (no magic)");
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != (0x0800u | rank))
    throw IdxError(IdxError::Kind::bad_magic,
                   "idx: " + path.string() + " has bad magic for unsigned-byte rank " +
                       std::to_string(rank));
  if (bytes.size() < 4 + 4 * rank)
    throw IdxError(IdxError::Kind::truncated, "idx: " + path.string() + " has a truncated header");
  std::vector<std::uint32_t> dims(rank);
  std::size_t payload = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    dims[i] = read_be32(bytes, 4 + 4 * i);
    payload *= dims[i];
  }
  if (bytes.size() - (4 + 4 * rank) < payload)
    throw IdxError(IdxError::Kind::truncated, "idx: " + path.string() + " has a truncated payload");
  return dims;
}

}  // namespace detail

/// Loads an IDX image file (ubyte, rank 3) and label file (ubyte, rank 1).
/// Pixels are rescaled to [0, 1]; images get shape [1, rows, cols].
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const std::string images = detail::read_file(images_path);
  const std::string labels = detail::read_file(labels_path);
  const auto idims = detail::idx_header(images, 3, images_path);
  const auto ldims = detail::idx_header(labels, 1, labels_path);
  if (idims[0] != ldims[0])
    throw IdxError(IdxError::Kind::count_mismatch,
                   "idx: " + std::to_string(idims[0]) + " images but " +
                       std::to_string(ldims[0]) + " labels");
  Dataset d;
  d.example_shape = {1, idims[1], idims[2]};
  const std::size_t pixels = static_cast<std::size_t>(idims[0]) * idims[1] * idims[2];
  d.features.resize(pixels);
  for (std::size_t i = 0; i < pixels; ++i)
    d.features[i] = static_cast<float>(static_cast<unsigned char>(images[16 + i])) / 255.0f;
  d.labels.resize(ldims[0]);
  int max_label = 1;
  for (std::size_t i = 0; i < d.labels.size(); ++i) {
    d.labels[i] = static_cast<unsigned char>(labels[8 + i]);
    max_label = std::max(max_label, d.labels[i]);
  }
  d.classes = static_cast<std::size_t>(max_label) + 1;
  return d;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitSpec {
  std::size_t labeled = 0;
  bool balanced = true;
  std::uint64_t seed = 0;
};

struct Split {
  Dataset labeled;
  UnlabeledSet unlabeled;
  HiddenLabels hidden;  // aligned with `unlabeled`
  std::vector<std::size_t> labeled_indices;
  std::vector<std::size_t> unlabeled_indices;
};

inline Dataset subset(const Dataset& d, std::span<const std::size_t> indices) {
  Dataset out{d.example_shape, d.classes, {}, {}};
  out.features.reserve(indices.size() * d.example_size());
  for (std::size_t i : indices) {
    auto ex = d.example(i);
    out.features.insert(out.features.end(), ex.begin(), ex.end());
    out.labels.push_back(d.labels[i]);
  }
  return out;
}

/// Partitions `d` into a labeled subset of spec.labeled examples and an
/// unlabeled remainder. Both index lists are returned in ascending order.
inline Split split(const Dataset& d, const SplitSpec& spec) {
  if (spec.labeled > d.size())
    throw std::invalid_argument("split: labeled count " + std::to_string(spec.labeled) +
                                " exceeds dataset size " + std::to_string(d.size()));
  Stream s = Stream::derive(spec.seed, "split");
  std::vector<std::size_t> chosen;
  if (spec.balanced) {
    if (d.classes == 0 || spec.labeled % d.classes)
      throw std::invalid_argument("split: balanced labeled count " + std::to_string(spec.labeled) +
                                  " is not divisible by " + std::to_string(d.classes) + " classes");
    const std::size_t per_class = spec.labeled / d.classes;
    for (std::size_t c = 0; c < d.classes; ++c) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < d.size(); ++i)
        if (d.labels[i] == static_cast<int>(c)) members.push_back(i);
      if (members.size() < per_class)
        throw std::invalid_argument("split: class " + std::to_string(c) + " has only " +
                                    std::to_string(members.size()) + " examples, need " +
                                    std::to_string(per_class));
      shuffle(std::span(members), s);
      chosen.insert(chosen.end(), members.begin(), members.begin() + per_class);
    }
  } else {
    std::vector<std::size_t> all(d.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    shuffle(std::span(all), s);
    chosen.assign(all.begin(), all.begin() + spec.labeled);
  }
  std::sort(chosen.begin(), chosen.end());

  Split out;
  std::vector<bool> is_labeled(d.size(), false);
  for (std::size_t i : chosen) is_labeled[i] = true;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!is_labeled[i]) out.unlabeled_indices.push_back(i);
  out.labeled_indices = std::move(chosen);
  out.labeled = subset(d, out.labeled_indices);
  Dataset rest = subset(d, out.unlabeled_indices);
  out.unlabeled = UnlabeledSet{d.example_shape, d.classes, std::move(rest.features)};
  out.hidden.labels = std::move(rest.labels);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

enum class AugmentKind { jitter2d, image_flip_crop };

struct AugmentPolicy {
  AugmentKind kind = AugmentKind::jitter2d;
  double jitter_sigma = 0.0;  // Gaussian noise; images are clipped to [0, 1] afterwards
  std::size_t crop_padding = 2;
  double flip_probability = 0.5;

  friend bool operator==(const AugmentPolicy&, const AugmentPolicy&) = default;
};

/// Mirrors each row of a [C, H, W] image.
inline void flip_horizontal(std::span<float> image, const Shape& shape) {
  const std::size_t w = shape[2];
  for (std::size_t row = 0; row < shape[0] * shape[1]; ++row)
    std::reverse(image.begin() + row * w, image.begin() + (row + 1) * w);
}

/// Writes one augmented draw of `in` into `out` (same size).
inline void augment_into(std::span<const float> in, std::span<float> out, const Shape& shape,
                         const AugmentPolicy& policy, Stream& stream) {
  if (policy.kind == AugmentKind::jitter2d) {
    if (shape.size() != 1)
      throw std::invalid_argument("augment: jitter2d expects point features, got shape " +
                                  shape_str(shape));
    for (std::size_t i = 0; i < in.size(); ++i)
      out[i] = static_cast<float>(in[i] + policy.jitter_sigma * stream.normal());
    return;
  }
  if (shape.size() != 3)
    throw std::invalid_argument("augment: image_flip_crop expects [C,H,W] features, got shape " +
                                shape_str(shape));
  const std::size_t c = shape[0], h = shape[1], w = shape[2], p = policy.crop_padding;
  const auto dy = static_cast<std::ptrdiff_t>(stream.below(2 * p + 1)) - static_cast<std::ptrdiff_t>(p);
  const auto dx = static_cast<std::ptrdiff_t>(stream.below(2 * p + 1)) - static_cast<std::ptrdiff_t>(p);
  const bool flip = stream.bernoulli(policy.flip_probability);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
        const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) + dx;
        const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) &&
                            sx < static_cast<std::ptrdiff_t>(w);
        out[(ch * h + y) * w + x] =
            inside ? in[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] : 0.0f;
      }
  if (flip) flip_horizontal(out, shape);
  if (policy.jitter_sigma > 0)
    for (auto& px : out)
      px = std::clamp(static_cast<float>(px + policy.jitter_sigma * stream.normal()), 0.0f, 1.0f);
}

/// One stochastic draw; the label is carried through untouched.
inline Example augment(const Example& x, const AugmentPolicy& policy, Stream& stream) {
  Example out{std::vector<float>(x.features.size()), x.shape, x.label};
  augment_into(x.features, out.features, x.shape, policy, stream);
  return out;
}

// ---------------------------------------------------------------------------
// Batching

struct BatchIndices {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;  // empty when the unlabeled pool is empty
};

/// One epoch of (labeled, unlabeled) index batches. The epoch spans
/// ceil(max(n_labeled, n_unlabeled) / B) steps; each pool is read through a
/// chain of Fisher-Yates permutations keyed by (seed, epoch, pass), so the
/// smaller pool cycles and every batch holds exactly B indices of each.
/// An empty unlabeled pool yields labeled-only batches.
inline std::vector<BatchIndices> batches(std::size_t n_labeled, std::size_t n_unlabeled,
                                         std::size_t batch_size, std::uint64_t seed,
                                         std::uint64_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batches: batch size must be >= 1");
  if (batch_size > n_labeled || (n_unlabeled > 0 && batch_size > n_unlabeled))
    throw std::invalid_argument("batches: batch size " + std::to_string(batch_size) +
                                " exceeds labeled (" + std::to_string(n_labeled) +
                                ") or unlabeled (" + std::to_string(n_unlabeled) + ") set size");
  const std::size_t steps = (std::max(n_labeled, n_unlabeled) + batch_size - 1) / batch_size;
  auto draw = [&](std::size_t n, std::string_view purpose) {
    std::vector<std::size_t> order;
    order.reserve(steps * batch_size + n);
    for (std::uint64_t pass = 0; order.size() < steps * batch_size; ++pass) {
      std::vector<std::size_t> perm(n);
      for (std::size_t i = 0; i < n; ++i) perm[i] = i;
      Stream s = Stream::derive(seed, purpose, epoch, pass);
      shuffle(std::span(perm), s);
      order.insert(order.end(), perm.begin(), perm.end());
    }
    return order;
  };
  const auto lab = draw(n_labeled, "batches.labeled");
  const auto unl = n_unlabeled ? draw(n_unlabeled, "batches.unlabeled") : std::vector<std::size_t>{};
  std::vector<BatchIndices> out(steps);
  for (std::size_t b = 0; b < steps; ++b) {
    out[b].labeled.assign(lab.begin() + b * batch_size, lab.begin() + (b + 1) * batch_size);
    if (n_unlabeled)
      out[b].unlabeled.assign(unl.begin() + b * batch_size, unl.begin() + (b + 1) * batch_size);
  }
  return out;
}

/// Raw (unaugmented) batch contents handed to the SSL transforms.
struct LabeledBatch {
  Shape example_shape;
  std::size_t classes = 0;
  std::vector<float> features;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const float> example(std::size_t i) const {
    const std::size_t d = numel(example_shape);
    return std::span<const float>(features).subspan(i * d, d);
  }
};

struct UnlabeledBatch {
  Shape example_shape;
  std::vector<float> features;

  std::size_t size() const {
    const std::size_t d = numel(example_shape);
    return d ? features.size() / d : 0;
  }
  std::span<const float> example(std::size_t i) const {
    const std::size_t d = numel(example_shape);
    return std::span<const float>(features).subspan(i * d, d);
  }
};

inline LabeledBatch gather(const Dataset& d, std::span<const std::size_t> indices) {
  Dataset s = subset(d, indices);
  return {d.example_shape, d.classes, std::move(s.features), std::move(s.labels)};
}

inline UnlabeledBatch gather(const UnlabeledSet& u, std::span<const std::size_t> indices) {
  UnlabeledBatch out{u.example_shape, {}};
  out.features.reserve(indices.size() * u.example_size());
  for (std::size_t i : indices) {
    auto ex = u.example(i);
    out.features.insert(out.features.end(), ex.begin(), ex.end());
  }
  return out;
}

}  // namespace mixmatch
