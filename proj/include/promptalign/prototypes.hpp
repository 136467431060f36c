// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "promptalign/encoders.hpp"
#include "promptalign/ops.hpp"
#include "promptalign/random.hpp"

namespace promptalign {

enum class AlignmentMetric { cosine, l1 };

inline AlignmentMetric parse_metric(const std::string& s) {
  if (s == "cosine") return AlignmentMetric::cosine;
  if (s == "l1" || s == "L1") return AlignmentMetric::l1;
  throw std::invalid_argument("metric must be 'cosine' or 'l1', got '" + s + "'");
}

inline std::string to_string(AlignmentMetric m) {
  return m == AlignmentMetric::cosine ? "cosine" : "l1";
}

/// Per-class mean of frozen global image features.
template <typename T>
struct PrototypeTable {
  BasicTensor<T> prototypes;  // [C, P]
  std::size_t subset_size = 0;  // images per class; 0 = every image
  std::uint64_t subset_seed = 0;
  std::vector<std::vector<std::size_t>> members;  // sample indices per class

  std::size_t num_classes() const { return prototypes.dim(0); }
};

/// Sample indices per class: all of them when subset_size is 0 or at least
/// the class size, otherwise a seeded uniform draw without replacement.
/// Each list is returned in ascending order.
inline std::vector<std::vector<std::size_t>> select_prototype_subset(
    std::span<const int> labels, const std::vector<std::string>& class_names,
    std::size_t subset_size, std::uint64_t seed) {
  const std::size_t c = class_names.size();
  std::vector<std::vector<std::size_t>> by_class(c);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw std::out_of_range("prototypes: label " + std::to_string(y) + " at sample " +
                              std::to_string(i) + " outside " + std::to_string(c) +
                              " classes");
    by_class[static_cast<std::size_t>(y)].push_back(i);
  }
  for (std::size_t k = 0; k < c; ++k) {
    auto& idx = by_class[k];
    if (idx.empty())
      throw std::invalid_argument("prototypes: class '" + class_names[k] +
                                  "' has no samples");
    if (subset_size == 0 || subset_size >= idx.size()) continue;
    Rng rng(mix_seed({seed, k}));
    // Partial Fisher-Yates with an explicit index draw, so the result does
    // not depend on the standard library's distribution implementation.
    for (std::size_t i = 0; i < subset_size; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (idx.size() - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(subset_size);
    std::sort(idx.begin(), idx.end());
  }
  return by_class;
}

/// Prototype table from precomputed frozen global features [N, P].
/// Means are accumulated in double in ascending sample order.
template <typename T>
PrototypeTable<T> prototypes_from_features(const BasicTensor<T>& globals,
                                           std::span<const int> labels,
                                           const std::vector<std::string>& class_names,
                                           std::size_t subset_size, std::uint64_t seed) {
  if (globals.rank() != 2 || globals.dim(0) != labels.size())
    throw std::invalid_argument("prototypes: features " + to_string(globals.shape()) +
                                " for " + std::to_string(labels.size()) + " labels");
  PrototypeTable<T> table;
  table.subset_size = subset_size;
  table.subset_seed = seed;
  table.members = select_prototype_subset(labels, class_names, subset_size, seed);
  const std::size_t p = globals.dim(1);
  Buffer<T> values(class_names.size() * p);
  const auto g = globals.values();
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    const auto& m = table.members[c];
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t i : m) acc += g[i * p + j];
      values[c * p + j] = static_cast<T>(acc / static_cast<double>(m.size()));
    }
  }
  table.prototypes = BasicTensor<T>({class_names.size(), p}, std::move(values));
  return table;
}

/// Frozen (prompt-free) global features for images [N, H, W, C], encoded in
/// chunks of `batch`.
template <typename T>
BasicTensor<T> frozen_global_features(const FrozenWeights<T>& w, const BasicTensor<T>& images,
                                      std::size_t batch = 64) {
  const std::size_t n = images.dim(0);
  std::vector<BasicTensor<T>> parts;
  for (std::size_t s = 0; s < n; s += batch) {
    const std::size_t len = std::min(batch, n - s);
    parts.push_back(encode_images(w, slice(images, 0, s, len)).global);
  }
  return concat(parts, 0);
}

/// Prototypes from the frozen image path. Only the selected members are
/// encoded.
template <typename T>
PrototypeTable<T> compute_prototypes(const FrozenWeights<T>& w, const BasicTensor<T>& images,
                                     std::span<const int> labels,
                                     const std::vector<std::string>& class_names,
                                     std::size_t subset_size, std::uint64_t seed) {
  if (images.rank() != 4 || images.dim(0) != labels.size())
    throw std::invalid_argument("prototypes: images " + to_string(images.shape()) +
                                " for " + std::to_string(labels.size()) + " labels");
  auto members = select_prototype_subset(labels, class_names, subset_size, seed);
  std::vector<std::size_t> used;
  for (const auto& m : members) used.insert(used.end(), m.begin(), m.end());
  std::sort(used.begin(), used.end());
  const std::size_t per = images.size() / images.dim(0);
  Buffer<T> picked(used.size() * per);
  std::vector<int> picked_labels;
  for (std::size_t i = 0; i < used.size(); ++i) {
    std::copy_n(images.values().begin() + static_cast<std::ptrdiff_t>(used[i] * per), per,
                picked.begin() + static_cast<std::ptrdiff_t>(i * per));
    picked_labels.push_back(labels[used[i]]);
  }
  Shape shape = images.shape();
  shape[0] = used.size();
  auto feats = frozen_global_features(w, BasicTensor<T>(shape, std::move(picked)));
  auto table = prototypes_from_features(feats, std::span<const int>(picked_labels),
                                        class_names, 0, seed);
  for (auto& m : table.members)
    for (auto& i : m) i = used[i];
  table.subset_size = subset_size;
  return table;
}

/// Rows of the prototype table selected by label, as a constant [B, P].
template <typename T>
BasicTensor<T> gather_prototypes(const BasicTensor<T>& prototypes,
                                 std::span<const int> labels) {
  const std::size_t c = prototypes.dim(0), p = prototypes.dim(1);
  Buffer<T> out(labels.size() * p);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw std::out_of_range("visual_alignment_loss: label " + std::to_string(y) +
                              " has no prototype (" + std::to_string(c) + " classes)");
    std::copy_n(prototypes.values().begin() + static_cast<std::ptrdiff_t>(y * p), p,
                out.begin() + static_cast<std::ptrdiff_t>(i * p));
  }
  return BasicTensor<T>({labels.size(), p}, std::move(out));
}

/// Mean over the batch of the distance between each prompted global feature
/// [B, P] and its own class prototype. Cosine distance is 1 - cos; L1 sums
/// absolute differences over feature dimensions.
template <typename T>
BasicTensor<T> visual_alignment_loss(const BasicTensor<T>& globals, std::span<const int> labels,
                                     const BasicTensor<T>& prototypes,
                                     AlignmentMetric metric = AlignmentMetric::cosine) {
  if (globals.rank() != 2 || prototypes.rank() != 2 || globals.dim(1) != prototypes.dim(1))
    detail::shape_error("visual_alignment_loss", globals.shape(), prototypes.shape());
  if (globals.dim(0) != labels.size())
    throw std::invalid_argument("visual_alignment_loss: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(globals.dim(0)) + " rows");
  auto target = gather_prototypes(prototypes, labels);
  if (metric == AlignmentMetric::cosine)
    return add(scale(mean(row_cosine_similarity(globals, target)), T(-1)),
               BasicTensor<T>::scalar(T(1)));
  return mean(sum(abs(sub(globals, target)), 1));
}

}  // namespace promptalign
