// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "promptalign/crossmodal.hpp"
#include "promptalign/encoders.hpp"
#include "promptalign/prototypes.hpp"

namespace promptalign {

// Brute-force references for top-k pooling and prototype means, compared
// against the library on random instances.

struct OracleReport {
  std::string name;
  std::size_t instances = 0;
  std::size_t failures = 0;
  double max_abs_error = 0;
  bool ok() const { return failures == 0 && instances > 0; }
};

/// Sort-and-average reference for the mean of the k largest inner products.
inline double topk_oracle(const std::vector<double>& locals, std::size_t n, std::size_t d,
                          const std::vector<double>& text, std::size_t k) {
  std::vector<double> sims(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += locals[i * d + j] * text[j];
    sims[i] = s;
  }
  std::sort(sims.begin(), sims.end(), std::greater<>());
  k = std::min(k, n);
  double acc = 0;
  for (std::size_t i = 0; i < k; ++i) acc += sims[i];
  return acc / static_cast<double>(k);
}

inline OracleReport run_topk_oracle(std::size_t instances, std::uint64_t seed,
                                    double tolerance = 1e-6) {
  OracleReport r{"topk_sparse_similarity", 0, 0, 0};
  for (std::size_t t = 0; t < instances; ++t) {
    Rng rng(mix_seed({seed, 0x746f706bULL, t}));
    const std::size_t n = 1 + rng() % 32, d = 1 + rng() % 16, k = 1 + rng() % (n + 4);
    auto locals = l2_normalize(gaussian_tensor<float>({n, d}, 1.0, rng));
    auto text = l2_normalize(gaussian_tensor<float>({d}, 1.0, rng));
    const double got = topk_sparse_similarity(locals, text, k).item();
    const double want =
        topk_oracle({locals.values().begin(), locals.values().end()}, n, d,
                    {text.values().begin(), text.values().end()}, k);
    const double err = std::abs(got - want);
    r.max_abs_error = std::max(r.max_abs_error, err);
    r.failures += err <= tolerance ? 0 : 1;
    ++r.instances;
  }
  return r;
}

/// Checks compute_prototypes against per-image frozen encoding and a
/// double-precision mean over the chosen members. The member lists
/// themselves are checked for size, distinctness and class.
inline OracleReport run_prototype_oracle(std::size_t instances, std::uint64_t seed,
                                         double tolerance = 1e-6) {
  OracleReport r{"compute_prototypes", 0, 0, 0};
  EncoderConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_heads = 2;
  cfg.num_layers = 1;
  cfg.mlp_ratio = 2;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.vocab_size = 8;
  cfg.max_text_len = 8;
  cfg.projection_dim = 8;
  const auto w = init_frozen_weights<float>(cfg, seed);
  for (std::size_t t = 0; t < instances; ++t) {
    Rng rng(mix_seed({seed, 0x70726f74ULL, t}));
    const std::size_t c = 1 + rng() % 4, n = c + rng() % 9;
    const std::size_t subset = rng() % 4;  // 0 = all
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i)
      labels[i] = static_cast<int>(i < c ? i : rng() % c);  // every class present
    std::vector<std::string> names;
    for (std::size_t i = 0; i < c; ++i) names.push_back("c" + std::to_string(i));
    auto images = gaussian_tensor<float>({n, 8, 8, 1}, 1.0, rng);
    const auto table = compute_prototypes(w, images, std::span<const int>(labels), names,
                                          subset, rng());
    bool ok = table.prototypes.shape() == Shape{c, cfg.projection_dim};
    for (std::size_t k = 0; k < c && ok; ++k) {
      const auto& m = table.members[k];
      std::size_t count = 0;
      for (int y : labels) count += y == static_cast<int>(k);
      const std::size_t expected = subset == 0 ? count : std::min(subset, count);
      ok = m.size() == expected && std::set<std::size_t>(m.begin(), m.end()).size() == m.size();
      std::vector<double> mean(cfg.projection_dim, 0.0);
      for (std::size_t i : m) {
        ok = ok && labels[i] == static_cast<int>(k);
        const auto img = reshape(slice(images, 0, i, 1), {8, 8, 1});
        const auto g = image_encode(w, img).global;
        for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += g[j];
      }
      for (std::size_t j = 0; j < mean.size(); ++j) {
        const double want = mean[j] / static_cast<double>(m.size());
        const double err = std::abs(table.prototypes[k * cfg.projection_dim + j] - want);
        r.max_abs_error = std::max(r.max_abs_error, err);
        ok = ok && err <= tolerance;
      }
    }
    r.failures += ok ? 0 : 1;
    ++r.instances;
  }
  return r;
}

}  // namespace promptalign
