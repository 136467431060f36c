// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include "promptalign/tensor.hpp"

namespace promptalign {

using Rng = std::mt19937_64;

/// Combines seed components into one well-mixed seed (splitmix64 steps).
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x9E3779B97F4A7C15ULL;
  for (std::uint64_t p : parts) {
    h ^= p + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    std::uint64_t z = (h += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    h = z ^ (z >> 31);
  }
  return h;
}

template <typename T>
BasicTensor<T> gaussian_tensor(Shape shape, double stddev, Rng& rng,
                               bool requires_grad = false) {
  std::normal_distribution<double> dist(0.0, stddev);
  Buffer<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return BasicTensor<T>(std::move(shape), std::move(values), requires_grad);
}

}  // namespace promptalign
