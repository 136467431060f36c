// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "promptalign/crossmodal.hpp"
#include "promptalign/encoders.hpp"
#include "promptalign/gradcheck.hpp"
#include "promptalign/prompts.hpp"
#include "promptalign/prototypes.hpp"

namespace promptalign {

// Finite-difference audit of every training loss. Each instance draws a
// small encoder (all dimensions <= 16) and random prompts in double
// precision, then compares the tape gradient with central differences for
// each trainable tensor the loss depends on.

struct GradSuiteLossReport {
  std::string loss;
  std::size_t instances = 0;
  std::size_t failures = 0;
  double max_relative_error = 0;
  std::uint64_t worst_instance = 0;
  std::string worst_parameter;
  double smallest_gradient = 0;  // min over instances of max |analytic|

  bool ok() const { return failures == 0 && instances > 0; }
};

struct GradSuiteReport {
  std::vector<GradSuiteLossReport> losses;
  bool ok() const {
    for (const auto& l : losses)
      if (!l.ok()) return false;
    return !losses.empty();
  }
};

struct GradSuiteOptions {
  std::size_t instances = 100;  // per loss
  std::uint64_t seed = 1;
  double step = 1e-6;
  double rel_tol = 1e-3;
  double abs_floor = 1e-5;
};

namespace detail {

using D = double;

/// Random problem shared by all losses.
struct GradInstance {
  FrozenWeights<D> weights;
  SoftPromptSet<D> soft;
  VisualPromptStack<D> visual;
  BasicTensor<D> images;         // [B, H, W, 1]
  std::vector<int> labels;       // [B]
  BasicTensor<D> hard_pooled;    // [C, D]
  BasicTensor<D> hard_features;  // [C, P]
  BasicTensor<D> prototypes;     // [C, P]
  std::size_t k = 1;
  D tau = 0.07, tau_logits = 0.07, beta = 1, gamma = 1;
  bool use_local = true;
};

inline GradInstance draw_instance(std::uint64_t seed) {
  Rng rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) { return lo + rng() % (hi - lo + 1); };
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  EncoderConfig cfg;
  cfg.embed_dim = 4 * pick(1, 4);
  cfg.num_heads = cfg.embed_dim % 8 == 0 ? pick(1, 2) : 1;
  cfg.num_layers = pick(1, 2);
  cfg.mlp_ratio = 2;
  cfg.image_size = 8;
  cfg.patch_size = pick(0, 1) ? 2 : 4;  // 16 or 4 patches
  cfg.image_channels = 1;
  cfg.vocab_size = 16;
  cfg.max_text_len = 16;
  cfg.projection_dim = pick(2, 16);

  GradInstance g;
  g.weights = init_frozen_weights<D>(cfg, rng());
  const std::size_t c = pick(2, 8), b = pick(1, 6);
  std::vector<std::vector<int>> names(c);
  for (auto& n : names) {
    n.resize(pick(1, 2));
    for (auto& id : n) id = static_cast<int>(pick(3, cfg.vocab_size - 1));
  }
  g.soft = SoftPromptSet<D>::init(g.weights, names, pick(1, 4), rng());
  // Wider than the training init so the gradient is not dominated by noise.
  for (auto& v : g.soft.context.mutable_values()) v *= 25.0;
  g.visual = VisualPromptStack<D>::init(cfg.num_layers, pick(1, 3), cfg.embed_dim, rng());
  for (auto& v : g.visual.tokens.mutable_values()) v *= 25.0;
  g.images = gaussian_tensor<D>({b, 8, 8, 1}, 1.0, rng);
  for (std::size_t i = 0; i < b; ++i) g.labels.push_back(static_cast<int>(rng() % c));
  g.hard_pooled = gaussian_tensor<D>({c, cfg.embed_dim}, 0.05, rng);
  g.hard_features = l2_normalize(gaussian_tensor<D>({c, cfg.projection_dim}, 1.0, rng));
  g.prototypes = gaussian_tensor<D>({c, cfg.projection_dim}, 0.5, rng);
  g.k = pick(1, cfg.num_patches());
  g.tau = 0.05 + unit(rng);
  g.tau_logits = 0.05 + unit(rng);
  g.beta = 2.0 * unit(rng);
  g.gamma = 2.0 * unit(rng);
  g.use_local = pick(0, 3) != 0;
  return g;
}

/// Evaluates one loss from the current context and visual prompt values.
using LossFn = std::function<BasicTensor<D>(const GradInstance&, const BasicTensor<D>& context,
                                            const BasicTensor<D>& visual)>;

inline BasicTensor<D> instance_l_vt(const GradInstance& g, const BasicTensor<D>& context,
                                    const BasicTensor<D>& visual) {
  auto soft = g.soft;
  soft.context = context;
  const VisualPromptStack<D> vp{visual};
  auto f = encode_images(g.weights, g.images, &vp);
  auto logits = alignment_logits(f.global, f.locals, soft.features(g.weights), g.k, g.use_local);
  return image_text_loss(logits, std::span<const int>(g.labels), g.tau_logits);
}

inline BasicTensor<D> instance_l_ta(const GradInstance& g, const BasicTensor<D>& context,
                                    const BasicTensor<D>&) {
  auto soft = g.soft;
  soft.context = context;
  return token_level_alignment_loss(soft.pooled(), g.hard_pooled, g.tau);
}

inline BasicTensor<D> instance_l_pa(const GradInstance& g, const BasicTensor<D>& context,
                                    const BasicTensor<D>&) {
  auto soft = g.soft;
  soft.context = context;
  return prompt_level_alignment_loss(soft.features(g.weights), g.hard_features, g.tau);
}

inline BasicTensor<D> instance_l_v(const GradInstance& g, const BasicTensor<D>& visual,
                                   AlignmentMetric metric) {
  const VisualPromptStack<D> vp{visual};
  auto f = encode_images(g.weights, g.images, &vp);
  return visual_alignment_loss(f.global, std::span<const int>(g.labels), g.prototypes, metric);
}

inline BasicTensor<D> instance_total(const GradInstance& g, const BasicTensor<D>& context,
                                     const BasicTensor<D>& visual) {
  auto l_t = textual_alignment_loss(instance_l_ta(g, context, visual),
                                    instance_l_pa(g, context, visual));
  return total_loss(instance_l_vt(g, context, visual), l_t,
                    instance_l_v(g, visual, AlignmentMetric::cosine), g.beta, g.gamma);
}

/// Checks d(loss)/d(parameter) for the context (param 0) or visual prompts
/// (param 1); returns the agreement.
inline GradientAgreement check_parameter(const GradInstance& g, const LossFn& loss, int param,
                                         const GradSuiteOptions& opt, double* max_abs = nullptr) {
  auto context = BasicTensor<D>(g.soft.context.shape(),
                                Buffer<D>(g.soft.context.values().begin(),
                                          g.soft.context.values().end()),
                                param == 0);
  auto visual = BasicTensor<D>(g.visual.tokens.shape(),
                               Buffer<D>(g.visual.tokens.values().begin(),
                                         g.visual.tokens.values().end()),
                               param == 1);
  auto& target = param == 0 ? context : visual;
  {
    Tape tape;
    backward(loss(g, context, visual));
  }
  Buffer<D> analytic(target.size(), 0.0);
  if (target.has_grad()) std::copy(target.grad().begin(), target.grad().end(), analytic.begin());
  if (max_abs)
    for (D v : analytic) *max_abs = std::max(*max_abs, std::abs(v));
  auto numeric = finite_difference_grad<D>(
      [&](const BasicTensor<D>& probe) {
        return param == 0 ? loss(g, probe, visual.detach()) : loss(g, context.detach(), probe);
      },
      target.detach(), opt.step);
  return compare_gradients<D>(std::span<const D>(analytic), numeric.values(), opt.rel_tol,
                              opt.abs_floor);
}

}  // namespace detail

/// Runs `opt.instances` random instances for each of L_ta, L_pa, L_v
/// (cosine and L1), L_vt and L_total.
inline GradSuiteReport run_gradient_suite(const GradSuiteOptions& opt = {}) {
  using namespace detail;
  struct Entry {
    std::string name;
    LossFn fn;
    std::vector<int> params;  // 0 = context, 1 = visual prompts
  };
  const std::vector<Entry> entries = {
      {"L_ta", instance_l_ta, {0}},
      {"L_pa", instance_l_pa, {0}},
      {"L_v(cosine)",
       [](const GradInstance& g, const BasicTensor<D>&, const BasicTensor<D>& v) {
         return instance_l_v(g, v, AlignmentMetric::cosine);
       },
       {1}},
      {"L_v(l1)",
       [](const GradInstance& g, const BasicTensor<D>&, const BasicTensor<D>& v) {
         return instance_l_v(g, v, AlignmentMetric::l1);
       },
       {1}},
      {"L_vt", instance_l_vt, {0, 1}},
      {"L_total", instance_total, {0, 1}},
  };
  GradSuiteReport report;
  for (std::size_t e = 0; e < entries.size(); ++e) {
    GradSuiteLossReport r;
    r.loss = entries[e].name;
    r.smallest_gradient = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < opt.instances; ++i) {
      const auto instance_seed = mix_seed({opt.seed, e, i});
      const auto g = draw_instance(instance_seed);
      bool ok = true;
      double largest = 0;
      for (int p : entries[e].params) {
        const auto a = check_parameter(g, entries[e].fn, p, opt, &largest);
        ok = ok && a.ok;
        if (a.max_relative_error >= r.max_relative_error) {
          r.max_relative_error = a.max_relative_error;
          r.worst_instance = i;
          r.worst_parameter = p == 0 ? "soft.context" : "visual.prompts";
        }
      }
      r.smallest_gradient = std::min(r.smallest_gradient, largest);
      ++r.instances;
      r.failures += ok ? 0 : 1;
    }
    report.losses.push_back(r);
  }
  return report;
}

}  // namespace promptalign
