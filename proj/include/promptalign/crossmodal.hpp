// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>

#include "promptalign/ops.hpp"

namespace promptalign {

struct AlignmentConfig {
  std::size_t k = 16;  // capped at the number of local features
  double beta = 1.0;
  double gamma = 1.0;
  double tau_logits = 0.07;

  void validate() const {
    if (k == 0) throw std::invalid_argument("alignment: k must be >= 1");
    if (beta < 0 || gamma < 0) throw std::invalid_argument("alignment: beta, gamma must be >= 0");
    if (!(tau_logits > 0)) throw std::invalid_argument("alignment: tau_logits must be > 0");
  }
};

inline std::size_t effective_k(std::size_t k, std::size_t num_locals) {
  return std::max<std::size_t>(1, std::min(k, num_locals));
}

/// Mean of the k largest inner products between local rows [N, D] and a
/// text feature [D]; ties go to the lower row index.
template <typename T>
BasicTensor<T> topk_sparse_similarity(const BasicTensor<T>& locals, const BasicTensor<T>& text,
                                      std::size_t k) {
  detail::require_defined("topk_sparse_similarity", locals);
  if (locals.rank() != 2 || text.rank() != 1 || locals.dim(1) != text.dim(0))
    detail::shape_error("topk_sparse_similarity", locals.shape(), text.shape());
  const std::size_t n = locals.dim(0);
  auto sims = reshape(matmul(locals, reshape(text, {text.dim(0), 1})), {n});
  return topk_mean(sims, effective_k(k, n));
}

/// Class scores for a batch: global [B, P], locals [B, N, P], text [C, P]
/// -> [B, C]. The score of class d is cos(z_g, t_d) plus, when `use_local`,
/// the top-k mean of cos(z_i, t_d) over local rows, selected per class.
/// Inputs are re-normalized; unit rows change only by the epsilon guard.
template <typename T>
BasicTensor<T> alignment_logits(const BasicTensor<T>& global, const BasicTensor<T>& locals,
                                const BasicTensor<T>& text, std::size_t k,
                                bool use_local = true) {
  if (global.rank() != 2 || text.rank() != 2 || global.dim(1) != text.dim(1))
    detail::shape_error("alignment_logits", global.shape(), text.shape());
  auto text_t = transpose(l2_normalize(text));  // [P, C]
  auto scores = matmul(l2_normalize(global), text_t);
  if (!use_local) return scores;
  if (locals.rank() != 3 || locals.dim(0) != global.dim(0) || locals.dim(2) != text.dim(1))
    detail::shape_error("alignment_logits(locals)", locals.shape(), text.shape());
  auto local_sims = transpose(matmul(l2_normalize(locals), text_t));  // [B, C, N]
  return add(scores, topk_mean(local_sims, effective_k(k, locals.dim(1))));
}

/// Single image: global [P], locals [N, P], text [C, P] -> [C].
template <typename T>
BasicTensor<T> logits(const BasicTensor<T>& global, const BasicTensor<T>& locals,
                      const BasicTensor<T>& text, std::size_t k, bool use_local = true) {
  if (global.rank() != 1 || locals.rank() != 2)
    detail::shape_error("logits", global.shape(), locals.shape());
  auto out = alignment_logits(reshape(global, {1, global.dim(0)}),
                              reshape(locals, {1, locals.dim(0), locals.dim(1)}), text, k,
                              use_local);
  return reshape(out, {text.dim(0)});
}

/// Mean cross-entropy of logits [B, C] / tau_logits against labels.
template <typename T>
BasicTensor<T> image_text_loss(const BasicTensor<T>& logits, std::span<const int> labels,
                               T tau_logits) {
  if (!(tau_logits > T(0))) throw std::invalid_argument("tau_logits must be > 0");
  return cross_entropy(scale(logits, T(1) / tau_logits), labels);
}

/// L_vt + beta * L_t + gamma * L_v. Zero weights drop the term entirely.
template <typename T>
BasicTensor<T> total_loss(const BasicTensor<T>& l_vt, const BasicTensor<T>& l_t,
                          const BasicTensor<T>& l_v, T beta, T gamma) {
  auto total = l_vt;
  if (beta != T(0)) total = add(total, scale(l_t, beta));
  if (gamma != T(0)) total = add(total, scale(l_v, gamma));
  return total;
}

}  // namespace promptalign
