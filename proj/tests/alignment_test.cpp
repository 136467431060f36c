// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include <gtest/gtest.h>

#include "promptalign/crossmodal.hpp"
#include "promptalign/gradcheck.hpp"
#include "promptalign/prototypes.hpp"

using namespace promptalign;

namespace {

std::vector<std::string> names(std::size_t c) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < c; ++i) out.push_back("class" + std::to_string(i));
  return out;
}

template <typename T>
BasicTensor<T> unit_rows(Shape shape, Rng& rng) {
  return l2_normalize(gaussian_tensor<T>(std::move(shape), 1.0, rng)).detach();
}

double dot_row(const Tensor& m, std::size_t row, const Tensor& v) {
  const std::size_t d = v.size();
  double acc = 0;
  for (std::size_t j = 0; j < d; ++j) acc += double(m[row * d + j]) * v[j];
  return acc;
}

}  // namespace

// --- prototypes -----------------------------------------------------------

TEST(PrototypeTest, SingleSampleClassEqualsItsFeature) {
  Rng rng(1);
  auto feats = unit_rows<float>({3, 8}, rng);
  const std::vector<int> labels{0, 1, 2};
  auto t = prototypes_from_features(feats, std::span<const int>(labels), names(3), 1, 5);
  for (std::size_t i = 0; i < feats.size(); ++i) EXPECT_EQ(t.prototypes[i], feats[i]);
}

TEST(PrototypeTest, SubsetMeanMatchesBruteForce) {
  Rng rng(2);
  auto feats = unit_rows<float>({40, 8}, rng);
  std::vector<int> labels(40);
  for (int i = 0; i < 40; ++i) labels[i] = i % 4;
  auto t = prototypes_from_features(feats, std::span<const int>(labels), names(4), 4, 9);
  for (std::size_t c = 0; c < 4; ++c) {
    ASSERT_EQ(t.members[c].size(), 4u);
    for (auto i : t.members[c]) EXPECT_EQ(labels[i], int(c));
    for (std::size_t j = 0; j < 8; ++j) {
      float acc = 0;
      for (auto i : t.members[c]) acc += feats[i * 8 + j];
      EXPECT_NEAR(t.prototypes[c * 8 + j], acc / 4, 1e-6);
    }
  }
}

TEST(PrototypeTest, DeterministicAndSeedDependent) {
  std::vector<int> labels(100);
  for (int i = 0; i < 100; ++i) labels[i] = i % 2;
  auto a = select_prototype_subset(std::span<const int>(labels), names(2), 4, 1);
  auto b = select_prototype_subset(std::span<const int>(labels), names(2), 4, 1);
  auto c = select_prototype_subset(std::span<const int>(labels), names(2), 4, 2);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  auto full = select_prototype_subset(std::span<const int>(labels), names(2), 0, 1);
  EXPECT_EQ(full[0].size(), 50u);
  auto capped = select_prototype_subset(std::span<const int>(labels), names(2), 500, 1);
  EXPECT_EQ(capped, full);
}

TEST(PrototypeTest, EmptyClassNamesIt) {
  const std::vector<int> labels{0, 0, 2};
  try {
    select_prototype_subset(std::span<const int>(labels), {"anger", "fear", "neutral"}, 0, 1);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("fear"), std::string::npos);
  }
}

TEST(PrototypeTest, EncoderPathMatchesFeaturePath) {
  EncoderConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.projection_dim = 8;
  auto w = init_frozen_weights<float>(cfg, 4);
  Rng rng(3);
  auto images = gaussian_tensor<float>({12, 32, 32, 1}, 1.0, rng);
  std::vector<int> labels(12);
  for (int i = 0; i < 12; ++i) labels[i] = i % 3;
  auto a = compute_prototypes(w, images, std::span<const int>(labels), names(3), 2, 7);
  auto feats = frozen_global_features(w, images);
  auto b = prototypes_from_features(feats, std::span<const int>(labels), names(3), 2, 7);
  EXPECT_EQ(a.members, b.members);
  for (std::size_t i = 0; i < a.prototypes.size(); ++i)
    EXPECT_NEAR(a.prototypes[i], b.prototypes[i], 1e-6);
}

TEST(VisualAlignmentTest, ExactMatchAndOrthogonal) {
  Tensor protos({2, 3}, {1, 0, 0, 0, 1, 0});
  const std::vector<int> y{0, 1};
  Tensor same({2, 3}, {1, 0, 0, 0, 1, 0});
  EXPECT_NEAR(visual_alignment_loss(same, std::span<const int>(y), protos).item(), 0, 1e-6);
  EXPECT_EQ(visual_alignment_loss(same, std::span<const int>(y), protos, AlignmentMetric::l1)
                .item(),
            0.0f);
  Tensor orth({2, 3}, {0, 0, 1, 0, 0, 1});
  EXPECT_NEAR(visual_alignment_loss(orth, std::span<const int>(y), protos).item(), 1.0, 1e-6);
  const std::vector<int> bad{0, 2};
  EXPECT_THROW(visual_alignment_loss(same, std::span<const int>(bad), protos),
               std::out_of_range);
}

TEST(VisualAlignmentTest, MatchesScalarLoop) {
  Rng rng(6);
  auto protos = unit_rows<float>({4, 8}, rng);
  auto z = unit_rows<float>({8, 8}, rng);
  std::vector<int> y{0, 3, 1, 1, 2, 0, 3, 2};
  double cos_ref = 0, l1_ref = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    double dot = 0, na = 0, nb = 0, l1 = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      const double a = z[i * 8 + j], b = protos[y[i] * 8 + j];
      dot += a * b, na += a * a, nb += b * b, l1 += std::abs(a - b);
    }
    cos_ref += 1 - dot / (std::sqrt(na) * std::sqrt(nb));
    l1_ref += l1;
  }
  EXPECT_NEAR(visual_alignment_loss(z, std::span<const int>(y), protos).item(), cos_ref / 8,
              1e-6);
  EXPECT_NEAR(
      visual_alignment_loss(z, std::span<const int>(y), protos, AlignmentMetric::l1).item(),
      l1_ref / 8, 1e-5);
}

TEST(VisualAlignmentTest, DuplicatingBatchKeepsLoss) {
  Rng rng(7);
  auto protos = unit_rows<float>({3, 6}, rng);
  auto z = unit_rows<float>({5, 6}, rng);
  std::vector<int> y{0, 1, 2, 1, 0};
  auto zz = concat<float>({z, z}, 0);
  std::vector<int> yy = y;
  yy.insert(yy.end(), y.begin(), y.end());
  for (auto m : {AlignmentMetric::cosine, AlignmentMetric::l1})
    EXPECT_NEAR(visual_alignment_loss(z, std::span<const int>(y), protos, m).item(),
                visual_alignment_loss(zz, std::span<const int>(yy), protos, m).item(), 1e-6);
}

// --- cross-modal ----------------------------------------------------------

TEST(TopkSimilarityTest, FullKIsMeanAndUnitKIsMax) {
  Rng rng(1);
  auto locals = unit_rows<float>({16, 8}, rng);
  auto text = reshape(unit_rows<float>({1, 8}, rng), {8});
  double mean_ref = 0, max_ref = -2;
  for (std::size_t i = 0; i < 16; ++i) {
    const double s = dot_row(locals, i, text);
    mean_ref += s / 16;
    max_ref = std::max(max_ref, s);
  }
  EXPECT_NEAR(topk_sparse_similarity(locals, text, 16).item(), mean_ref, 1e-6);
  EXPECT_NEAR(topk_sparse_similarity(locals, text, 100).item(), mean_ref, 1e-6);
  EXPECT_NEAR(topk_sparse_similarity(locals, text, 1).item(), max_ref, 1e-6);
}

TEST(TopkSimilarityTest, MatchesSortOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    auto locals = unit_rows<float>({16, 8}, rng);
    auto text = reshape(unit_rows<float>({1, 8}, rng), {8});
    std::vector<double> sims;
    for (std::size_t i = 0; i < 16; ++i) sims.push_back(dot_row(locals, i, text));
    std::sort(sims.rbegin(), sims.rend());
    const double ref = (sims[0] + sims[1] + sims[2] + sims[3]) / 4;
    ASSERT_NEAR(topk_sparse_similarity(locals, text, 4).item(), ref, 1e-6);
  }
}

TEST(TopkSimilarityTest, PermutationAndNonSelectedPerturbation) {
  Rng rng(3);
  auto locals = unit_rows<float>({16, 8}, rng);
  auto text = reshape(unit_rows<float>({1, 8}, rng), {8});
  const float base = topk_sparse_similarity(locals, text, 4).item();
  std::vector<std::size_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Tensor> rows;
  for (auto p : perm) rows.push_back(slice(locals, 0, p, 1));
  EXPECT_EQ(topk_sparse_similarity(concat(rows, 0), text, 4).item(), base);

  // Nudge the lowest-scoring row by less than its gap to the k-th score.
  std::vector<float> sims;
  for (std::size_t i = 0; i < 16; ++i) sims.push_back(float(dot_row(locals, i, text)));
  const auto worst = std::size_t(std::min_element(sims.begin(), sims.end()) - sims.begin());
  auto nudged = locals.detach();
  for (std::size_t j = 0; j < 8; ++j) nudged.mutable_values()[worst * 8 + j] += 1e-4f;
  EXPECT_EQ(topk_sparse_similarity(nudged, text, 4).item(), base);
}

TEST(TopkSimilarityTest, GradientOnlyThroughSelectedRows) {
  Tensor locals({3, 2}, {1, 0, 0, 1, -1, 0}, true);
  Tensor text({2}, {1, 0});
  {
    Tape tape;
    backward(topk_sparse_similarity(locals, text, 1));
  }
  const std::vector<float> expected{1, 0, 0, 0, 0, 0};
  EXPECT_EQ(std::vector<float>(locals.grad().begin(), locals.grad().end()), expected);
  EXPECT_THROW(topk_sparse_similarity(Tensor({3, 2}), Tensor({3}), 1), std::invalid_argument);
}

TEST(LogitsTest, DegenerateLocalsDoubleTheGlobalScore) {
  Rng rng(4);
  auto g = reshape(unit_rows<float>({1, 8}, rng), {8});
  auto text = unit_rows<float>({7, 8}, rng);
  auto locals = repeat(g, 16);
  auto l = logits(g, locals, text, 4);
  for (std::size_t d = 0; d < 7; ++d)
    EXPECT_NEAR(l[d], 2 * dot_row(text, d, g), 1e-6);
}

TEST(LogitsTest, BoundedAndMatchesPerClassLoop) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto g = reshape(unit_rows<float>({1, 8}, rng), {8});
    auto locals = unit_rows<float>({16, 8}, rng);
    auto text = unit_rows<float>({7, 8}, rng);
    auto l = logits(g, locals, text, 4);
    for (std::size_t d = 0; d < 7; ++d) {
      auto t = reshape(slice(text, 0, d, 1), {8});
      const double ref = dot_row(text, d, g) + topk_sparse_similarity(locals, t, 4).item();
      EXPECT_NEAR(l[d], ref, 1e-6);
      EXPECT_LE(std::abs(l[d]), 2.0f + 1e-6f);
    }
  }
}

TEST(LogitsTest, BatchedMatchesSingle) {
  Rng rng(6);
  auto g = unit_rows<float>({3, 8}, rng);
  auto locals = l2_normalize(gaussian_tensor<float>({3, 16, 8}, 1.0, rng)).detach();
  auto text = unit_rows<float>({5, 8}, rng);
  auto batched = alignment_logits(g, locals, text, 4);
  for (std::size_t b = 0; b < 3; ++b) {
    auto single = logits(reshape(slice(g, 0, b, 1), {8}),
                         reshape(slice(locals, 0, b, 1), {16, 8}), text, 4);
    for (std::size_t d = 0; d < 5; ++d) EXPECT_NEAR(batched[b * 5 + d], single[d], 1e-6);
  }
  auto global_only = alignment_logits(g, locals, text, 4, false);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t d = 0; d < 5; ++d)
      EXPECT_NEAR(global_only[b * 5 + d], dot_row(text, d, reshape(slice(g, 0, b, 1), {8})),
                  1e-6);
}

TEST(ImageTextLossTest, UniformAndDominant) {
  const std::vector<int> y{3};
  EXPECT_NEAR(image_text_loss(Tensor({1, 7}), std::span<const int>(y), 0.07f).item(),
              std::log(7.0), 1e-5);
  Tensor dominant({1, 7}, {0, 0, 0, 2, 0, 0, 0});
  EXPECT_LT(image_text_loss(dominant, std::span<const int>(y), 0.07f).item(), 0.2f);
  const std::vector<int> bad{7};
  EXPECT_THROW(image_text_loss(dominant, std::span<const int>(bad), 0.07f), std::out_of_range);
}

TEST(ImageTextLossTest, IdenticalBatchEqualsSingle) {
  Rng rng(8);
  auto row = gaussian_tensor<float>({1, 7}, 1.0, rng);
  const std::vector<int> one{2}, four{2, 2, 2, 2};
  EXPECT_NEAR(image_text_loss(row, std::span<const int>(one), 0.07f).item(),
              image_text_loss(repeat(reshape(row, {7}), 4), std::span<const int>(four), 0.07f)
                  .item(),
              1e-5);
}

TEST(ImageTextLossTest, ArgmaxInvariantToConstantShift) {
  Rng rng(9);
  auto l = gaussian_tensor<float>({7}, 1.0, rng);
  auto shifted = add(l, Tensor::scalar(0.73f));
  auto argmax = [](const Tensor& t) {
    return std::max_element(t.values().begin(), t.values().end()) - t.values().begin();
  };
  EXPECT_EQ(argmax(l), argmax(shifted));
}

TEST(TotalLossTest, Composition) {
  auto a = Tensor::scalar(0.5f), b = Tensor::scalar(0.3f), c = Tensor::scalar(0.2f);
  EXPECT_FLOAT_EQ(total_loss(a, b, c, 1.0f, 1.0f).item(), 1.0f);
  EXPECT_EQ(total_loss(a, b, c, 0.0f, 0.0f).item(), 0.5f);
  EXPECT_FLOAT_EQ(total_loss(a, b, c, 2.0f, 0.5f).item(), 0.5f + 0.6f + 0.1f);
}

TEST(TotalLossTest, GradientIsWeightedSumOfComponents) {
  Rng rng(10);
  auto base = gaussian_tensor<double>({6}, 1.0, rng);
  auto other = gaussian_tensor<double>({6}, 1.0, rng);
  using Fn = std::function<BasicTensor<double>(const BasicTensor<double>&)>;
  Fn f1 = [&](const BasicTensor<double>& x) { return cosine_similarity(x, other); };
  Fn f2 = [&](const BasicTensor<double>& x) { return sum(mul(x, x)); };
  Fn f3 = [&](const BasicTensor<double>& x) { return mean(abs(sub(x, other))); };
  const double beta = 0.7, gamma = 1.3;
  auto grad_of = [&](const Fn& f) {
    auto leaf = base.detach();
    leaf.set_requires_grad(true);
    Tape tape;
    backward(f(leaf));
    return std::vector<double>(leaf.grad().begin(), leaf.grad().end());
  };
  auto total = grad_of([&](const BasicTensor<double>& x) {
    return total_loss(f1(x), f2(x), f3(x), beta, gamma);
  });
  auto g1 = grad_of(f1), g2 = grad_of(f2), g3 = grad_of(f3);
  for (std::size_t i = 0; i < 6; ++i)
    EXPECT_NEAR(total[i], g1[i] + beta * g2[i] + gamma * g3[i], 1e-12);
}
