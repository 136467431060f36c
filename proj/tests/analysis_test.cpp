// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#include <gtest/gtest.h>

#include <filesystem>

#include "promptalign/analysis.hpp"
#include "promptalign/gradsuite.hpp"
#include "promptalign/oracles.hpp"

namespace pa = promptalign;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "promptalign_analysis_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir.parent_path());
  return dir;
}

struct Fixture {
  pa::TrainConfig config;
  pa::PromptModel model;
  pa::DataSplit test;
};

const Fixture& trained() {
  static const Fixture f = [] {
    Fixture out;
    const auto data = scratch("data");
    pa::SyntheticDatasetSpec spec;
    spec.samples_per_class = 6;
    spec.val_per_class = 2;
    spec.test_per_class = 3;
    pa::generate_dataset(spec, data);
    auto& c = out.config;
    c.dataset = data.string();
    c.descriptions = PROMPTALIGN_DATA_DIR "/descriptions_7.txt";
    c.output = scratch("run").string();
    c.encoder.num_layers = 2;
    c.encoder.embed_dim = 32;
    c.encoder.projection_dim = 32;
    c.num_prompts = 2;
    c.context_len = 4;
    c.epochs = 2;
    out.model = pa::train(c, pa::load_train_inputs(c)).model;
    out.test = pa::load_split(data, pa::Split::test, c.encoder.image_shape());
    return out;
  }();
  return f;
}

}  // namespace

TEST(Saliency, ShapeMatchesInputAndIsNonNegative) {
  const auto& f = trained();
  const auto batch = pa::slice(f.test.images, 0, 0, 4);
  std::vector<int> pred;
  const auto raw = pa::raw_saliency(f.model, batch, &pred);
  EXPECT_EQ(raw.shape(), batch.shape());
  EXPECT_EQ(pred.size(), 4u);
  for (float v : raw.values()) EXPECT_GE(v, 0.0f);
  // Predictions agree with evaluation.
  const auto ev = pa::evaluate(f.model, f.test);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(pred[i], ev.predictions[i]);
}

TEST(Saliency, BatchedMapsEqualSingleImageMaps) {
  const auto& f = trained();
  const auto batch = pa::slice(f.test.images, 0, 0, 3);
  const auto all = pa::raw_saliency(f.model, batch);
  const std::size_t per = all.size() / 3;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto one = pa::raw_saliency(f.model, pa::slice(f.test.images, 0, i, 1));
    for (std::size_t j = 0; j < per; ++j)
      ASSERT_NEAR(one[j], all[i * per + j], 1e-6f + 1e-4f * std::abs(one[j]));
  }
}

TEST(Saliency, PerImageNormalization) {
  pa::Tensor maps({2, 2, 2, 1}, std::vector<float>{1, 3, 2, 5, 4, 4, 4, 4});
  const auto n = pa::normalize_per_image(maps);
  const std::vector<float> expected = {0, 0.5f, 0.25f, 1, 0, 0, 0, 0};
  EXPECT_EQ(std::vector<float>(n.values().begin(), n.values().end()), expected);
}

TEST(Saliency, RegionStatsAndPgm) {
  // 4x4 image, 2x2 patches; patch 0 is the top-left quadrant.
  std::vector<float> map(16, 0.0f);
  map[0] = map[1] = map[4] = map[5] = 1.0f;
  map[15] = 0.5f;
  const auto st = pa::region_stats(map, 4, 1, 2, {0});
  EXPECT_DOUBLE_EQ(st.inside, 1.0);
  EXPECT_DOUBLE_EQ(st.outside, 0.5 / 12.0);
  const auto pgm = pa::to_pgm(map, 4, 1);
  ASSERT_EQ(pgm.rfind("P5\n4 4\n255\n", 0), 0u);
  EXPECT_EQ(pgm.size(), 11u + 16u);
  EXPECT_EQ(static_cast<unsigned char>(pgm[11]), 255);
  EXPECT_EQ(static_cast<unsigned char>(pgm.back()), 128);
}

TEST(Saliency, ExportWritesOneGridPerImage) {
  const auto& f = trained();
  const auto out = scratch("saliency");
  const auto r = pa::export_saliency(f.model, f.test, pa::read_signatures(f.config.dataset), out);
  EXPECT_EQ(r.images, f.test.size());
  EXPECT_LE(r.inside_wins, r.images);
  const auto csv = pa::read_file(out / "saliency" / "000000.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 32);
  EXPECT_EQ(std::count(csv.begin(), csv.begin() + static_cast<long>(csv.find('\n')), ','), 31);
  EXPECT_TRUE(fs::exists(out / "saliency" / "000020.pgm"));
  const auto summary = pa::read_file(out / "saliency.csv");
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 22);
}

TEST(Projection, RowCountAndDeterminism) {
  const auto& f = trained();
  const auto a = scratch("proj_a.csv"), b = scratch("proj_b.csv");
  const auto r = pa::export_projection(f.model, f.test, a);
  pa::export_projection(f.model, f.test, b);
  EXPECT_EQ(r.coords.size(), f.test.size());
  const auto bytes = pa::read_file(a);
  EXPECT_EQ(bytes, pa::read_file(b));
  EXPECT_EQ(std::count(bytes.begin(), bytes.end(), '\n'), 22);
  EXPECT_EQ(bytes.rfind("index,label,x,y\n", 0), 0u);
}

TEST(Projection, PcaRecoversDominantAxis) {
  // Points spread along (1, 1, 0) plus a small z component uncorrelated with it.
  pa::Tensor x({5, 3}, std::vector<float>{-2, -2, 0.1f, -1, -1, -0.1f, 0, 0, 0, 1, 1, -0.1f,
                                          2, 2, 0.1f});
  const auto c = pa::pca_2d(x);
  ASSERT_EQ(c.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i)
    EXPECT_NEAR(c[i][0], (static_cast<double>(i) - 2.0) * std::sqrt(2.0), 1e-5);
  EXPECT_LT(std::abs(c[0][1]), 0.2);
}

TEST(Projection, SilhouetteExtremes) {
  const std::vector<std::array<double, 2>> tight = {{0, 0}, {0, 0.01}, {10, 0}, {10, 0.01}};
  EXPECT_GT(pa::silhouette_score(tight, {0, 0, 1, 1}), 0.99);
  EXPECT_LT(pa::silhouette_score(tight, {0, 1, 0, 1}), 0.0);
}

TEST(Diagnostics, GradientSuiteSmallRun) {
  pa::GradSuiteOptions opt;
  opt.instances = 5;
  const auto r = pa::run_gradient_suite(opt);
  ASSERT_EQ(r.losses.size(), 6u);
  for (const auto& l : r.losses) {
    EXPECT_TRUE(l.ok()) << l.loss << " max rel " << l.max_relative_error;
    EXPECT_GT(l.smallest_gradient, 1e-5) << l.loss;
  }
}

TEST(Diagnostics, OraclesAgree) {
  const auto topk = pa::run_topk_oracle(200, 3);
  EXPECT_TRUE(topk.ok()) << topk.max_abs_error;
  const auto protos = pa::run_prototype_oracle(100, 3);
  EXPECT_TRUE(protos.ok()) << protos.max_abs_error;
}

TEST(Diagnostics, TopkReferenceMatchesHandValues) {
  // Similarities 1, 0, 0.6; k beyond n averages all rows.
  const std::vector<double> locals = {1, 0, 0, 1, 0.6, 0.8};
  const std::vector<double> text = {1, 0};
  EXPECT_DOUBLE_EQ(pa::topk_oracle(locals, 3, 2, text, 2), 0.8);
  EXPECT_DOUBLE_EQ(pa::topk_oracle(locals, 3, 2, text, 9), (1 + 0 + 0.6) / 3);
}
