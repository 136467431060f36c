// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <sstream>

#include "promptalign/ablation.hpp"
#include "promptalign/trainer.hpp"

namespace pa = promptalign;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "promptalign_trainer_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir.parent_path());
  return dir;
}

// Tiny dataset shared by every test in this file.
const fs::path& dataset_dir() {
  static const fs::path dir = [] {
    auto d = scratch("data");
    pa::SyntheticDatasetSpec spec;
    spec.samples_per_class = 6;
    spec.val_per_class = 2;
    spec.test_per_class = 3;
    pa::generate_dataset(spec, d);
    return d;
  }();
  return dir;
}

pa::TrainConfig small_config(const std::string& out) {
  pa::TrainConfig c;
  c.dataset = dataset_dir().string();
  c.descriptions = PROMPTALIGN_DATA_DIR "/descriptions_7.txt";
  c.output = scratch(out).string();
  c.encoder.num_layers = 2;
  c.encoder.embed_dim = 32;
  c.encoder.projection_dim = 32;
  c.num_prompts = 2;
  c.context_len = 4;
  c.epochs = 3;
  c.batch_size = 16;
  c.beta = 1;
  c.gamma = 1;
  c.visual_prompts = true;
  c.local_alignment = true;
  return c;
}

struct MetricsRows {
  std::vector<std::string> comments;
  std::string header;
  std::vector<std::vector<double>> rows;
};

MetricsRows parse_metrics(const std::string& text) {
  MetricsRows m;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("#", 0) == 0) {
      m.comments.push_back(line);
    } else if (m.header.empty()) {
      m.header = line;
    } else {
      std::vector<double> row;
      std::istringstream cells(line);
      std::string cell;
      while (std::getline(cells, cell, ',')) row.push_back(std::stod(cell));
      m.rows.push_back(row);
    }
  }
  return m;
}

}  // namespace

TEST(CosineLr, Endpoints) {
  const std::size_t total = 40 * 7;
  EXPECT_DOUBLE_EQ(pa::cosine_lr(0.032, 0, total), 0.032);
  EXPECT_LT(pa::cosine_lr(0.032, total - 1, total), 1e-4);
  EXPECT_NEAR(pa::cosine_lr(0.032, total / 2, total), 0.016, 1e-12);
  for (std::size_t s = 1; s < total; ++s)
    EXPECT_LE(pa::cosine_lr(0.032, s, total), pa::cosine_lr(0.032, s - 1, total));
}

TEST(Train, MetricsStreamAndLossComposition) {
  auto config = small_config("metrics");
  config.beta = 0.7;
  config.gamma = 1.3;
  const auto in = pa::load_train_inputs(config);
  const auto result = pa::train(config, in);
  const auto m = parse_metrics(pa::read_file(fs::path(config.output) / "metrics.csv"));
  EXPECT_EQ(m.header, pa::kMetricsHeader);
  EXPECT_FALSE(m.comments.empty());
  ASSERT_EQ(m.rows.size(), 3u);
  for (std::size_t e = 0; e < m.rows.size(); ++e) {
    const auto& r = m.rows[e];
    ASSERT_EQ(r.size(), 9u);
    EXPECT_EQ(r[0], static_cast<double>(e + 1));
    EXPECT_NEAR(r[1], r[2] + 0.7 * (r[3] + r[4]) + 1.3 * r[5], 1e-5) << "epoch " << e + 1;
    EXPECT_GE(r[6], 0.0);
    EXPECT_LE(r[7], 1.0);
    EXPECT_EQ(r[8], 0.0);  // wall clock off by default
  }
  for (const char* f : {"config.txt", "checkpoint_init.mpaf", "checkpoint_best.mpaf",
                        "checkpoint_final.mpaf"})
    EXPECT_TRUE(fs::exists(fs::path(config.output) / f)) << f;
  EXPECT_GE(result.best_epoch, 1u);
  EXPECT_EQ(result.best_val, result.history[result.best_epoch - 1].val_acc);
}

TEST(Train, SameConfigReproducesMetricsBytes) {
  const auto config = small_config("determinism");
  const auto in = pa::load_train_inputs(config);
  pa::train(config, in);
  const auto first = pa::read_file(fs::path(config.output) / "metrics.csv");
  const auto ckpt = pa::read_file(fs::path(config.output) / "checkpoint_final.mpaf");
  pa::train(config, in);
  EXPECT_EQ(pa::read_file(fs::path(config.output) / "metrics.csv"), first);
  EXPECT_EQ(pa::read_file(fs::path(config.output) / "checkpoint_final.mpaf"), ckpt);

  auto other = config;
  other.set_run_seed(2);
  pa::train(other, in);
  EXPECT_NE(pa::read_file(fs::path(config.output) / "metrics.csv"), first);
}

TEST(Train, OnlyPromptsChange) {
  const auto config = small_config("frozen");
  const auto result = pa::train(config, pa::load_train_inputs(config));
  EXPECT_EQ(result.frozen_checksum_before, result.frozen_checksum_after);
  const auto init = pa::load_tensors(fs::path(config.output) / "checkpoint_init.mpaf");
  const auto final = pa::load_tensors(fs::path(config.output) / "checkpoint_final.mpaf");
  ASSERT_EQ(init.size(), final.size());
  std::set<std::string> changed;
  for (const auto& [name, t] : init.entries()) {
    const auto& u = final.at(name);
    const bool same = t.shape() == u.shape() &&
                      std::memcmp(t.values().data(), u.values().data(),
                                  t.size() * sizeof(float)) == 0;
    if (!same) changed.insert(name);
  }
  EXPECT_EQ(changed, (std::set<std::string>{"soft.context", "visual.prompts"}));
  const auto& e = config.encoder;
  EXPECT_EQ(result.model.trainable_parameter_count(),
            config.num_prompts * e.num_layers * e.embed_dim + config.context_len * e.embed_dim);
}

TEST(Train, WithoutVisualPromptsOnlyContextTrains) {
  auto config = small_config("novp");
  config.visual_prompts = false;
  config.gamma = 0;
  const auto result = pa::train(config, pa::load_train_inputs(config));
  EXPECT_EQ(result.model.trainable_parameter_count(),
            config.context_len * config.encoder.embed_dim);
  const auto final = pa::load_tensors(fs::path(config.output) / "checkpoint_final.mpaf");
  EXPECT_FALSE(final.contains("visual.prompts"));
}

TEST(Train, NonFiniteLossAbortsWithLocation) {
  auto config = small_config("nan");
  config.tau_logits = 1e-40;  // logits overflow to inf
  try {
    pa::train(config, pa::load_train_inputs(config));
    FAIL() << "expected abort";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("non-finite"), std::string::npos) << msg;
    EXPECT_NE(msg.find("epoch"), std::string::npos) << msg;
    EXPECT_NE(msg.find("step"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto config = small_config("roundtrip");
  pa::train(config, pa::load_train_inputs(config));
  for (const char* f : {"checkpoint_init.mpaf", "checkpoint_final.mpaf"}) {
    const auto path = fs::path(config.output) / f;
    const auto copy = fs::path(config.output) / (std::string("copy_") + f);
    pa::save_checkpoint(copy, pa::load_checkpoint(path));
    EXPECT_EQ(pa::read_file(copy), pa::read_file(path)) << f;
  }
}

TEST(Checkpoint, LoadedModelPredictsLikeTrainedModel) {
  const auto config = small_config("reload");
  const auto in = pa::load_train_inputs(config);
  const auto result = pa::train(config, in);
  const auto loaded = pa::load_checkpoint(fs::path(config.output) / "checkpoint_final.mpaf");
  const auto a = pa::evaluate(result.model, in.val), b = pa::evaluate(loaded, in.val);
  EXPECT_EQ(a.predictions, b.predictions);
  EXPECT_EQ(loaded.weights.checksum(), result.model.weights.checksum());
}

TEST(Checkpoint, TamperedHashIsRejected) {
  const auto config = small_config("tamper");
  pa::train(config, pa::load_train_inputs(config));
  auto map = pa::load_tensors(fs::path(config.output) / "checkpoint_final.mpaf");
  map.set("meta.config_hash", pa::encode_u64(12345));
  EXPECT_THROW(pa::model_from_checkpoint(map, "tampered"), std::runtime_error);
}

TEST(Evaluate, ConfusionRowsMatchClassCounts) {
  const auto config = small_config("eval");
  const auto result = pa::train(config, pa::load_train_inputs(config));
  const auto test = pa::load_split(dataset_dir(), pa::Split::test, config.encoder.image_shape());
  const auto ev = pa::evaluate(result.model, test);
  ASSERT_EQ(ev.confusion.size(), 7u);
  std::size_t trace = 0;
  for (std::size_t c = 0; c < 7; ++c) {
    std::size_t row = 0;
    for (auto v : ev.confusion[c]) row += v;
    EXPECT_EQ(row, 3u);
    trace += ev.confusion[c][c];
  }
  EXPECT_DOUBLE_EQ(ev.accuracy, static_cast<double>(trace) / 21.0);
  EXPECT_EQ(pa::evaluate(result.model, test).predictions, ev.predictions);
}

TEST(Evaluate, MismatchedDatasetIsRefusedWithBothHashes) {
  const auto config = small_config("mismatch");
  const auto result = pa::train(config, pa::load_train_inputs(config));
  EXPECT_NO_THROW(pa::require_compatible(result.model, pa::default_class_names(7)));
  try {
    pa::require_compatible(result.model, pa::default_class_names(8));
    FAIL() << "expected refusal";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(pa::hex64(result.model.config_hash())), std::string::npos) << msg;
    EXPECT_NE(msg.find(pa::hex64(pa::compatibility_hash(result.model.config,
                                                        pa::default_class_names(8)))),
              std::string::npos)
        << msg;
  }
}

TEST(Ablation, CellOrderFollowsComponentAccumulation) {
  const auto cells = pa::component_cells(pa::TrainConfig{});
  ASSERT_EQ(cells.size(), 5u);
  EXPECT_FALSE(cells[0].config.visual_prompts);
  EXPECT_EQ(cells[0].config.gamma, 0.0);
  EXPECT_TRUE(cells[1].config.visual_prompts);
  EXPECT_EQ(cells[2].config.gamma, 1.0);
  EXPECT_EQ(cells[2].config.beta, 0.0);
  EXPECT_EQ(cells[3].config.beta, 1.0);
  EXPECT_FALSE(cells[3].config.local_alignment);
  EXPECT_TRUE(cells[4].config.local_alignment);
  EXPECT_EQ(pa::prompt_cells(pa::TrainConfig{}).size(), 6u);
  EXPECT_EQ(pa::prototype_cells(pa::TrainConfig{}, {1, 4, 16, 0}).back().name, "subset full");
}

TEST(Ablation, SingleCellMatchesDirectRun) {
  auto config = small_config("ablate_direct");
  config.epochs = 2;
  const auto in = pa::load_train_inputs(config);
  const auto test = pa::load_split(dataset_dir(), pa::Split::test, config.encoder.image_shape());
  auto direct_config = config;
  direct_config.set_run_seed(5);
  const auto direct = pa::evaluate(pa::train(direct_config, in).model, test).accuracy;

  const auto out = scratch("ablate_grid");
  const auto runs = pa::run_ablation({{"single", "cell", config}}, {5}, in, test, out);
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_DOUBLE_EQ(runs[0].test_acc, direct);
  EXPECT_TRUE(fs::exists(fs::path(runs[0].output) / "metrics.csv"));
  EXPECT_TRUE(fs::exists(out / "ablation.csv"));
  EXPECT_TRUE(fs::exists(out / "ablation.txt"));
}

TEST(Ablation, IdenticalCellsTrainOnce) {
  auto config = small_config("ablate_dedupe");
  config.epochs = 1;
  const auto in = pa::load_train_inputs(config);
  const auto test = pa::load_split(dataset_dir(), pa::Split::test, config.encoder.image_shape());
  const auto runs =
      pa::run_ablation({{"a", "x", config}, {"b", "y", config}}, {1}, in, test, scratch("dd"));
  ASSERT_EQ(runs.size(), 2u);
  EXPECT_EQ(runs[0].output, runs[1].output);
  EXPECT_EQ(runs[1].study, "b");
  const auto report = pa::ablation_report(runs);
  EXPECT_NE(report.find("== a"), std::string::npos);
  EXPECT_NE(report.find("== b"), std::string::npos);
  const auto csv = pa::ablation_csv(runs);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}
