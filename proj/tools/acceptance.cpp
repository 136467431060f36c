// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// if any fails. The end-to-end criteria share a single ablation grid over
// seeds 1..3 on the default synthetic dataset, so the full model is trained
// once per seed and reused by every check that needs it.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "promptalign/ablation.hpp"
#include "promptalign/analysis.hpp"
#include "promptalign/gradsuite.hpp"
#include "promptalign/oracles.hpp"
#include "promptalign/trainer.hpp"

namespace pa = promptalign;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Outcome> outcomes;
std::string report;

void record(int id, const std::string& name, bool pass, const std::string& detail) {
  outcomes.push_back({id, name, pass, detail});
  char line[1024];
  std::snprintf(line, sizeof line, "criterion %2d %s: %s | %s\n", id, pass ? "PASS" : "FAIL",
                name.c_str(), detail.c_str());
  std::cout << line << std::flush;
  report += line;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

double mean_of(const std::vector<pa::AblationRun>& runs, const std::string& study,
               const std::string& cell) {
  for (const auto& [name, mean] : pa::mean_by_cell(runs, study))
    if (name == cell) return mean;
  throw std::runtime_error("no runs for " + study + " / " + cell);
}

bool tensors_equal(const pa::Tensor& a, const pa::Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(float)) == 0;
}

void gradient_suite() {
  const auto start = std::chrono::steady_clock::now();
  pa::GradSuiteOptions opt;  // 100 instances per loss, rel 1e-3, floor 1e-5
  const auto r = pa::run_gradient_suite(opt);
  const double secs = seconds_since(start);
  std::string detail;
  double worst = 0;
  for (const auto& l : r.losses) {
    detail += l.loss + " " + std::to_string(l.instances - l.failures) + "/" +
              std::to_string(l.instances) + "; ";
    worst = std::max(worst, l.max_relative_error);
  }
  detail += "max rel err " + fmt("%.2e", worst) + ", " + fmt("%.1f s", secs);
  record(1, "gradient suite", r.ok() && r.losses.size() == 6 && secs < 120, detail);
}

void oracles() {
  const auto start = std::chrono::steady_clock::now();
  const auto topk = pa::run_topk_oracle(1000, 1, 1e-6);
  const auto protos = pa::run_prototype_oracle(1000, 1, 1e-6);
  const double secs = seconds_since(start);
  record(2, "oracle equivalence", topk.ok() && protos.ok() && secs < 60,
         "top-k " + std::to_string(topk.instances - topk.failures) + "/1000 (max err " +
             fmt("%.1e", topk.max_abs_error) + "), prototypes " +
             std::to_string(protos.instances - protos.failures) + "/1000 (max err " +
             fmt("%.1e", protos.max_abs_error) + "), " + fmt("%.1f s", secs));
}

void closed_forms() {
  bool ok = true;
  double worst_ce = 0, worst_ta = 0;
  for (std::size_t c : {2u, 7u, 8u}) {
    const double ce = pa::cross_entropy(pa::Tensor({c}), 0).item();
    worst_ce = std::max(worst_ce, std::abs(ce - std::log(static_cast<double>(c))));
  }
  ok = worst_ce <= 1e-5;
  for (double tau : {0.07, 0.5}) {
    const std::size_t c = 7, d = 16;
    pa::Buffer<float> rows(c * d, 0.0f);
    for (std::size_t i = 0; i < c; ++i) rows[i * d + i] = 1.0f;
    const pa::Tensor hard({c, d}, std::move(rows));
    const double got =
        pa::token_level_alignment_loss(hard.detach(), hard, static_cast<float>(tau)).item();
    const double want = -std::log(std::exp(1 / tau) / (std::exp(1 / tau) + double(c - 1)));
    worst_ta = std::max(worst_ta, std::abs(got - want));
  }
  ok = ok && worst_ta <= 1e-4;
  record(3, "closed-form losses", ok,
         "uniform CE vs ln C (C=2,7,8) max err " + fmt("%.1e", worst_ce) +
             "; orthogonal L_ta (tau=0.07,0.5) max err " + fmt("%.1e", worst_ta));
}

}  // namespace

int main(int argc, char** argv) {
  pa::tune_allocator();
  CLI::App app{"acceptance run"};
  std::string work = "acceptance_work";
  std::string descriptions;
  app.add_option("--work", work, "scratch directory")->capture_default_str();
  app.add_option("--descriptions", descriptions, "class descriptions file")->required();
  CLI11_PARSE(app, argc, argv);
  const fs::path root(work);

  try {
    gradient_suite();
    oracles();
    closed_forms();

    // Default synthetic dataset and the shared ablation grid.
    const pa::SyntheticDatasetSpec spec;
    const auto data = root / "data";
    pa::generate_dataset(spec, data, true);
    pa::TrainConfig base;
    base.dataset = data.string();
    base.descriptions = descriptions;
    base.output = (root / "ablation").string();
    const std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::vector<pa::AblationCell> cells = pa::component_cells(base);
    for (auto& more : {pa::prompt_cells(base), pa::prototype_cells(base, {1, 4, 16, 0})})
      cells.insert(cells.end(), more.begin(), more.end());
    const auto inputs = pa::load_train_inputs(base);
    const auto test = pa::load_split(data, pa::Split::test, base.encoder.image_shape());
    const auto runs = pa::run_ablation(cells, seeds, inputs, test, base.output, &std::cerr);
    std::cout << pa::ablation_report(runs) << std::flush;

    std::vector<pa::AblationRun> full;
    for (const auto& r : runs)
      if (r.study == "components" && r.cell == "+local top-k alignment") full.push_back(r);

    // 4: frozen/trainable contract on the seed-1 full run.
    {
      auto config = base;
      config.set_run_seed(1);
      const fs::path dir(full.at(0).output);
      const auto init = pa::load_tensors(dir / "checkpoint_init.mpaf");
      const auto fin = pa::load_tensors(dir / "checkpoint_final.mpaf");
      std::set<std::string> changed;
      for (const auto& [name, t] : init.entries())
        if (!fin.contains(name) || !tensors_equal(t, fin.at(name))) changed.insert(name);
      const auto model = pa::load_checkpoint(dir / "checkpoint_final.mpaf");
      const auto fresh = pa::init_frozen_weights<float>(config.encoder, config.weight_seed);
      const auto& e = config.encoder;
      const std::size_t expected =
          config.num_prompts * e.num_layers * e.embed_dim + config.context_len * e.embed_dim;
      const bool ok = changed == std::set<std::string>{"soft.context", "visual.prompts"} &&
                      init.size() == fin.size() &&
                      model.weights.checksum() == fresh.checksum() &&
                      model.trainable_parameter_count() == expected;
      std::string names;
      for (const auto& n : changed) names += n + " ";
      record(4, "frozen/trainable contract", ok,
             "changed: " + names + "| frozen checksum " + pa::hex64(fresh.checksum()) +
                 " | trainable " + std::to_string(model.trainable_parameter_count()) +
                 " (expected " + std::to_string(expected) + ")");
    }

    // 5: end-to-end accuracy, 3/3 seeds.
    {
      bool ok = full.size() == 3;
      std::string detail;
      for (const auto& r : full) {
        ok = ok && r.test_acc >= 0.90 && r.seconds <= 900;
        detail += "seed " + std::to_string(r.seed) + " " + fmt("%.2f%%", 100 * r.test_acc) +
                  " in " + fmt("%.0f s", r.seconds) + "; ";
      }
      record(5, "synthetic accuracy >= 90%", ok, detail);
    }

    // 6: component accumulation is non-decreasing, full beats baseline by 2 points.
    {
      const auto means = pa::mean_by_cell(runs, "components");
      bool ok = means.size() == 5;
      std::string detail;
      for (std::size_t i = 0; i < means.size(); ++i) {
        if (i > 0) ok = ok && means[i].second >= means[i - 1].second;
        detail += means[i].first + " " + fmt("%.2f", 100 * means[i].second) +
                  (i + 1 < means.size() ? " -> " : "");
      }
      ok = ok && means.back().second - means.front().second >= 0.02;
      record(6, "component ablation direction", ok, detail);
    }

    // 7: template 3 with soft-hard alignment vs template 1 without.
    {
      const double t3 = mean_of(runs, "prompts", "template 3, beta 1");
      const double t1 = mean_of(runs, "prompts", "template 1, beta 0");
      record(7, "prompt configuration direction", t3 >= t1,
             "template 3 + beta 1 " + fmt("%.2f", 100 * t3) + " vs template 1 + beta 0 " +
                 fmt("%.2f", 100 * t1));
    }

    // 8: prototype subset monotonicity over {1, 4, full}.
    {
      const double s1 = mean_of(runs, "prototypes", "subset 1");
      const double s4 = mean_of(runs, "prototypes", "subset 4");
      const double sf = mean_of(runs, "prototypes", "subset full");
      record(8, "prototype subset monotonicity", s1 <= s4 && s4 <= sf,
             "subset 1 " + fmt("%.2f", 100 * s1) + " -> 4 " + fmt("%.2f", 100 * s4) +
                 " -> full " + fmt("%.2f", 100 * sf));
    }

    // 9: saliency localization on the seed-1 full model.
    {
      const auto model = pa::load_checkpoint(fs::path(full.at(0).output) / "checkpoint_final.mpaf");
      const auto r =
          pa::export_saliency(model, test, pa::read_signatures(data), root / "saliency");
      record(9, "saliency localization", r.fraction() >= 0.80,
             std::to_string(r.inside_wins) + "/" + std::to_string(r.images) +
                 " test images inside > outside (" + fmt("%.2f%%", 100 * r.fraction()) + ")");
    }

    // 10: checkpoint byte round trip and metrics reproduction.
    {
      const fs::path dir(full.at(0).output);
      bool roundtrip = true;
      for (const char* f : {"checkpoint_init.mpaf", "checkpoint_best.mpaf",
                            "checkpoint_final.mpaf"}) {
        const auto copy = root / (std::string("resaved_") + f);
        pa::save_checkpoint(copy, pa::load_checkpoint(dir / f));
        roundtrip = roundtrip && pa::read_file(copy) == pa::read_file(dir / f);
      }
      const auto before = pa::read_file(dir / "metrics.csv");
      auto config = pa::load_config(dir / "config.txt");
      pa::train(config, inputs);
      const bool same = pa::read_file(dir / "metrics.csv") == before;
      record(10, "serialization and reproducibility", roundtrip && same,
             std::string("save/load/save ") + (roundtrip ? "identical" : "DIFFERS") +
                 "; retrain from config.txt: metrics.csv " + (same ? "identical" : "DIFFERS"));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: acceptance: " << e.what() << "\n";
    record(0, "acceptance run aborted", false, e.what());
  }

  std::size_t passed = 0;
  for (const auto& o : outcomes) passed += o.pass;
  const std::string summary =
      std::to_string(passed) + "/" + std::to_string(outcomes.size()) + " criteria passed\n";
  std::cout << summary;
  report += summary;
  fs::create_directories(root);
  pa::write_file_atomically(root / "acceptance.txt", report);
  return passed == outcomes.size() && outcomes.size() == 10 ? 0 : 1;
}
