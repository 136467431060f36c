// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "promptalign/trainer.hpp"

namespace promptalign {

/// One grid cell: a named variation of the base config.
struct AblationCell {
  std::string study;
  std::string name;
  TrainConfig config;
};

struct AblationRun {
  std::string study;
  std::string cell;
  std::uint64_t seed = 0;
  double test_acc = 0;
  double best_val_acc = 0;
  std::size_t best_epoch = 0;
  double seconds = 0;
  std::string output;
};

/// Cumulative component study: each row adds one component to the previous.
inline std::vector<AblationCell> component_cells(const TrainConfig& base) {
  std::vector<AblationCell> cells;
  auto c = base;
  c.visual_prompts = false;
  c.gamma = 0;
  c.beta = 0;
  c.local_alignment = false;
  cells.push_back({"components", "baseline", c});
  c.visual_prompts = true;
  cells.push_back({"components", "+visual prompts", c});
  c.gamma = 1;
  cells.push_back({"components", "+prototype alignment", c});
  c.beta = 1;
  cells.push_back({"components", "+soft-hard alignment", c});
  c.local_alignment = true;
  cells.push_back({"components", "+local top-k alignment", c});
  return cells;
}

/// Template x soft-hard alignment grid on top of the full model.
inline std::vector<AblationCell> prompt_cells(const TrainConfig& base) {
  std::vector<AblationCell> cells;
  for (int t = 1; t <= 3; ++t)
    for (double beta : {0.0, 1.0}) {
      auto c = base;
      c.template_config = t;
      c.beta = beta;
      cells.push_back({"prompts", "template " + std::to_string(t) + (beta > 0 ? ", beta 1" : ", beta 0"), c});
    }
  return cells;
}

/// Prototype subset sizes on top of the full model; 0 means every image.
inline std::vector<AblationCell> prototype_cells(const TrainConfig& base,
                                                 const std::vector<std::size_t>& subsets) {
  std::vector<AblationCell> cells;
  for (auto s : subsets) {
    auto c = base;
    c.prototype_subset = s;
    cells.push_back({"prototypes", s == 0 ? "subset full" : "subset " + std::to_string(s), c});
  }
  return cells;
}

inline std::string slug(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (std::isalnum(static_cast<unsigned char>(ch))) out.push_back(static_cast<char>(std::tolower(ch)));
    else if (!out.empty() && out.back() != '-') out.push_back('-');
  }
  while (!out.empty() && out.back() == '-') out.pop_back();
  return out;
}

/// Mean test accuracy per (study, cell) in first-appearance order.
inline std::vector<std::pair<std::string, double>> mean_by_cell(const std::vector<AblationRun>& runs,
                                                                const std::string& study) {
  std::vector<std::pair<std::string, double>> out;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& r : runs) {
    if (r.study != study) continue;
    if (!acc.count(r.cell)) out.emplace_back(r.cell, 0.0);
    acc[r.cell].first += r.test_acc;
    acc[r.cell].second += 1;
  }
  for (auto& [cell, mean] : out) mean = acc[cell].first / static_cast<double>(acc[cell].second);
  return out;
}

inline std::string ablation_csv(const std::vector<AblationRun>& runs) {
  std::string out = "study,cell,seed,test_acc,best_val_acc,best_epoch,seconds\n";
  char row[512];
  for (const auto& r : runs) {
    std::snprintf(row, sizeof row, "%s,%s,%llu,%.6f,%.6f,%zu,%.1f\n", r.study.c_str(),
                  r.cell.c_str(), static_cast<unsigned long long>(r.seed), r.test_acc,
                  r.best_val_acc, r.best_epoch, r.seconds);
    out += row;
  }
  return out;
}

/// Text report: one table per study with the per-seed and mean accuracy.
inline std::string ablation_report(const std::vector<AblationRun>& runs) {
  std::vector<std::string> studies;
  for (const auto& r : runs)
    if (std::find(studies.begin(), studies.end(), r.study) == studies.end())
      studies.push_back(r.study);
  std::string out;
  char line[256];
  for (const auto& study : studies) {
    out += "== " + study + " (test accuracy %, final checkpoint) ==\n";
    for (const auto& [cell, mean] : mean_by_cell(runs, study)) {
      std::snprintf(line, sizeof line, "  %-28s mean %6.2f  seeds", cell.c_str(), 100.0 * mean);
      out += line;
      for (const auto& r : runs)
        if (r.study == study && r.cell == cell) {
          std::snprintf(line, sizeof line, " %6.2f", 100.0 * r.test_acc);
          out += line;
        }
      out += "\n";
    }
    out += "\n";
  }
  return out;
}

/// Trains and tests every cell for every seed. Cells whose configs are
/// identical (apart from the output path) are trained once and reported
/// under each name. Writes ablation.csv and ablation.txt to `out_dir`.
inline std::vector<AblationRun> run_ablation(const std::vector<AblationCell>& cells,
                                             const std::vector<std::uint64_t>& seeds,
                                             const TrainInputs& inputs, const DataSplit& test,
                                             const std::filesystem::path& out_dir,
                                             std::ostream* log = nullptr) {
  std::vector<AblationRun> runs;
  std::map<std::string, AblationRun> done;  // config text -> run
  for (auto seed : seeds)
    for (const auto& cell : cells) {
      auto config = cell.config;
      config.set_run_seed(seed);
      config.output.clear();
      const auto key = config_to_text(config);
      AblationRun run;
      if (auto it = done.find(key); it != done.end()) {
        run = it->second;
      } else {
        config.output = (out_dir / (slug(cell.study + " " + cell.name)) /
                         ("seed" + std::to_string(seed)))
                            .string();
        const auto start = std::chrono::steady_clock::now();
        auto result = train(config, inputs);
        run.test_acc = evaluate(result.model, test).accuracy;
        run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        run.best_val_acc = result.best_val;
        run.best_epoch = result.best_epoch;
        run.output = config.output;
        done[key] = run;
      }
      run.study = cell.study;
      run.cell = cell.name;
      run.seed = seed;
      runs.push_back(run);
      if (log)
        *log << cell.study << " / " << cell.name << " / seed " << seed << ": test "
             << run.test_acc << std::endl;
    }
  std::filesystem::create_directories(out_dir);
  write_file_atomically(out_dir / "ablation.csv", ablation_csv(runs));
  write_file_atomically(out_dir / "ablation.txt", ablation_report(runs));
  return runs;
}

}  // namespace promptalign
