// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

// Command-line front end. Every subcommand prints results to stdout; on
// failure it prints one `error: <subcommand>: <message>` line to stderr and
// exits nonzero (2 for usage errors, 1 otherwise).

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "promptalign/llm_client.hpp"  // before other headers, see comment inside
#include "promptalign/ablation.hpp"
#include "promptalign/analysis.hpp"
#include "promptalign/gradsuite.hpp"
#include "promptalign/trainer.hpp"

namespace pa = promptalign;
namespace fs = std::filesystem;

namespace {

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

/// `--config FILE`, `--seed N` and one `--<key>` flag per config field.
/// Precedence: defaults, then the file, then --seed, then explicit flags.
struct ConfigFlags {
  std::string file;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::map<std::string, std::string> values;
  std::vector<std::pair<const pa::ConfigField*, CLI::Option*>> flags;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "key = value config file")->check(CLI::ExistingFile);
    seed_opt = app->add_option("--seed", seed, "sets every run seed except weight_seed");
    for (const auto& f : pa::config_fields()) {
      std::string flag = f.name;
      std::replace(flag.begin(), flag.end(), '_', '-');
      auto* opt = app->add_option("--" + flag, values[f.name], f.help)->group("Config");
      flags.emplace_back(&f, opt);
    }
  }

  pa::TrainConfig resolve() const {
    pa::TrainConfig c;
    if (!file.empty()) pa::apply_config_text(c, pa::read_file(file), file);
    if (seed_opt->count()) c.set_run_seed(seed);
    for (const auto& [field, opt] : flags)
      if (opt->count()) {
        try {
          field->set(c, values.at(field->name));
        } catch (const std::invalid_argument& e) {
          throw std::invalid_argument("--" + opt->get_single_name() + ": " + e.what());
        }
      }
    c.validate();
    return c;
  }
};

/// Checkpoint plus the dataset split it is applied to.
struct CheckpointFlags {
  std::string checkpoint;
  std::string dataset;  // empty: the dataset recorded in the checkpoint
  std::string split = "test";

  void attach(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "checkpoint file")
        ->required()
        ->check(CLI::ExistingFile);
    app->add_option("--dataset", dataset, "dataset directory (default: from checkpoint)");
    app->add_option("--split", split, "train, val or test")->capture_default_str();
  }

  struct Loaded {
    pa::PromptModel model;
    fs::path dataset;
    pa::DataSplit split;
  };

  Loaded load() const {
    Loaded out;
    out.model = pa::load_checkpoint(checkpoint);
    out.dataset = dataset.empty() ? fs::path(out.model.config.dataset) : fs::path(dataset);
    pa::require_compatible(out.model, pa::read_class_names(out.dataset));
    out.split = pa::load_split(out.dataset, pa::parse_split(split),
                               out.model.config.encoder.image_shape());
    return out;
  }
};

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!pa::detail::trim(item).empty()) out.push_back(std::stoull(item));
  if (out.empty()) throw std::invalid_argument("--seeds: empty list");
  return out;
}

std::vector<std::size_t> parse_subsets(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = pa::detail::trim(item);
    if (item.empty()) continue;
    out.push_back(item == "full" ? 0 : std::stoul(item));
  }
  if (out.empty()) throw std::invalid_argument("--subsets: empty list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  pa::tune_allocator();
  CLI::App app{"Prompt alignment toolkit: synthetic data, training, evaluation, diagnostics."};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand all help");

  // gen-data
  pa::SyntheticDatasetSpec spec;
  std::string data_out;
  bool force = false;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--out", data_out, "output directory")->required();
  gen->add_option("--classes", spec.num_classes, "7 or 8")->capture_default_str();
  gen->add_option("--train-per-class", spec.samples_per_class)->capture_default_str();
  gen->add_option("--val-per-class", spec.val_per_class)->capture_default_str();
  gen->add_option("--test-per-class", spec.test_per_class)->capture_default_str();
  gen->add_option("--sigma-bg", spec.sigma_bg, "background noise std")->capture_default_str();
  gen->add_option("--amplitude", spec.amplitude, "signature texture amplitude")
      ->capture_default_str();
  gen->add_option("--distractors", spec.distractors, "off-region patches with foreign textures")
      ->capture_default_str();
  gen->add_option("--seed", spec.seed)->capture_default_str();
  gen->add_flag("--force", force, "overwrite an existing directory");

  // describe
  std::string desc_out, desc_classes, desc_dataset;
  pa::LlmEndpoint endpoint;
  bool refresh = false;
  auto* describe = app.add_subcommand(
      "describe", "resolve class descriptions from the fixtures file, optionally via an endpoint");
  describe->add_option("--out", desc_out, "fixtures/cache file (read, then updated)")->required();
  auto* classes_opt = describe->add_option("--classes", desc_classes, "classes.txt file");
  describe->add_option("--dataset", desc_dataset, "dataset directory (uses its classes.txt)")
      ->excludes(classes_opt);
  describe->add_option("--endpoint", endpoint.base_url, "scheme://host[:port] of the generator");
  describe->add_option("--path", endpoint.path)->capture_default_str();
  describe->add_option("--model", endpoint.model, "model name sent with each request");
  describe->add_option("--api-key-env", endpoint.api_key_env,
                       "environment variable holding a bearer token");
  describe->add_option("--response-field", endpoint.response_field)->capture_default_str();
  describe->add_option("--timeout", endpoint.timeout_seconds)->capture_default_str();
  describe->add_flag("--refresh", refresh, "query the endpoint even for cached classes");

  // prototypes
  ConfigFlags proto_flags;
  std::string proto_out;
  auto* protos = app.add_subcommand("prototypes", "compute class prototypes from the train split");
  proto_flags.attach(protos);
  protos->add_option("--out", proto_out, "output file (default: <output>/prototypes.mpaf)");

  // train
  ConfigFlags train_flags;
  std::string train_protos;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "train prompts and write checkpoints + metrics");
  train_flags.attach(train);
  train->add_option("--prototypes", train_protos, "precomputed prototype file")
      ->check(CLI::ExistingFile);
  train->add_flag("--quiet", quiet, "no per-epoch log");

  // eval
  CheckpointFlags eval_flags;
  std::string confusion_out;
  auto* eval = app.add_subcommand("eval", "accuracy and confusion matrix of a checkpoint");
  eval_flags.attach(eval);
  eval->add_option("--confusion", confusion_out, "write the confusion matrix as CSV");

  // ablate
  ConfigFlags ablate_flags;
  std::string studies = "all", seeds_text = "1,2,3", subsets_text = "1,4,16,full";
  auto* ablate = app.add_subcommand("ablate", "component, prompt and prototype-subset studies");
  ablate_flags.attach(ablate);
  ablate->add_option("--study", studies, "components, prompts, prototypes or all")
      ->check(CLI::IsMember({"components", "prompts", "prototypes", "all"}))
      ->capture_default_str();
  ablate->add_option("--seeds", seeds_text, "comma-separated run seeds")->capture_default_str();
  ablate->add_option("--subsets", subsets_text, "prototype subset sizes")->capture_default_str();

  // gradcheck
  pa::GradSuiteOptions grad_opt;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference audit of every loss");
  gradcheck->add_option("--instances", grad_opt.instances, "random instances per loss")
      ->capture_default_str();
  gradcheck->add_option("--seed", grad_opt.seed)->capture_default_str();
  gradcheck->add_option("--step", grad_opt.step)->capture_default_str();
  gradcheck->add_option("--rel-tol", grad_opt.rel_tol)->capture_default_str();
  gradcheck->add_option("--abs-floor", grad_opt.abs_floor)->capture_default_str();

  // export-saliency
  CheckpointFlags sal_flags;
  std::string sal_out;
  std::size_t sal_limit = 0;
  auto* saliency = app.add_subcommand("export-saliency", "per-image input-gradient maps");
  sal_flags.attach(saliency);
  saliency->add_option("--out", sal_out, "output directory")->required();
  saliency->add_option("--limit", sal_limit, "first N images only (0 = all)");

  // export-projection
  CheckpointFlags proj_flags;
  std::string proj_out;
  auto* projection = app.add_subcommand("export-projection", "2-D PCA of prompted features");
  proj_flags.attach(projection);
  projection->add_option("--out", proj_out, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (*gen) {
      pa::generate_dataset(spec, data_out, force);
      std::cout << "wrote " << pa::split_size(spec, pa::Split::train) << " train, "
                << pa::split_size(spec, pa::Split::val) << " val, "
                << pa::split_size(spec, pa::Split::test) << " test samples to " << data_out
                << "\n";
    } else if (*describe) {
      const fs::path classes_file = !desc_classes.empty() ? fs::path(desc_classes)
                                    : !desc_dataset.empty()
                                        ? fs::path(desc_dataset) / "classes.txt"
                                        : fs::path();
      if (classes_file.empty()) throw std::invalid_argument("pass --classes or --dataset");
      const auto names = pa::read_lines(classes_file);
      std::optional<pa::HttpLlmClient> client;
      if (!endpoint.base_url.empty()) client.emplace(endpoint);
      const auto items =
          pa::fetch_descriptions(names, desc_out, client ? &*client : nullptr, refresh);
      for (const auto& d : items)
        std::cout << d.class_name << "\t"
                  << (d.source == pa::DescriptionSource::remote_llm ? "remote" : "fixture")
                  << "\t" << d.description << "\n";
      // Fixture-only runs against a fresh file still leave a complete cache.
      if (!fs::exists(desc_out)) pa::write_descriptions(desc_out, items);
    } else if (*protos) {
      const auto config = proto_flags.resolve();
      const auto names = pa::read_class_names(config.dataset);
      const auto train_split =
          pa::load_split(config.dataset, pa::Split::train, config.encoder.image_shape());
      const auto weights = pa::init_frozen_weights<float>(config.encoder, config.weight_seed);
      const auto table = pa::compute_prototypes(weights, train_split.images,
                                                std::span<const int>(train_split.labels), names,
                                                config.prototype_subset, config.prototype_seed);
      const fs::path out =
          proto_out.empty() ? fs::path(config.output) / "prototypes.mpaf" : fs::path(proto_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      pa::save_tensors(out, pa::prototype_tensors(table, pa::compatibility_hash(config, names)));
      for (std::size_t c = 0; c < names.size(); ++c)
        std::cout << names[c] << "\t" << table.members[c].size() << " images\n";
      std::cout << "wrote " << out.string() << "\n";
    } else if (*train) {
      const auto config = train_flags.resolve();
      auto inputs = pa::load_train_inputs(config);
      if (!train_protos.empty())
        inputs.prototypes = pa::load_prototypes(train_protos, config, inputs.class_names);
      const auto result = pa::train(config, inputs, quiet ? nullptr : &std::cout);
      std::printf("done best_epoch=%zu best_val=%.6f final_val=%.6f trainable=%zu output=%s\n",
                  result.best_epoch, result.best_val, result.history.back().val_acc,
                  result.model.trainable_parameter_count(), config.output.c_str());
    } else if (*eval) {
      const auto loaded = eval_flags.load();
      const auto ev = pa::evaluate(loaded.model, loaded.split);
      std::printf("accuracy=%.6f samples=%zu\n", ev.accuracy, loaded.split.size());
      std::string csv = "true\\pred";
      for (const auto& n : loaded.model.class_names) csv += "," + n;
      csv += "\n";
      for (std::size_t r = 0; r < ev.confusion.size(); ++r) {
        csv += loaded.model.class_names[r];
        for (auto v : ev.confusion[r]) csv += "," + std::to_string(v);
        csv += "\n";
      }
      std::cout << csv;
      if (!confusion_out.empty()) pa::write_file_atomically(confusion_out, csv);
    } else if (*ablate) {
      const auto base = ablate_flags.resolve();
      const auto seeds = parse_seeds(seeds_text);
      std::vector<pa::AblationCell> cells;
      auto add = [&](const std::vector<pa::AblationCell>& more) {
        cells.insert(cells.end(), more.begin(), more.end());
      };
      if (studies == "all" || studies == "components") add(pa::component_cells(base));
      if (studies == "all" || studies == "prompts") add(pa::prompt_cells(base));
      if (studies == "all" || studies == "prototypes")
        add(pa::prototype_cells(base, parse_subsets(subsets_text)));
      const auto inputs = pa::load_train_inputs(base);
      const auto test =
          pa::load_split(base.dataset, pa::Split::test, base.encoder.image_shape());
      const auto runs = pa::run_ablation(cells, seeds, inputs, test, base.output, &std::cerr);
      std::cout << pa::ablation_report(runs);
    } else if (*gradcheck) {
      const auto report = pa::run_gradient_suite(grad_opt);
      std::size_t failures = 0, total = 0;
      for (const auto& l : report.losses) {
        std::printf("%-12s instances=%zu failures=%zu max_rel_err=%.3g worst=%llu/%s "
                    "min_max_grad=%.3g\n",
                    l.loss.c_str(), l.instances, l.failures, l.max_relative_error,
                    static_cast<unsigned long long>(l.worst_instance), l.worst_parameter.c_str(),
                    l.smallest_gradient);
        failures += l.failures;
        total += l.instances;
      }
      if (failures)
        throw std::runtime_error(std::to_string(failures) + " of " + std::to_string(total) +
                                 " instances exceed tolerance");
    } else if (*saliency) {
      auto loaded = sal_flags.load();
      if (sal_limit > 0 && sal_limit < loaded.split.size()) {
        auto& s = loaded.split;
        s.paths.resize(sal_limit);
        s.labels.resize(sal_limit);
        s.images = pa::slice(s.images, 0, 0, sal_limit);
      }
      std::vector<std::vector<std::size_t>> signatures;
      if (fs::exists(loaded.dataset / "signatures.txt"))
        signatures = pa::read_signatures(loaded.dataset);
      const auto r = pa::export_saliency(loaded.model, loaded.split, signatures, sal_out);
      std::printf("images=%zu", r.images);
      if (!signatures.empty())
        std::printf(" inside_wins=%zu fraction=%.6f", r.inside_wins, r.fraction());
      std::printf(" output=%s\n", sal_out.c_str());
    } else if (*projection) {
      const auto loaded = proj_flags.load();
      const fs::path out(proj_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      const auto r = pa::export_projection(loaded.model, loaded.split, out);
      std::printf("rows=%zu silhouette=%.6f output=%s\n", r.coords.size(), r.silhouette,
                  proj_out.c_str());
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << command << ": " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
