// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "promptalign/config.hpp"
#include "promptalign/crossmodal.hpp"
#include "promptalign/dataset.hpp"
#include "promptalign/encoders.hpp"
#include "promptalign/io.hpp"
#include "promptalign/prompts.hpp"
#include "promptalign/prototypes.hpp"

namespace promptalign {

/// Keeps freed training temporaries inside the heap instead of returning
/// them to the kernel after every step. Only affects speed.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

/// Everything needed to score images: frozen weights plus the learned
/// prompts and the prototype anchors.
struct PromptModel {
  TrainConfig config;
  std::vector<std::string> class_names;
  FrozenWeights<float> weights;
  SoftPromptSet<float> soft;
  std::optional<VisualPromptStack<float>> visual;
  PrototypeTable<float> prototypes;

  const VisualPromptStack<float>* visual_prompts() const {
    return visual ? &*visual : nullptr;
  }
  std::size_t num_classes() const { return class_names.size(); }

  /// Soft context plus (when enabled) the visual prompt stack.
  std::vector<Tensor> trainable_parameters() const {
    std::vector<Tensor> p{soft.context};
    if (visual) p.push_back(visual->tokens);
    return p;
  }
  std::size_t trainable_parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : trainable_parameters()) n += t.size();
    return n;
  }
  std::uint64_t config_hash() const { return compatibility_hash(config, class_names); }
};

/// Reorders fixture descriptions to `class_names`; a missing class is an error.
inline std::vector<ClassDescription> descriptions_for(
    const std::vector<ClassDescription>& all, const std::vector<std::string>& class_names) {
  std::vector<ClassDescription> out;
  for (const auto& name : class_names) {
    auto it = std::find_if(all.begin(), all.end(),
                           [&](const ClassDescription& d) { return d.class_name == name; });
    if (it == all.end())
      throw std::runtime_error("missing description for class '" + name +
                               "'; run the describe command or edit the fixtures file");
    out.push_back(*it);
  }
  return out;
}

/// Fresh model: frozen weights from the weight seed, prompts from the
/// prompt seed. Prototypes are left empty.
inline PromptModel init_model(const TrainConfig& config, const std::vector<std::string>& names,
                              const Vocabulary& vocab) {
  config.validate();
  PromptModel m;
  m.config = config;
  m.class_names = names;
  m.weights = init_frozen_weights<float>(config.encoder, config.weight_seed);
  m.soft = SoftPromptSet<float>::init(m.weights, class_name_tokens(vocab, names),
                                      config.context_len, config.prompt_seed);
  if (config.visual_prompts)
    m.visual = VisualPromptStack<float>::init(config.encoder.num_layers, config.num_prompts,
                                              config.encoder.embed_dim, config.prompt_seed);
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline TensorMap prototype_tensors(const PrototypeTable<float>& table, std::uint64_t hash) {
  TensorMap map;
  map.set("prototypes", table.prototypes);
  map.set("prototypes.subset_size", encode_u64(table.subset_size));
  map.set("prototypes.subset_seed", encode_u64(table.subset_seed));
  map.set("meta.config_hash", encode_u64(hash));
  return map;
}

/// Reads a table written from prototype_tensors, refusing one computed for
/// a different encoder or class list.
inline PrototypeTable<float> load_prototypes(const std::filesystem::path& path,
                                             const TrainConfig& config,
                                             const std::vector<std::string>& class_names) {
  const auto map = load_tensors(path);
  const auto stored = decode_u64(map.at("meta.config_hash"));
  const auto expected = compatibility_hash(config, class_names);
  if (stored != expected)
    throw std::runtime_error("config hash mismatch: prototypes " + hex64(stored) +
                             ", dataset " + hex64(expected));
  PrototypeTable<float> t;
  t.prototypes = map.at("prototypes");
  t.subset_size = decode_u64(map.at("prototypes.subset_size"));
  t.subset_seed = decode_u64(map.at("prototypes.subset_seed"));
  if (t.prototypes.rank() != 2 || t.num_classes() != class_names.size() ||
      t.prototypes.dim(1) != config.encoder.projection_dim)
    throw std::runtime_error(path.string() + ": prototype table shape does not match config");
  return t;
}

inline TensorMap checkpoint_tensors(const PromptModel& m) {
  TensorMap map;
  map.set("soft.context", m.soft.context.detach());
  if (m.visual) map.set("visual.prompts", m.visual->tokens.detach());
  map.set("prototypes", m.prototypes.prototypes);
  const std::size_t c = m.soft.size(), longest = m.soft.max_class_tokens();
  Buffer<float> ids(c * longest, -1.0f);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < m.soft.class_token_ids[i].size(); ++j)
      ids[i * longest + j] = static_cast<float>(m.soft.class_token_ids[i][j]);
  map.set("class_token_ids", Tensor({c, longest}, std::move(ids)));
  std::string names;
  for (const auto& n : m.class_names) names += n + "\n";
  map.set("meta.class_names", encode_text(names));
  map.set("meta.config", encode_text(config_to_text(m.config)));
  map.set("meta.weight_seed", encode_u64(m.config.weight_seed));
  map.set("meta.config_hash", encode_u64(m.config_hash()));
  return map;
}

inline void save_checkpoint(const std::filesystem::path& path, const PromptModel& m) {
  save_tensors(path, checkpoint_tensors(m));
}

/// Rebuilds a model from a checkpoint. The frozen weights are regenerated
/// from the stored seed and the stored hash is verified against them.
inline PromptModel model_from_checkpoint(const TensorMap& map, const std::string& origin) {
  PromptModel m;
  apply_config_text(m.config, decode_text(map.at("meta.config")), origin + "[meta.config]");
  if (decode_u64(map.at("meta.weight_seed")) != m.config.weight_seed)
    throw std::runtime_error(origin + ": weight seed disagrees with stored config");
  m.config.validate();
  {
    std::istringstream in(decode_text(map.at("meta.class_names")));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) m.class_names.push_back(line);
  }
  const auto stored = decode_u64(map.at("meta.config_hash"));
  if (stored != m.config_hash())
    throw std::runtime_error(origin + ": config hash " + hex64(m.config_hash()) +
                             " does not match stored " + hex64(stored));
  m.weights = init_frozen_weights<float>(m.config.encoder, m.config.weight_seed);
  const auto& ids = map.at("class_token_ids");
  std::vector<std::vector<int>> tokens(ids.dim(0));
  for (std::size_t i = 0; i < ids.dim(0); ++i)
    for (std::size_t j = 0; j < ids.dim(1); ++j)
      if (ids[i * ids.dim(1) + j] >= 0) tokens[i].push_back(static_cast<int>(ids[i * ids.dim(1) + j]));
  if (tokens.size() != m.class_names.size())
    throw std::runtime_error(origin + ": class_token_ids rows differ from class names");
  const auto& ctx = map.at("soft.context");
  m.soft.context = Tensor(ctx.shape(), Buffer<float>(ctx.values().begin(), ctx.values().end()),
                          true);
  m.soft.attach(m.weights, std::move(tokens));
  if (m.config.visual_prompts) {
    const auto& vp = map.at("visual.prompts");
    m.visual = VisualPromptStack<float>{
        Tensor(vp.shape(), Buffer<float>(vp.values().begin(), vp.values().end()), true)};
  }
  m.prototypes.prototypes = map.at("prototypes");
  return m;
}

inline PromptModel load_checkpoint(const std::filesystem::path& path) {
  return model_from_checkpoint(load_tensors(path), path.string());
}

/// Refuses a model whose encoder or classes differ from `class_names`.
inline void require_compatible(const PromptModel& m, const std::vector<std::string>& class_names) {
  const auto expected = compatibility_hash(m.config, class_names);
  if (expected != m.config_hash())
    throw std::runtime_error("config hash mismatch: checkpoint " + hex64(m.config_hash()) +
                             ", dataset " + hex64(expected));
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  double accuracy = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<int> predictions;
};

inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

/// Logits [B, C] for images [B, H, W, C_img] against text features [C, P].
inline Tensor model_logits(const PromptModel& m, const Tensor& images, const Tensor& text) {
  auto f = encode_images(m.weights, images, m.visual_prompts());
  return alignment_logits(f.global, f.locals, text, m.config.k, m.config.local_alignment);
}

inline Evaluation evaluate(const PromptModel& m, const DataSplit& split,
                           std::size_t batch = 64) {
  const auto text = m.soft.features(m.weights);
  Evaluation ev;
  ev.confusion.assign(m.num_classes(), std::vector<std::size_t>(m.num_classes(), 0));
  std::size_t correct = 0;
  for (std::size_t s = 0; s < split.size(); s += batch) {
    const std::size_t len = std::min(batch, split.size() - s);
    const auto pred = argmax_rows(model_logits(m, slice(split.images, 0, s, len), text));
    for (std::size_t i = 0; i < len; ++i) {
      const int y = split.labels[s + i];
      if (static_cast<std::size_t>(y) >= m.num_classes())
        throw std::out_of_range("label " + std::to_string(y) + " has no class");
      ++ev.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(pred[i])];
      correct += pred[i] == y;
      ev.predictions.push_back(pred[i]);
    }
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(split.size());
  return ev;
}

// ---------------------------------------------------------------------------
// Training

/// Cosine decay from `lr0` at step 0 towards 0 at `total_steps`.
inline double cosine_lr(double lr0, std::size_t step, std::size_t total_steps) {
  return 0.5 * lr0 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                         static_cast<double>(total_steps)));
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double l_total = 0, l_vt = 0, l_ta = 0, l_pa = 0, l_v = 0;
  double train_acc = 0, val_acc = 0, seconds = 0;
};

inline const char* kMetricsHeader = "epoch,l_total,l_vt,l_ta,l_pa,l_v,train_acc,val_acc,seconds";

inline std::string metrics_row(const EpochMetrics& e) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.6f,%.6f,%.3f", e.epoch,
                e.l_total, e.l_vt, e.l_ta, e.l_pa, e.l_v, e.train_acc, e.val_acc, e.seconds);
  return buf;
}

/// Config as `# key = value` comment lines, then the CSV header.
inline std::string metrics_preamble(const TrainConfig& c) {
  std::string out;
  std::istringstream in(config_to_text(c));
  std::string line;
  while (std::getline(in, line)) out += "# " + line + "\n";
  return out + kMetricsHeader + "\n";
}

struct TrainInputs {
  std::vector<std::string> class_names;
  std::vector<ClassDescription> descriptions;  // any order; matched by name
  DataSplit train;
  DataSplit val;
  std::optional<PrototypeTable<float>> prototypes;  // computed when absent
};

struct TrainResult {
  PromptModel model;  // final state
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  double best_val = -1;
  std::uint64_t frozen_checksum_before = 0, frozen_checksum_after = 0;
};

namespace detail {

/// Frozen features of every training image and of its mirror image.
struct FrozenCache {
  Tensor global[2];  // [N, P]
  Tensor locals[2];  // [N, N_l, P]
};

inline FrozenCache cache_frozen_features(const PromptModel& m, const Tensor& images) {
  FrozenCache cache;
  const std::size_t n = images.dim(0), chunk = 64;
  for (int f = 0; f < 2; ++f) {
    std::vector<Tensor> g, l;
    for (std::size_t s = 0; s < n; s += chunk) {
      std::vector<std::size_t> idx;
      for (std::size_t i = s; i < std::min(n, s + chunk); ++i) idx.push_back(i);
      auto feats = encode_images(m.weights,
                                 gather_images(images, std::span<const std::size_t>(idx),
                                               std::vector<bool>(idx.size(), f == 1)));
      g.push_back(feats.global);
      l.push_back(feats.locals);
    }
    cache.global[f] = concat(g, 0);
    cache.locals[f] = concat(l, 0);
  }
  return cache;
}

inline Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx,
                          const std::vector<bool>& which, const Tensor& alt) {
  const std::size_t per = t.size() / t.dim(0);
  Buffer<float> out(idx.size() * per);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& src = which[b] ? alt : t;
    std::copy_n(src.values().begin() + static_cast<std::ptrdiff_t>(idx[b] * per), per,
                out.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  Shape shape = t.shape();
  shape[0] = idx.size();
  return Tensor(std::move(shape), std::move(out));
}

}  // namespace detail

/// Runs the full optimization. Writes config.txt, metrics.csv and the
/// init/best/final checkpoints into `config.output`. Progress lines go to
/// `log` when given.
inline TrainResult train(const TrainConfig& config, const TrainInputs& in,
                         std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  using clock = std::chrono::steady_clock;
  config.validate();
  if (in.train.size() == 0 || in.val.size() == 0)
    throw std::invalid_argument("train: empty train or validation split");
  const auto start = clock::now();
  const auto descriptions = descriptions_for(in.descriptions, in.class_names);
  const auto vocab = build_prompt_vocabulary(descriptions, config.encoder.vocab_size);

  TrainResult result;
  PromptModel& m = result.model;
  m = init_model(config, in.class_names, vocab);
  result.frozen_checksum_before = m.weights.checksum();
  const auto hard =
      build_hard_prompts(m.weights, vocab, descriptions, config.template_config);
  if (in.prototypes) {
    if (in.prototypes->num_classes() != in.class_names.size())
      throw std::invalid_argument("train: prototype table has " +
                                  std::to_string(in.prototypes->num_classes()) +
                                  " classes, dataset has " +
                                  std::to_string(in.class_names.size()));
    m.prototypes = *in.prototypes;
  } else {
    m.prototypes = compute_prototypes(m.weights, in.train.images,
                                      std::span<const int>(in.train.labels), in.class_names,
                                      config.prototype_subset, config.prototype_seed);
  }

  const fs::path out_dir(config.output);
  fs::create_directories(out_dir);
  write_file_atomically(out_dir / "config.txt", config_to_text(config));
  save_checkpoint(out_dir / "checkpoint_init.mpaf", m);
  std::string metrics = metrics_preamble(config);
  write_file_atomically(out_dir / "metrics.csv", metrics);

  std::optional<detail::FrozenCache> cache;
  if (!m.visual) cache = detail::cache_frozen_features(m, in.train.images);

  const std::size_t n = in.train.size(), bs = config.batch_size;
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  const float tau = static_cast<float>(config.tau);
  const float tau_logits = static_cast<float>(config.tau_logits);
  const float beta = static_cast<float>(config.beta), gamma = static_cast<float>(config.gamma);

  auto params = m.trainable_parameters();
  std::vector<Buffer<float>> velocity;
  for (const auto& p : params) velocity.emplace_back(p.size(), 0.0f);

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng(mix_seed({config.shuffle_seed, 0x7368756666ULL, epoch}));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
    std::vector<bool> flips(n);
    for (std::size_t i = 0; i < n; ++i) flips[i] = config.flip && (rng() & 1U);

    double sum_total = 0, sum_vt = 0, sum_ta = 0, sum_pa = 0, sum_v = 0;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < n; s += bs, ++step) {
      const std::size_t len = std::min(bs, n - s);
      std::span<const std::size_t> idx(order.data() + s, len);
      std::vector<bool> flip(flips.begin() + static_cast<std::ptrdiff_t>(s),
                             flips.begin() + static_cast<std::ptrdiff_t>(s + len));
      std::vector<int> labels(len);
      for (std::size_t b = 0; b < len; ++b) labels[b] = in.train.labels[idx[b]];
      const std::span<const int> y(labels);

      Tape tape;
      ImageFeatures<float> f;
      if (m.visual) {
        f = encode_images(m.weights, gather_images(in.train.images, idx, flip), &*m.visual);
      } else {
        f.global = detail::gather_rows(cache->global[0], idx, flip, cache->global[1]);
        f.locals = detail::gather_rows(cache->locals[0], idx, flip, cache->locals[1]);
      }
      const auto text = m.soft.features(m.weights);
      const auto logits_b =
          alignment_logits(f.global, f.locals, text, config.k, config.local_alignment);
      const auto l_vt = image_text_loss(logits_b, y, tau_logits);
      const auto l_ta = token_level_alignment_loss(m.soft.pooled(), hard.pooled, tau);
      const auto l_pa = prompt_level_alignment_loss(text, hard.features, tau);
      const auto l_v = visual_alignment_loss(f.global, y, m.prototypes.prototypes, config.metric);
      const auto total = total_loss(l_vt, textual_alignment_loss(l_ta, l_pa), l_v, beta, gamma);
      const double total_value = total[0];
      if (!std::isfinite(total_value))
        throw std::runtime_error("non-finite loss " + std::to_string(total_value) +
                                 " at epoch " + std::to_string(epoch) + " step " +
                                 std::to_string(step));
      backward(total);

      const float lr = static_cast<float>(cosine_lr(config.lr, step, total_steps));
      const auto mu = static_cast<float>(config.momentum);
      const auto wd = static_cast<float>(config.weight_decay);
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto values = params[p].mutable_values();
        auto& v = velocity[p];
        if (params[p].has_grad()) {
          const auto g = params[p].grad();
          for (std::size_t i = 0; i < values.size(); ++i) {
            v[i] = mu * v[i] + g[i] + wd * values[i];
            values[i] -= lr * v[i];
          }
        }
        params[p].zero_grad();
      }

      sum_total += total_value;
      sum_vt += l_vt[0];
      sum_ta += l_ta[0];
      sum_pa += l_pa[0];
      sum_v += l_v[0];
      const auto pred = argmax_rows(logits_b.detach());
      for (std::size_t b = 0; b < len; ++b) correct += pred[b] == labels[b];
    }

    EpochMetrics e;
    e.epoch = epoch;
    const double steps = static_cast<double>(steps_per_epoch);
    e.l_total = sum_total / steps;
    e.l_vt = sum_vt / steps;
    e.l_ta = sum_ta / steps;
    e.l_pa = sum_pa / steps;
    e.l_v = sum_v / steps;
    e.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    e.val_acc = evaluate(m, in.val).accuracy;
    e.seconds = config.wall_clock
                    ? std::chrono::duration<double>(clock::now() - start).count()
                    : 0.0;
    result.history.push_back(e);
    metrics += metrics_row(e) + "\n";
    write_file_atomically(out_dir / "metrics.csv", metrics);
    if (e.val_acc > result.best_val) {
      result.best_val = e.val_acc;
      result.best_epoch = epoch;
      save_checkpoint(out_dir / "checkpoint_best.mpaf", m);
    }
    if (log)
      *log << "epoch " << epoch << "/" << config.epochs << " loss " << e.l_total
           << " train_acc " << e.train_acc << " val_acc " << e.val_acc << std::endl;
  }
  save_checkpoint(out_dir / "checkpoint_final.mpaf", m);
  result.frozen_checksum_after = m.weights.checksum();
  return result;
}

/// Loads class names plus the train and val splits of a dataset directory.
inline TrainInputs load_train_inputs(const TrainConfig& config) {
  TrainInputs in;
  const std::filesystem::path dir(config.dataset);
  in.class_names = read_class_names(dir);
  in.descriptions = read_descriptions(config.descriptions);
  const auto shape = config.encoder.image_shape();
  in.train = load_split(dir, Split::train, shape);
  in.val = load_split(dir, Split::val, shape);
  return in;
}

}  // namespace promptalign
