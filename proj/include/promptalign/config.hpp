// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "promptalign/encoders.hpp"
#include "promptalign/io.hpp"
#include "promptalign/prompts.hpp"
#include "promptalign/prototypes.hpp"

namespace promptalign {

struct TrainConfig {
  // paths
  std::string dataset = "data/synthetic";
  std::string descriptions = "data/descriptions_7.txt";
  std::string output = "runs/default";
  // frozen encoders
  EncoderConfig encoder;
  // prompts
  std::size_t num_prompts = 8;
  std::size_t context_len = 10;
  int template_config = 3;
  double tau = 0.5;  // soft-hard alignment; sharper values let it dominate L_vt
  bool visual_prompts = true;
  // alignment
  std::size_t k = 4;
  double beta = 1.0;
  double gamma = 1.0;
  double tau_logits = 0.07;
  bool local_alignment = true;
  AlignmentMetric metric = AlignmentMetric::cosine;
  std::size_t prototype_subset = 0;  // 0 = every training image
  // optimization
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double lr = 0.032;
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool flip = true;
  // seeds
  std::uint64_t weight_seed = 1;
  std::uint64_t prompt_seed = 1;
  std::uint64_t shuffle_seed = 1;
  std::uint64_t prototype_seed = 1;
  // reporting
  bool wall_clock = false;  // off keeps metrics.csv byte-reproducible

  /// Sets every seed except the frozen-weight seed.
  void set_run_seed(std::uint64_t s) { prompt_seed = shuffle_seed = prototype_seed = s; }

  void validate() const;
};

/// One addressable configuration key.
struct ConfigField {
  std::string name;
  std::string help;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

namespace detail {

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << v;
  return os.str();
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end)
    throw std::invalid_argument("config '" + key + "': '" + v + "' is not an integer");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    throw std::invalid_argument("config '" + key + "': '" + v + "' is not a number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("config '" + key + "': '" + v + "' is not a boolean");
}

template <typename M>
ConfigField field(std::string name, std::string help, M TrainConfig::*member) {
  ConfigField f;
  f.name = name;
  f.help = std::move(help);
  f.get = [member](const TrainConfig& c) -> std::string {
    const auto& v = c.*member;
    if constexpr (std::is_same_v<M, std::string>) return v;
    else if constexpr (std::is_same_v<M, bool>) return v ? "true" : "false";
    else if constexpr (std::is_floating_point_v<M>) return format_double(v);
    else return std::to_string(v);
  };
  f.set = [member, name](TrainConfig& c, const std::string& v) {
    if constexpr (std::is_same_v<M, std::string>) c.*member = v;
    else if constexpr (std::is_same_v<M, bool>) c.*member = parse_bool(name, v);
    else if constexpr (std::is_floating_point_v<M>) c.*member = parse_double(name, v);
    else c.*member = parse_int<M>(name, v);
  };
  return f;
}

inline ConfigField encoder_field(std::string name, std::string help,
                                 std::size_t EncoderConfig::*member) {
  ConfigField f;
  f.name = name;
  f.help = std::move(help);
  f.get = [member](const TrainConfig& c) { return std::to_string(c.encoder.*member); };
  f.set = [member, name](TrainConfig& c, const std::string& v) {
    c.encoder.*member = parse_int<std::size_t>(name, v);
  };
  return f;
}

}  // namespace detail

/// Every configuration key in serialization order.
inline const std::vector<ConfigField>& config_fields() {
  using detail::encoder_field;
  using detail::field;
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    f.push_back(field("dataset", "dataset directory", &TrainConfig::dataset));
    f.push_back(field("descriptions", "class descriptions fixtures file",
                      &TrainConfig::descriptions));
    f.push_back(field("output", "run output directory", &TrainConfig::output));
    f.push_back(encoder_field("embed_dim", "encoder width", &EncoderConfig::embed_dim));
    f.push_back(encoder_field("num_layers", "encoder depth K", &EncoderConfig::num_layers));
    f.push_back(encoder_field("num_heads", "attention heads", &EncoderConfig::num_heads));
    f.push_back(encoder_field("mlp_ratio", "MLP expansion", &EncoderConfig::mlp_ratio));
    f.push_back(encoder_field("image_size", "image side in pixels", &EncoderConfig::image_size));
    f.push_back(encoder_field("image_channels", "image channels",
                              &EncoderConfig::image_channels));
    f.push_back(encoder_field("patch_size", "patch side in pixels", &EncoderConfig::patch_size));
    f.push_back(encoder_field("vocab_size", "token table rows", &EncoderConfig::vocab_size));
    f.push_back(encoder_field("max_text_len", "longest token sequence",
                              &EncoderConfig::max_text_len));
    f.push_back(encoder_field("projection_dim", "feature width",
                              &EncoderConfig::projection_dim));
    f.push_back(field("num_prompts", "visual prompt tokens per layer (N_p)",
                      &TrainConfig::num_prompts));
    f.push_back(field("context_len", "learnable text context vectors",
                      &TrainConfig::context_len));
    f.push_back(field("template", "hard prompt template (1, 2 or 3)",
                      &TrainConfig::template_config));
    f.push_back(field("tau", "soft-hard alignment temperature", &TrainConfig::tau));
    f.push_back(field("visual_prompts", "train visual prompts", &TrainConfig::visual_prompts));
    f.push_back(field("k", "local features kept by top-k", &TrainConfig::k));
    f.push_back(field("beta", "weight of the textual alignment loss", &TrainConfig::beta));
    f.push_back(field("gamma", "weight of the prototype loss", &TrainConfig::gamma));
    f.push_back(field("tau_logits", "logit temperature", &TrainConfig::tau_logits));
    f.push_back(field("local_alignment", "add the top-k local similarity to logits",
                      &TrainConfig::local_alignment));
    {
      ConfigField m;
      m.name = "metric";
      m.help = "prototype distance: cosine or l1";
      m.get = [](const TrainConfig& c) { return to_string(c.metric); };
      m.set = [](TrainConfig& c, const std::string& v) { c.metric = parse_metric(v); };
      f.push_back(std::move(m));
    }
    {
      ConfigField m;
      m.name = "prototype_subset";
      m.help = "images per class for prototypes, or 'full'";
      m.get = [](const TrainConfig& c) {
        return c.prototype_subset == 0 ? std::string("full")
                                       : std::to_string(c.prototype_subset);
      };
      m.set = [](TrainConfig& c, const std::string& v) {
        c.prototype_subset =
            v == "full" ? 0 : detail::parse_int<std::size_t>("prototype_subset", v);
        if (v != "full" && c.prototype_subset == 0)
          throw std::invalid_argument("config 'prototype_subset': use 'full' instead of 0");
      };
      f.push_back(std::move(m));
    }
    f.push_back(field("epochs", "training epochs", &TrainConfig::epochs));
    f.push_back(field("batch_size", "images per step", &TrainConfig::batch_size));
    f.push_back(field("lr", "initial learning rate", &TrainConfig::lr));
    f.push_back(field("momentum", "SGD momentum", &TrainConfig::momentum));
    f.push_back(field("weight_decay", "L2 weight decay", &TrainConfig::weight_decay));
    f.push_back(field("flip", "random horizontal flips", &TrainConfig::flip));
    f.push_back(field("weight_seed", "frozen weight seed", &TrainConfig::weight_seed));
    f.push_back(field("prompt_seed", "prompt initialization seed", &TrainConfig::prompt_seed));
    f.push_back(field("shuffle_seed", "batch order and flip seed", &TrainConfig::shuffle_seed));
    f.push_back(field("prototype_seed", "prototype subset seed",
                      &TrainConfig::prototype_seed));
    f.push_back(field("wall_clock", "record elapsed seconds in metrics (breaks byte reproducibility)",
                      &TrainConfig::wall_clock));
    return f;
  }();
  return fields;
}

inline const ConfigField& config_field(const std::string& name) {
  for (const auto& f : config_fields())
    if (f.name == name) return f;
  throw std::invalid_argument("unknown config key '" + name + "'");
}

inline void TrainConfig::validate() const {
  encoder.validate();
  auto fail = [](const std::string& m) { throw std::invalid_argument("config: " + m); };
  if (num_prompts == 0) fail("num_prompts must be >= 1");
  if (context_len == 0) fail("context_len must be >= 1");
  if (template_config < 1 || template_config > 3) fail("template must be 1, 2 or 3");
  if (!(tau > 0)) fail("tau must be > 0");
  if (!(tau_logits > 0)) fail("tau_logits must be > 0");
  if (k == 0) fail("k must be >= 1");
  if (beta < 0 || gamma < 0) fail("beta and gamma must be >= 0");
  if (epochs == 0) fail("epochs must be >= 1");
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (!(lr > 0)) fail("lr must be > 0");
  if (momentum < 0 || momentum >= 1) fail("momentum must be in [0, 1)");
  if (weight_decay < 0) fail("weight_decay must be >= 0");
}

/// `key = value` lines in field order.
inline std::string config_to_text(const TrainConfig& c) {
  std::string out;
  for (const auto& f : config_fields()) out += f.name + " = " + f.get(c) + "\n";
  return out;
}

/// Applies `key = value` lines onto `c`; '#' starts a comment.
inline void apply_config_text(TrainConfig& c, const std::string& text,
                              const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(origin + ":" + std::to_string(n) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    try {
      config_field(key).set(c, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(origin + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  TrainConfig c;
  apply_config_text(c, read_file(path), path.string());
  return c;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

/// Identifies what a checkpoint can be evaluated against: the frozen
/// encoder geometry, its weight seed and the ordered class names.
inline std::uint64_t compatibility_hash(const TrainConfig& c,
                                        const std::vector<std::string>& class_names) {
  std::string key;
  for (const auto& name : {"embed_dim", "num_layers", "num_heads", "mlp_ratio", "image_size",
                           "image_channels", "patch_size", "vocab_size", "max_text_len",
                           "projection_dim", "weight_seed"})
    key += std::string(name) + "=" + config_field(name).get(c) + ";";
  for (const auto& n : class_names) key += "class=" + n + ";";
  return fnv1a(key);
}

}  // namespace promptalign
