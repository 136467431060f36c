// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "promptalign/encoders.hpp"
#include "promptalign/ops.hpp"
#include "promptalign/random.hpp"

namespace promptalign {

// ---------------------------------------------------------------------------
// Class descriptions

enum class DescriptionSource { fixture_file, remote_llm };

struct ClassDescription {
  std::string class_name;
  std::string description;
  DescriptionSource source = DescriptionSource::fixture_file;
};

/// Question sent to a language model for one class.
inline std::string description_query(const std::string& class_name) {
  return "Which visual features are most useful for telling apart the facial "
         "expression of " +
         class_name + "? Answer with a short comma-separated list of cues.";
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

/// Collapses whitespace runs (including newlines) to single spaces.
inline std::string squash_whitespace(const std::string& s) {
  std::string out;
  bool space = false;
  for (char ch : s) {
    if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
      space = !out.empty();
    } else {
      if (space) out.push_back(' ');
      space = false;
      out.push_back(ch);
    }
  }
  return out;
}

}  // namespace detail

/// Parses the fixtures format: a class-name line followed by one or more
/// description lines; records are separated by blank lines and lines
/// starting with '#' are comments. `origin` prefixes error messages.
inline std::vector<ClassDescription> parse_descriptions(const std::string& text,
                                                        const std::string& origin) {
  std::vector<ClassDescription> out;
  std::map<std::string, std::size_t> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  std::size_t record_line = 0;
  std::optional<ClassDescription> current;
  auto fail = [&](std::size_t line, const std::string& msg) {
    throw std::runtime_error(origin + ":" + std::to_string(line) + ": " + msg);
  };
  auto finish = [&] {
    if (!current) return;
    if (current->description.empty())
      fail(record_line, "class '" + current->class_name + "' has no description");
    out.push_back(std::move(*current));
    current.reset();
  };
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = detail::trim(raw);
    if (!line.empty() && line[0] == '#') continue;
    if (line.empty()) {
      finish();
      continue;
    }
    if (!current) {
      if (auto it = seen.find(line); it != seen.end())
        fail(line_no, "duplicate class '" + line + "' (first defined on line " +
                          std::to_string(it->second) + ")");
      seen.emplace(line, line_no);
      current = ClassDescription{line, "", DescriptionSource::fixture_file};
      record_line = line_no;
    } else {
      if (!current->description.empty()) current->description += ' ';
      current->description += line;
    }
  }
  finish();
  return out;
}

inline std::vector<ClassDescription> read_descriptions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open descriptions file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_descriptions(ss.str(), path.string());
}

/// Serializes in the fixtures format, wrapping descriptions at ~76 columns.
inline std::string format_descriptions(const std::vector<ClassDescription>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += '\n';
    out += items[i].class_name + '\n';
    std::istringstream words(detail::squash_whitespace(items[i].description));
    std::string word, line;
    while (words >> word) {
      if (!line.empty() && line.size() + 1 + word.size() > 76) {
        out += line + '\n';
        line.clear();
      }
      if (!line.empty()) line += ' ';
      line += word;
    }
    if (!line.empty()) out += line + '\n';
  }
  return out;
}

inline void write_descriptions(const std::filesystem::path& path,
                               const std::vector<ClassDescription>& items) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write descriptions file " + tmp);
    out << format_descriptions(items);
  }
  std::filesystem::rename(tmp, path);
}

/// Text generator behind the optional remote provider.
class LlmClient {
 public:
  virtual ~LlmClient() = default;
  /// Returns generated text or throws std::runtime_error.
  virtual std::string complete(const std::string& prompt) = 0;
};

/// Resolves one description per class.
///
/// Fixture entries are used directly. Classes missing from the fixtures (or
/// every class when `refresh` is set) are requested from `remote`; replies
/// are merged into the fixtures file so later calls stay offline. A failed
/// request falls back to the fixture entry when one exists and is a hard
/// error naming the class otherwise.
inline std::vector<ClassDescription> fetch_descriptions(
    const std::vector<std::string>& classes, const std::filesystem::path& fixtures,
    LlmClient* remote = nullptr, bool refresh = false) {
  std::vector<ClassDescription> cached;
  if (!fixtures.empty() && std::filesystem::exists(fixtures))
    cached = read_descriptions(fixtures);
  auto find_cached = [&](const std::string& name) -> ClassDescription* {
    for (auto& d : cached)
      if (d.class_name == name) return &d;
    return nullptr;
  };
  std::vector<ClassDescription> out;
  bool updated = false;
  for (const auto& name : classes) {
    ClassDescription* hit = find_cached(name);
    if (hit && !(refresh && remote)) {
      out.push_back({name, hit->description, DescriptionSource::fixture_file});
      continue;
    }
    std::string failure = "no fixture entry and no remote provider";
    if (remote) {
      try {
        auto text = detail::squash_whitespace(remote->complete(description_query(name)));
        if (text.empty()) throw std::runtime_error("empty reply");
        out.push_back({name, text, DescriptionSource::remote_llm});
        if (hit) {
          hit->description = text;
        } else {
          cached.push_back({name, text, DescriptionSource::fixture_file});
        }
        updated = true;
        continue;
      } catch (const std::exception& e) {
        failure = std::string("remote request failed: ") + e.what();
      }
    }
    if (hit) {
      out.push_back({name, hit->description, DescriptionSource::fixture_file});
      continue;
    }
    throw std::runtime_error("missing description for class '" + name + "': " + failure);
  }
  if (updated && !fixtures.empty()) write_descriptions(fixtures, cached);
  return out;
}

// ---------------------------------------------------------------------------
// Hard prompts

/// Template variants: 1 = "a photo of [class]", 2 = "a photo of a person
/// making a facial expression of [class]", 3 = variant 2 followed by
/// ", [description]".
inline std::string hard_prompt_text(int template_config, const std::string& class_name,
                                    const std::string& description) {
  switch (template_config) {
    case 1:
      return "a photo of " + class_name;
    case 2:
      return "a photo of a person making a facial expression of " + class_name;
    case 3:
      return "a photo of a person making a facial expression of " + class_name + ", " +
             description;
    default:
      throw std::invalid_argument("template config must be 1, 2 or 3, got " +
                                  std::to_string(template_config));
  }
}

/// Vocabulary over every text any template can produce, so token ids do not
/// depend on the template choice.
inline Vocabulary build_prompt_vocabulary(const std::vector<ClassDescription>& descriptions,
                                          std::size_t capacity) {
  std::vector<std::string> corpus;
  for (const auto& d : descriptions)
    for (int t = 1; t <= 3; ++t)
      corpus.push_back(hard_prompt_text(t, d.class_name, d.description));
  return Vocabulary::build(corpus, capacity);
}

/// Per-class hard prompts with their frozen token embeddings and features.
template <typename T>
struct HardPromptSet {
  int template_config = 3;
  std::vector<std::string> texts;
  std::vector<std::vector<int>> token_ids;
  std::vector<BasicTensor<T>> embeddings;  // [L_c, D] each
  BasicTensor<T> pooled;                   // [C, D], mean token embedding
  BasicTensor<T> features;                 // [C, P], unit rows

  std::size_t size() const { return texts.size(); }
};

namespace detail {

/// Mean over rows of constant [L, D] embeddings, accumulated in double.
template <typename T>
void append_row_mean(const BasicTensor<T>& e, Buffer<T>& out) {
  const std::size_t len = e.dim(0), d = e.dim(1);
  for (std::size_t j = 0; j < d; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < len; ++i) acc += e[i * d + j];
    out.push_back(static_cast<T>(acc / static_cast<double>(len)));
  }
}

}  // namespace detail

template <typename T>
HardPromptSet<T> build_hard_prompts(const FrozenWeights<T>& w, const Vocabulary& vocab,
                                    const std::vector<ClassDescription>& descriptions,
                                    int template_config) {
  if (descriptions.empty()) throw std::invalid_argument("hard prompts: no classes");
  HardPromptSet<T> set;
  set.template_config = template_config;
  const std::size_t d = w.config.embed_dim;
  Buffer<T> pooled;
  std::vector<BasicTensor<T>> features;
  for (const auto& desc : descriptions) {
    set.texts.push_back(hard_prompt_text(template_config, desc.class_name, desc.description));
    set.token_ids.push_back(vocab.tokenize(set.texts.back(), w.config.max_text_len));
    set.embeddings.push_back(embed_tokens(w, std::span<const int>(set.token_ids.back())));
    detail::append_row_mean(set.embeddings.back(), pooled);
    features.push_back(reshape(text_encode(w, set.embeddings.back()),
                               {1, w.config.projection_dim}));
  }
  set.pooled = BasicTensor<T>({descriptions.size(), d}, std::move(pooled));
  set.features = concat(features, 0).detach();
  return set;
}

// ---------------------------------------------------------------------------
// Soft prompts

/// Shared learnable context followed by each class name:
/// [BOS, ctx_1..ctx_M, class tokens, EOS].
template <typename T>
struct SoftPromptSet {
  BasicTensor<T> context;  // [M, D], trainable
  std::vector<std::vector<int>> class_token_ids;
  std::vector<BasicTensor<T>> class_embeddings;  // [n_c, D], frozen
  BasicTensor<T> bos, eos;                       // [1, D], frozen

  std::size_t size() const { return class_token_ids.size(); }
  std::size_t context_length() const { return context.dim(0); }

  /// Builds the frozen parts from token ids and draws the context.
  static SoftPromptSet init(const FrozenWeights<T>& w,
                            std::vector<std::vector<int>> class_token_ids,
                            std::size_t context_len, std::uint64_t seed) {
    if (context_len == 0) throw std::invalid_argument("soft prompts: context_len must be >= 1");
    Rng rng(mix_seed({seed, 0x63747874ULL}));
    SoftPromptSet s;
    s.context = gaussian_tensor<T>({context_len, w.config.embed_dim}, 0.02, rng, true);
    s.attach(w, std::move(class_token_ids));
    return s;
  }

  /// (Re)builds the frozen embeddings; `context` is left untouched.
  void attach(const FrozenWeights<T>& w, std::vector<std::vector<int>> ids) {
    class_token_ids = std::move(ids);
    class_embeddings.clear();
    for (const auto& t : class_token_ids) {
      if (t.empty()) throw std::invalid_argument("soft prompts: empty class name");
      class_embeddings.push_back(embed_tokens(w, std::span<const int>(t)));
    }
    const int b = Vocabulary::kBos, e = Vocabulary::kEos;
    bos = embed_tokens(w, std::span<const int>(&b, 1));
    eos = embed_tokens(w, std::span<const int>(&e, 1));
    const std::size_t longest = context_length() + 2 + max_class_tokens();
    if (longest > w.config.max_text_len)
      throw std::invalid_argument("soft prompts: sequence of " + std::to_string(longest) +
                                  " tokens exceeds max_text_len");
  }

  std::size_t max_class_tokens() const {
    std::size_t m = 0;
    for (const auto& t : class_token_ids) m = std::max(m, t.size());
    return m;
  }

  BasicTensor<T> sequence(std::size_t c) const {
    return concat<T>({bos, context, class_embeddings.at(c), eos}, 0);
  }

  /// Mean token embedding per class, [C, D].
  BasicTensor<T> pooled() const {
    std::vector<BasicTensor<T>> rows;
    for (std::size_t c = 0; c < size(); ++c) {
      auto s = sequence(c);
      rows.push_back(reshape(mean(s, 0), {1, s.dim(1)}));
    }
    return concat(rows, 0);
  }

  /// Encoded features θ(t_c), [C, P]. Equal-length classes run as a batch.
  BasicTensor<T> features(const FrozenWeights<T>& w) const {
    std::vector<BasicTensor<T>> seqs;
    bool equal = true;
    for (std::size_t c = 0; c < size(); ++c) {
      seqs.push_back(sequence(c));
      equal = equal && seqs.back().dim(0) == seqs.front().dim(0);
    }
    if (equal) {
      std::vector<BasicTensor<T>> batched;
      for (auto& s : seqs) batched.push_back(reshape(s, {1, s.dim(0), s.dim(1)}));
      return text_encode_batch(w, concat(batched, 0));
    }
    std::vector<BasicTensor<T>> rows;
    for (auto& s : seqs)
      rows.push_back(reshape(text_encode(w, s), {1, w.config.projection_dim}));
    return concat(rows, 0);
  }
};

/// Class-name word ids (no framing tokens) for the soft prompts.
inline std::vector<std::vector<int>> class_name_tokens(
    const Vocabulary& vocab, const std::vector<std::string>& class_names) {
  std::vector<std::vector<int>> out;
  for (const auto& n : class_names) {
    out.push_back(vocab.word_ids(n));
    if (out.back().empty())
      throw std::invalid_argument("class name '" + n + "' has no tokens");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Soft-hard alignment losses

/// For every hard anchor d, cross-entropy of the softmax over soft prompts c
/// of cos(soft_c, hard_d) / tau against target d, averaged over d.
template <typename T>
BasicTensor<T> anchor_contrastive_loss(const BasicTensor<T>& soft, const BasicTensor<T>& hard,
                                       T tau) {
  if (soft.rank() != 2 || hard.rank() != 2 || soft.dim(1) != hard.dim(1))
    detail::shape_error("anchor_contrastive_loss", soft.shape(), hard.shape());
  if (soft.dim(0) != hard.dim(0))
    throw std::invalid_argument("anchor_contrastive_loss: class count mismatch " +
                                std::to_string(soft.dim(0)) + " soft vs " +
                                std::to_string(hard.dim(0)) + " hard");
  if (!(tau > T(0))) throw std::invalid_argument("temperature must be > 0");
  const std::size_t c = soft.dim(0);
  auto sims = matmul(l2_normalize(hard), transpose(l2_normalize(soft)));  // [d, c]
  std::vector<int> targets(c);
  for (std::size_t i = 0; i < c; ++i) targets[i] = static_cast<int>(i);
  return cross_entropy(scale(sims, T(1) / tau), std::span<const int>(targets));
}

/// Token-level loss over pooled token embeddings, [C, D] each.
template <typename T>
BasicTensor<T> token_level_alignment_loss(const BasicTensor<T>& soft_pooled,
                                          const BasicTensor<T>& hard_pooled, T tau) {
  return anchor_contrastive_loss(soft_pooled, hard_pooled, tau);
}

/// Prompt-level loss over encoded features, [C, P] each.
template <typename T>
BasicTensor<T> prompt_level_alignment_loss(const BasicTensor<T>& soft_features,
                                           const BasicTensor<T>& hard_features, T tau) {
  return anchor_contrastive_loss(soft_features, hard_features, tau);
}

template <typename T>
BasicTensor<T> textual_alignment_loss(const BasicTensor<T>& l_ta, const BasicTensor<T>& l_pa) {
  return add(l_ta, l_pa);
}

}  // namespace promptalign
