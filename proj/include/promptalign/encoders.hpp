// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "promptalign/ops.hpp"
#include "promptalign/random.hpp"
#include "promptalign/tensor.hpp"

namespace promptalign {

struct EncoderConfig {
  std::size_t embed_dim = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t image_size = 32;
  std::size_t image_channels = 1;
  std::size_t patch_size = 8;
  std::size_t vocab_size = 1024;
  std::size_t max_text_len = 77;
  std::size_t projection_dim = 64;

  std::size_t grid_size() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid_size() * grid_size(); }
  std::size_t patch_dim() const { return patch_size * patch_size * image_channels; }
  Shape image_shape() const { return {image_size, image_size, image_channels}; }

  void validate() const {
    auto fail = [](const std::string& msg) {
      throw std::invalid_argument("encoder config: " + msg);
    };
    if (embed_dim == 0 || num_layers == 0 || num_heads == 0 || mlp_ratio == 0 ||
        image_size == 0 || image_channels == 0 || patch_size == 0 ||
        projection_dim == 0)
      fail("all dimensions must be positive");
    if (embed_dim % num_heads != 0)
      fail("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
           std::to_string(num_heads));
    if (image_size % patch_size != 0)
      fail("image_size " + std::to_string(image_size) +
           " not divisible by patch_size " + std::to_string(patch_size));
    if (max_text_len < 2) fail("max_text_len must be >= 2");
    if (vocab_size < 4) fail("vocab_size must be >= 4");
  }

  bool operator==(const EncoderConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Tokenizer

/// Lowercases ASCII letters, replaces ASCII punctuation by spaces and splits
/// on whitespace. Non-ASCII bytes are kept inside words.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u < 0x80 && (std::isspace(u) || std::ispunct(u))) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

/// Word-level vocabulary built from a text corpus. Ids 0..2 are reserved for
/// UNK, BOS and EOS; corpus words follow in lexicographic order.
class Vocabulary {
 public:
  static constexpr int kUnk = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr std::size_t kReserved = 3;

  Vocabulary() = default;

  static Vocabulary build(std::span<const std::string> corpus, std::size_t capacity) {
    Vocabulary v;
    std::vector<std::string> words;
    for (const auto& text : corpus)
      for (auto& w : split_words(text)) words.push_back(std::move(w));
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    if (words.size() + kReserved > capacity) {
      throw std::invalid_argument("vocabulary: corpus has " + std::to_string(words.size()) +
                                  " distinct words, capacity is " +
                                  std::to_string(capacity - kReserved));
    }
    for (std::size_t i = 0; i < words.size(); ++i)
      v.ids_.emplace(words[i], static_cast<int>(i + kReserved));
    v.words_ = std::move(words);
    return v;
  }

  std::size_t size() const { return words_.size() + kReserved; }
  const std::vector<std::string>& words() const { return words_; }

  int id(std::string_view word) const {
    auto it = ids_.find(std::string(word));
    return it == ids_.end() ? kUnk : it->second;
  }

  /// Word ids without framing tokens.
  std::vector<int> word_ids(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
  }

  /// [BOS, words..., EOS], truncated to max_len with EOS kept last.
  std::vector<int> tokenize(std::string_view text, std::size_t max_len) const {
    if (max_len < 2) throw std::invalid_argument("tokenize: max_len must be >= 2");
    auto words = word_ids(text);
    if (words.size() > max_len - 2) words.resize(max_len - 2);
    std::vector<int> ids;
    ids.reserve(words.size() + 2);
    ids.push_back(kBos);
    ids.insert(ids.end(), words.begin(), words.end());
    ids.push_back(kEos);
    return ids;
  }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int, std::less<>> ids_;
};

// ---------------------------------------------------------------------------
// Frozen weights

template <typename T>
struct TransformerLayerWeights {
  BasicTensor<T> ln1_gain, ln1_bias;
  BasicTensor<T> qkv_weight, qkv_bias;  // [D, 3D], [3D]
  BasicTensor<T> out_weight, out_bias;  // [D, D], [D]
  BasicTensor<T> ln2_gain, ln2_bias;
  BasicTensor<T> fc1_weight, fc1_bias;  // [D, mD], [mD]
  BasicTensor<T> fc2_weight, fc2_bias;  // [mD, D], [D]
};

template <typename T>
struct TextTowerWeights {
  BasicTensor<T> token_embedding;  // [V, D]
  BasicTensor<T> positional;       // [max_text_len, D]
  std::vector<TransformerLayerWeights<T>> layers;
  BasicTensor<T> ln_final_gain, ln_final_bias;
  BasicTensor<T> projection;  // [D, P]
};

template <typename T>
struct VisionTowerWeights {
  BasicTensor<T> patch_embedding;  // [patch_dim, D]
  BasicTensor<T> patch_bias;       // [D], zero
  BasicTensor<T> class_embedding;  // [1, D]
  BasicTensor<T> positional;       // [N + 1, D]
  BasicTensor<T> ln_pre_gain, ln_pre_bias;
  std::vector<TransformerLayerWeights<T>> layers;
  BasicTensor<T> ln_post_gain, ln_post_bias;
  BasicTensor<T> projection;  // [D, P]
};

/// Pseudo-pretrained dual encoder parameters. Every tensor has
/// requires_grad == false and is never written after construction.
template <typename T>
struct FrozenWeights {
  EncoderConfig config;
  std::uint64_t seed = 0;
  TextTowerWeights<T> text;
  VisionTowerWeights<T> vision;

  /// All parameters with stable names, in generation order.
  std::vector<std::pair<std::string, BasicTensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, BasicTensor<T>>> out;
    auto add_layers = [&](const std::string& prefix,
                          const std::vector<TransformerLayerWeights<T>>& layers) {
      for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto p = prefix + ".layer" + std::to_string(l) + ".";
        const auto& w = layers[l];
        out.emplace_back(p + "ln1_gain", w.ln1_gain);
        out.emplace_back(p + "ln1_bias", w.ln1_bias);
        out.emplace_back(p + "qkv_weight", w.qkv_weight);
        out.emplace_back(p + "qkv_bias", w.qkv_bias);
        out.emplace_back(p + "out_weight", w.out_weight);
        out.emplace_back(p + "out_bias", w.out_bias);
        out.emplace_back(p + "ln2_gain", w.ln2_gain);
        out.emplace_back(p + "ln2_bias", w.ln2_bias);
        out.emplace_back(p + "fc1_weight", w.fc1_weight);
        out.emplace_back(p + "fc1_bias", w.fc1_bias);
        out.emplace_back(p + "fc2_weight", w.fc2_weight);
        out.emplace_back(p + "fc2_bias", w.fc2_bias);
      }
    };
    out.emplace_back("text.token_embedding", text.token_embedding);
    out.emplace_back("text.positional", text.positional);
    add_layers("text", text.layers);
    out.emplace_back("text.ln_final_gain", text.ln_final_gain);
    out.emplace_back("text.ln_final_bias", text.ln_final_bias);
    out.emplace_back("text.projection", text.projection);
    out.emplace_back("vision.patch_embedding", vision.patch_embedding);
    out.emplace_back("vision.patch_bias", vision.patch_bias);
    out.emplace_back("vision.class_embedding", vision.class_embedding);
    out.emplace_back("vision.positional", vision.positional);
    out.emplace_back("vision.ln_pre_gain", vision.ln_pre_gain);
    out.emplace_back("vision.ln_pre_bias", vision.ln_pre_bias);
    add_layers("vision", vision.layers);
    out.emplace_back("vision.ln_post_gain", vision.ln_post_gain);
    out.emplace_back("vision.ln_post_bias", vision.ln_post_bias);
    out.emplace_back("vision.projection", vision.projection);
    return out;
  }

  /// FNV-1a over the raw bytes of every parameter.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : named_parameters()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(t.values().data());
      for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    }
    return h;
  }
};

namespace detail {

template <typename T>
TransformerLayerWeights<T> init_layer(std::size_t d, std::size_t mlp_ratio, Rng& rng) {
  TransformerLayerWeights<T> w;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  const double s_out = 1.0 / std::sqrt(static_cast<double>(d * mlp_ratio));
  w.ln1_gain = BasicTensor<T>::full({d}, T(1));
  w.ln1_bias = BasicTensor<T>({d});
  w.qkv_weight = gaussian_tensor<T>({d, 3 * d}, s, rng);
  w.qkv_bias = BasicTensor<T>({3 * d});
  w.out_weight = gaussian_tensor<T>({d, d}, s, rng);
  w.out_bias = BasicTensor<T>({d});
  w.ln2_gain = BasicTensor<T>::full({d}, T(1));
  w.ln2_bias = BasicTensor<T>({d});
  w.fc1_weight = gaussian_tensor<T>({d, mlp_ratio * d}, s, rng);
  w.fc1_bias = BasicTensor<T>({mlp_ratio * d});
  w.fc2_weight = gaussian_tensor<T>({mlp_ratio * d, d}, s_out, rng);
  w.fc2_bias = BasicTensor<T>({d});
  return w;
}

}  // namespace detail

/// Deterministic Gaussian parameters with unit layer-norm gains. The same
/// (config, seed) always produces bitwise-identical weights; float and
/// double instantiations share the same draws.
template <typename T>
FrozenWeights<T> init_frozen_weights(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  FrozenWeights<T> w;
  w.config = config;
  w.seed = seed;
  const std::size_t d = config.embed_dim;
  const double width_scale = 1.0 / std::sqrt(static_cast<double>(d));

  Rng text_rng(mix_seed({seed, 0x74657874ULL}));
  w.text.token_embedding = gaussian_tensor<T>({config.vocab_size, d}, 0.02, text_rng);
  w.text.positional = gaussian_tensor<T>({config.max_text_len, d}, 0.01, text_rng);
  for (std::size_t l = 0; l < config.num_layers; ++l)
    w.text.layers.push_back(detail::init_layer<T>(d, config.mlp_ratio, text_rng));
  w.text.ln_final_gain = BasicTensor<T>::full({d}, T(1));
  w.text.ln_final_bias = BasicTensor<T>({d});
  w.text.projection = gaussian_tensor<T>({d, config.projection_dim}, width_scale, text_rng);

  Rng vision_rng(mix_seed({seed, 0x76697369ULL}));
  w.vision.patch_embedding = gaussian_tensor<T>(
      {config.patch_dim(), d}, 1.0 / std::sqrt(static_cast<double>(config.patch_dim())),
      vision_rng);
  w.vision.patch_bias = BasicTensor<T>({d});
  w.vision.class_embedding = gaussian_tensor<T>({1, d}, width_scale, vision_rng);
  w.vision.positional =
      gaussian_tensor<T>({config.num_patches() + 1, d}, width_scale, vision_rng);
  w.vision.ln_pre_gain = BasicTensor<T>::full({d}, T(1));
  w.vision.ln_pre_bias = BasicTensor<T>({d});
  for (std::size_t l = 0; l < config.num_layers; ++l)
    w.vision.layers.push_back(detail::init_layer<T>(d, config.mlp_ratio, vision_rng));
  w.vision.ln_post_gain = BasicTensor<T>::full({d}, T(1));
  w.vision.ln_post_bias = BasicTensor<T>({d});
  w.vision.projection =
      gaussian_tensor<T>({d, config.projection_dim}, width_scale, vision_rng);
  return w;
}

// ---------------------------------------------------------------------------
// Visual prompts

/// Learnable prompt tokens, one independent set of N_p tokens per layer.
template <typename T>
struct VisualPromptStack {
  BasicTensor<T> tokens;  // [K, N_p, D]

  static VisualPromptStack init(std::size_t layers, std::size_t count, std::size_t dim,
                                std::uint64_t seed) {
    if (layers == 0 || count == 0 || dim == 0)
      throw std::invalid_argument("visual prompts: layers, count and dim must be >= 1");
    Rng rng(mix_seed({seed, 0x7670ULL}));
    return {gaussian_tensor<T>({layers, count, dim}, 0.02, rng, true)};
  }

  std::size_t layers() const { return tokens.dim(0); }
  std::size_t count() const { return tokens.dim(1); }
  std::size_t dim() const { return tokens.dim(2); }
  std::size_t parameter_count() const { return tokens.size(); }

  BasicTensor<T> layer(std::size_t l) const {
    return reshape(slice(tokens, 0, l, 1), {count(), dim()});
  }
};

// ---------------------------------------------------------------------------
// Encoding

template <typename T>
BasicTensor<T> transformer_layer(const BasicTensor<T>& x,
                                 const TransformerLayerWeights<T>& w,
                                 std::size_t heads) {
  auto h = layer_norm(x, w.ln1_gain, w.ln1_bias);
  auto a = attention(linear(h, w.qkv_weight, w.qkv_bias), heads);
  auto r = add(x, linear(a, w.out_weight, w.out_bias));
  auto m = linear(layer_norm(r, w.ln2_gain, w.ln2_bias), w.fc1_weight, w.fc1_bias);
  return add(r, linear(gelu(m), w.fc2_weight, w.fc2_bias));
}

/// Rows of the frozen token table for `ids`; constant [L, D].
template <typename T>
BasicTensor<T> embed_tokens(const FrozenWeights<T>& w, std::span<const int> ids) {
  const std::size_t d = w.config.embed_dim;
  if (ids.empty()) throw std::invalid_argument("embed_tokens: empty id sequence");
  Buffer<T> out(ids.size() * d);
  const auto table = w.text.token_embedding.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= w.config.vocab_size)
      throw std::out_of_range("embed_tokens: id " + std::to_string(id) +
                              " outside vocabulary of " +
                              std::to_string(w.config.vocab_size));
    std::copy_n(table.begin() + static_cast<std::ptrdiff_t>(id * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return BasicTensor<T>({ids.size(), d}, std::move(out));
}

/// Text tower over a batch of equal-length raw token embeddings [B, L, D];
/// returns the L2-normalized projection of the last (EOS) position of each
/// sequence, shape [B, P].
template <typename T>
BasicTensor<T> text_encode_batch(const FrozenWeights<T>& w, const BasicTensor<T>& sequences) {
  const auto& cfg = w.config;
  if (sequences.rank() != 3 || sequences.dim(2) != cfg.embed_dim)
    throw std::invalid_argument("text_encode: expected [B, L, " +
                                std::to_string(cfg.embed_dim) + "], got " +
                                to_string(sequences.shape()));
  const std::size_t batch = sequences.dim(0);
  const std::size_t len = sequences.dim(1);
  if (len < 2 || len > cfg.max_text_len)
    throw std::invalid_argument("text_encode: sequence length " + std::to_string(len) +
                                " outside [2, " + std::to_string(cfg.max_text_len) + "]");
  auto x = add(sequences, slice(w.text.positional, 0, 0, len));
  for (const auto& layer : w.text.layers) x = transformer_layer(x, layer, cfg.num_heads);
  x = layer_norm(x, w.text.ln_final_gain, w.text.ln_final_bias);
  auto eos = reshape(slice(x, 1, len - 1, 1), {batch, cfg.embed_dim});
  return l2_normalize(matmul(eos, w.text.projection));
}

/// Single sequence [L, D] -> [P]. Soft and hard prompts share this path.
template <typename T>
BasicTensor<T> text_encode(const FrozenWeights<T>& w, const BasicTensor<T>& sequence) {
  const auto& cfg = w.config;
  if (sequence.rank() != 2 || sequence.dim(1) != cfg.embed_dim)
    throw std::invalid_argument("text_encode: expected [L, " +
                                std::to_string(cfg.embed_dim) + "], got " +
                                to_string(sequence.shape()));
  auto batched = reshape(sequence, {1, sequence.dim(0), cfg.embed_dim});
  return reshape(text_encode_batch(w, batched), {cfg.projection_dim});
}

/// Global and local image features, both L2-normalized.
/// Batched: global [B, P], locals [B, N_l, P]. Single: [P], [N_l, P].
template <typename T>
struct ImageFeatures {
  BasicTensor<T> global;
  BasicTensor<T> locals;
};

/// Image tower over a batch [B, H, W, C]. With `prompts`, layer l runs on
/// the token sequence with the layer's prompt tokens appended, and the
/// prompt positions are dropped from its output. Without prompts this is
/// the plain frozen forward pass. `layer_lengths`, when given, receives
/// the sequence length leaving every layer.
template <typename T>
ImageFeatures<T> encode_images(const FrozenWeights<T>& w, const BasicTensor<T>& images,
                               const VisualPromptStack<T>* prompts = nullptr,
                               std::vector<std::size_t>* layer_lengths = nullptr) {
  const auto& cfg = w.config;
  const Shape expected = cfg.image_shape();
  if (images.rank() != 4 || !std::equal(expected.begin(), expected.end(),
                                        images.shape().begin() + 1))
    throw std::invalid_argument("image_encode: expected [B, " +
                                std::to_string(cfg.image_size) + ", " +
                                std::to_string(cfg.image_size) + ", " +
                                std::to_string(cfg.image_channels) + "], got " +
                                to_string(images.shape()));
  if (prompts != nullptr &&
      (prompts->layers() != cfg.num_layers || prompts->dim() != cfg.embed_dim))
    throw std::invalid_argument("image_encode: prompt stack shape " +
                                to_string(prompts->tokens.shape()) +
                                " does not match encoder");
  const std::size_t batch = images.dim(0);
  const std::size_t n = cfg.num_patches();
  auto tokens = linear(patchify(images, cfg.patch_size), w.vision.patch_embedding,
                       w.vision.patch_bias);
  auto cls = repeat(w.vision.class_embedding, batch);
  auto x = add(concat<T>({cls, tokens}, 1), w.vision.positional);
  x = layer_norm(x, w.vision.ln_pre_gain, w.vision.ln_pre_bias);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    if (prompts != nullptr) {
      auto extended = concat<T>({x, repeat(prompts->layer(l), batch)}, 1);
      x = slice(transformer_layer(extended, w.vision.layers[l], cfg.num_heads), 1, 0, n + 1);
    } else {
      x = transformer_layer(x, w.vision.layers[l], cfg.num_heads);
    }
    if (layer_lengths) layer_lengths->push_back(x.dim(1));
  }
  x = layer_norm(x, w.vision.ln_post_gain, w.vision.ln_post_bias);
  auto projected = matmul(x, w.vision.projection);  // [B, N+1, P]
  ImageFeatures<T> f;
  f.global = l2_normalize(reshape(slice(projected, 1, 0, 1), {batch, cfg.projection_dim}));
  f.locals = l2_normalize(slice(projected, 1, 1, n));
  return f;
}

/// Single image [H, W, C] -> global [P], locals [N_l, P].
template <typename T>
ImageFeatures<T> image_encode(const FrozenWeights<T>& w, const BasicTensor<T>& image,
                              const VisualPromptStack<T>* prompts = nullptr) {
  const Shape expected = w.config.image_shape();
  if (image.shape() != expected)
    throw std::invalid_argument("image_encode: expected " + to_string(expected) +
                                ", got " + to_string(image.shape()));
  Shape batched = expected;
  batched.insert(batched.begin(), 1);
  auto f = encode_images(w, reshape(image, batched), prompts);
  return {reshape(f.global, {w.config.projection_dim}),
          reshape(f.locals, {w.config.num_patches(), w.config.projection_dim})};
}

}  // namespace promptalign
