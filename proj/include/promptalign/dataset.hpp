// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "promptalign/encoders.hpp"
#include "promptalign/io.hpp"
#include "promptalign/random.hpp"

namespace promptalign {

inline const std::vector<std::string>& default_class_names(std::size_t num_classes) {
  static const std::vector<std::string> seven = {"surprise", "fear",    "disgust", "happiness",
                                                 "sadness",  "anger",   "neutral"};
  static const std::vector<std::string> eight = {"surprise", "fear",  "disgust", "happiness",
                                                 "sadness",  "anger", "neutral", "contempt"};
  if (num_classes == 7) return seven;
  if (num_classes == 8) return eight;
  throw std::invalid_argument("dataset: num_classes must be 7 or 8, got " +
                              std::to_string(num_classes));
}

/// Where and how a class marks its images.
struct ClassSignature {
  std::vector<std::size_t> patches;  // indices into the row-major patch grid
  double freq_x = 0, freq_y = 0, phase = 0;
};

struct SyntheticDatasetSpec {
  std::size_t num_classes = 7;
  std::size_t samples_per_class = 200;  // train
  std::size_t val_per_class = 20;
  std::size_t test_per_class = 100;
  std::size_t image_size = 32;
  std::size_t image_channels = 1;
  std::size_t patch_size = 8;
  double sigma_bg = 0.5;
  double amplitude = 0.8;       // signature texture peak
  std::size_t distractors = 0;  // foreign-texture patches per image
  std::uint64_t seed = 1;

  std::size_t grid_size() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid_size() * grid_size(); }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("dataset spec: " + m); };
    default_class_names(num_classes);
    if (samples_per_class == 0 || val_per_class == 0 || test_per_class == 0)
      fail("every split needs at least one sample per class");
    if (patch_size == 0 || image_size % patch_size != 0)
      fail("image_size must be a multiple of patch_size");
    if (image_size != 4 * patch_size) fail("signatures are laid out on a 4x4 patch grid");
    if (image_channels == 0) fail("image_channels must be >= 1");
    if (sigma_bg < 0) fail("sigma_bg must be >= 0");
    if (!(amplitude > 0)) fail("amplitude must be > 0");
    if (distractors > 8) fail("at most 8 distractor patches");
  }
};

/// Signature of class `c` on the 4x4 grid: two of eight mirror-symmetric
/// zones, so a horizontal flip keeps every signature in place. Zone pairs
/// (c, c + 3 mod 8) are distinct for every class.
inline ClassSignature class_signature(std::size_t c) {
  static const std::array<std::array<std::size_t, 2>, 8> zones = {{
      {5, 6},    // eyes
      {1, 2},    // brow
      {9, 10},   // nose
      {13, 14},  // mouth
      {8, 11},   // cheeks
      {0, 3},    // upper corners
      {12, 15},  // jaw corners
      {4, 7},    // temples
  }};
  if (c >= zones.size()) throw std::out_of_range("no signature for class " + std::to_string(c));
  ClassSignature s;
  for (auto z : {c, (c + 3) % zones.size()})
    s.patches.insert(s.patches.end(), zones[z].begin(), zones[z].end());
  std::sort(s.patches.begin(), s.patches.end());
  s.freq_x = 1.0 + static_cast<double>(c % 3);
  s.freq_y = 1.0 + static_cast<double>((c / 3) % 3);
  s.phase = 0.7 * static_cast<double>(c);
  return s;
}

/// Texture value at pixel (row, col); symmetric about the vertical axis.
inline double signature_texture(const ClassSignature& s, std::size_t row, std::size_t col,
                                std::size_t image_size) {
  const double cx = 0.5 * (static_cast<double>(image_size) - 1.0);
  const double u = std::abs(static_cast<double>(col) - cx) / 8.0;
  const double v = static_cast<double>(row) / 8.0;
  return std::cos(2.0 * std::numbers::pi * (s.freq_x * u + s.freq_y * v) + s.phase);
}

enum class Split : std::uint64_t { train = 0, val = 1, test = 2 };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "' (train, val or test)");
}

inline std::size_t split_size(const SyntheticDatasetSpec& spec, Split s) {
  const std::size_t per = s == Split::train ? spec.samples_per_class
                          : s == Split::val ? spec.val_per_class
                                            : spec.test_per_class;
  return per * spec.num_classes;
}

/// Sample `index` of a split; classes cycle with the index.
inline int sample_label(const SyntheticDatasetSpec& spec, std::size_t index) {
  return static_cast<int>(index % spec.num_classes);
}

/// One image [H, W, C], a pure function of (spec, split, index).
inline Tensor generate_image(const SyntheticDatasetSpec& spec, Split split, std::size_t index) {
  const std::size_t h = spec.image_size, ch = spec.image_channels, ps = spec.patch_size;
  const std::size_t grid = spec.grid_size();
  const int label = sample_label(spec, index);
  Rng rng(mix_seed({spec.seed, static_cast<std::uint64_t>(split), index}));
  std::normal_distribution<double> noise(0.0, 1.0);

  std::vector<int> owner(grid * grid, -1);  // class whose texture fills each patch
  const auto sig = class_signature(static_cast<std::size_t>(label));
  for (auto p : sig.patches) owner[p] = label;
  for (std::size_t d = 0; d < spec.distractors; ++d) {
    std::vector<std::size_t> free;
    for (std::size_t p = 0; p < owner.size(); ++p)
      if (owner[p] < 0) free.push_back(p);
    const auto p = free[rng() % free.size()];
    auto other = static_cast<int>(rng() % (spec.num_classes - 1));
    if (other >= label) ++other;
    owner[p] = other;
  }

  Buffer<float> px(h * h * ch);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < h; ++c) {
      const int o = owner[(r / ps) * grid + c / ps];
      const double base =
          o < 0 ? 0.0
                : spec.amplitude *
                      signature_texture(class_signature(static_cast<std::size_t>(o)), r, c, h);
      for (std::size_t k = 0; k < ch; ++k) {
        const double n = spec.sigma_bg > 0 ? spec.sigma_bg * noise(rng) : 0.0;
        px[(r * h + c) * ch + k] = static_cast<float>(base + n);
      }
    }
  return Tensor({h, h, ch}, std::move(px));
}

inline std::string spec_to_text(const SyntheticDatasetSpec& s) {
  std::ostringstream os;
  os.precision(17);
  os << "num_classes = " << s.num_classes << "\n"
     << "samples_per_class = " << s.samples_per_class << "\n"
     << "val_per_class = " << s.val_per_class << "\n"
     << "test_per_class = " << s.test_per_class << "\n"
     << "image_size = " << s.image_size << "\n"
     << "image_channels = " << s.image_channels << "\n"
     << "patch_size = " << s.patch_size << "\n"
     << "sigma_bg = " << s.sigma_bg << "\n"
     << "amplitude = " << s.amplitude << "\n"
     << "distractors = " << s.distractors << "\n"
     << "seed = " << s.seed << "\n";
  return os.str();
}

/// Writes classes.txt, signatures.txt, generator.txt, {train,val,test}.tsv and
/// images/<split>/NNNNNN.mpaf under `dir`. An existing directory is refused
/// unless `force`, in which case it is replaced.
inline void generate_dataset(const SyntheticDatasetSpec& spec, const std::filesystem::path& dir,
                             bool force = false) {
  namespace fs = std::filesystem;
  spec.validate();
  if (fs::exists(dir)) {
    if (!force)
      throw std::runtime_error("dataset directory " + dir.string() +
                               " exists; pass --force to overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  const auto& names = default_class_names(spec.num_classes);
  std::string classes, signatures;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    classes += names[c] + "\n";
    signatures += std::to_string(c) + "\t";
    const auto sig = class_signature(c);
    for (std::size_t i = 0; i < sig.patches.size(); ++i)
      signatures += (i ? "," : "") + std::to_string(sig.patches[i]);
    signatures += "\n";
  }
  write_file_atomically(dir / "classes.txt", classes);
  write_file_atomically(dir / "signatures.txt", signatures);
  write_file_atomically(dir / "generator.txt", spec_to_text(spec));
  for (Split split : {Split::train, Split::val, Split::test}) {
    const auto name = to_string(split);
    std::string manifest;
    char file[32];
    for (std::size_t i = 0; i < split_size(spec, split); ++i) {
      std::snprintf(file, sizeof file, "%06zu.mpaf", i);
      const std::string rel = "images/" + name + "/" + file;
      TensorMap m;
      m.set("image", generate_image(spec, split, i));
      save_tensors(dir / rel, m);
      manifest += rel + "\t" + std::to_string(sample_label(spec, i)) + "\n";
    }
    write_file_atomically(dir / (name + ".tsv"), manifest);
  }
}

/// A split held in memory.
struct DataSplit {
  std::vector<std::string> paths;
  std::vector<int> labels;
  Tensor images;  // [N, H, W, C]

  std::size_t size() const { return labels.size(); }
};

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

inline std::vector<std::string> read_class_names(const std::filesystem::path& dir) {
  auto names = read_lines(dir / "classes.txt");
  if (names.empty()) throw std::runtime_error((dir / "classes.txt").string() + ": no classes");
  return names;
}

/// Patch indices of every class's signature region, by class index.
inline std::vector<std::vector<std::size_t>> read_signatures(const std::filesystem::path& dir) {
  const auto path = dir / "signatures.txt";
  std::vector<std::vector<std::size_t>> out;
  std::size_t n = 0;
  for (const auto& line : read_lines(path)) {
    ++n;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || std::stoul(line.substr(0, tab)) != out.size())
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": malformed line");
    std::vector<std::size_t> patches;
    std::istringstream items(line.substr(tab + 1));
    std::string item;
    while (std::getline(items, item, ',')) patches.push_back(std::stoul(item));
    out.push_back(std::move(patches));
  }
  return out;
}

/// Loads a split; every image must have shape `image_shape`.
inline DataSplit load_split(const std::filesystem::path& dir, Split split,
                            const Shape& image_shape) {
  const auto manifest = dir / (to_string(split) + ".tsv");
  const std::size_t num_classes = read_class_names(dir).size();
  DataSplit out;
  std::size_t n = 0;
  for (const auto& line : read_lines(manifest)) {
    ++n;
    const auto tab = line.find('\t');
    const auto where = manifest.string() + ":" + std::to_string(n) + ": ";
    if (tab == std::string::npos) throw std::runtime_error(where + "expected path<TAB>class");
    const auto label = std::stoi(line.substr(tab + 1));
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes)
      throw std::runtime_error(where + "class index " + std::to_string(label) +
                               " out of range");
    out.paths.push_back(line.substr(0, tab));
    out.labels.push_back(label);
  }
  if (out.labels.empty()) throw std::runtime_error(manifest.string() + ": empty split");
  const std::size_t per = numel(image_shape);
  Buffer<float> values(out.size() * per);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto m = load_tensors(dir / out.paths[i]);
    const auto& img = m.at("image");
    if (img.shape() != image_shape)
      throw std::runtime_error(out.paths[i] + ": image shape " + to_string(img.shape()) +
                               " but the encoder expects " + to_string(image_shape));
    std::copy(img.values().begin(), img.values().end(),
              values.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  Shape shape = image_shape;
  shape.insert(shape.begin(), out.size());
  out.images = Tensor(std::move(shape), std::move(values));
  return out;
}

/// Batch of rows `indices` from images [N, H, W, C]; rows with a set flag
/// are mirrored left-right.
template <typename T>
BasicTensor<T> gather_images(const BasicTensor<T>& images, std::span<const std::size_t> indices,
                             const std::vector<bool>& flip = {}) {
  const std::size_t h = images.dim(1), w = images.dim(2), ch = images.dim(3);
  const std::size_t per = h * w * ch;
  Buffer<T> out(indices.size() * per);
  const auto src = images.values();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto* in = src.data() + indices[b] * per;
    auto* dst = out.data() + b * per;
    const bool mirror = !flip.empty() && flip[b];
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t sc = mirror ? w - 1 - c : c;
        for (std::size_t k = 0; k < ch; ++k)
          dst[(r * w + c) * ch + k] = in[(r * w + sc) * ch + k];
      }
  }
  Shape shape = images.shape();
  shape[0] = indices.size();
  return BasicTensor<T>(std::move(shape), std::move(out));
}

}  // namespace promptalign
