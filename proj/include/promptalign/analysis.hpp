// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "promptalign/dataset.hpp"
#include "promptalign/trainer.hpp"

namespace promptalign {

// ---------------------------------------------------------------------------
// Saliency

/// Raw |d logit_pred / d pixel| for every image of a batch [B, H, W, C],
/// where pred is the model's own argmax. Same shape as the batch.
inline Tensor raw_saliency(const PromptModel& m, const Tensor& images,
                           std::vector<int>* predictions = nullptr) {
  const auto text = m.soft.features(m.weights).detach();
  auto input = Tensor(images.shape(), Buffer<float>(images.values().begin(), images.values().end()),
                      true);
  Buffer<float> grads;
  {
    Tape tape;
    auto logits = model_logits(m, input, text);
    const auto pred = argmax_rows(logits.detach());
    if (predictions) *predictions = pred;
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    Buffer<float> mask(b * c, 0.0f);
    for (std::size_t i = 0; i < b; ++i) mask[i * c + static_cast<std::size_t>(pred[i])] = 1.0f;
    // Rows are independent, so one backward pass yields every image's map.
    backward(sum(mul(logits, Tensor({b, c}, std::move(mask)))));
    grads.assign(input.grad().begin(), input.grad().end());
  }
  for (auto& g : grads) g = std::abs(g);
  return Tensor(images.shape(), std::move(grads));
}

/// Min-max scales each image of [B, ...] to [0, 1]; constant maps become 0.
inline Tensor normalize_per_image(const Tensor& maps) {
  const std::size_t b = maps.dim(0), per = maps.size() / b;
  Buffer<float> out(maps.values().begin(), maps.values().end());
  for (std::size_t i = 0; i < b; ++i) {
    auto first = out.begin() + static_cast<std::ptrdiff_t>(i * per);
    auto last = first + static_cast<std::ptrdiff_t>(per);
    const auto [lo, hi] = std::minmax_element(first, last);
    const float low = *lo, range = *hi - *lo;
    for (auto it = first; it != last; ++it) *it = range > 0 ? (*it - low) / range : 0.0f;
  }
  return Tensor(maps.shape(), std::move(out));
}

struct SaliencyStats {
  double inside = 0, outside = 0;  // mean saliency in / out of the region
};

/// Channel-averaged mean of one [H, W, C] map inside and outside `patches`.
inline SaliencyStats region_stats(std::span<const float> map, std::size_t size,
                                  std::size_t channels, std::size_t patch,
                                  const std::vector<std::size_t>& patches) {
  const std::size_t grid = size / patch;
  double in = 0, out = 0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) {
      const std::size_t p = (r / patch) * grid + c / patch;
      const bool inside = std::find(patches.begin(), patches.end(), p) != patches.end();
      for (std::size_t k = 0; k < channels; ++k) {
        const double v = map[(r * size + c) * channels + k];
        (inside ? in : out) += v;
        ++(inside ? n_in : n_out);
      }
    }
  return {n_in ? in / static_cast<double>(n_in) : 0.0,
          n_out ? out / static_cast<double>(n_out) : 0.0};
}

/// 8-bit binary greyscale image of a channel-averaged [H, W, C] map in [0, 1].
inline std::string to_pgm(std::span<const float> map, std::size_t size, std::size_t channels) {
  std::string out = "P5\n" + std::to_string(size) + " " + std::to_string(size) + "\n255\n";
  for (std::size_t i = 0; i < size * size; ++i) {
    double v = 0;
    for (std::size_t k = 0; k < channels; ++k) v += map[i * channels + k];
    v /= static_cast<double>(channels);
    const long level = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(level)));
  }
  return out;
}

struct SaliencyExport {
  std::size_t images = 0;
  std::size_t inside_wins = 0;  // images whose inside mean beats the outside mean
  double fraction() const {
    return images ? static_cast<double>(inside_wins) / static_cast<double>(images) : 0.0;
  }
};

/// Writes saliency/NNNNNN.csv (H rows of W values, channel-averaged) and
/// saliency/NNNNNN.pgm per image plus saliency.csv with per-image region
/// means when `signatures` is non-empty.
inline SaliencyExport export_saliency(const PromptModel& m, const DataSplit& split,
                                      const std::vector<std::vector<std::size_t>>& signatures,
                                      const std::filesystem::path& out_dir,
                                      std::size_t batch = 32) {
  const auto& cfg = m.config.encoder;
  const std::size_t size = cfg.image_size, ch = cfg.image_channels, per = size * size * ch;
  std::filesystem::create_directories(out_dir / "saliency");
  SaliencyExport result;
  std::string summary = "index,path,label,pred,inside_mean,outside_mean\n";
  char name[32];
  for (std::size_t s = 0; s < split.size(); s += batch) {
    const std::size_t len = std::min(batch, split.size() - s);
    std::vector<int> pred;
    const auto maps = normalize_per_image(raw_saliency(m, slice(split.images, 0, s, len), &pred));
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t idx = s + i;
      std::span<const float> map(maps.values().data() + i * per, per);
      std::string csv;
      char cell[32];
      for (std::size_t r = 0; r < size; ++r) {
        for (std::size_t c = 0; c < size; ++c) {
          double v = 0;
          for (std::size_t k = 0; k < ch; ++k) v += map[(r * size + c) * ch + k];
          std::snprintf(cell, sizeof cell, "%s%.6f", c ? "," : "", v / static_cast<double>(ch));
          csv += cell;
        }
        csv += "\n";
      }
      std::snprintf(name, sizeof name, "%06zu", idx);
      write_file_atomically(out_dir / "saliency" / (std::string(name) + ".csv"), csv);
      write_file_atomically(out_dir / "saliency" / (std::string(name) + ".pgm"),
                            to_pgm(map, size, ch));
      const int label = split.labels[idx];
      SaliencyStats st;
      if (!signatures.empty()) {
        st = region_stats(map, size, ch, cfg.patch_size,
                          signatures.at(static_cast<std::size_t>(label)));
        result.inside_wins += st.inside > st.outside ? 1 : 0;
      }
      char row[256];
      std::snprintf(row, sizeof row, "%zu,%s,%d,%d,%.6f,%.6f\n", idx, split.paths[idx].c_str(),
                    label, pred[i], st.inside, st.outside);
      summary += row;
      ++result.images;
    }
  }
  write_file_atomically(out_dir / "saliency.csv", summary);
  return result;
}

// ---------------------------------------------------------------------------
// Projection

/// Prompted global features of a split, [N, P].
inline Tensor prompted_global_features(const PromptModel& m, const DataSplit& split,
                                       std::size_t batch = 64) {
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < split.size(); s += batch) {
    const std::size_t len = std::min(batch, split.size() - s);
    parts.push_back(
        encode_images(m.weights, slice(split.images, 0, s, len), m.visual_prompts()).global);
  }
  return concat(parts, 0);
}

/// Top-2 principal component coordinates of rows [N, P], computed in
/// double. Each axis is signed so its largest-magnitude loading is positive.
inline std::vector<std::array<double, 2>> pca_2d(const Tensor& features) {
  const std::size_t n = features.dim(0), p = features.dim(1);
  Eigen::MatrixXd x(n, p);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) x(i, j) = features[i * p + j];
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / std::max<double>(1.0, double(n) - 1.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  Eigen::MatrixXd axes(p, 2);
  for (int a = 0; a < 2; ++a) {
    const int col = static_cast<int>(p) - 1 - a;  // eigenvalues ascend
    Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    if (col >= 0) v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    axes.col(a) = v;
  }
  const Eigen::MatrixXd coords = x * axes;
  std::vector<std::array<double, 2>> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = {coords(i, 0), coords(i, 1)};
  return out;
}

/// Mean silhouette score of 2-D points under Euclidean distance. Points in
/// singleton clusters score 0.
inline double silhouette_score(const std::vector<std::array<double, 2>>& points,
                               const std::vector<int>& labels) {
  const std::size_t n = points.size();
  if (n == 0) return 0.0;
  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::size_t> size(static_cast<std::size_t>(classes), 0);
  for (int y : labels) ++size[static_cast<std::size_t>(y)];
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> dist(static_cast<std::size_t>(classes), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      dist[static_cast<std::size_t>(labels[j])] +=
          std::hypot(points[i][0] - points[j][0], points[i][1] - points[j][1]);
    }
    const auto own = static_cast<std::size_t>(labels[i]);
    if (size[own] < 2) continue;
    const double a = dist[own] / static_cast<double>(size[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < size.size(); ++c)
      if (c != own && size[c] > 0) b = std::min(b, dist[c] / static_cast<double>(size[c]));
    if (!std::isfinite(b)) continue;
    const double denom = std::max(a, b);
    total += denom > 0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

struct ProjectionExport {
  std::vector<std::array<double, 2>> coords;
  double silhouette = 0;
};

/// Writes `index,label,x,y` rows for every sample of the split.
inline ProjectionExport export_projection(const PromptModel& m, const DataSplit& split,
                                          const std::filesystem::path& csv_path) {
  ProjectionExport out;
  out.coords = pca_2d(prompted_global_features(m, split));
  out.silhouette = silhouette_score(out.coords, split.labels);
  std::string csv = "index,label,x,y\n";
  char row[128];
  for (std::size_t i = 0; i < out.coords.size(); ++i) {
    std::snprintf(row, sizeof row, "%zu,%d,%.9g,%.9g\n", i, split.labels[i], out.coords[i][0],
                  out.coords[i][1]);
    csv += row;
  }
  write_file_atomically(csv_path, csv);
  return out;
}

}  // namespace promptalign
