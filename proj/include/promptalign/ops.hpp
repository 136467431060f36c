// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "promptalign/tensor.hpp"

// Differentiable operations. Every op validates shapes, computes its value
// eagerly and, when a tape is active and an input is tracked, records a
// backward rule that accumulates into the inputs' gradient buffers.

namespace promptalign {

/// Denominator guard for every norm.
inline constexpr double kNormEpsilon = 1e-8;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap =
    Eigen::Map<const RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a,
                                     const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch " + to_string(a) +
                              " vs " + to_string(b));
}

template <typename T>
void require_defined(const std::string& op, const BasicTensor<T>& t) {
  if (!t.defined()) throw std::invalid_argument(op + ": undefined tensor");
}

/// Active tape when any input is tracked by it, otherwise nullptr.
template <typename T, typename... Rest>
Tape* recording_tape(const BasicTensor<T>& first, const Rest&... rest) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return nullptr;
  const std::uint64_t id = tape->id();
  const bool any = first.node()->tracked_by(id) ||
                   (... || rest.node()->tracked_by(id));
  return any ? tape : nullptr;
}

template <typename T>
Tape* recording_tape_all(const std::vector<BasicTensor<T>>& inputs) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return nullptr;
  for (const auto& t : inputs) {
    if (t.node()->tracked_by(tape->id())) return tape;
  }
  return nullptr;
}

/// Gradient buffer of `node` if it participates in the sweep of `tape_id`.
template <typename T>
T* grad_of(TensorNode<T>& node, std::uint64_t tape_id) {
  return node.tracked_by(tape_id) ? node.grad_buffer() : nullptr;
}

template <typename T>
BasicTensor<T> make_result(Shape shape, Buffer<T> data, Tape* tape) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (tape != nullptr) node->tape_id = tape->id();
  return BasicTensor<T>::from_node(std::move(node));
}

/// True when `suffix` equals the trailing dimensions of `full`.
inline bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

inline std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// a + b, where b's shape equals the trailing dimensions of a.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_defined("add", a);
  detail::require_defined("add", b);
  if (!detail::is_suffix(a.shape(), b.shape()))
    detail::shape_error("add", a.shape(), b.shape());
  const auto x = a.values();
  const auto y = b.values();
  const std::size_t n = y.size();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i % n];
  Tape* tape = detail::recording_tape(a, b);
  auto result = detail::make_result(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), on = result.node(),
                  id = tape->id()] {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      const std::size_t total = on->grad.size();
      if (T* ga = detail::grad_of(*an, id))
        for (std::size_t i = 0; i < total; ++i) ga[i] += g[i];
      if (T* gb = detail::grad_of(*bn, id)) {
        const std::size_t m = bn->data.size();
        for (std::size_t i = 0; i < total; ++i) gb[i % m] += g[i];
      }
    });
  }
  return result;
}

/// a - b with the same broadcasting rule as add().
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_defined("sub", a);
  detail::require_defined("sub", b);
  if (!detail::is_suffix(a.shape(), b.shape()))
    detail::shape_error("sub", a.shape(), b.shape());
  const auto x = a.values();
  const auto y = b.values();
  const std::size_t n = y.size();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i % n];
  Tape* tape = detail::recording_tape(a, b);
  auto result = detail::make_result(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), on = result.node(),
                  id = tape->id()] {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      const std::size_t total = on->grad.size();
      if (T* ga = detail::grad_of(*an, id))
        for (std::size_t i = 0; i < total; ++i) ga[i] += g[i];
      if (T* gb = detail::grad_of(*bn, id)) {
        const std::size_t m = bn->data.size();
        for (std::size_t i = 0; i < total; ++i) gb[i % m] -= g[i];
      }
    });
  }
  return result;
}

/// Elementwise product, b broadcast over a's leading dimensions.
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_defined("mul", a);
  detail::require_defined("mul", b);
  if (!detail::is_suffix(a.shape(), b.shape()))
    detail::shape_error("mul", a.shape(), b.shape());
  const auto x = a.values();
  const auto y = b.values();
  const std::size_t n = y.size();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i % n];
  Tape* tape = detail::recording_tape(a, b);
  auto result = detail::make_result(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), on = result.node(),
                  id = tape->id()] {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      const std::size_t total = on->grad.size();
      const std::size_t m = bn->data.size();
      if (T* ga = detail::grad_of(*an, id))
        for (std::size_t i = 0; i < total; ++i) ga[i] += g[i] * bn->data[i % m];
      if (T* gb = detail::grad_of(*bn, id))
        for (std::size_t i = 0; i < total; ++i) gb[i % m] += g[i] * an->data[i];
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  detail::require_defined("scale", a);
  const auto x = a.values();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  Tape* tape = detail::recording_tape(a);
  auto result = detail::make_result(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), on = result.node(), factor, id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* ga = detail::grad_of(*an, id))
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          ga[i] += on->grad[i] * factor;
    });
  }
  return result;
}

/// |x|; subgradient 0 at 0.
template <typename T>
BasicTensor<T> abs(const BasicTensor<T>& a) {
  detail::require_defined("abs", a);
  const auto x = a.values();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::abs(x[i]);
  Tape* tape = detail::recording_tape(a);
  auto result = detail::make_result(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), on = result.node(), id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* ga = detail::grad_of(*an, id)) {
        for (std::size_t i = 0; i < on->grad.size(); ++i) {
          const T v = an->data[i];
          const T s = v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
          ga[i] += on->grad[i] * s;
        }
      }
    });
  }
  return result;
}

/// Gaussian error linear unit, tanh form:
/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
  detail::require_defined("gelu", a);
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  static constexpr T kAlpha = T(0.79788456080286535588);  // sqrt(2/pi)
  static constexpr T kCubic = T(0.044715);
  const auto n = static_cast<Eigen::Index>(a.size());
  Eigen::Map<const Array> x(a.values().data(), n);
  Buffer<T> th(a.size());
  Eigen::Map<Array> t(th.data(), n);
  t = (kAlpha * (x + kCubic * x.cube())).tanh();
  Buffer<T> out(a.size());
  Eigen::Map<Array>(out.data(), n) = T(0.5) * x * (T(1) + t);
  Tape* tape = detail::recording_tape(a);
  auto result = detail::make_result(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), on = result.node(), th = std::move(th), n,
                  id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* ga = detail::grad_of(*an, id)) {
        Eigen::Map<const Array> x(an->data.data(), n);
        Eigen::Map<const Array> t(th.data(), n);
        Eigen::Map<const Array> g(on->grad.data(), n);
        Eigen::Map<Array>(ga, n) +=
            g * (T(0.5) * (T(1) + t) +
                 T(0.5) * x * (T(1) - t.square()) * kAlpha *
                     (T(1) + T(3) * kCubic * x.square()));
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Row-wise product: a [..., K] x b [K, N] -> [..., N].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_defined("matmul", a);
  detail::require_defined("matmul", b);
  if (a.rank() < 1 || b.rank() != 2 || a.dim(-1) != b.dim(0))
    detail::shape_error("matmul", a.shape(), b.shape());
  const std::size_t k = b.dim(0);
  const std::size_t n = b.dim(1);
  const std::size_t rows = a.size() / k;
  Buffer<T> out(rows * n);
  detail::MatMap<T>(out.data(), rows, n).noalias() =
      detail::ConstMatMap<T>(a.values().data(), rows, k) *
      detail::ConstMatMap<T>(b.values().data(), k, n);
  Shape shape = a.shape();
  shape.back() = n;
  Tape* tape = detail::recording_tape(a, b);
  auto result = detail::make_result(std::move(shape), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), on = result.node(), rows, k, n,
                  id = tape->id()] {
      if (on->grad.empty()) return;
      detail::ConstMatMap<T> g(on->grad.data(), rows, n);
      if (T* ga = detail::grad_of(*an, id))
        detail::MatMap<T>(ga, rows, k).noalias() +=
            g * detail::ConstMatMap<T>(bn->data.data(), k, n).transpose();
      if (T* gb = detail::grad_of(*bn, id))
        detail::MatMap<T>(gb, k, n).noalias() +=
            detail::ConstMatMap<T>(an->data.data(), rows, k).transpose() * g;
    });
  }
  return result;
}

/// x [..., K] x w [K, N] + bias [N].
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>& bias) {
  detail::require_defined("linear", x);
  detail::require_defined("linear", w);
  detail::require_defined("linear", bias);
  if (w.rank() != 2 || x.dim(-1) != w.dim(0))
    detail::shape_error("linear", x.shape(), w.shape());
  if (bias.rank() != 1 || bias.dim(0) != w.dim(1))
    detail::shape_error("linear(bias)", w.shape(), bias.shape());
  const std::size_t k = w.dim(0);
  const std::size_t n = w.dim(1);
  const std::size_t rows = x.size() / k;
  Buffer<T> out(rows * n);
  detail::MatMap<T> o(out.data(), rows, n);
  o.noalias() = detail::ConstMatMap<T>(x.values().data(), rows, k) *
                detail::ConstMatMap<T>(w.values().data(), k, n);
  o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
      bias.values().data(), n);
  Shape shape = x.shape();
  shape.back() = n;
  Tape* tape = detail::recording_tape(x, w, bias);
  auto result = detail::make_result(std::move(shape), std::move(out), tape);
  if (tape) {
    tape->record([xn = x.node(), wn = w.node(), bn = bias.node(),
                  on = result.node(), rows, k, n, id = tape->id()] {
      if (on->grad.empty()) return;
      detail::ConstMatMap<T> g(on->grad.data(), rows, n);
      if (T* gx = detail::grad_of(*xn, id))
        detail::MatMap<T>(gx, rows, k).noalias() +=
            g * detail::ConstMatMap<T>(wn->data.data(), k, n).transpose();
      if (T* gw = detail::grad_of(*wn, id))
        detail::MatMap<T>(gw, k, n).noalias() +=
            detail::ConstMatMap<T>(xn->data.data(), rows, k).transpose() * g;
      if (T* gb = detail::grad_of(*bn, id))
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb, n) +=
            g.colwise().sum();
    });
  }
  return result;
}

/// Swaps the last two axes: [..., M, N] -> [..., N, M].
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::require_defined("transpose", a);
  if (a.rank() < 2)
    throw std::invalid_argument("transpose: rank < 2 for shape " +
                                to_string(a.shape()));
  const std::size_t m = a.dim(-2);
  const std::size_t n = a.dim(-1);
  const std::size_t batch = a.size() / (m * n);
  Buffer<T> out(a.size());
  const auto x = a.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[b * m * n + j * m + i] = x[b * m * n + i * n + j];
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Tape* tape = detail::recording_tape(a);
  auto result = detail::make_result(std::move(shape), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), on = result.node(), batch, m, n,
                  id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* ga = detail::grad_of(*an, id))
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              ga[b * m * n + i * n + j] += on->grad[b * m * n + j * m + i];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  detail::require_defined("reshape", a);
  if (numel(shape) != a.size())
    detail::shape_error("reshape", a.shape(), shape);
  Buffer<T> out(a.values().begin(), a.values().end());
  Tape* tape = detail::recording_tape(a);
  auto result = detail::make_result(std::move(shape), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), on = result.node(), id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* ga = detail::grad_of(*an, id))
        for (std::size_t i = 0; i < on->grad.size(); ++i) ga[i] += on->grad[i];
    });
  }
  return result;
}

/// Concatenation along `axis`; all other dimensions must agree.
template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  for (const auto& p : parts) detail::require_defined("concat", p);
  const std::size_t ax = parts.front().normalize_axis(axis);
  const Shape& ref = parts.front().shape();
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) detail::shape_error("concat", ref, p.shape());
    for (std::size_t d = 0; d < ref.size(); ++d)
      if (d != ax && p.shape()[d] != ref[d])
        detail::shape_error("concat", ref, p.shape());
    total_axis += p.shape()[ax];
  }
  const std::size_t outer = detail::prod(ref, 0, ax);
  const std::size_t inner = detail::prod(ref, ax + 1, ref.size());
  Shape shape = ref;
  shape[ax] = total_axis;
  Buffer<T> out(numel(shape));
  std::vector<std::size_t> widths;
  widths.reserve(parts.size());
  for (const auto& p : parts) widths.push_back(p.shape()[ax] * inner);
  const std::size_t row = total_axis * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t offset = o * row;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const T* src = parts[i].values().data() + o * widths[i];
      std::copy(src, src + widths[i], out.begin() + offset);
      offset += widths[i];
    }
  }
  Tape* tape = detail::recording_tape_all(parts);
  auto result = detail::make_result(std::move(shape), std::move(out), tape);
  if (tape) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    tape->record([nodes = std::move(nodes), widths, outer, row,
                  on = result.node(), id = tape->id()] {
      if (on->grad.empty()) return;
      for (std::size_t o = 0; o < outer; ++o) {
        std::size_t offset = o * row;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          if (T* g = detail::grad_of(*nodes[i], id)) {
            T* dst = g + o * widths[i];
            for (std::size_t j = 0; j < widths[i]; ++j)
              dst[j] += on->grad[offset + j];
          }
          offset += widths[i];
        }
      }
    });
  }
  return result;
}

/// Contiguous range [start, start + length) along `axis`.
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& a, int axis, std::size_t start,
                     std::size_t length) {
  detail::require_defined("slice", a);
  const std::size_t ax = a.normalize_axis(axis);
  if (length == 0 || start + length > a.shape()[ax]) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) +
                                ", " + std::to_string(start + length) +
                                ") out of bounds for shape " +
                                to_string(a.shape()));
  }
  const std::size_t outer = detail::prod(a.shape(), 0, ax);
  const std::size_t inner = detail::prod(a.shape(), ax + 1, a.rank());
  const std::size_t src_row = a.shape()[ax] * inner;
  const std::size_t dst_row = length * inner;
  const std::size_t first = start * inner;
  Buffer<T> out(outer * dst_row);
  const auto x = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(x.begin() + o * src_row + first,
              x.begin() + o * src_row + first + dst_row,
              out.begin() + o * dst_row);
  Shape shape = a.shape();
  shape[ax] = length;
  Tape* tape = detail::recording_tape(a);
  auto result = detail::make_result(std::move(shape), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), on = result.node(), outer, src_row, dst_row,
                  first, id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* ga = detail::grad_of(*an, id))
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < dst_row; ++j)
            ga[o * src_row + first + j] += on->grad[o * dst_row + j];
    });
  }
  return result;
}

/// Stacks `count` copies of `a` along a new leading axis.
template <typename T>
BasicTensor<T> repeat(const BasicTensor<T>& a, std::size_t count) {
  detail::require_defined("repeat", a);
  if (count == 0) throw std::invalid_argument("repeat: count must be >= 1");
  const auto x = a.values();
  Buffer<T> out;
  out.reserve(x.size() * count);
  for (std::size_t c = 0; c < count; ++c) out.insert(out.end(), x.begin(), x.end());
  Shape shape = a.shape();
  shape.insert(shape.begin(), count);
  Tape* tape = detail::recording_tape(a);
  auto result = detail::make_result(std::move(shape), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), on = result.node(), id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* ga = detail::grad_of(*an, id)) {
        const std::size_t m = an->data.size();
        for (std::size_t i = 0; i < on->grad.size(); ++i) ga[i % m] += on->grad[i];
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  detail::require_defined("sum", a);
  double acc = 0.0;
  for (T v : a.values()) acc += v;
  Tape* tape = detail::recording_tape(a);
  auto result = detail::make_result<T>(Shape{}, {static_cast<T>(acc)}, tape);
  if (tape) {
    tape->record([an = a.node(), on = result.node(), id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* ga = detail::grad_of(*an, id))
        for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += on->grad[0];
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Sum over one axis; the axis is removed from the shape.
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a, int axis) {
  detail::require_defined("sum", a);
  const std::size_t ax = a.normalize_axis(axis);
  const std::size_t outer = detail::prod(a.shape(), 0, ax);
  const std::size_t len = a.shape()[ax];
  const std::size_t inner = detail::prod(a.shape(), ax + 1, a.rank());
  Buffer<T> out(outer * inner, T(0));
  const auto x = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += x[(o * len + k) * inner + i];
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  Tape* tape = detail::recording_tape(a);
  auto result = detail::make_result(std::move(shape), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), on = result.node(), outer, len, inner,
                  id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* ga = detail::grad_of(*an, id))
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t k = 0; k < len; ++k)
            for (std::size_t i = 0; i < inner; ++i)
              ga[(o * len + k) * inner + i] += on->grad[o * inner + i];
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a, int axis) {
  const std::size_t len = a.dim(axis);
  return scale(sum(a, axis), T(1) / static_cast<T>(len));
}

// ---------------------------------------------------------------------------
// Normalization and activations over the last axis

/// Layer normalization over the last axis with affine gain and bias.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps = T(1e-5)) {
  detail::require_defined("layer_norm", x);
  const std::size_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    detail::shape_error("layer_norm", x.shape(), gain.shape());
  const std::size_t rows = x.size() / d;
  const auto in = x.values();
  const auto g = gain.values();
  const auto b = bias.values();
  Buffer<T> out(x.size());
  Buffer<T> normalized(x.size());
  Buffer<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
    inv_std[r] = static_cast<T>(is);
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = static_cast<T>((row[j] - mu) * is);
      normalized[r * d + j] = xh;
      out[r * d + j] = xh * g[j] + b[j];
    }
  }
  Tape* tape = detail::recording_tape(x, gain, bias);
  auto result = detail::make_result(x.shape(), std::move(out), tape);
  if (tape) {
    tape->record([xn = x.node(), gn = gain.node(), bn = bias.node(),
                  on = result.node(), normalized = std::move(normalized),
                  inv_std = std::move(inv_std), rows, d, id = tape->id()] {
      if (on->grad.empty()) return;
      const T* gy = on->grad.data();
      if (T* gg = detail::grad_of(*gn, id))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j)
            gg[j] += gy[r * d + j] * normalized[r * d + j];
      if (T* gb = detail::grad_of(*bn, id))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += gy[r * d + j];
      if (T* gx = detail::grad_of(*xn, id)) {
        const T* gain_v = gn->data.data();
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_g = 0.0;
          double mean_gx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = static_cast<double>(gy[r * d + j]) * gain_v[j];
            mean_g += gh;
            mean_gx += gh * normalized[r * d + j];
          }
          mean_g /= static_cast<double>(d);
          mean_gx /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = static_cast<double>(gy[r * d + j]) * gain_v[j];
            gx[r * d + j] += static_cast<T>(
                inv_std[r] * (gh - mean_g - normalized[r * d + j] * mean_gx));
          }
        }
      }
    });
  }
  return result;
}

/// Softmax over the last axis.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  detail::require_defined("softmax", x);
  const std::size_t d = x.dim(-1);
  const std::size_t rows = x.size() / d;
  const auto in = x.values();
  Buffer<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * d;
    const T mx = *std::max_element(row, row + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < d; ++j)
      out[r * d + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
  }
  Tape* tape = detail::recording_tape(x);
  auto result = detail::make_result(x.shape(), std::move(out), tape);
  if (tape) {
    tape->record([xn = x.node(), on = result.node(), rows, d, id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* gx = detail::grad_of(*xn, id)) {
        const T* y = on->data.data();
        const T* g = on->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
          for (std::size_t j = 0; j < d; ++j)
            gx[r * d + j] += static_cast<T>(y[r * d + j] * (g[r * d + j] - dot));
        }
      }
    });
  }
  return result;
}

/// x / (||x|| + eps) over the last axis.
template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x) {
  detail::require_defined("l2_normalize", x);
  const std::size_t d = x.dim(-1);
  const std::size_t rows = x.size() / d;
  const auto in = x.values();
  Buffer<T> out(x.size());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(in[r * d + j]) * in[r * d + j];
    norms[r] = std::sqrt(ss);
    const double denom = norms[r] + kNormEpsilon;
    for (std::size_t j = 0; j < d; ++j)
      out[r * d + j] = static_cast<T>(in[r * d + j] / denom);
  }
  Tape* tape = detail::recording_tape(x);
  auto result = detail::make_result(x.shape(), std::move(out), tape);
  if (tape) {
    tape->record([xn = x.node(), on = result.node(), norms = std::move(norms),
                  rows, d, id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* gx = detail::grad_of(*xn, id)) {
        const T* in = xn->data.data();
        const T* g = on->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
          const double n = norms[r];
          const double denom = n + kNormEpsilon;
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(g[r * d + j]) * in[r * d + j];
          const double coeff = n > 0.0 ? dot / (n * denom * denom) : 0.0;
          for (std::size_t j = 0; j < d; ++j)
            gx[r * d + j] += static_cast<T>(g[r * d + j] / denom - in[r * d + j] * coeff);
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Similarities and losses

/// Cosine similarity of two vectors (epsilon-guarded norms).
template <typename T>
BasicTensor<T> cosine_similarity(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_defined("cosine_similarity", a);
  detail::require_defined("cosine_similarity", b);
  if (a.rank() != 1 || a.shape() != b.shape())
    detail::shape_error("cosine_similarity", a.shape(), b.shape());
  return sum(mul(l2_normalize(a), l2_normalize(b)));
}

/// Row-wise cosine similarity: a, b [B, D] -> [B].
template <typename T>
BasicTensor<T> row_cosine_similarity(const BasicTensor<T>& a,
                                     const BasicTensor<T>& b) {
  detail::require_defined("row_cosine_similarity", a);
  detail::require_defined("row_cosine_similarity", b);
  if (a.rank() != 2 || a.shape() != b.shape())
    detail::shape_error("row_cosine_similarity", a.shape(), b.shape());
  return sum(mul(l2_normalize(a), l2_normalize(b)), -1);
}

/// Mean negative log-likelihood of `targets` under softmax(logits).
/// logits: [C] with one target, or [B, C] with B targets.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits,
                             std::span<const int> targets) {
  detail::require_defined("cross_entropy", logits);
  if (logits.rank() != 1 && logits.rank() != 2)
    throw std::invalid_argument("cross_entropy: logits must be [C] or [B, C], got " +
                                to_string(logits.shape()));
  const std::size_t c = logits.dim(-1);
  const std::size_t batch = logits.size() / c;
  if (targets.size() != batch)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(batch) + " rows");
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= c)
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                              " out of range for " + std::to_string(c) + " classes");
  const auto x = logits.values();
  Buffer<T> probs(x.size());
  double total = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    const T* row = x.data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[targets[r]];
    for (std::size_t j = 0; j < c; ++j)
      probs[r * c + j] = static_cast<T>(std::exp(row[j] - lse));
  }
  Tape* tape = detail::recording_tape(logits);
  auto result = detail::make_result<T>(
      Shape{}, {static_cast<T>(total / static_cast<double>(batch))}, tape);
  if (tape) {
    std::vector<int> tgt(targets.begin(), targets.end());
    tape->record([ln = logits.node(), on = result.node(), probs = std::move(probs),
                  tgt = std::move(tgt), batch, c, id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* gl = detail::grad_of(*ln, id)) {
        const T g = on->grad[0] / static_cast<T>(batch);
        for (std::size_t r = 0; r < batch; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const T onehot = static_cast<std::size_t>(tgt[r]) == j ? T(1) : T(0);
            gl[r * c + j] += g * (probs[r * c + j] - onehot);
          }
      }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, int target) {
  if (logits.rank() != 1)
    throw std::invalid_argument("cross_entropy: expected [C] logits, got " +
                                to_string(logits.shape()));
  const int t[1] = {target};
  return cross_entropy(logits, std::span<const int>(t, 1));
}

/// Indices of the k largest entries of `row`, larger value first and lower
/// index first among exact ties.
template <typename T>
std::vector<std::size_t> topk_indices(std::span<const T> row, std::size_t k) {
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, row.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k),
                    idx.end(), [&](std::size_t a, std::size_t b) {
                      return row[a] > row[b] || (row[a] == row[b] && a < b);
                    });
  idx.resize(k);
  return idx;
}

/// Mean of the k largest entries along the last axis; the gradient flows
/// only to the selected entries.
template <typename T>
BasicTensor<T> topk_mean(const BasicTensor<T>& x, std::size_t k) {
  detail::require_defined("topk_mean", x);
  const std::size_t n = x.dim(-1);
  if (k == 0 || k > n)
    throw std::invalid_argument("topk_mean: k = " + std::to_string(k) +
                                " outside [1, " + std::to_string(n) + "]");
  const std::size_t rows = x.size() / n;
  const auto in = x.values();
  Buffer<T> out(rows);
  std::vector<std::size_t> selected(rows * k);
  for (std::size_t r = 0; r < rows; ++r) {
    auto idx = topk_indices(in.subspan(r * n, n), k);
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      selected[r * k + j] = idx[j];
      acc += in[r * n + idx[j]];
    }
    out[r] = static_cast<T>(acc / static_cast<double>(k));
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  Tape* tape = detail::recording_tape(x);
  auto result = detail::make_result(std::move(shape), std::move(out), tape);
  if (tape) {
    tape->record([xn = x.node(), on = result.node(), selected = std::move(selected),
                  rows, n, k, id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* gx = detail::grad_of(*xn, id)) {
        const T inv_k = T(1) / static_cast<T>(k);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < k; ++j)
            gx[r * n + selected[r * k + j]] += on->grad[r] * inv_k;
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Transformer building blocks

/// Multi-head scaled dot-product self-attention over packed projections.
/// qkv: [B, L, 3D] laid out as [queries | keys | values]; returns [B, L, D].
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& qkv, std::size_t heads) {
  detail::require_defined("attention", qkv);
  if (qkv.rank() != 3 || qkv.dim(-1) % 3 != 0)
    throw std::invalid_argument("attention: expected [B, L, 3D], got " +
                                to_string(qkv.shape()));
  const std::size_t batch = qkv.dim(0);
  const std::size_t len = qkv.dim(1);
  const std::size_t width = qkv.dim(2) / 3;
  if (heads == 0 || width % heads != 0)
    throw std::invalid_argument("attention: width " + std::to_string(width) +
                                " not divisible by " + std::to_string(heads) +
                                " heads");
  const std::size_t hd = width / heads;
  const T factor = T(1) / std::sqrt(static_cast<T>(hd));
  const std::size_t in_stride = 3 * width;
  Buffer<T> out(batch * len * width);
  Buffer<T> probs(batch * heads * len * len);
  const T* src = qkv.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const T* base = src + b * len * in_stride + h * hd;
      detail::ConstStridedMap<T> q(base, len, hd, Eigen::OuterStride<>(in_stride));
      detail::ConstStridedMap<T> k(base + width, len, hd, Eigen::OuterStride<>(in_stride));
      detail::ConstStridedMap<T> v(base + 2 * width, len, hd, Eigen::OuterStride<>(in_stride));
      detail::MatMap<T> p(probs.data() + (b * heads + h) * len * len, len, len);
      p.noalias() = (q * k.transpose()) * factor;
      for (std::size_t i = 0; i < len; ++i) {
        auto row = p.row(static_cast<Eigen::Index>(i));
        row.array() -= row.maxCoeff();
        row = row.array().exp().matrix();
        row /= row.sum();
      }
      detail::StridedMap<T> o(out.data() + b * len * width + h * hd, len, hd,
                              Eigen::OuterStride<>(width));
      o.noalias() = p * v;
    }
  }
  Shape shape{batch, len, width};
  Tape* tape = detail::recording_tape(qkv);
  auto result = detail::make_result(std::move(shape), std::move(out), tape);
  if (tape) {
    tape->record([qn = qkv.node(), on = result.node(), probs = std::move(probs),
                  batch, len, width, heads, hd, factor, id = tape->id()] {
      if (on->grad.empty()) return;
      T* gqkv = detail::grad_of(*qn, id);
      if (gqkv == nullptr) return;
      const std::size_t in_stride = 3 * width;
      const T* src = qn->data.data();
      detail::RowMat<T> dp(len, len);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = b * len * in_stride + h * hd;
          detail::ConstStridedMap<T> q(src + off, len, hd, Eigen::OuterStride<>(in_stride));
          detail::ConstStridedMap<T> k(src + off + width, len, hd, Eigen::OuterStride<>(in_stride));
          detail::ConstStridedMap<T> v(src + off + 2 * width, len, hd, Eigen::OuterStride<>(in_stride));
          detail::StridedMap<T> gq(gqkv + off, len, hd, Eigen::OuterStride<>(in_stride));
          detail::StridedMap<T> gk(gqkv + off + width, len, hd, Eigen::OuterStride<>(in_stride));
          detail::StridedMap<T> gv(gqkv + off + 2 * width, len, hd, Eigen::OuterStride<>(in_stride));
          detail::ConstStridedMap<T> go(on->grad.data() + b * len * width + h * hd, len, hd,
                                        Eigen::OuterStride<>(width));
          detail::ConstMatMap<T> p(probs.data() + (b * heads + h) * len * len, len, len);
          gv.noalias() += p.transpose() * go;
          dp.noalias() = go * v.transpose();
          for (std::size_t i = 0; i < len; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            const T dot = dp.row(ii).dot(p.row(ii));
            dp.row(ii) = (p.row(ii).array() * (dp.row(ii).array() - dot)).matrix();
          }
          dp *= factor;
          gq.noalias() += dp * k;
          gk.noalias() += dp.transpose() * q;
        }
      }
    });
  }
  return result;
}

/// Splits images [B, H, W, C] into non-overlapping p x p patches:
/// [B, (H/p)(W/p), p*p*C], patches in row-major grid order, pixels within
/// a patch ordered (row, column, channel).
template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& images, std::size_t patch) {
  detail::require_defined("patchify", images);
  if (images.rank() != 4 || patch == 0 || images.dim(1) % patch != 0 ||
      images.dim(2) % patch != 0)
    throw std::invalid_argument("patchify: shape " + to_string(images.shape()) +
                                " not divisible into " + std::to_string(patch) +
                                "-pixel patches");
  const std::size_t batch = images.dim(0);
  const std::size_t h = images.dim(1);
  const std::size_t w = images.dim(2);
  const std::size_t c = images.dim(3);
  const std::size_t gw = w / patch;
  const std::size_t count = (h / patch) * gw;
  const std::size_t pdim = patch * patch * c;
  // index map: output position -> input position
  std::vector<std::size_t> map(batch * count * pdim);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t pi = (y / patch) * gw + (x / patch);
          const std::size_t within = ((y % patch) * patch + (x % patch)) * c + ch;
          map[(b * count + pi) * pdim + within] = ((b * h + y) * w + x) * c + ch;
        }
  const auto in = images.values();
  Buffer<T> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = in[map[i]];
  Tape* tape = detail::recording_tape(images);
  auto result = detail::make_result(Shape{batch, count, pdim}, std::move(out), tape);
  if (tape) {
    tape->record([in_node = images.node(), on = result.node(), map = std::move(map),
                  id = tape->id()] {
      if (on->grad.empty()) return;
      if (T* g = detail::grad_of(*in_node, id))
        for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += on->grad[i];
    });
  }
  return result;
}

/// Copy of `a` converted to another scalar type; not differentiable.
template <typename To, typename From>
BasicTensor<To> cast(const BasicTensor<From>& a) {
  std::vector<To> out(a.values().begin(), a.values().end());
  return BasicTensor<To>(a.shape(), std::move(out));
}

}  // namespace promptalign
