// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <atomic>
#include <concepts>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace promptalign {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Ordered record of backward rules for one forward pass.
///
/// Constructing a Tape makes it the active tape of the calling thread until
/// it is destroyed; operations executed while a tape is active append their
/// backward rule when any input depends on a trainable tensor. Recording
/// order is execution order, so replaying in reverse is a valid topological
/// order. Tapes nest (LIFO) and are confined to the thread that created
/// them.
class Tape {
 public:
  Tape() : id_(next_id()), previous_(current_) { current_ = this; }
  ~Tape() { current_ = previous_; }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return current_; }

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return rules_.size(); }

  void record(std::function<void()> rule) { rules_.push_back(std::move(rule)); }

  void replay_backward() {
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
  }

 private:
  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }

  std::uint64_t id_;
  Tape* previous_;
  std::vector<std::function<void()>> rules_;
  inline static thread_local Tape* current_ = nullptr;
};

/// Storage alignment in bytes. Eigen's vectorized reductions peel their
/// first elements according to the address, so equal alignment of every
/// buffer is what makes results independent of where memory lands.
inline constexpr std::size_t kStorageAlignment = 64;

template <typename T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(
        ::operator new(n * sizeof(T), std::align_val_t{kStorageAlignment}));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t{kStorageAlignment});
  }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorNode {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty when absent
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // tape this value was recorded on, 0 if none

  bool tracked_by(std::uint64_t tape) const {
    return requires_grad || (tape != 0 && tape_id == tape);
  }
  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

/// Dense row-major tensor handle.
///
/// Copies alias the same storage (like a shared pointer); use detach() for
/// an independent deep copy. Gradients are populated by backward() for
/// tensors with requires_grad and for intermediates of the active tape.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  BasicTensor() = default;

  BasicTensor(Shape shape, const std::vector<T>& values, bool requires_grad = false)
      : BasicTensor(std::move(shape), Buffer<T>(values.begin(), values.end()),
                    requires_grad) {}

  /// Takes ownership of aligned storage. A template so that braced lists
  /// resolve to the std::vector overload.
  template <typename B>
    requires std::same_as<B, Buffer<T>>
  BasicTensor(Shape shape, B values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    for (std::size_t d : shape) {
      if (d == 0) {
        throw std::invalid_argument("tensor: empty dimension in shape " +
                                    to_string(shape));
      }
    }
    if (numel(shape) != values.size()) {
      throw std::invalid_argument(
          "tensor: shape " + to_string(shape) + " holds " +
          std::to_string(numel(shape)) + " values, got " +
          std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  /// Zero-filled tensor.
  explicit BasicTensor(Shape shape)
      : BasicTensor(shape, Buffer<T>(numel(shape), T(0))) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return BasicTensor(std::move(shape), Buffer<T>(n, T(0)), requires_grad);
  }

  static BasicTensor scalar(T value) { return BasicTensor(Shape{}, Buffer<T>{value}); }

  static BasicTensor full(Shape shape, T value) {
    const std::size_t n = numel(shape);
    return BasicTensor(std::move(shape), Buffer<T>(n, value));
  }

  static BasicTensor from_node(std::shared_ptr<Node> node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  /// Dimension with Python-style negative indexing.
  std::size_t dim(int axis) const {
    return node_->shape[normalize_axis(axis)];
  }
  std::size_t normalize_axis(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw std::out_of_range("tensor: axis " + std::to_string(axis) +
                              " out of range for shape " + to_string(shape()));
    }
    return static_cast<std::size_t>(a);
  }

  std::span<const T> values() const { return node_->data; }
  /// Direct mutable access; for optimizers and data loading only.
  std::span<T> mutable_values() { return node_->data; }
  T item() const {
    if (size() != 1) {
      throw std::invalid_argument("tensor: item() on shape " +
                                  to_string(shape()));
    }
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  BasicTensor detach() const { return BasicTensor(shape(), node_->data); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;

/// Reverse-mode sweep over the active tape seeded with d(loss)/d(loss) = 1.
/// Gradients accumulate into tensors with requires_grad; call zero_grad()
/// between steps.
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument(
        "backward: loss must be a scalar, got shape " +
        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  Tape* tape = Tape::active();
  if (tape == nullptr || loss.node()->tape_id != tape->id()) {
    throw std::logic_error(
        "backward: loss was not recorded on the active tape");
  }
  loss.node()->grad_buffer()[0] += T(1);
  tape->replay_backward();
}

}  // namespace promptalign
