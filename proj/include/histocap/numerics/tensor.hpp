#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "histocap/error.hpp"

namespace histocap {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Dense row-major array with an optional gradient slot.
//
// A Tensor is a shared handle: copies alias the same storage, which is how
// parameters are threaded through models, the tape and the optimizer. Use
// clone() or detach() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : node_(std::make_shared<detail::TensorStorage<T>>()) {
    validate(shape);
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values)
      : node_(std::make_shared<detail::TensorStorage<T>>()) {
    validate(shape);
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor of(Shape shape, std::initializer_list<T> values) {
    return Tensor(std::move(shape), std::vector<T>(values));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }

  // Element access for rank-2 tensors.
  T at(std::size_t row, std::size_t col) const {
    return node_->data[row * node_->shape.back() + col];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  // Shared-handle semantics: the gradient slot belongs to the storage.
  std::span<T> mutable_grad() const { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void clear_grad() { node_->grad.clear(); }

  // Independent copy of the values, detached from any recorded history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  // Independent copy that keeps the requires_grad flag (a fresh leaf).
  Tensor clone() const {
    Tensor out = detach();
    out.node_->requires_grad = node_->requires_grad;
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out));
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  detail::TensorStorage<T>& storage() const { return *node_; }

 private:
  static void validate(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (auto e : shape) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::TensorStorage<T>> node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// Ordered record of backward rules. Confined to the thread that owns it;
// operations record onto the tape made active by a TapeScope.
template <typename T>
class GradTape {
 public:
  void record(std::function<void()> rule) { rules_.push_back(std::move(rule)); }

  std::size_t size() const { return rules_.size(); }

  void clear() { rules_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays every rule in reverse order once.
  // Gradients accumulate into leaves; the tape is cleared afterwards.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
      throw ValueError("backward() on a loss with no recorded history");
    }
    auto& seed = loss.storage().ensure_grad();
    seed[0] += T(1);
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
    rules_.clear();
  }

 private:
  std::vector<std::function<void()>> rules_;
};

template <typename T>
GradTape<T>*& active_tape() {
  thread_local GradTape<T>* tape = nullptr;
  return tape;
}

// Makes a tape active for the current thread for the scope's lifetime.
// A null tape disables recording (inference / finite-difference probes).
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradTape<T>* tape) : previous_(active_tape<T>()) {
    active_tape<T>() = tape;
  }
  ~TapeScope() { active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<T>* previous_;
};

// Disables recording for the scope's lifetime.
template <typename T>
class NoGradScope : public TapeScope<T> {
 public:
  NoGradScope() : TapeScope<T>(nullptr) {}
};

template <typename T>
void backward(const Tensor<T>& loss) {
  auto* tape = active_tape<T>();
  if (!tape) throw ValueError("backward() called with no active tape");
  tape->backward(loss);
}

}  // namespace histocap
