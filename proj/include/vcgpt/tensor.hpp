#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vcgpt/error.hpp"

namespace vcgpt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;

  double* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace detail

// Dense row-major array of doubles. Copies share storage (handle semantics,
// like a parameter reference); use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    for (std::size_t extent : shape) {
      if (extent == 0) {
        throw DimensionError("tensor extents must be positive, got " +
                             shape_str(shape));
      }
    }
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor scalar(double value) { return Tensor(Shape{1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; allocated (zero) on first access.
  std::span<double> grad() {
    impl_->grad_buffer();
    return impl_->grad;
  }
  std::span<const double> grad() const {
    impl_->grad_buffer();
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
  }

  double item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
  }

  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double& at(std::size_t row, std::size_t col) {
    return impl_->data[row * impl_->shape.back() + col];
  }
  double at(std::size_t row, std::size_t col) const {
    return impl_->data[row * impl_->shape.back() + col];
  }

  /// Deep copy with no gradient and no tape history.
  Tensor clone() const {
    Tensor out(shape(), impl_->data);
    out.impl_->requires_grad = impl_->requires_grad;
    return out;
  }

  /// Replaces shape and contents in place; every handle sees the change.
  void reset(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("reset: shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->grad.clear();
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const detail::ImplPtr& impl() const { return impl_; }

 private:
  detail::ImplPtr impl_;
};

// Ordered record of differentiable operations. Operations append themselves
// while a Tape is active on the current thread, so records are always in
// topological order; backward() walks them in exact reverse.
class Tape {
 public:
  struct Record {
    detail::ImplPtr output;
    std::vector<detail::ImplPtr> parents;
    std::function<void()> backward;
  };

  void record(detail::ImplPtr output, std::vector<detail::ImplPtr> parents,
              std::function<void()> backward) {
    records_.push_back({std::move(output), std::move(parents), std::move(backward)});
  }

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  /// Propagates d(loss)/d(x) to every requires_grad leaf. Leaf gradients
  /// accumulate across calls; intermediate gradients are reset each call.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
    }
    const auto& root = loss.impl();
    bool on_tape = false;
    for (auto& rec : records_) {
      if (rec.output == root) on_tape = true;
      rec.output->grad.assign(rec.output->data.size(), 0.0);
    }
    if (!on_tape && !root->requires_grad) {
      throw ContractError("backward() on a loss that is not on this tape");
    }
    root->grad_buffer()[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward();
    }
  }

 private:
  std::vector<Record> records_;
};

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

// Makes `tape` the recording target for the current thread for the scope's
// lifetime. Without an active tape, ops run forward-only.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape_slot()) {
    detail::active_tape_slot() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording (e.g. inference inside a training step).
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape_slot()) {
    detail::active_tape_slot() = nullptr;
  }
  ~NoGradScope() { detail::active_tape_slot() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

inline void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (tape == nullptr) throw ContractError("backward() without an active tape");
  tape->backward(loss);
}

}  // namespace vcgpt
