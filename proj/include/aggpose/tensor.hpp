#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aggpose {

using Index = std::int64_t;
using Shape = std::vector<Index>;

/// Raised when operand shapes do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on NaN/Inf where an operation requires finite input.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the differentiation tape (non-scalar loss, double backward, ...).
class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string to_string(const Shape& shape);
Index numel(const Shape& shape);

/// Dense row-major tensor handle. Copies share storage; values are treated as
/// immutable once an operation has produced them. Leaves (parameters) may be
/// mutated in place between forward passes by the optimizer.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{}, value); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  Index dim(int axis) const;
  Index numel() const { return static_cast<Index>(impl_->data.size()); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  const T* ptr() const { return impl_->data.data(); }
  T* mutable_ptr() { return impl_->data.data(); }
  T item() const;
  T at(std::initializer_list<Index> idx) const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient storage, allocated (zero-filled) on first access.
  std::span<T> grad_buffer() const;
  void zero_grad() { impl_->grad.clear(); }

  /// Deep copy of the values, detached from any tape.
  Tensor clone() const;
  bool shares_storage_with(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of differentiable operations. Ops append a node while a
/// Recording guard for this tape is alive on the current thread; backward()
/// replays the nodes once, in reverse order.
template <typename T>
class Tape {
 public:
  class Recording {
   public:
    explicit Recording(Tape& tape);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Recording record() { return Recording(*this); }

  /// Tape recording on this thread, or nullptr (inference mode).
  static Tape* active();

  void push(std::function<void()> backward_rule);
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Seeds d(loss)/d(loss) = 1 and runs every backward rule once.
  void backward(Tensor<T>& loss);

 private:
  static Tape*& active_slot();

  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

namespace detail {

/// Returns the active tape if any of the inputs requires a gradient, and marks
/// `out` as requiring one in that case.
template <typename T>
Tape<T>* tape_for(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor<T>* in : inputs) {
    if (in != nullptr && in->requires_grad()) {
      out.set_requires_grad(true);
      return tape;
    }
  }
  return nullptr;
}

}  // namespace detail

}  // namespace aggpose
