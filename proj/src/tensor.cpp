#include "aggpose/tensor.hpp"

#include <sstream>

namespace aggpose {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad) : impl_(std::make_shared<Impl>()) {
  check_shape(shape);
  impl_->data.assign(static_cast<std::size_t>(aggpose::numel(shape)), fill);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  check_shape(shape);
  if (static_cast<Index>(values.size()) != aggpose::numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     to_string(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Index Tensor<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<Index> idx) const {
  if (static_cast<int>(idx.size()) != rank()) {
    throw ShapeError("index rank mismatch for shape " + to_string(shape()));
  }
  Index flat = 0;
  std::size_t axis = 0;
  for (Index i : idx) {
    const Index d = impl_->shape[axis++];
    if (i < 0 || i >= d) throw ShapeError("index out of range for shape " + to_string(shape()));
    flat = flat * d + i;
  }
  return impl_->data[static_cast<std::size_t>(flat)];
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(impl_->shape, impl_->data, false);
}

template <typename T>
Tape<T>*& Tape<T>::active_slot() {
  thread_local Tape* slot = nullptr;
  return slot;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_slot();
}

template <typename T>
Tape<T>::Recording::Recording(Tape& tape) : previous_(active_slot()) {
  if (tape.consumed_) throw AutogradError("cannot record onto a tape that already ran backward");
  active_slot() = &tape;
}

template <typename T>
Tape<T>::Recording::~Recording() {
  active_slot() = previous_;
}

template <typename T>
void Tape<T>::push(std::function<void()> backward_rule) {
  if (consumed_) throw AutogradError("tape already ran backward; re-run the forward pass on a new tape");
  nodes_.push_back(std::move(backward_rule));
}

template <typename T>
void Tape<T>::backward(Tensor<T>& loss) {
  if (consumed_) throw AutogradError("backward called twice without a new forward pass");
  if (loss.numel() != 1) {
    throw AutogradError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (nodes_.empty()) throw AutogradError("backward on an empty tape");
  consumed_ = true;
  loss.grad_buffer()[0] = T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  nodes_.clear();
  nodes_.shrink_to_fit();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace aggpose
