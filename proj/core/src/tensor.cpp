#include "tap/tensor.hpp"

#include <cmath>
#include <sstream>

#include "tap/errors.hpp"

namespace tap {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

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

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {
  impl_->shape = {1};
  impl_->data = {0.0};
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  if (shape.empty()) throw DimensionError("tensor rank must be at least 1");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (numel(shape) != values.size()) {
    throw DimensionError("shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return Tensor(shape, std::vector<double>(numel(shape), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= rank()) {
    throw DimensionError("axis " + std::to_string(i) + " out of range for " + to_string(shape()));
  }
  return impl_->shape[i];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar tensor " + to_string(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_->is_leaf) throw ContractError("requires_grad can only be toggled on leaf tensors");
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
  return *this;
}

Tensor Tensor::clone() const {
  Tensor out(impl_->shape, impl_->data, impl_->requires_grad);
  out.impl_->grad = impl_->grad;
  return out;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void backward(const Tensor& loss) {
  Tape& tape = Tape::current();
  if (loss.size() != 1) {
    tape.reset();
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    tape.reset();
    throw ContractError("backward() on a loss that does not depend on any trainable tensor");
  }
  auto& root = *loss.impl();
  root.grad_buffer()[0] += 1.0;
  // Nodes may be recorded during replay only if an op misbehaves; detach
  // the list first so the replay sees a stable sequence.
  std::vector<Tape::Node> nodes;
  nodes.swap(tape.nodes_);
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) (*it)();
}

}  // namespace tap
