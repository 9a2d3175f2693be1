#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tap {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool is_leaf = true;

  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense row-major float64 array. Copies of a Tensor share storage; use
// clone() for an independent deep copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const;
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  bool is_scalar() const { return impl_->data.size() == 1; }

  std::span<const double> data() const { return impl_->data; }
  // Mutating storage in place bypasses the tape; only optimizers and
  // initializers should do it.
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl_->is_leaf; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const;
  // Same values, fresh leaf with no gradient history.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of executed differentiable operations on the calling
// thread. backward() replays it in exact reverse order, then resets it.
class Tape {
 public:
  using Node = std::function<void()>;

  static Tape& current();

  void record(Node node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  bool enabled() const { return disabled_ == 0; }
  void reset() { nodes_.clear(); }

 private:
  friend class NoGradGuard;
  friend void backward(const Tensor& loss);

  std::vector<Node> nodes_;
  int disabled_ = 0;
};

// Suspends recording on the current thread's tape for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++Tape::current().disabled_; }
  ~NoGradGuard() { --Tape::current().disabled_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Populates grad on every requires_grad tensor reachable from `loss`
/// (a one-element tensor) and consumes the tape. Leaf gradients accumulate
/// across calls until zero_grad().
void backward(const Tensor& loss);

}  // namespace tap
