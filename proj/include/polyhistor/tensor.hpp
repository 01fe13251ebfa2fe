#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace polyhistor {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
struct Node;
}  // namespace detail

/// Dense row-major tensor of doubles with optional reverse-mode gradient tracking.
///
/// Copies share storage (handle semantics); values produced by an operation are
/// never modified afterwards. Only leaves may be written through mutable_data(),
/// which is how optimizers update parameters between forward passes.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor eye(std::size_t n);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);
  /// 1 x n row vector.
  static Tensor row(std::vector<double> values, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  double at(std::size_t flat) const { return data()[flat]; }
  double operator()(std::size_t i, std::size_t j) const;
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  Tensor grad_tensor() const;
  void zero_grad();

  std::span<double> mutable_data();
  Tensor detach() const;
  Tensor clone() const;

  /// Identity of the underlying storage; equal for copies of the same handle.
  const void* id() const { return impl_.get(); }

  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Operation records reachable from a root, listed in the order they were appended.
class Graph {
 public:
  static Graph collect(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  /// Monotone creation stamps, one per node, in traversal (append) order.
  std::vector<std::uint64_t> sequence() const;
  const std::vector<detail::Node*>& nodes() const { return nodes_; }

 private:
  std::vector<detail::Node*> nodes_;
};

/// Populates grad on every tracked tensor reachable from `loss`.
///
/// The loss must be a single-element tensor that depends on at least one tracked
/// tensor. Gradients accumulate into leaves; calling backward again on the same
/// loss requires `loss.zero_grad()` first.
void backward(const Tensor& loss);

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

}  // namespace polyhistor
