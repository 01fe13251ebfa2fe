#include "polyhistor/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "polyhistor/autograd.hpp"
#include "polyhistor/errors.hpp"

namespace polyhistor {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_sequence{0};

detail::TensorImpl& checked(const std::shared_ptr<detail::TensorImpl>& impl) {
  if (!impl) throw std::logic_error("use of an undefined tensor");
  return *impl;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto s : shape) {
    if (s == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }
Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::eye(std::size_t n) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(d));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> d;
  d.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    d.insert(d.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(d), requires_grad);
}

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
  const auto n = values.size();
  return Tensor({1, n}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return checked(impl_).shape; }
std::size_t Tensor::size() const { return checked(impl_).data.size(); }

std::size_t Tensor::rows() const {
  if (dim() != 2) throw RankError("expected a 2-D tensor, got " + shape_str(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (dim() != 2) throw RankError("expected a 2-D tensor, got " + shape_str(shape()));
  return shape()[1];
}

std::span<const double> Tensor::data() const { return checked(impl_).data; }

double Tensor::operator()(std::size_t i, std::size_t j) const { return data()[i * cols() + j]; }

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  auto& impl = checked(impl_);
  if (impl.node) throw GradientError("requires_grad can only be changed on leaf tensors");
  impl.requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return checked(impl_).node == nullptr; }
bool Tensor::has_grad() const { return checked(impl_).has_grad; }

std::span<const double> Tensor::grad() const {
  const auto& impl = checked(impl_);
  if (!impl.has_grad) throw GradientError("tensor has no gradient");
  return impl.grad;
}

Tensor Tensor::grad_tensor() const {
  auto g = grad();
  return Tensor(shape(), std::vector<double>(g.begin(), g.end()));
}

void Tensor::zero_grad() {
  auto& impl = checked(impl_);
  impl.has_grad = false;
  impl.grad.clear();
  impl.grad.shrink_to_fit();
}

std::span<double> Tensor::mutable_data() {
  auto& impl = checked(impl_);
  if (impl.node) throw GradientError("values produced by an operation are immutable");
  return impl.data;
}

Tensor Tensor::detach() const { return Tensor(shape(), std::vector<double>(data().begin(), data().end())); }

Tensor Tensor::clone() const {
  return Tensor(shape(), std::vector<double>(data().begin(), data().end()), requires_grad());
}

bool grad_mode_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

bool tracked(const Tensor& t) { return t.defined() && t.impl()->requires_grad; }

void accumulate(const Tensor& t, std::span<const double> g) {
  if (!tracked(t)) return;
  auto& impl = *t.impl();
  if (g.size() != impl.data.size()) throw std::logic_error("gradient size mismatch");
  if (!impl.has_grad) {
    impl.grad.assign(g.begin(), g.end());
    impl.has_grad = true;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) impl.grad[i] += g[i];
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   BackwardFn backward) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericalError("operation produced a non-finite value");
  }
  Tensor out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || tracked(t);
  if (!any) return out;

  auto node = std::make_shared<Node>();
  node->sequence = g_sequence.fetch_add(1, std::memory_order_relaxed);
  for (const auto& t : inputs) {
    if (t.defined()) node->inputs.push_back(t.impl());
  }
  node->backward = std::move(backward);
  node->output = out.impl().get();
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   BackwardFn backward) {
  return make_result(std::move(shape), std::move(data), std::vector<Tensor>(inputs), std::move(backward));
}

}  // namespace detail

Graph Graph::collect(const Tensor& root) {
  Graph g;
  if (!root.defined() || !root.impl()->node) return g;
  std::unordered_set<const detail::Node*> seen;
  std::vector<detail::Node*> stack{root.impl()->node.get()};
  seen.insert(stack.back());
  while (!stack.empty()) {
    auto* node = stack.back();
    stack.pop_back();
    g.nodes_.push_back(node);
    for (const auto& in : node->inputs) {
      auto* child = in->node.get();
      if (child && seen.insert(child).second) stack.push_back(child);
    }
  }
  std::sort(g.nodes_.begin(), g.nodes_.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->sequence < b->sequence; });
  return g;
}

std::vector<std::uint64_t> Graph::sequence() const {
  std::vector<std::uint64_t> s;
  s.reserve(nodes_.size());
  for (const auto* n : nodes_) s.push_back(n->sequence);
  return s;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw GradientError("backward on an undefined tensor");
  if (loss.size() != 1) {
    throw GradientError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto& root = *loss.impl();
  if (!root.requires_grad) throw GradientError("loss does not depend on any tracked tensor");
  if (root.has_grad) throw GradientError("backward already ran on this loss; call zero_grad() first");

  root.grad.assign(1, 1.0);
  root.has_grad = true;
  const Graph graph = Graph::collect(loss);
  const auto& nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto* node = *it;
    auto& out = *node->output;
    if (!out.has_grad) continue;
    node->backward(out.data, out.grad);
    if (&out != &root) {
      out.has_grad = false;
      out.grad.clear();
      out.grad.shrink_to_fit();
    }
  }
}

}  // namespace polyhistor
