#pragma once

// Internal building blocks for defining differentiable operations. Modules that
// add fused operations (losses, attention pieces) include this header.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "polyhistor/tensor.hpp"

namespace polyhistor::detail {

/// Receives the forward output values and the gradient flowing into them, and
/// accumulates gradients into the captured inputs.
using BackwardFn =
    std::function<void(std::span<const double> output, std::span<const double> grad_output)>;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<double> grad;
  std::shared_ptr<Node> node;
};

struct Node {
  std::uint64_t sequence = 0;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  TensorImpl* output = nullptr;  // owner of this node
};

/// Wraps freshly computed values as the output of an operation. A graph node is
/// recorded only when grad mode is on and some input requires grad. Throws
/// NumericalError if any value is non-finite.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   BackwardFn backward);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   BackwardFn backward);

/// Adds `g` into t's gradient buffer when t is tracked; no-op otherwise.
void accumulate(const Tensor& t, std::span<const double> g);

bool tracked(const Tensor& t);

}  // namespace polyhistor::detail
