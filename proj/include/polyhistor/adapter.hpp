#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <utility>

#include "polyhistor/ops.hpp"
#include "polyhistor/tensor.hpp"

namespace polyhistor {

enum class Position { post_attention, post_mlp, attention_qv };

Position parse_position(std::string_view name);
std::string_view to_string(Position p);

/// A (layer, position) slot where an adaptation module attaches.
struct InsertionPoint {
  std::size_t layer_index = 0;
  Position position = Position::post_mlp;
  std::size_t width = 0;  // d
  std::size_t scale = 1;  // block scale of the layer's block
};

/// Bottleneck adapter parameters: down d x n, up n x d, optional biases.
struct AdapterWeights {
  Tensor down;
  Tensor up;
  Tensor down_bias;  // n values, may be undefined
  Tensor up_bias;    // d values, may be undefined
  Nonlinearity delta = Nonlinearity::gelu;

  std::size_t width() const { return down.rows(); }
  std::size_t bottleneck() const { return down.cols(); }

  /// [down ; up^T] laid side by side, d x 2n.
  Tensor composite() const;
  /// Splits a d x 2n composite: first n columns are `down`, the rest are `up^T`.
  static AdapterWeights from_composite(const Tensor& w, std::size_t n, Nonlinearity delta);
};

/// h_out = delta(h_in * down + b_down) * up + b_up + h_in over the rows of h_in.
Tensor adapter_forward(const Tensor& h_in, const AdapterWeights& w);

/// Low-rank update of the query and value projections: dW = scale * down * up.
struct LoraWeights {
  Tensor q_down, q_up, v_down, v_up;
  double scale = 1.0;
};

/// Concrete tensors the backbone consumes for one task during one forward pass.
struct ResolvedAttachments {
  /// Replacement values for named backbone parameters.
  std::map<std::string, Tensor, std::less<>> overrides;
  std::map<std::pair<std::size_t, Position>, AdapterWeights> adapters;
  std::map<std::size_t, LoraWeights> lora;
  /// Prompt tokens (P x width) injected at the input of the keyed layer.
  std::map<std::size_t, Tensor> prompts;

  bool empty() const { return overrides.empty() && adapters.empty() && lora.empty() && prompts.empty(); }
};

}  // namespace polyhistor
