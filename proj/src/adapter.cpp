#include "polyhistor/adapter.hpp"

#include "polyhistor/errors.hpp"
#include "polyhistor/random.hpp"

namespace polyhistor {

Tensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Position parse_position(std::string_view name) {
  if (name == "post_attention") return Position::post_attention;
  if (name == "post_mlp") return Position::post_mlp;
  if (name == "attention_qv") return Position::attention_qv;
  throw ConfigError("unknown placement '" + std::string(name) +
                    "' (expected post_attention, post_mlp, attention_qv)");
}

std::string_view to_string(Position p) {
  switch (p) {
    case Position::post_attention: return "post_attention";
    case Position::post_mlp: return "post_mlp";
    case Position::attention_qv: return "attention_qv";
  }
  return "?";
}

Tensor AdapterWeights::composite() const { return concat_cols({down, transpose(up)}); }

AdapterWeights AdapterWeights::from_composite(const Tensor& w, std::size_t n, Nonlinearity delta) {
  if (w.dim() != 2 || w.cols() != 2 * n) {
    throw DimensionError("adapter composite must be d x " + std::to_string(2 * n) + ", got " +
                         shape_str(w.shape()));
  }
  AdapterWeights out;
  out.down = slice_cols(w, 0, n);
  out.up = transpose(slice_cols(w, n, n));
  out.delta = delta;
  return out;
}

Tensor adapter_forward(const Tensor& h_in, const AdapterWeights& w) {
  if (h_in.dim() != 2 || h_in.cols() != w.width()) {
    throw DimensionError("adapter of width " + std::to_string(w.width()) + " applied to " +
                         shape_str(h_in.shape()));
  }
  if (w.up.rows() != w.bottleneck() || w.up.cols() != w.width()) {
    throw DimensionError("adapter up-projection " + shape_str(w.up.shape()) + " does not match down-projection " +
                         shape_str(w.down.shape()));
  }
  Tensor hidden = matmul(h_in, w.down);
  if (w.down_bias.defined()) hidden = add_bias(hidden, w.down_bias);
  Tensor out = matmul(apply(w.delta, hidden), w.up);
  if (w.up_bias.defined()) out = add_bias(out, w.up_bias);
  return add(out, h_in);
}

}  // namespace polyhistor
