#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "polyhistor/backbone.hpp"
#include "polyhistor/peft.hpp"
#include "polyhistor/tensor.hpp"

namespace polyhistor {

// Embeddings may be passed as k-vectors or 1 x k rows.

/// W = reshape_pi(v * w_hat, d, 2n) with w_hat of shape k x 2dn.
Tensor hyperformer_weights(const Tensor& v, const Tensor& w_hat, std::size_t d, std::size_t n);

/// Pair of lightweight hypernetworks producing the two low-rank factors.
struct HyperNetPair {
  Tensor p_hat;  // k x (d*r)
  Tensor q_hat;  // k x (2n*r)
  std::size_t rank = 1;
};

/// P = reshape_pi(v * p_hat, d, r), Q = reshape_pi(v * q_hat, 2n, r), W = P * Q^T (d x 2n).
Tensor decomposed_weights(const Tensor& v, const HyperNetPair& pair, std::size_t d, std::size_t n);

/// Sum over i of kron(templates[i], kernels[i]); s templates of d x 2n and s kernels of s x s.
Tensor scaled_adapter_weight(const std::vector<Tensor>& templates, const std::vector<Tensor>& kernels, std::size_t s);

/// Template i is decomposed_weights([task ; layer_embs[i]], pair, d, n); the result is
/// scaled_adapter_weight over those templates, shape (d*s) x (2n*s).
Tensor polyhistor_lite_weights(const Tensor& task, const std::vector<Tensor>& layer_embs, const HyperNetPair& pair,
                               const std::vector<Tensor>& kernels, std::size_t s, std::size_t d, std::size_t n);

/// Trainables and attachment synthesis for hyperformer, polyhistor and polyhistor_lite.
/// Adapter weights are regenerated from the hypernetworks on every resolve.
MethodBuild build_polyhistor(const MethodConfig& method, const HvtModel& model, std::size_t num_tasks, Method variant,
                             std::uint64_t seed);

}  // namespace polyhistor
