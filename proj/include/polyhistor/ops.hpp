#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "polyhistor/tensor.hpp"

namespace polyhistor {

// Matrix algebra. All operands are 2-D unless stated otherwise.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Kronecker product: result[i*m+u, j*n+v] = a[i,j] * b[u,v].
Tensor kron(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& a, Shape shape);
/// Row-major reinterpretation of a vector (any shape with rows*cols values) as rows x cols.
Tensor reshape_pi(const Tensor& v, std::size_t rows, std::size_t cols);
/// 1 x size() row vector in row-major order.
Tensor flatten(const Tensor& a);

// Elementwise arithmetic on equal shapes.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// Sum of any number of equally shaped tensors.
Tensor add_n(const std::vector<Tensor>& terms);

/// a[m x n] + bias broadcast over rows; bias holds n values.
Tensor add_bias(const Tensor& a, const Tensor& bias);

// Nonlinearities.

enum class Nonlinearity { gelu, relu, identity };

Nonlinearity parse_nonlinearity(std::string_view name);
std::string_view to_string(Nonlinearity f);

Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor apply(Nonlinearity f, const Tensor& a);

/// Softmax over each row of a 2-D tensor.
Tensor softmax_rows(const Tensor& a);

/// Normalizes each row to zero mean and unit variance, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Structural operations.

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
/// Output row i is input row indices[i].
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices);
/// Builds a tensor of `shape` whose element e is source.at(index[e]), or 0 when index[e] < 0.
Tensor gather(const Tensor& source, std::span<const std::ptrdiff_t> index, Shape shape);

// Reductions.

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

}  // namespace polyhistor
