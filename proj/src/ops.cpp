#include "polyhistor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "polyhistor/autograd.hpp"
#include "polyhistor/errors.hpp"

namespace polyhistor {

using detail::accumulate;
using detail::make_result;
using detail::tracked;

namespace {

void require_2d(const Tensor& t, const char* op) {
  if (t.dim() != 2) {
    throw RankError(std::string(op) + " expects 2-D operands, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x k] += a[m x n] * b[k x n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      c[i * k + p] += s;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {a, b},
                     [a, b, m, k, n](std::span<const double>, std::span<const double> g) {
                       if (tracked(a)) {
                         std::vector<double> ga(m * k, 0.0);
                         gemm_nt(g.data(), b.data().data(), ga.data(), m, n, k);
                         accumulate(a, ga);
                       }
                       if (tracked(b)) {
                         std::vector<double> gb(k * n, 0.0);
                         gemm_tn(a.data().data(), g.data(), gb.data(), m, k, n);
                         accumulate(b, gb);
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  const auto src = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = src[i * c + j];
  return make_result({c, r}, std::move(out), {a}, [a, r, c](std::span<const double>, std::span<const double> g) {
    std::vector<double> ga(r * c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = g[j * r + i];
    accumulate(a, ga);
  });
}

Tensor kron(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2) {
    throw RankError("kron expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                    shape_str(b.shape()));
  }
  const std::size_t p = a.rows(), q = a.cols(), m = b.rows(), n = b.cols();
  const std::size_t out_cols = q * n;
  std::vector<double> out(p * m * out_cols);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) {
      const double aij = av[i * q + j];
      for (std::size_t u = 0; u < m; ++u)
        for (std::size_t v = 0; v < n; ++v) out[(i * m + u) * out_cols + j * n + v] = aij * bv[u * n + v];
    }
  return make_result({p * m, out_cols}, std::move(out), {a, b},
                     [a, b, p, q, m, n, out_cols](std::span<const double>, std::span<const double> g) {
                       const auto av = a.data();
                       const auto bv = b.data();
                       std::vector<double> ga(tracked(a) ? p * q : 0, 0.0);
                       std::vector<double> gb(tracked(b) ? m * n : 0, 0.0);
                       for (std::size_t i = 0; i < p; ++i)
                         for (std::size_t j = 0; j < q; ++j)
                           for (std::size_t u = 0; u < m; ++u)
                             for (std::size_t v = 0; v < n; ++v) {
                               const double gij = g[(i * m + u) * out_cols + j * n + v];
                               if (!ga.empty()) ga[i * q + j] += gij * bv[u * n + v];
                               if (!gb.empty()) gb[u * n + v] += gij * av[i * q + j];
                             }
                       if (!ga.empty()) accumulate(a, ga);
                       if (!gb.empty()) accumulate(b, gb);
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a},
                     [a](std::span<const double>, std::span<const double> g) { accumulate(a, g); });
}

Tensor reshape_pi(const Tensor& v, std::size_t rows, std::size_t cols) {
  if (rows * cols != v.size()) {
    throw DimensionError("reshape_pi: " + std::to_string(v.size()) + " values cannot form " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  return reshape(v, {rows, cols});
}

Tensor flatten(const Tensor& a) { return reshape(a, {1, a.size()}); }

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double>, std::span<const double> g) {
    accumulate(a, g);
    accumulate(b, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double>, std::span<const double> g) {
    accumulate(a, g);
    if (tracked(b)) {
      std::vector<double> gb(g.begin(), g.end());
      for (auto& x : gb) x = -x;
      accumulate(b, gb);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double>, std::span<const double> g) {
    const auto av = a.data(), bv = b.data();
    if (tracked(a)) {
      std::vector<double> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv[i];
      accumulate(a, ga);
    }
    if (tracked(b)) {
      std::vector<double> gb(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av[i];
      accumulate(b, gb);
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& x : out) x *= factor;
  return make_result(a.shape(), std::move(out), {a}, [a, factor](std::span<const double>, std::span<const double> g) {
    std::vector<double> ga(g.begin(), g.end());
    for (auto& x : ga) x *= factor;
    accumulate(a, ga);
  });
}

Tensor add_n(const std::vector<Tensor>& terms) {
  if (terms.empty()) throw DimensionError("add_n needs at least one term");
  for (const auto& t : terms) require_same_shape(terms.front(), t, "add_n");
  std::vector<double> out(terms.front().size(), 0.0);
  for (const auto& t : terms) {
    const auto v = t.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  return make_result(terms.front().shape(), std::move(out), terms,
                     [terms](std::span<const double>, std::span<const double> g) {
                       for (const auto& t : terms) accumulate(t, g);
                     });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_2d(a, "add_bias");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match width of " +
                         shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bv = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  return make_result({m, n}, std::move(out), {a, bias},
                     [a, bias, m, n](std::span<const double>, std::span<const double> g) {
                       accumulate(a, g);
                       if (tracked(bias)) {
                         std::vector<double> gb(n, 0.0);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                         accumulate(bias, gb);
                       }
                     });
}

Nonlinearity parse_nonlinearity(std::string_view name) {
  if (name == "gelu") return Nonlinearity::gelu;
  if (name == "relu") return Nonlinearity::relu;
  if (name == "identity") return Nonlinearity::identity;
  throw ConfigError("unknown nonlinearity '" + std::string(name) + "' (expected gelu, relu, identity)");
}

std::string_view to_string(Nonlinearity f) {
  switch (f) {
    case Nonlinearity::gelu: return "gelu";
    case Nonlinearity::relu: return "relu";
    case Nonlinearity::identity: return "identity";
  }
  return "?";
}

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [a](std::span<const double>, std::span<const double> g) {
    const auto av = a.data();
    std::vector<double> ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * gelu_slope(av[i]);
    accumulate(a, ga);
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return make_result(a.shape(), std::move(out), {a}, [a](std::span<const double>, std::span<const double> g) {
    const auto av = a.data();
    std::vector<double> ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = av[i] > 0.0 ? g[i] : 0.0;
    accumulate(a, ga);
  });
}

Tensor apply(Nonlinearity f, const Tensor& a) {
  switch (f) {
    case Nonlinearity::gelu: return gelu(a);
    case Nonlinearity::relu: return relu(a);
    case Nonlinearity::identity: return a;
  }
  return a;
}

Tensor softmax_rows(const Tensor& a) {
  require_2d(a, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto av = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = av.data() + i * n;
    double* o = out.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return make_result({m, n}, std::move(out), {a}, [a, m, n](std::span<const double> y, std::span<const double> g) {
    std::vector<double> ga(m * n);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
    }
    accumulate(a, ga);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_2d(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: affine parameters must have " + std::to_string(n) + " values");
  }
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  const auto xv = x.data(), gv = gain.data(), bv = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  return make_result(
      {m, n}, std::move(out), {x, gain, bias},
      [x, gain, bias, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const double>,
                                                                                   std::span<const double> g) {
        const auto gv = gain.data();
        if (tracked(gain) || tracked(bias)) {
          std::vector<double> gg(n, 0.0), gb(n, 0.0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              gg[j] += g[i * n + j] * xhat[i * n + j];
              gb[j] += g[i * n + j];
            }
          accumulate(gain, gg);
          accumulate(bias, gb);
        }
        if (tracked(x)) {
          std::vector<double> gx(m * n);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gv[j];
              gx[i * n + j] = inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
          accumulate(x, gx);
        }
      });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  require_2d(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (count == 0 || begin + count > n) {
    throw DimensionError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_str(a.shape()));
  }
  std::vector<double> out(m * count);
  const auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(av.data() + i * n + begin, count, out.data() + i * count);
  return make_result({m, count}, std::move(out), {a},
                     [a, m, n, begin, count](std::span<const double>, std::span<const double> g) {
                       std::vector<double> ga(m * n, 0.0);
                       for (std::size_t i = 0; i < m; ++i)
                         std::copy_n(g.data() + i * count, count, ga.data() + i * n + begin);
                       accumulate(a, ga);
                     });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  require_2d(a, "slice_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (count == 0 || begin + count > m) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin() + begin * n, a.data().begin() + (begin + count) * n);
  return make_result({count, n}, std::move(out), {a},
                     [a, m, n, begin, count](std::span<const double>, std::span<const double> g) {
                       std::vector<double> ga(m * n, 0.0);
                       std::copy(g.begin(), g.end(), ga.begin() + begin * n);
                       accumulate(a, ga);
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols needs at least one part");
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    const auto pv = p.data();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(pv.data() + i * c, c, out.data() + i * total + offset);
    offset += c;
  }
  return make_result({m, total}, std::move(out), parts,
                     [parts, m, total](std::span<const double>, std::span<const double> g) {
                       std::size_t offset = 0;
                       for (const auto& p : parts) {
                         const std::size_t c = p.cols();
                         if (tracked(p)) {
                           std::vector<double> gp(m * c);
                           for (std::size_t i = 0; i < m; ++i)
                             std::copy_n(g.data() + i * total + offset, c, gp.data() + i * c);
                           accumulate(p, gp);
                         }
                         offset += c;
                       }
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows needs at least one part");
  const std::size_t n = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) throw DimensionError("concat_rows: column counts differ");
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result({total, n}, std::move(out), parts, [parts](std::span<const double>, std::span<const double> g) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      accumulate(p, g.subspan(offset, p.size()));
      offset += p.size();
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices) {
  require_2d(a, "gather_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  if (idx.empty()) throw DimensionError("gather_rows: no indices");
  std::vector<double> out(idx.size() * n);
  const auto av = a.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= m) throw DimensionError("gather_rows: index " + std::to_string(idx[i]) + " out of range");
    std::copy_n(av.data() + idx[i] * n, n, out.data() + i * n);
  }
  const std::size_t count = idx.size();
  return make_result({count, n}, std::move(out), {a},
                     [a, m, n, idx = std::move(idx)](std::span<const double>, std::span<const double> g) {
                       std::vector<double> ga(m * n, 0.0);
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t j = 0; j < n; ++j) ga[idx[i] * n + j] += g[i * n + j];
                       accumulate(a, ga);
                     });
}

Tensor gather(const Tensor& source, std::span<const std::ptrdiff_t> index, Shape shape) {
  if (shape_numel(shape) != index.size()) throw DimensionError("gather: index count does not match shape");
  std::vector<std::ptrdiff_t> idx(index.begin(), index.end());
  const auto sv = source.data();
  const auto limit = static_cast<std::ptrdiff_t>(sv.size());
  std::vector<double> out(idx.size());
  for (std::size_t e = 0; e < idx.size(); ++e) {
    if (idx[e] >= limit) throw DimensionError("gather: index out of range");
    out[e] = idx[e] < 0 ? 0.0 : sv[static_cast<std::size_t>(idx[e])];
  }
  return make_result(std::move(shape), std::move(out), {source},
                     [source, idx = std::move(idx)](std::span<const double>, std::span<const double> g) {
                       std::vector<double> gs(source.size(), 0.0);
                       for (std::size_t e = 0; e < idx.size(); ++e)
                         if (idx[e] >= 0) gs[static_cast<std::size_t>(idx[e])] += g[e];
                       accumulate(source, gs);
                     });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({1}, {s}, {a}, [a](std::span<const double>, std::span<const double> g) {
    accumulate(a, std::vector<double>(a.size(), g[0]));
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

}  // namespace polyhistor
