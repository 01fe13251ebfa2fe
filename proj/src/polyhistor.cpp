#include "polyhistor/polyhistor.hpp"

#include <cmath>
#include <map>

#include "polyhistor/errors.hpp"
#include "polyhistor/ops.hpp"

namespace polyhistor {

namespace {

constexpr double kUpScale = 1e-2;

std::string num(std::size_t v) { return std::to_string(v); }

Tensor as_row(const Tensor& v, const char* what) {
  if (v.dim() == 1) return reshape(v, {1, v.size()});
  if (v.dim() == 2 && v.rows() == 1) return v;
  throw DimensionError(std::string(what) + " must be a vector, got " + shape_str(v.shape()));
}

void require_rows(const Tensor& w, std::size_t k, std::size_t cols, const char* what) {
  if (w.dim() != 2 || w.rows() != k || w.cols() != cols) {
    throw DimensionError(std::string(what) + " must be " + num(k) + "x" + num(cols) + ", got " + shape_str(w.shape()));
  }
}

// Normal init whose columns from `first_up` on are shrunk, so generated up-projections start near zero.
ParamFactory::Init hypernet_init(double stddev, std::size_t first_up) {
  return [stddev, first_up](const Shape& s, Rng& rng) {
    Tensor t = randn(s, stddev, rng);
    auto v = t.mutable_data();
    for (std::size_t i = 0; i < s[0]; ++i)
      for (std::size_t j = first_up; j < s[1]; ++j) v[i * s[1] + j] *= kUpScale;
    return t;
  };
}

std::string pos_name(Position p) { return std::string(to_string(p)); }

struct Slot {
  std::size_t layer;
  Position pos;
  std::size_t n;  // adapter bottleneck at this layer
  std::function<Tensor(std::size_t task)> composite;
};

}  // namespace

Tensor hyperformer_weights(const Tensor& v, const Tensor& w_hat, std::size_t d, std::size_t n) {
  const Tensor row = as_row(v, "task embedding");
  require_rows(w_hat, row.cols(), 2 * d * n, "hypernetwork");
  return reshape_pi(matmul(row, w_hat), d, 2 * n);
}

Tensor decomposed_weights(const Tensor& v, const HyperNetPair& pair, std::size_t d, std::size_t n) {
  if (pair.rank == 0) throw RankError("hypernetwork rank must be at least 1");
  const Tensor row = as_row(v, "embedding");
  require_rows(pair.p_hat, row.cols(), d * pair.rank, "p hypernetwork");
  require_rows(pair.q_hat, row.cols(), 2 * n * pair.rank, "q hypernetwork");
  const Tensor p = reshape_pi(matmul(row, pair.p_hat), d, pair.rank);
  const Tensor q = reshape_pi(matmul(row, pair.q_hat), 2 * n, pair.rank);
  return matmul(p, transpose(q));
}

Tensor scaled_adapter_weight(const std::vector<Tensor>& templates, const std::vector<Tensor>& kernels, std::size_t s) {
  if (s == 0 || templates.size() != s || kernels.size() != s) {
    throw DimensionError("scaled_adapter_weight needs " + num(s) + " templates and kernels, got " +
                         num(templates.size()) + " and " + num(kernels.size()));
  }
  std::vector<Tensor> terms;
  terms.reserve(s);
  for (std::size_t i = 0; i < s; ++i) {
    if (templates[i].dim() != 2 || templates[i].shape() != templates[0].shape()) {
      throw DimensionError("template " + num(i) + " has shape " + shape_str(templates[i].shape()) +
                           ", expected " + shape_str(templates[0].shape()));
    }
    if (kernels[i].dim() != 2 || kernels[i].rows() != s || kernels[i].cols() != s) {
      throw DimensionError("scaling kernel " + num(i) + " must be " + num(s) + "x" + num(s) + ", got " +
                           shape_str(kernels[i].shape()));
    }
    terms.push_back(kron(templates[i], kernels[i]));
  }
  return s == 1 ? terms.front() : add_n(terms);
}

Tensor polyhistor_lite_weights(const Tensor& task, const std::vector<Tensor>& layer_embs, const HyperNetPair& pair,
                               const std::vector<Tensor>& kernels, std::size_t s, std::size_t d, std::size_t n) {
  if (layer_embs.size() != s) {
    throw DimensionError("expected " + num(s) + " layer embeddings, got " + num(layer_embs.size()));
  }
  const Tensor t = as_row(task, "task embedding");
  std::vector<Tensor> templates;
  templates.reserve(s);
  for (const auto& e : layer_embs) {
    const Tensor joint = concat_cols({t, as_row(e, "layer embedding")});
    templates.push_back(decomposed_weights(joint, pair, d, n));
  }
  return scaled_adapter_weight(templates, kernels, s);
}

MethodBuild build_polyhistor(const MethodConfig& method, const HvtModel& model, std::size_t num_tasks, Method variant,
                             std::uint64_t seed) {
  if (!is_hypernet_method(variant)) {
    throw ConfigError("build_polyhistor does not handle " + std::string(to_string(variant)));
  }
  MethodConfig m = method;
  m.method = variant;
  m.validate();
  if (num_tasks == 0) throw ConfigError("num_tasks must be positive");

  std::vector<Position> positions;
  for (auto p : m.placement) {
    if (p == Position::attention_qv) throw ConfigError("hypernetwork adapters cannot attach at attention_qv");
    positions.push_back(p);
  }
  if (positions.empty()) throw ConfigError("hypernetwork methods need at least one placement");

  TrainableSet ts;
  ParamFactory f(ts, model.materialized(), seed);
  const std::string tag(to_string(variant));
  const std::size_t k = m.task_embedding_k;
  const double hyper_std = 1.0 / std::sqrt(double(k));
  std::vector<Slot> slots;

  if (variant == Method::polyhistor_lite) {
    const auto scales = model.config().scales();
    const std::size_t d = model.config().base_dim;
    const std::size_t n = bottleneck_width(d, m.rho);
    const std::size_t r = m.rank.resolve(n);
    const std::size_t half = k / 2;
    const double emb_std = 1.0 / std::sqrt(double(half));

    std::vector<Tensor> tasks;
    for (std::size_t t = 0; t < num_tasks; ++t) {
      tasks.push_back(f.add(tag + ".task_embedding." + num(t), {half}, ParamFactory::normal(emb_std), "task_embedding", t));
    }
    std::map<Position, HyperNetPair> pairs;
    for (auto pos : positions) {
      const std::string base = tag + "." + pos_name(pos) + ".";
      pairs[pos] = HyperNetPair{f.add(base + "p_hat", {k, d * r}, ParamFactory::normal(hyper_std), "hypernet_p"),
                                f.add(base + "q_hat", {k, 2 * n * r}, hypernet_init(hyper_std, n * r), "hypernet_q"),
                                r};
    }
    for (const auto& l : model.layers()) {
      const std::size_t s = scales[l.block];
      std::vector<Tensor> embs;
      for (std::size_t i = 0; i < s; ++i) {
        embs.push_back(f.add(tag + ".layer_embedding." + num(l.index) + "." + num(i), {half},
                             ParamFactory::normal(emb_std), "layer_embedding"));
      }
      for (auto pos : positions) {
        std::vector<std::vector<Tensor>> kernels(num_tasks);
        for (std::size_t t = 0; t < num_tasks; ++t) {
          for (std::size_t i = 0; i < s; ++i) {
            kernels[t].push_back(f.add(task_prefix(t) + tag + ".layers." + num(l.index) + "." + pos_name(pos) +
                                           ".kernel." + num(i),
                                       {s, s}, ParamFactory::normal(1.0 / double(s)), "scaling_kernel", t));
          }
        }
        const HyperNetPair pair = pairs[pos];
        slots.push_back({l.index, pos, n * s, [=](std::size_t t) {
                           return polyhistor_lite_weights(tasks[t], embs, pair, kernels[t], s, d, n);
                         }});
      }
    }
  } else {
    const double emb_std = 1.0 / std::sqrt(double(k));
    std::vector<Tensor> tasks;
    for (std::size_t t = 0; t < num_tasks; ++t) {
      tasks.push_back(f.add(tag + ".task_embedding." + num(t), {k}, ParamFactory::normal(emb_std), "task_embedding", t));
    }
    for (const auto& l : model.layers()) {
      const std::size_t d = l.width;
      const std::size_t n = bottleneck_width(d, m.rho);
      for (auto pos : positions) {
        const std::string base = tag + ".layers." + num(l.index) + "." + pos_name(pos) + ".";
        if (variant == Method::hyperformer) {
          // Flattened column i*2n + j belongs to the up-projection when j >= n.
          Tensor w_hat = f.add(base + "w_hat", {k, 2 * d * n},
                               [hyper_std, d, n](const Shape& s, Rng& rng) {
                                 Tensor t = randn(s, hyper_std, rng);
                                 auto v = t.mutable_data();
                                 for (std::size_t row = 0; row < s[0]; ++row)
                                   for (std::size_t i = 0; i < d; ++i)
                                     for (std::size_t j = n; j < 2 * n; ++j) v[row * s[1] + i * 2 * n + j] *= kUpScale;
                                 return t;
                               },
                               "hypernet");
          slots.push_back({l.index, pos, n, [=](std::size_t t) { return hyperformer_weights(tasks[t], w_hat, d, n); }});
        } else {
          const std::size_t r = m.rank.resolve(n);
          const HyperNetPair pair{f.add(base + "p_hat", {k, d * r}, ParamFactory::normal(hyper_std), "hypernet_p"),
                                  f.add(base + "q_hat", {k, 2 * n * r}, hypernet_init(hyper_std, n * r), "hypernet_q"),
                                  r};
          slots.push_back({l.index, pos, n, [=](std::size_t t) { return decomposed_weights(tasks[t], pair, d, n); }});
        }
      }
    }
  }

  MethodBuild out;
  out.trainables = std::move(ts);
  if (model.materialized()) {
    const Nonlinearity delta = m.delta;
    out.attachments = AttachmentSet(num_tasks, true, [slots = std::move(slots), delta](std::size_t task) {
      ResolvedAttachments res;
      for (const auto& slot : slots) {
        res.adapters[{slot.layer, slot.pos}] = AdapterWeights::from_composite(slot.composite(task), slot.n, delta);
      }
      return res;
    });
  }
  return out;
}

}  // namespace polyhistor
