#include "polyhistor/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "polyhistor/errors.hpp"
#include "polyhistor/ops.hpp"
#include "polyhistor/random.hpp"

namespace polyhistor {

namespace {

std::string num(std::size_t v) { return std::to_string(v); }

// Flat offsets into a (2w-1)^2 x heads table for every (query, key) token pair of
// an h x w grid, for one head. Offsets beyond the window are clamped to its edge.
std::vector<std::ptrdiff_t> relative_index(std::size_t grid_h, std::size_t grid_w, std::size_t window,
                                           std::size_t heads, std::size_t head, std::size_t prompts) {
  const auto span = static_cast<std::ptrdiff_t>(window) - 1;
  const auto side = 2 * span + 1;
  const std::size_t n = grid_h * grid_w;
  const std::size_t total = prompts + n;
  std::vector<std::ptrdiff_t> idx(total * total, -1);
  for (std::size_t a = 0; a < n; ++a) {
    const auto ya = static_cast<std::ptrdiff_t>(a / grid_w), xa = static_cast<std::ptrdiff_t>(a % grid_w);
    for (std::size_t b = 0; b < n; ++b) {
      const auto yb = static_cast<std::ptrdiff_t>(b / grid_w), xb = static_cast<std::ptrdiff_t>(b % grid_w);
      const auto dy = std::clamp(ya - yb, -span, span) + span;
      const auto dx = std::clamp(xa - xb, -span, span) + span;
      idx[(prompts + a) * total + prompts + b] =
          (dy * side + dx) * static_cast<std::ptrdiff_t>(heads) + static_cast<std::ptrdiff_t>(head);
    }
  }
  return idx;
}

class ParamLookup {
 public:
  ParamLookup(const HvtModel& model, const ResolvedAttachments& att) : model_(model), att_(att) {}

  const Tensor& operator()(const std::string& name) const {
    if (auto it = att_.overrides.find(name); it != att_.overrides.end()) return it->second;
    return model_.parameter(name).value;
  }

 private:
  const HvtModel& model_;
  const ResolvedAttachments& att_;
};

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return b.defined() ? add_bias(y, b) : y;
}

Tensor attention(const Tensor& x1, const LayerInfo& layer, const BackboneConfig& cfg, const ParamLookup& p,
                 const ResolvedAttachments& att, std::size_t grid_h, std::size_t grid_w, std::size_t prompts) {
  const std::size_t d = layer.width;
  const std::size_t heads = layer.heads;
  const std::size_t head_dim = d / heads;
  const std::string& pre = layer.prefix;

  const Tensor qkv = linear(x1, p(pre + "attn.qkv.weight"), p(pre + "attn.qkv.bias"));
  Tensor q = slice_cols(qkv, 0, d);
  Tensor k = slice_cols(qkv, d, d);
  Tensor v = slice_cols(qkv, 2 * d, d);
  if (auto it = att.lora.find(layer.index); it != att.lora.end()) {
    const LoraWeights& lw = it->second;
    q = add(q, scale(matmul(matmul(x1, lw.q_down), lw.q_up), lw.scale));
    v = add(v, scale(matmul(matmul(x1, lw.v_down), lw.v_up), lw.scale));
  }

  const std::size_t tokens = x1.rows();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(q, h * head_dim, head_dim);
    const Tensor kh = slice_cols(k, h * head_dim, head_dim);
    const Tensor vh = slice_cols(v, h * head_dim, head_dim);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (cfg.relative_bias) {
      const auto idx = relative_index(grid_h, grid_w, cfg.window_size, heads, h, prompts);
      scores = add(scores, gather(p(pre + "attn.relative_bias"), idx, {tokens, tokens}));
    }
    outs.push_back(matmul(softmax_rows(scores), vh));
  }
  const Tensor merged = heads == 1 ? outs.front() : concat_cols(outs);
  return linear(merged, p(pre + "attn.proj.weight"), p(pre + "attn.proj.bias"));
}

// Swin-style 2x2 neighbourhood concatenation: x0=(2i,2j), x1=(2i+1,2j), x2=(2i,2j+1), x3=(2i+1,2j+1).
Tensor merge_patches(const Tensor& x, std::size_t grid_h, std::size_t grid_w) {
  const std::size_t oh = grid_h / 2, ow = grid_w / 2;
  std::vector<Tensor> parts;
  for (auto [dy, dx] : {std::pair{0, 0}, std::pair{1, 0}, std::pair{0, 1}, std::pair{1, 1}}) {
    std::vector<std::size_t> rows;
    rows.reserve(oh * ow);
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) rows.push_back((2 * i + dy) * grid_w + 2 * j + dx);
    parts.push_back(gather_rows(x, rows));
  }
  return concat_cols(parts);
}

Tensor embed_patches(const Tensor& image, const BackboneConfig& cfg) {
  const std::size_t p = cfg.patch_size, c = cfg.in_channels;
  const std::size_t gh = cfg.input_height / p, gw = cfg.input_width / p;
  const auto src = image.data();
  std::vector<double> patches(gh * gw * p * p * c);
  std::size_t o = 0;
  for (std::size_t i = 0; i < gh; ++i)
    for (std::size_t j = 0; j < gw; ++j)
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t ch = 0; ch < c; ++ch)
            patches[o++] = src[((i * p + dy) * cfg.input_width + j * p + dx) * c + ch];
  return Tensor({gh * gw, p * p * c}, std::move(patches));
}

}  // namespace

BackboneConfig BackboneConfig::from_preset(std::string_view name) {
  BackboneConfig c;
  c.preset = std::string(name);
  if (name == "swin_tiny") return c;
  if (name == "swin_base") {
    c.base_dim = 128;
    c.depths = {2, 2, 18, 2};
    c.num_heads = {4, 8, 16, 32};
    return c;
  }
  if (name == "pvt_small_like") {
    c.base_dim = 64;
    c.block_dims = {64, 128, 320, 512};
    c.depths = {3, 4, 6, 3};
    c.num_heads = {1, 2, 5, 8};
    return c;
  }
  if (name == "toy") {
    c.base_dim = 8;
    c.depths = {1, 1};
    c.num_heads = {1, 2};
    c.input_height = 32;
    c.input_width = 32;
    c.window_size = 3;
    return c;
  }
  throw ConfigError("unknown backbone preset '" + std::string(name) +
                    "' (expected swin_tiny, swin_base, pvt_small_like, toy)");
}

std::vector<std::string> BackboneConfig::preset_names() { return {"swin_tiny", "swin_base", "pvt_small_like", "toy"}; }

std::size_t BackboneConfig::num_layers() const {
  std::size_t n = 0;
  for (auto d : depths) n += d;
  return n;
}

std::vector<std::size_t> BackboneConfig::dims() const {
  if (!block_dims.empty()) return block_dims;
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < depths.size(); ++b) out.push_back(base_dim << b);
  return out;
}

std::vector<std::size_t> BackboneConfig::scales() const {
  std::vector<std::size_t> out;
  for (auto d : dims()) {
    if (base_dim == 0 || d % base_dim != 0) {
      throw ConfigError("block width " + num(d) + " is not an integer multiple of base_dim " + num(base_dim));
    }
    out.push_back(d / base_dim);
  }
  return out;
}

std::size_t BackboneConfig::mlp_hidden(std::size_t width) const {
  return static_cast<std::size_t>(std::llround(static_cast<double>(width) * mlp_ratio));
}

std::size_t BackboneConfig::block_of_layer(std::size_t layer) const {
  std::size_t acc = 0;
  for (std::size_t b = 0; b < depths.size(); ++b) {
    acc += depths[b];
    if (layer < acc) return b;
  }
  throw ConfigError("layer index " + num(layer) + " out of range");
}

void BackboneConfig::validate() const {
  if (depths.empty()) throw ConfigError("backbone needs at least one block");
  for (auto d : depths)
    if (d == 0) throw ConfigError("every block depth must be >= 1");
  if (base_dim == 0) throw ConfigError("base_dim must be positive");
  if (!block_dims.empty()) {
    if (block_dims.size() != depths.size()) throw ConfigError("block_dims must list one width per block");
    if (block_dims.front() != base_dim) throw ConfigError("block_dims[0] must equal base_dim");
  }
  const auto ds = dims();
  const auto ss = scales();
  for (std::size_t b = 1; b < ss.size(); ++b)
    if (ss[b] == 0) throw ConfigError("block scales must be positive");
  if (num_heads.size() != depths.size()) throw ConfigError("num_heads must list one value per block");
  for (std::size_t b = 0; b < ds.size(); ++b) {
    if (num_heads[b] == 0 || ds[b] % num_heads[b] != 0) {
      throw ConfigError("block " + num(b) + " width " + num(ds[b]) + " is not divisible by " + num(num_heads[b]) +
                        " heads");
    }
  }
  if (patch_size == 0) throw ConfigError("patch_size must be positive");
  if (!(mlp_ratio > 0.0)) throw ConfigError("mlp_ratio must be positive");
  if (window_size == 0) throw ConfigError("window_size must be positive");
  if (in_channels == 0) throw ConfigError("in_channels must be positive");
  const std::size_t stride = patch_size << (depths.size() - 1);
  if (input_height == 0 || input_width == 0 || input_height % stride != 0 || input_width % stride != 0) {
    throw ConfigError("input size " + num(input_height) + "x" + num(input_width) + " must be divisible by " +
                      num(stride) + " (patch_size * 2^(blocks-1))");
  }
}

const NamedParam& HvtModel::parameter(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("backbone has no parameter '" + std::string(name) + "'");
  return params_[it->second];
}

bool HvtModel::has_parameter(std::string_view name) const { return index_.contains(std::string(name)); }

std::size_t HvtModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.count();
  return n;
}

std::uint64_t HvtModel::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params_) {
    if (!p.value.defined()) continue;
    for (double v : p.value.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

void HvtModel::declare(std::string name, Shape shape, NamedParam::Role role) {
  index_.emplace(name, params_.size());
  params_.push_back(NamedParam{std::move(name), std::move(shape), role, Tensor{}});
}

HvtModel build(const BackboneConfig& config, std::uint64_t seed, bool materialize) {
  config.validate();
  using Role = NamedParam::Role;
  HvtModel m;
  m.config_ = config;
  m.materialized_ = materialize;

  const auto dims = config.dims();
  const std::size_t patch_in = config.patch_size * config.patch_size * config.in_channels;
  m.declare("patch_embed.weight", {patch_in, dims[0]}, Role::weight);
  m.declare("patch_embed.bias", {dims[0]}, Role::bias);
  m.declare("patch_embed.norm.weight", {dims[0]}, Role::norm_gain);
  m.declare("patch_embed.norm.bias", {dims[0]}, Role::norm_bias);

  const std::size_t table = (2 * config.window_size - 1) * (2 * config.window_size - 1);
  std::size_t layer = 0;
  for (std::size_t b = 0; b < config.num_blocks(); ++b) {
    const std::size_t d = dims[b];
    const std::size_t hidden = config.mlp_hidden(d);
    for (std::size_t i = 0; i < config.depths[b]; ++i, ++layer) {
      const std::string pre = "layers." + num(layer) + ".";
      m.layers_.push_back(LayerInfo{layer, b, d, config.num_heads[b], hidden, pre});
      m.declare(pre + "norm1.weight", {d}, Role::norm_gain);
      m.declare(pre + "norm1.bias", {d}, Role::norm_bias);
      m.declare(pre + "attn.qkv.weight", {d, 3 * d}, Role::weight);
      m.declare(pre + "attn.qkv.bias", {3 * d}, Role::bias);
      if (config.relative_bias) m.declare(pre + "attn.relative_bias", {table, config.num_heads[b]}, Role::relative_bias);
      m.declare(pre + "attn.proj.weight", {d, d}, Role::weight);
      m.declare(pre + "attn.proj.bias", {d}, Role::bias);
      m.declare(pre + "norm2.weight", {d}, Role::norm_gain);
      m.declare(pre + "norm2.bias", {d}, Role::norm_bias);
      m.declare(pre + "mlp.fc1.weight", {d, hidden}, Role::weight);
      m.declare(pre + "mlp.fc1.bias", {hidden}, Role::bias);
      m.declare(pre + "mlp.fc2.weight", {hidden, d}, Role::weight);
      m.declare(pre + "mlp.fc2.bias", {d}, Role::bias);
    }
    const std::string stage = "stages." + num(b) + ".norm.";
    m.declare(stage + "weight", {d}, Role::norm_gain);
    m.declare(stage + "bias", {d}, Role::norm_bias);
    if (b + 1 < config.num_blocks()) {
      const std::string pre = "merges." + num(b) + ".";
      m.declare(pre + "norm.weight", {4 * d}, Role::norm_gain);
      m.declare(pre + "norm.bias", {4 * d}, Role::norm_bias);
      m.declare(pre + "reduction.weight", {4 * d, dims[b + 1]}, Role::weight);
    }
  }

  if (materialize) {
    Rng rng(seed);
    for (auto& p : m.params_) {
      switch (p.role) {
        case Role::weight: p.value = randn(p.shape, 1.0 / std::sqrt(static_cast<double>(p.shape[0])), rng); break;
        case Role::bias:
        case Role::relative_bias: p.value = randn(p.shape, 0.02, rng); break;
        case Role::norm_gain: p.value = Tensor::ones(p.shape); break;
        case Role::norm_bias: p.value = Tensor::zeros(p.shape); break;
      }
    }
  }
  return m;
}

std::vector<InsertionPoint> insertion_points(const HvtModel& model) {
  const auto scales = model.config().scales();
  std::vector<InsertionPoint> out;
  for (const auto& l : model.layers()) {
    for (auto pos : {Position::post_attention, Position::post_mlp, Position::attention_qv}) {
      out.push_back(InsertionPoint{l.index, pos, l.width, scales[l.block]});
    }
  }
  return out;
}

FeaturePyramid forward(const HvtModel& model, const Tensor& image, const ResolvedAttachments& att) {
  const auto& cfg = model.config();
  if (!model.materialized()) throw ConfigError("forward on a shape-only backbone");
  const Shape expected{cfg.input_height, cfg.input_width, cfg.in_channels};
  if (image.shape() != expected) {
    throw DimensionError("image shape " + shape_str(image.shape()) + " does not match configured " +
                         shape_str(expected));
  }
  for (const auto& [key, w] : att.adapters) {
    const auto& layers = model.layers();
    if (key.first >= layers.size()) throw DimensionError("adapter attached to missing layer " + num(key.first));
    if (w.width() != layers[key.first].width) {
      throw DimensionError("adapter width " + num(w.width()) + " does not match layer " + num(key.first) +
                           " width " + num(layers[key.first].width));
    }
  }
  for (const auto& [layer, prompts] : att.prompts) {
    if (layer >= model.layers().size() || prompts.cols() != model.layers()[layer].width) {
      throw DimensionError("prompt tokens do not match layer " + num(layer));
    }
  }

  const ParamLookup p(model, att);
  std::size_t grid_h = cfg.input_height / cfg.patch_size;
  std::size_t grid_w = cfg.input_width / cfg.patch_size;

  Tensor x = linear(embed_patches(image, cfg), p("patch_embed.weight"), p("patch_embed.bias"));
  x = layer_norm(x, p("patch_embed.norm.weight"), p("patch_embed.norm.bias"));

  FeaturePyramid pyramid;
  std::size_t layer_index = 0;
  for (std::size_t b = 0; b < cfg.num_blocks(); ++b) {
    std::size_t prompt_rows = 0;
    for (std::size_t i = 0; i < cfg.depths[b]; ++i, ++layer_index) {
      const LayerInfo& layer = model.layers()[layer_index];
      if (auto it = att.prompts.find(layer_index); it != att.prompts.end()) {
        const Tensor image_tokens = prompt_rows ? slice_rows(x, prompt_rows, x.rows() - prompt_rows) : x;
        x = concat_rows({it->second, image_tokens});
        prompt_rows = it->second.rows();
      }
      const std::string& pre = layer.prefix;

      const Tensor x1 = layer_norm(x, p(pre + "norm1.weight"), p(pre + "norm1.bias"));
      Tensor attn = attention(x1, layer, cfg, p, att, grid_h, grid_w, prompt_rows);
      if (auto it = att.adapters.find({layer_index, Position::post_attention}); it != att.adapters.end()) {
        attn = adapter_forward(attn, it->second);
      }
      x = add(x, attn);

      const Tensor x2 = layer_norm(x, p(pre + "norm2.weight"), p(pre + "norm2.bias"));
      Tensor mlp = gelu(linear(x2, p(pre + "mlp.fc1.weight"), p(pre + "mlp.fc1.bias")));
      mlp = linear(mlp, p(pre + "mlp.fc2.weight"), p(pre + "mlp.fc2.bias"));
      if (auto it = att.adapters.find({layer_index, Position::post_mlp}); it != att.adapters.end()) {
        mlp = adapter_forward(mlp, it->second);
      }
      x = add(x, mlp);
    }
    if (prompt_rows) x = slice_rows(x, prompt_rows, x.rows() - prompt_rows);

    const std::string stage = "stages." + num(b) + ".norm.";
    pyramid.push_back(FeatureMap{layer_norm(x, p(stage + "weight"), p(stage + "bias")), grid_h, grid_w});

    if (b + 1 < cfg.num_blocks()) {
      const std::string pre = "merges." + num(b) + ".";
      x = merge_patches(x, grid_h, grid_w);
      x = layer_norm(x, p(pre + "norm.weight"), p(pre + "norm.bias"));
      x = matmul(x, p(pre + "reduction.weight"));
      grid_h /= 2;
      grid_w /= 2;
    }
  }
  return pyramid;
}

}  // namespace polyhistor
