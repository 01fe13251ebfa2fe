#include "polyhistor/multitask.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "json.hpp"
#include "polyhistor/autograd.hpp"
#include "polyhistor/errors.hpp"
#include "polyhistor/ops.hpp"
#include "polyhistor/random.hpp"

namespace polyhistor {

using detail::accumulate;
using detail::make_result;

namespace {

std::string num(std::size_t v) { return std::to_string(v); }

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::pair<E, std::string_view> (&table)[N], const char* what) {
  std::string known;
  for (const auto& [e, name] : table) {
    if (name == s) return e;
    known += (known.empty() ? "" : ", ") + std::string(name);
  }
  throw ConfigError("unknown " + std::string(what) + " '" + std::string(s) + "' (expected " + known + ")");
}

template <typename E, std::size_t N>
std::string_view enum_name(E e, const std::pair<E, std::string_view> (&table)[N]) {
  for (const auto& [v, name] : table)
    if (v == e) return name;
  return "?";
}

constexpr std::pair<LossKind, std::string_view> kLosses[] = {
    {LossKind::cross_entropy, "cross_entropy"}, {LossKind::l1, "l1"}, {LossKind::balanced_bce, "balanced_bce"}};
constexpr std::pair<Direction, std::string_view> kDirections[] = {{Direction::higher_better, "higher_better"},
                                                                  {Direction::lower_better, "lower_better"}};
constexpr std::pair<LabelSource, std::string_view> kSources[] = {{LabelSource::shape_class, "shape_class"},
                                                                 {LabelSource::shape_part, "shape_part"},
                                                                 {LabelSource::foreground, "foreground"},
                                                                 {LabelSource::surface_normal, "surface_normal"}};
constexpr std::pair<Optimizer, std::string_view> kOptimizers[] = {{Optimizer::sgd, "sgd"}, {Optimizer::adam, "adam"}};

// Views any tensor whose last axis is channels as pixels x channels.
Tensor as_pixels(const Tensor& pred) {
  if (pred.dim() < 1) throw DimensionError("prediction must have a channel axis");
  const std::size_t c = pred.shape().back();
  return pred.dim() == 2 ? pred : reshape(pred, {pred.size() / c, c});
}

double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// ---- synthetic scenes ----

struct Shape2d {
  std::size_t cls;  // 1..3
  double cx, cy, radius, height;
};

struct Scene {
  double tilt_x, tilt_y;
  std::vector<Shape2d> shapes;
  double brightness;
};

// 0 outside, otherwise 1 (core) or 2 (rim).
std::size_t shape_part(const Shape2d& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  bool inside = false;
  switch (s.cls) {
    case 1: inside = std::hypot(dx, dy) <= s.radius; break;
    case 2: inside = std::max(std::abs(dx), std::abs(dy)) <= 0.85 * s.radius; break;
    default: {
      const double t = dy / s.radius;  // apex at t = -1, base at t = 1
      inside = t >= -1.0 && t <= 1.0 && std::abs(dx) <= s.radius * (t + 1.0) / 2.0;
    }
  }
  if (!inside) return 0;
  return std::hypot(dx, dy) < 0.4 * s.radius ? 1 : 2;
}

struct PointLabel {
  std::size_t cls = 0;
  std::size_t part = 0;
  double z = 0.0;
  double normal[3] = {0.0, 0.0, 1.0};
};

PointLabel evaluate_scene(const Scene& sc, double x, double y) {
  PointLabel p;
  for (const auto& s : sc.shapes) {  // later shapes occlude earlier ones
    const std::size_t part = shape_part(s, x, y);
    if (part) {
      p.cls = s.cls;
      p.part = part;
    }
  }
  double z = sc.tilt_x * x + sc.tilt_y * y, gx = sc.tilt_x, gy = sc.tilt_y;
  for (const auto& s : sc.shapes) {
    const double sigma = 0.5 * s.radius;
    const double dx = x - s.cx, dy = y - s.cy;
    const double g = s.height * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
    z += g;
    gx += -g * dx / (sigma * sigma);
    gy += -g * dy / (sigma * sigma);
  }
  p.z = z;
  const double norm = std::sqrt(gx * gx + gy * gy + 1.0);
  p.normal[0] = -gx / norm;
  p.normal[1] = -gy / norm;
  p.normal[2] = 1.0 / norm;
  return p;
}

Sample render(Rng& rng, std::size_t size, std::size_t stride, const std::vector<TaskSpec>& tasks) {
  Scene sc;
  sc.tilt_x = rng.uniform(-0.3, 0.3);
  sc.tilt_y = rng.uniform(-0.3, 0.3);
  sc.brightness = rng.uniform(-0.1, 0.1);
  const std::size_t count = 1 + rng.index(3);
  for (std::size_t i = 0; i < count; ++i) {
    sc.shapes.push_back(Shape2d{1 + rng.index(3), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.15, 0.3),
                                rng.uniform(0.3, 0.6)});
  }
  static constexpr double kColors[4][2] = {{0.3, 0.3}, {0.9, 0.2}, {0.2, 0.9}, {0.9, 0.9}};

  Sample s;
  std::vector<double> img(size * size * 3);
  for (std::size_t py = 0; py < size; ++py)
    for (std::size_t px = 0; px < size; ++px) {
      const PointLabel p = evaluate_scene(sc, (px + 0.5) / size, (py + 0.5) / size);
      double* o = img.data() + (py * size + px) * 3;
      o[0] = 2.0 * (kColors[p.cls][0] + sc.brightness) - 1.0 + rng.normal(0.0, 0.05);
      o[1] = 2.0 * (kColors[p.cls][1] + sc.brightness) - 1.0 + rng.normal(0.0, 0.05);
      o[2] = 2.0 * p.z - 1.0 + rng.normal(0.0, 0.02);
    }
  s.image = Tensor({size, size, 3}, std::move(img));

  const std::size_t gh = size / stride;
  std::vector<PointLabel> points;
  for (std::size_t i = 0; i < gh; ++i)
    for (std::size_t j = 0; j < gh; ++j)
      points.push_back(evaluate_scene(sc, (j * stride + stride / 2.0) / size, (i * stride + stride / 2.0) / size));

  for (const auto& task : tasks) {
    TaskTarget t;
    switch (task.source) {
      case LabelSource::shape_class:
        for (const auto& p : points) t.classes.push_back(p.cls);
        break;
      case LabelSource::shape_part:
        for (const auto& p : points) t.classes.push_back(p.part);
        break;
      case LabelSource::foreground:
        for (const auto& p : points) t.binary.push_back(p.cls ? 1.0 : 0.0);
        break;
      case LabelSource::surface_normal: {
        std::vector<double> v;
        for (const auto& p : points) v.insert(v.end(), p.normal, p.normal + 3);
        t.values = Tensor({points.size(), 3}, std::move(v));
        break;
      }
    }
    s.targets.push_back(std::move(t));
  }
  return s;
}

// ---- metrics ----

struct MetricAccumulator {
  const TaskSpec* spec = nullptr;
  std::vector<double> inter, uni;
  double angle_sum = 0.0;
  std::size_t angle_count = 0;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;

  void add_iou(std::size_t pred, std::size_t truth) {
    if (pred == truth) {
      inter[pred] += 1;
      uni[pred] += 1;
    } else {
      uni[pred] += 1;
      uni[truth] += 1;
    }
  }

  void add(const Tensor& pred, const TaskTarget& target) {
    const Tensor px = as_pixels(pred);
    const std::size_t c = px.cols();
    const auto v = px.data();
    switch (spec->loss) {
      case LossKind::cross_entropy:
        if (inter.empty()) inter.assign(c, 0.0), uni.assign(c, 0.0);
        for (std::size_t i = 0; i < px.rows(); ++i) {
          const auto* row = v.data() + i * c;
          add_iou(static_cast<std::size_t>(std::max_element(row, row + c) - row), target.classes[i]);
        }
        break;
      case LossKind::balanced_bce:
        if (inter.empty()) inter.assign(2, 0.0), uni.assign(2, 0.0);
        for (std::size_t i = 0; i < px.rows(); ++i) add_iou(v[i] > 0.0 ? 1 : 0, target.binary[i] > 0.5 ? 1 : 0);
        break;
      case LossKind::l1: {
        const auto t = target.values.data();
        for (std::size_t i = 0; i < px.rows(); ++i) {
          double dot = 0.0, np = 0.0, nt = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            dot += v[i * c + j] * t[i * c + j];
            np += v[i * c + j] * v[i * c + j];
            nt += t[i * c + j] * t[i * c + j];
          }
          const double cosang = np > 0 && nt > 0 ? std::clamp(dot / std::sqrt(np * nt), -1.0, 1.0) : 0.0;
          angle_sum += std::acos(cosang) * 180.0 / std::numbers::pi;
          ++angle_count;
        }
        break;
      }
    }
  }

  double metric() const {
    if (spec->loss == LossKind::l1) return angle_count ? angle_sum / angle_count : 0.0;
    double acc = 0.0;
    std::size_t classes = 0;
    for (std::size_t k = 0; k < uni.size(); ++k) {
      if (uni[k] > 0) {
        acc += inter[k] / uni[k];
        ++classes;
      }
    }
    return classes ? 100.0 * acc / classes : 0.0;
  }
};

}  // namespace

LossKind parse_loss(std::string_view s) { return parse_enum(s, kLosses, "loss"); }
std::string_view to_string(LossKind k) { return enum_name(k, kLosses); }
Direction parse_direction(std::string_view s) { return parse_enum(s, kDirections, "direction"); }
std::string_view to_string(Direction d) { return enum_name(d, kDirections); }
LabelSource parse_label_source(std::string_view s) { return parse_enum(s, kSources, "label source"); }
std::string_view to_string(LabelSource s) { return enum_name(s, kSources); }
Optimizer parse_optimizer(std::string_view s) { return parse_enum(s, kOptimizers, "optimizer"); }
std::string_view to_string(Optimizer o) { return enum_name(o, kOptimizers); }

void TaskSpec::validate() const {
  const std::string who = "task '" + name + "'";
  if (name.empty()) throw ConfigError("task name must not be empty");
  if (out_channels == 0) throw ConfigError(who + ": out_channels must be positive");
  const Direction expected = loss == LossKind::l1 ? Direction::lower_better : Direction::higher_better;
  if (direction != expected) {
    throw ConfigError(who + ": direction " + std::string(to_string(direction)) + " does not match loss " +
                      std::string(to_string(loss)));
  }
  switch (source) {
    case LabelSource::shape_class:
    case LabelSource::shape_part: {
      const std::size_t need = source == LabelSource::shape_class ? 4 : 3;
      if (loss != LossKind::cross_entropy || out_channels < need) {
        throw ConfigError(who + ": label source " + std::string(to_string(source)) + " needs cross_entropy with >= " +
                          num(need) + " channels");
      }
      break;
    }
    case LabelSource::foreground:
      if (loss != LossKind::balanced_bce || out_channels != 1) {
        throw ConfigError(who + ": foreground labels need balanced_bce with 1 channel");
      }
      break;
    case LabelSource::surface_normal:
      if (loss != LossKind::l1 || out_channels != 3) throw ConfigError(who + ": surface normals need l1 with 3 channels");
      break;
  }
}

std::vector<TaskSpec> synthetic_tasks() {
  return {
      {"shapes", LossKind::cross_entropy, 4, Direction::higher_better, LabelSource::shape_class},
      {"parts", LossKind::cross_entropy, 3, Direction::higher_better, LabelSource::shape_part},
      {"foreground", LossKind::balanced_bce, 1, Direction::higher_better, LabelSource::foreground},
      {"normals", LossKind::l1, 3, Direction::lower_better, LabelSource::surface_normal},
  };
}

std::vector<std::size_t> reference_head_channels() { return {21, 7, 1, 3}; }

DecoderHead make_head(const BackboneConfig& config, std::size_t out_channels, std::size_t embed_dim, ParamFactory& f,
                      std::size_t task) {
  if (embed_dim == 0 || out_channels == 0) throw ConfigError("decoder embed_dim and out_channels must be positive");
  const auto dims = config.dims();
  const std::string prefix = "head" + num(task) + ".";
  auto add = [&](const std::string& name, Shape shape, const ParamFactory::Init& init) {
    return f.add(prefix + name, std::move(shape), init, "head", task, Partition::head);
  };
  DecoderHead h;
  h.embed_dim = embed_dim;
  h.out_channels = out_channels;
  for (std::size_t b = 0; b < dims.size(); ++b) {
    h.proj_weight.push_back(
        add("proj." + num(b) + ".weight", {dims[b], embed_dim}, ParamFactory::normal(1.0 / std::sqrt(double(dims[b])))));
    h.proj_bias.push_back(add("proj." + num(b) + ".bias", {embed_dim}, ParamFactory::zeros()));
  }
  const std::size_t fused_in = dims.size() * embed_dim;
  h.fuse_weight = add("fuse.weight", {fused_in, embed_dim}, ParamFactory::normal(1.0 / std::sqrt(double(fused_in))));
  h.fuse_bias = add("fuse.bias", {embed_dim}, ParamFactory::zeros());
  h.pred_weight = add("pred.weight", {embed_dim, out_channels}, ParamFactory::normal(1.0 / std::sqrt(double(embed_dim))));
  h.pred_bias = add("pred.bias", {out_channels}, ParamFactory::zeros());
  return h;
}

Tensor bilinear_matrix(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w) {
  auto axis = [](std::size_t in, std::size_t out) {
    std::vector<std::vector<std::pair<std::size_t, double>>> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double src = std::max(0.0, (o + 0.5) * scale - 0.5);
      const auto i0 = std::min(static_cast<std::size_t>(src), in - 1);
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      const double lambda = src - static_cast<double>(i0);
      taps[o].emplace_back(i0, 1.0 - lambda);
      taps[o].emplace_back(i1, lambda);
    }
    return taps;
  };
  const auto ty = axis(in_h, out_h);
  const auto tx = axis(in_w, out_w);
  std::vector<double> m(out_h * out_w * in_h * in_w, 0.0);
  for (std::size_t oy = 0; oy < out_h; ++oy)
    for (std::size_t ox = 0; ox < out_w; ++ox)
      for (const auto& [iy, wy] : ty[oy])
        for (const auto& [ix, wx] : tx[ox]) m[(oy * out_w + ox) * in_h * in_w + iy * in_w + ix] += wy * wx;
  return Tensor({out_h * out_w, in_h * in_w}, std::move(m));
}

Tensor decode(const FeaturePyramid& pyramid, const DecoderHead& head) {
  if (pyramid.size() != head.proj_weight.size()) {
    throw DimensionError("decoder expects " + num(head.proj_weight.size()) + " pyramid stages, got " +
                         num(pyramid.size()));
  }
  const std::size_t h1 = pyramid[0].height, w1 = pyramid[0].width;
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < pyramid.size(); ++b) {
    Tensor e = add_bias(matmul(pyramid[b].tokens, head.proj_weight[b]), head.proj_bias[b]);
    if (pyramid[b].height != h1 || pyramid[b].width != w1) {
      e = matmul(bilinear_matrix(pyramid[b].height, pyramid[b].width, h1, w1), e);
    }
    parts.push_back(e);
  }
  const Tensor joined = parts.size() == 1 ? parts.front() : concat_cols(parts);
  const Tensor fused = add_bias(matmul(joined, head.fuse_weight), head.fuse_bias);
  const Tensor pred = add_bias(matmul(fused, head.pred_weight), head.pred_bias);
  return reshape(pred, {h1, w1, head.out_channels});
}

std::size_t TaskTarget::pixels() const {
  if (!classes.empty()) return classes.size();
  if (!binary.empty()) return binary.size();
  return values.defined() ? values.rows() : 0;
}

Tensor cross_entropy_loss(const Tensor& pred, const std::vector<std::size_t>& target) {
  const Tensor x = as_pixels(pred);
  const std::size_t p = x.rows(), c = x.cols();
  if (target.empty()) throw DimensionError("cross_entropy_loss: empty target");
  if (target.size() != p) {
    throw DimensionError("cross_entropy_loss: " + num(p) + " predictions but " + num(target.size()) + " targets");
  }
  std::vector<double> probs(p * c);
  double loss = 0.0;
  const auto v = x.data();
  for (std::size_t i = 0; i < p; ++i) {
    if (target[i] >= c) throw DimensionError("class index " + num(target[i]) + " out of range for " + num(c) + " classes");
    const double* row = v.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (probs[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    loss += -(row[target[i]] - mx - std::log(z));
  }
  return make_result({1}, {loss / static_cast<double>(p)}, {x},
                     [x, probs = std::move(probs), target, p, c](std::span<const double>, std::span<const double> g) {
                       std::vector<double> gx(probs);
                       for (std::size_t i = 0; i < p; ++i) gx[i * c + target[i]] -= 1.0;
                       const double s = g[0] / static_cast<double>(p);
                       for (auto& val : gx) val *= s;
                       accumulate(x, gx);
                     });
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  const Tensor x = as_pixels(pred);
  if (target.size() == 0) throw DimensionError("l1_loss: empty target");
  if (target.size() != x.size()) {
    throw DimensionError("l1_loss: prediction " + shape_str(pred.shape()) + " and target " + shape_str(target.shape()) +
                         " differ in size");
  }
  const auto v = x.data();
  const auto t = target.data();
  double loss = 0.0;
  std::vector<double> sign(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double diff = v[i] - t[i];
    loss += std::abs(diff);
    sign[i] = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
  }
  const double n = static_cast<double>(v.size());
  return make_result({1}, {loss / n}, {x}, [x, sign = std::move(sign), n](std::span<const double>, std::span<const double> g) {
    std::vector<double> gx(sign);
    for (auto& val : gx) val *= g[0] / n;
    accumulate(x, gx);
  });
}

Tensor balanced_bce_loss(const Tensor& pred, const std::vector<double>& target) {
  const Tensor x = as_pixels(pred);
  if (target.empty()) throw DimensionError("balanced_bce_loss: empty target");
  if (x.cols() != 1 || x.rows() != target.size()) {
    throw DimensionError("balanced_bce_loss: prediction " + shape_str(pred.shape()) + " does not match " +
                         num(target.size()) + " binary targets");
  }
  const double n = static_cast<double>(target.size());
  double pos = 0.0;
  for (double y : target) {
    if (y != 0.0 && y != 1.0) throw DimensionError("balanced_bce_loss: targets must be 0 or 1");
    pos += y;
  }
  const double w_pos = (n - pos) / n, w_neg = pos / n;
  const auto v = x.data();
  double loss = 0.0;
  std::vector<double> gx(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] == 1.0) {
      loss -= w_pos * log_sigmoid(v[i]);
      gx[i] = -w_pos * (1.0 - sigmoid(v[i])) / n;
    } else {
      loss -= w_neg * log_sigmoid(-v[i]);
      gx[i] = w_neg * sigmoid(v[i]) / n;
    }
  }
  return make_result({1}, {loss / n}, {x}, [x, gx = std::move(gx)](std::span<const double>, std::span<const double> g) {
    std::vector<double> out(gx);
    for (auto& val : out) val *= g[0];
    accumulate(x, out);
  });
}

Tensor task_loss(const Tensor& pred, const TaskTarget& target, LossKind kind) {
  switch (kind) {
    case LossKind::cross_entropy: return cross_entropy_loss(pred, target.classes);
    case LossKind::l1: return l1_loss(pred, target.values);
    case LossKind::balanced_bce: return balanced_bce_loss(pred, target.binary);
  }
  throw ConfigError("unknown loss kind");
}

double delta_up(const std::vector<double>& results, const std::vector<double>& baseline,
                const std::vector<Direction>& directions) {
  if (results.empty() || results.size() != baseline.size() || results.size() != directions.size()) {
    throw DimensionError("delta_up needs equally many results, baselines and directions (got " + num(results.size()) +
                         ", " + num(baseline.size()) + ", " + num(directions.size()) + ")");
  }
  double acc = 0.0;
  for (std::size_t t = 0; t < results.size(); ++t) {
    if (baseline[t] == 0.0) throw ConfigError("delta_up: baseline metric for task " + num(t) + " is zero");
    const double sigma = directions[t] == Direction::higher_better ? 1.0 : -1.0;
    acc += sigma * (results[t] - baseline[t]) / baseline[t];
  }
  return 100.0 * acc / static_cast<double>(results.size());
}

double delta_up(const RunResult& result, const RunResult& baseline) {
  if (result.per_task.size() != baseline.per_task.size()) {
    throw DimensionError("delta_up: result has " + num(result.per_task.size()) + " tasks, baseline " +
                         num(baseline.per_task.size()));
  }
  for (std::size_t t = 0; t < result.per_task.size(); ++t) {
    if (result.per_task[t].name != baseline.per_task[t].name) {
      throw ConfigError("delta_up: task " + num(t) + " is '" + result.per_task[t].name + "' in results but '" +
                        baseline.per_task[t].name + "' in baseline");
    }
  }
  return delta_up(result.metrics(), baseline.metrics(), result.directions());
}

std::vector<double> RunResult::metrics() const {
  std::vector<double> out;
  for (const auto& t : per_task) out.push_back(t.metric);
  return out;
}

std::vector<Direction> RunResult::directions() const {
  std::vector<Direction> out;
  for (const auto& t : per_task) out.push_back(t.direction);
  return out;
}

std::string RunResult::to_json() const {
  nlohmann::ordered_json j;
  j["method"] = method;
  j["seed"] = seed;
  j["per_task"] = nlohmann::ordered_json::array();
  for (const auto& t : per_task) {
    j["per_task"].push_back({{"name", t.name},
                             {"metric", t.metric},
                             {"direction", std::string(to_string(t.direction))},
                             {"val_loss", t.val_loss}});
  }
  j["delta_up"] = delta_up ? nlohmann::ordered_json(*delta_up) : nlohmann::ordered_json(nullptr);
  return j.dump(2) + "\n";
}

RunResult RunResult::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("run result is not valid JSON: ") + e.what());
  }
  auto fail = [](const std::string& msg) -> void { throw ConfigError("run result: " + msg); };
  if (!j.is_object()) fail("top level must be an object");
  for (const auto& [key, _] : j.items())
    if (key != "method" && key != "seed" && key != "per_task" && key != "delta_up") fail("unknown key '" + key + "'");
  if (!j.contains("per_task") || !j["per_task"].is_array() || j["per_task"].empty()) {
    fail("'per_task' must be a non-empty array");
  }
  RunResult r;
  if (j.contains("method")) {
    if (!j["method"].is_string()) fail("'method' must be a string");
    r.method = j["method"].get<std::string>();
  }
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned()) fail("'seed' must be a non-negative integer");
    r.seed = j["seed"].get<std::uint64_t>();
  }
  std::size_t i = 0;
  for (const auto& t : j["per_task"]) {
    const std::string where = "per_task[" + num(i++) + "]";
    if (!t.is_object()) fail(where + " must be an object");
    for (const auto& [key, _] : t.items())
      if (key != "name" && key != "metric" && key != "direction" && key != "val_loss") {
        fail(where + ": unknown key '" + key + "'");
      }
    if (!t.contains("name") || !t["name"].is_string()) fail(where + ".name must be a string");
    if (!t.contains("metric") || !t["metric"].is_number()) fail(where + ".metric must be a number");
    TaskResult tr;
    tr.name = t["name"].get<std::string>();
    tr.metric = t["metric"].get<double>();
    if (t.contains("direction")) {
      if (!t["direction"].is_string()) fail(where + ".direction must be a string");
      tr.direction = parse_direction(t["direction"].get<std::string>());
    }
    if (t.contains("val_loss")) {
      if (!t["val_loss"].is_number()) fail(where + ".val_loss must be a number");
      tr.val_loss = t["val_loss"].get<double>();
    }
    r.per_task.push_back(tr);
  }
  if (j.contains("delta_up") && !j["delta_up"].is_null()) {
    if (!j["delta_up"].is_number()) fail("'delta_up' must be a number or null");
    r.delta_up = j["delta_up"].get<double>();
  }
  return r;
}

Dataset synth_tasks(std::uint64_t seed, std::size_t size, std::size_t stride, const std::vector<TaskSpec>& tasks,
                    std::size_t num_train, std::size_t num_val) {
  if (size == 0 || stride == 0 || size % stride != 0) {
    throw ConfigError("image size " + num(size) + " must be a positive multiple of the label stride " + num(stride));
  }
  for (const auto& t : tasks) t.validate();
  Dataset d;
  d.label_height = d.label_width = size / stride;
  Rng train_rng(seed * 2 + 1), val_rng(seed * 2 + 2);
  for (std::size_t i = 0; i < num_train; ++i) d.train.push_back(render(train_rng, size, stride, tasks));
  for (std::size_t i = 0; i < num_val; ++i) d.val.push_back(render(val_rng, size, stride, tasks));
  return d;
}

std::vector<TaskResult> evaluate(const HvtModel& model, const AttachmentSet& attachments,
                                 const std::vector<DecoderHead>& heads, const std::vector<TaskSpec>& tasks,
                                 const std::vector<Sample>& samples) {
  NoGradGuard guard;
  std::vector<MetricAccumulator> acc(tasks.size());
  for (std::size_t t = 0; t < tasks.size(); ++t) acc[t].spec = &tasks[t];
  std::vector<ResolvedAttachments> resolved;
  for (std::size_t t = 0; t < (attachments.task_specific() ? tasks.size() : 1); ++t) {
    resolved.push_back(attachments.resolve(t));
  }
  for (const auto& s : samples) {
    FeaturePyramid shared;
    if (!attachments.task_specific()) shared = forward(model, s.image, resolved[0]);
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const FeaturePyramid pyr = attachments.task_specific() ? forward(model, s.image, resolved[t]) : shared;
      const Tensor pred = decode(pyr, heads[t]);
      acc[t].loss_sum += task_loss(pred, s.targets[t], tasks[t].loss).item();
      ++acc[t].loss_count;
      acc[t].add(pred, s.targets[t]);
    }
  }
  std::vector<TaskResult> out;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    out.push_back(TaskResult{tasks[t].name, acc[t].metric(), tasks[t].direction,
                             acc[t].loss_count ? acc[t].loss_sum / acc[t].loss_count : 0.0});
  }
  return out;
}

std::vector<ResolvedAttachments> resolve_all(const AttachmentSet& attachments, std::size_t num_tasks) {
  std::vector<ResolvedAttachments> out;
  for (std::size_t t = 0; t < (attachments.task_specific() ? num_tasks : 1); ++t) out.push_back(attachments.resolve(t));
  return out;
}

std::vector<Tensor> task_losses(const HvtModel& model, const std::vector<ResolvedAttachments>& resolved,
                                const std::vector<DecoderHead>& heads, const std::vector<TaskSpec>& tasks,
                                const Sample& sample) {
  const bool per_task = resolved.size() > 1;
  if (resolved.empty() || (per_task && resolved.size() != tasks.size()) || heads.size() != tasks.size() ||
      sample.targets.size() != tasks.size()) {
    throw DimensionError("task_losses: " + num(tasks.size()) + " tasks, " + num(heads.size()) + " heads, " +
                         num(resolved.size()) + " attachment sets, " + num(sample.targets.size()) + " targets");
  }
  FeaturePyramid shared;
  if (!per_task) shared = forward(model, sample.image, resolved[0]);
  std::vector<Tensor> terms;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const FeaturePyramid pyr = per_task ? forward(model, sample.image, resolved[t]) : shared;
    terms.push_back(task_loss(decode(pyr, heads[t]), sample.targets[t], tasks[t].loss));
  }
  return terms;
}

Tensor multitask_loss(const HvtModel& model, const std::vector<ResolvedAttachments>& resolved,
                      const std::vector<DecoderHead>& heads, const std::vector<TaskSpec>& tasks, const Sample& sample) {
  return add_n(task_losses(model, resolved, heads, tasks, sample));
}

TrainReport train(const HvtModel& model, const MethodBuild& method, const std::vector<TaskSpec>& tasks,
                  const Dataset& data, const TrainConfig& cfg, std::string method_name) {
  if (tasks.empty()) throw ConfigError("train needs at least one task");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(cfg.lr > 0.0)) throw ConfigError("lr must be positive");
  if (data.train.empty()) throw ConfigError("training split is empty");
  if (method.attachments.num_tasks() != 0 && method.attachments.num_tasks() != tasks.size()) {
    throw ConfigError("method was built for " + num(method.attachments.num_tasks()) + " tasks but " +
                      num(tasks.size()) + " were given");
  }
  for (const auto& t : tasks) t.validate();

  TrainReport report;
  report.frozen_checksum_before = model.checksum();

  TrainableSet head_set;
  ParamFactory factory(head_set, true, cfg.seed ^ 0x6865616473ULL);
  std::vector<DecoderHead> heads;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    heads.push_back(make_head(model.config(), tasks[t].out_channels, cfg.embed_dim, factory, t));
  }
  std::vector<Tensor> params = method.trainables.tensors();
  for (const auto& h : head_set.tensors()) params.push_back(h);
  report.trainable_encoder = method.trainables.count(Partition::encoder);
  report.trainable_head = head_set.total();

  std::vector<std::vector<double>> m1, m2;
  if (cfg.optimizer == Optimizer::adam) {
    for (const auto& p : params) {
      m1.emplace_back(p.size(), 0.0);
      m2.emplace_back(p.size(), 0.0);
    }
  }

  const std::size_t steps_per_epoch = (data.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = std::max<std::size_t>(1, cfg.epochs * steps_per_epoch);
  std::vector<std::size_t> order(data.train.size());
  std::size_t step = 0;
  Rng shuffle_rng(cfg.seed ^ 0x73687566ULL);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      Tensor loss;
      try {
        const auto resolved = resolve_all(method.attachments, tasks.size());
        std::vector<Tensor> terms;
        for (std::size_t b = begin; b < end; ++b) {
          terms.push_back(multitask_loss(model, resolved, heads, tasks, data.train[order[b]]));
        }
        loss = scale(add_n(terms), 1.0 / static_cast<double>(end - begin));
      } catch (const NumericalError& e) {
        throw NumericalError(method_name + ": non-finite values at epoch " + num(epoch) + ", step " + num(step) + " (" +
                             e.what() + ")");
      }
      backward(loss);
      epoch_loss += loss.item() * static_cast<double>(end - begin);

      const double lr = cfg.lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& param = params[p];
        if (!param.has_grad()) continue;
        const auto g = param.grad();
        auto v = param.mutable_data();
        if (cfg.optimizer == Optimizer::sgd) {
          for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
        } else {
          const double t = static_cast<double>(step + 1);
          const double c1 = 1.0 - std::pow(cfg.adam_beta1, t), c2 = 1.0 - std::pow(cfg.adam_beta2, t);
          for (std::size_t i = 0; i < v.size(); ++i) {
            m1[p][i] = cfg.adam_beta1 * m1[p][i] + (1.0 - cfg.adam_beta1) * g[i];
            m2[p][i] = cfg.adam_beta2 * m2[p][i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
            v[i] -= lr * (m1[p][i] / c1) / (std::sqrt(m2[p][i] / c2) + cfg.adam_eps);
          }
        }
        for (double x : v)
          if (!std::isfinite(x)) {
            throw NumericalError(method_name + ": parameter update produced non-finite values at epoch " + num(epoch));
          }
        param.zero_grad();
      }
    }
    report.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));
  }

  report.result.method = std::move(method_name);
  report.result.seed = cfg.seed;
  report.result.per_task = evaluate(model, method.attachments, heads, tasks, data.val);
  report.frozen_checksum_after = model.checksum();
  return report;
}

}  // namespace polyhistor
