#include "polyhistor/peft.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <charconv>
#include <cmath>
#include <set>

#include "polyhistor/errors.hpp"
#include "polyhistor/ops.hpp"
#include "polyhistor/polyhistor.hpp"

namespace polyhistor {

namespace {

constexpr std::pair<Method, std::string_view> kMethodNames[] = {
    {Method::decoder_only, "decoder_only"},
    {Method::full_finetune, "full_finetune"},
    {Method::single_task_full, "single_task_full"},
    {Method::bitfit, "bitfit"},
    {Method::relative_bias, "relative_bias"},
    {Method::vpt_shallow, "vpt_shallow"},
    {Method::vpt_deep, "vpt_deep"},
    {Method::lora, "lora"},
    {Method::adapter, "adapter"},
    {Method::shared_adapter, "shared_adapter"},
    {Method::low_rank_adapter, "low_rank_adapter"},
    {Method::phm, "phm"},
    {Method::compacter, "compacter"},
    {Method::compacter_pp, "compacter_pp"},
    {Method::hyperformer, "hyperformer"},
    {Method::polyhistor, "polyhistor"},
    {Method::polyhistor_lite, "polyhistor_lite"},
};

std::string num(std::size_t v) { return std::to_string(v); }

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string slot_name(std::size_t layer, Position pos) {
  return "layers." + num(layer) + "." + std::string(to_string(pos)) + ".";
}

std::vector<std::size_t> tasks_or_shared(bool shared, std::size_t num_tasks) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < (shared ? 1 : num_tasks); ++t) out.push_back(t);
  return out;
}

// Per-task copies (or one shared copy) of selected frozen parameters, applied as overrides.
MethodBuild override_method(const HvtModel& model, std::size_t num_tasks, ParamFactory& f, TrainableSet& ts,
                            bool shared, std::string_view tag,
                            const std::function<bool(const NamedParam&)>& select) {
  std::vector<std::vector<std::pair<std::string, Tensor>>> per_task;
  for (std::size_t t : tasks_or_shared(shared, num_tasks)) {
    auto& list = per_task.emplace_back();
    const std::string prefix = (shared ? std::string() : task_prefix(t)) + std::string(tag) + ".";
    for (const auto& p : model.parameters()) {
      if (!select(p)) continue;
      Tensor v = f.add(prefix + p.name, p.shape, ParamFactory::copy(p.value), std::string(tag),
                       shared ? std::nullopt : std::optional<std::size_t>(t));
      list.emplace_back(p.name, v);
    }
  }
  MethodBuild out;
  out.trainables = ts;
  if (f.materialize()) {
    out.attachments = AttachmentSet(num_tasks, !shared, [per_task, shared](std::size_t task) {
      ResolvedAttachments r;
      for (const auto& [name, v] : per_task[shared ? 0 : task]) r.overrides.emplace(name, v);
      return r;
    });
  }
  return out;
}

std::vector<Position> adapter_positions(const MethodConfig& m) {
  std::vector<Position> out;
  for (auto p : m.placement) {
    if (p == Position::attention_qv) {
      throw ConfigError(std::string(to_string(m.method)) + " attaches after sublayers; attention_qv is not a valid placement");
    }
    out.push_back(p);
  }
  if (out.empty()) throw ConfigError(std::string(to_string(m.method)) + " needs at least one placement");
  return out;
}

struct AdapterSlot {
  std::size_t layer;
  Position pos;
  std::function<AdapterWeights()> make;
};

MethodBuild from_slots(std::size_t num_tasks, bool task_specific, bool materialize, TrainableSet ts,
                       std::vector<std::vector<AdapterSlot>> per_task,
                       std::vector<std::vector<std::pair<std::string, Tensor>>> overrides = {}) {
  MethodBuild out;
  out.trainables = std::move(ts);
  if (!materialize) return out;
  out.attachments = AttachmentSet(num_tasks, task_specific, [per_task = std::move(per_task), overrides = std::move(overrides),
                                                             task_specific](std::size_t task) {
    const std::size_t idx = task_specific ? task : 0;
    ResolvedAttachments r;
    for (const auto& slot : per_task[idx]) r.adapters[{slot.layer, slot.pos}] = slot.make();
    if (!overrides.empty())
      for (const auto& [name, v] : overrides[idx]) r.overrides.emplace(name, v);
    return r;
  });
  return out;
}

MethodBuild build_adapter(const MethodConfig& m, const HvtModel& model, std::size_t num_tasks, ParamFactory& f,
                          TrainableSet& ts) {
  const bool shared = m.method == Method::shared_adapter;
  const bool low_rank = m.method == Method::low_rank_adapter;
  const auto positions = adapter_positions(m);
  std::vector<std::vector<AdapterSlot>> per_task;
  for (std::size_t t : tasks_or_shared(shared, num_tasks)) {
    auto& slots = per_task.emplace_back();
    const std::string tag = shared ? "shared_adapter" : (low_rank ? "low_rank_adapter" : "adapter");
    const std::string prefix = (shared ? std::string() : task_prefix(t)) + tag + ".";
    const auto owner = shared ? std::nullopt : std::optional<std::size_t>(t);
    for (const auto& l : model.layers()) {
      const std::size_t d = l.width;
      const std::size_t n = bottleneck_width(d, m.rho);
      for (auto pos : positions) {
        const std::string base = prefix + slot_name(l.index, pos);
        Tensor down_bias, up_bias;
        if (m.adapter_bias) {
          down_bias = f.add(base + "down_bias", {n}, ParamFactory::zeros(), tag, owner);
          up_bias = f.add(base + "up_bias", {d}, ParamFactory::zeros(), tag, owner);
        }
        const Nonlinearity delta = m.delta;
        if (low_rank) {
          const std::size_t r = m.rank.resolve(n);
          if (r > std::min(d, n)) {
            throw RankError("low-rank adapter rank " + num(r) + " exceeds bottleneck " + num(n) + " at width " + num(d));
          }
          Tensor du = f.add(base + "down_u", {d, r}, ParamFactory::normal(1.0 / std::sqrt(double(d))), tag, owner);
          Tensor dv = f.add(base + "down_v", {r, n}, ParamFactory::normal(1.0 / std::sqrt(double(r))), tag, owner);
          Tensor uu = f.add(base + "up_u", {n, r}, ParamFactory::normal(1.0 / std::sqrt(double(n))), tag, owner);
          Tensor uv = f.add(base + "up_v", {r, d}, ParamFactory::zeros(), tag, owner);
          slots.push_back({l.index, pos, [=] {
                             return AdapterWeights{matmul(du, dv), matmul(uu, uv), down_bias, up_bias, delta};
                           }});
        } else {
          Tensor down = f.add(base + "down", {d, n}, ParamFactory::normal(1.0 / std::sqrt(double(d))), tag, owner);
          Tensor up = f.add(base + "up", {n, d}, ParamFactory::zeros(), tag, owner);
          slots.push_back({l.index, pos, [=] { return AdapterWeights{down, up, down_bias, up_bias, delta}; }});
        }
      }
    }
  }
  return from_slots(num_tasks, !shared, f.materialize(), ts, std::move(per_task));
}

MethodBuild build_phm(const MethodConfig& m, const HvtModel& model, std::size_t num_tasks, ParamFactory& f,
                      TrainableSet& ts) {
  const bool rank_one = m.method != Method::phm;
  const std::size_t N = m.phm_n;
  const auto positions = adapter_positions(m);
  const std::string tag = std::string(to_string(m.method));

  std::vector<std::vector<AdapterSlot>> per_task;
  std::vector<std::vector<std::pair<std::string, Tensor>>> overrides;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    auto& slots = per_task.emplace_back();
    auto& norms = overrides.emplace_back();
    const std::string prefix = task_prefix(t) + tag + ".";
    std::vector<Tensor> a_down, a_up;
    for (std::size_t i = 0; i < N; ++i) {
      const auto init = ParamFactory::normal(1.0 / std::sqrt(double(N)));
      a_down.push_back(f.add(prefix + "shared_down." + num(i), {N, N}, init, tag + ".shared", t));
      a_up.push_back(f.add(prefix + "shared_up." + num(i), {N, N}, init, tag + ".shared", t));
    }
    for (const auto& l : model.layers()) {
      const std::size_t d = l.width;
      const std::size_t n = bottleneck_width(d, m.rho);
      if (d % N != 0 || n % N != 0) {
        throw DimensionError(tag + ": phm_n " + num(N) + " must divide both width " + num(d) + " and bottleneck " +
                             num(n));
      }
      const std::size_t dn = d / N, nn = n / N;
      for (auto pos : positions) {
        const std::string base = prefix + slot_name(l.index, pos);
        const std::string norm = l.prefix + (pos == Position::post_attention ? "norm1." : "norm2.");
        for (const char* part : {"weight", "bias"}) {
          const NamedParam& src = model.parameter(norm + part);
          norms.emplace_back(src.name, f.add(prefix + src.name, src.shape, ParamFactory::copy(src.value), tag + ".norm", t));
        }
        Tensor down_bias, up_bias;
        if (m.adapter_bias) {
          down_bias = f.add(base + "down_bias", {n}, ParamFactory::zeros(), tag, t);
          up_bias = f.add(base + "up_bias", {d}, ParamFactory::zeros(), tag, t);
        }
        std::vector<std::function<Tensor()>> b_down, b_up;
        for (std::size_t i = 0; i < N; ++i) {
          const std::string idx = num(i);
          if (rank_one) {
            Tensor du = f.add(base + "down_u." + idx, {dn, 1}, ParamFactory::normal(1.0), tag, t);
            Tensor dv = f.add(base + "down_v." + idx, {1, nn}, ParamFactory::normal(1.0 / std::sqrt(double(d))), tag, t);
            Tensor uu = f.add(base + "up_u." + idx, {nn, 1}, ParamFactory::normal(1.0), tag, t);
            Tensor uv = f.add(base + "up_v." + idx, {1, dn}, ParamFactory::zeros(), tag, t);
            b_down.push_back([=] { return matmul(du, dv); });
            b_up.push_back([=] { return matmul(uu, uv); });
          } else {
            Tensor bd = f.add(base + "down." + idx, {dn, nn}, ParamFactory::normal(1.0 / std::sqrt(double(d))), tag, t);
            Tensor bu = f.add(base + "up." + idx, {nn, dn}, ParamFactory::zeros(), tag, t);
            b_down.push_back([=] { return bd; });
            b_up.push_back([=] { return bu; });
          }
        }
        const Nonlinearity delta = m.delta;
        slots.push_back({l.index, pos, [=] {
                           std::vector<Tensor> bd, bu;
                           for (const auto& g : b_down) bd.push_back(g());
                           for (const auto& g : b_up) bu.push_back(g());
                           return AdapterWeights{phm_weight(a_down, bd), phm_weight(a_up, bu), down_bias, up_bias,
                                                 delta};
                         }});
      }
    }
  }
  return from_slots(num_tasks, true, f.materialize(), ts, std::move(per_task), std::move(overrides));
}

MethodBuild build_lora(const MethodConfig& m, const HvtModel& model, std::size_t num_tasks, ParamFactory& f,
                       TrainableSet& ts) {
  const std::size_t r = m.lora_rank;
  std::vector<std::vector<std::pair<std::size_t, std::array<Tensor, 4>>>> per_task;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    auto& list = per_task.emplace_back();
    for (const auto& l : model.layers()) {
      const std::size_t d = l.width;
      if (r == 0 || r >= d) throw RankError("lora rank " + num(r) + " must be in [1, " + num(d) + ") at layer " + num(l.index));
      const std::string base = task_prefix(t) + "lora.layers." + num(l.index) + ".";
      const auto down = ParamFactory::normal(1.0 / std::sqrt(double(d)));
      list.emplace_back(l.index, std::array<Tensor, 4>{
                                     f.add(base + "q_down", {d, r}, down, "lora", t),
                                     f.add(base + "q_up", {r, d}, ParamFactory::zeros(), "lora", t),
                                     f.add(base + "v_down", {d, r}, down, "lora", t),
                                     f.add(base + "v_up", {r, d}, ParamFactory::zeros(), "lora", t),
                                 });
    }
  }
  MethodBuild out;
  out.trainables = ts;
  if (f.materialize()) {
    const double s = m.lora_scale;
    out.attachments = AttachmentSet(num_tasks, true, [per_task, s](std::size_t task) {
      ResolvedAttachments res;
      for (const auto& [layer, w] : per_task[task]) res.lora[layer] = LoraWeights{w[0], w[1], w[2], w[3], s};
      return res;
    });
  }
  return out;
}

MethodBuild build_vpt(const MethodConfig& m, const HvtModel& model, std::size_t num_tasks, ParamFactory& f,
                      TrainableSet& ts) {
  const bool deep = m.method == Method::vpt_deep;
  const std::size_t P = m.prompts_per_layer;
  std::vector<std::map<std::size_t, Tensor>> per_task;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    auto& prompts = per_task.emplace_back();
    for (const auto& l : model.layers()) {
      if (!deep && l.index > 0) break;
      const std::string name = task_prefix(t) + std::string(to_string(m.method)) + ".layers." + num(l.index) + ".prompts";
      prompts[l.index] = f.add(name, {P, l.width}, ParamFactory::normal(0.02), "prompts", t);
    }
  }
  MethodBuild out;
  out.trainables = ts;
  if (f.materialize()) {
    out.attachments = AttachmentSet(num_tasks, true, [per_task](std::size_t task) {
      ResolvedAttachments res;
      res.prompts = per_task[task];
      return res;
    });
  }
  return out;
}

}  // namespace

Method parse_method(std::string_view name) {
  for (const auto& [m, s] : kMethodNames)
    if (s == name) return m;
  if (name == "compacter++") return Method::compacter_pp;
  std::string known;
  for (const auto& [m, s] : kMethodNames) known += (known.empty() ? "" : ", ") + std::string(s);
  throw ConfigError("unknown method '" + std::string(name) + "' (expected one of: " + known + ")");
}

std::string_view to_string(Method m) {
  for (const auto& [mm, s] : kMethodNames)
    if (mm == m) return s;
  return "?";
}

std::vector<Method> all_methods() {
  std::vector<Method> out;
  for (const auto& [m, s] : kMethodNames) out.push_back(m);
  return out;
}

bool is_hypernet_method(Method m) {
  return m == Method::hyperformer || m == Method::polyhistor || m == Method::polyhistor_lite;
}

RankSpec RankSpec::parse(std::string_view text) {
  auto parse_int = [&](std::string_view s) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || v == 0) {
      throw ConfigError("invalid rank '" + std::string(text) + "' (expected a positive integer, 'n' or 'n/<k>')");
    }
    return v;
  };
  if (text == "n") return fraction(1);
  if (text.starts_with("n/")) return fraction(parse_int(text.substr(2)));
  return fixed(parse_int(text));
}

std::size_t RankSpec::resolve(std::size_t n) const {
  if (divisor) return (n + divisor - 1) / divisor;
  if (absolute == 0) throw RankError("rank must be at least 1");
  return absolute;
}

std::string RankSpec::str() const {
  if (divisor == 1) return "n";
  if (divisor) return "n/" + num(divisor);
  return num(absolute);
}

MethodConfig MethodConfig::defaults(Method m) {
  MethodConfig c;
  c.method = m;
  switch (m) {
    case Method::lora: c.placement = {Position::attention_qv}; break;
    case Method::low_rank_adapter: c.rank = RankSpec::fixed(6); break;
    case Method::phm:
      c.rho = 16.0;
      c.phm_n = 6;
      c.placement = {Position::post_attention, Position::post_mlp};
      break;
    case Method::compacter: c.placement = {Position::post_attention, Position::post_mlp}; break;
    case Method::hyperformer:
      c.rho = 8.0;
      c.placement = {Position::post_attention, Position::post_mlp};
      break;
    case Method::polyhistor:
      c.rho = 16.0;
      c.placement = {Position::post_attention, Position::post_mlp};
      break;
    case Method::polyhistor_lite: c.placement = {Position::post_attention, Position::post_mlp}; break;
    default: break;
  }
  return c;
}

bool MethodConfig::places(Position p) const { return std::find(placement.begin(), placement.end(), p) != placement.end(); }

std::string MethodConfig::display_name() const { return label.empty() ? std::string(to_string(method)) : label; }

void MethodConfig::validate() const {
  const std::string who(to_string(method));
  if (!(rho >= 1.0) || !std::isfinite(rho)) throw ConfigError(who + ": rho must be >= 1");
  if (is_hypernet_method(method) && task_embedding_k == 0) throw ConfigError(who + ": task_embedding_k must be positive");
  if (method == Method::polyhistor_lite && task_embedding_k % 2 != 0) {
    throw ConfigError(who + ": task_embedding_k must be even (task and layer embeddings are k/2 each)");
  }
  if ((method == Method::vpt_shallow || method == Method::vpt_deep) && prompts_per_layer == 0) {
    throw ConfigError(who + ": prompts_per_layer must be positive");
  }
  if (method == Method::lora && lora_rank == 0) throw RankError(who + ": lora_rank must be positive");
  if ((method == Method::phm || method == Method::compacter || method == Method::compacter_pp) && phm_n == 0) {
    throw ConfigError(who + ": phm_n must be positive");
  }
  std::set<Position> seen;
  for (auto p : placement)
    if (!seen.insert(p).second) throw ConfigError(who + ": duplicate placement " + std::string(to_string(p)));
}

std::size_t bottleneck_width(std::size_t d, double rho) {
  const auto n = static_cast<long long>(std::llround(static_cast<double>(d) / rho));
  if (n < 1) {
    throw RankError("bottleneck round(" + num(d) + " / " + std::to_string(rho) + ") is below 1");
  }
  return static_cast<std::size_t>(n);
}

std::string task_prefix(std::size_t task) { return "task" + num(task) + "."; }

const TrainableEntry& TrainableSet::add(TrainableEntry entry) {
  if (contains(entry.name)) throw ConfigError("duplicate trainable '" + entry.name + "'");
  entries_.push_back(std::move(entry));
  return entries_.back();
}

void TrainableSet::merge(const TrainableSet& other) {
  for (const auto& e : other.entries_) add(e);
}

bool TrainableSet::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.name == name; });
}

const TrainableEntry& TrainableSet::find(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw ConfigError("no trainable named '" + std::string(name) + "'");
}

std::size_t TrainableSet::count(Partition p) const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.partition == p) n += e.count();
  return n;
}

std::size_t TrainableSet::total() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.count();
  return n;
}

std::vector<Tensor> TrainableSet::tensors() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_)
    if (e.value.defined()) out.push_back(e.value);
  return out;
}

std::vector<std::string> TrainableSet::groups() const {
  std::vector<std::string> out;
  for (const auto& e : entries_)
    if (std::find(out.begin(), out.end(), e.group) == out.end()) out.push_back(e.group);
  return out;
}

std::vector<Tensor> TrainableSet::group_tensors(std::string_view group) const {
  std::vector<Tensor> out;
  for (const auto& e : entries_)
    if (e.group == group && e.value.defined()) out.push_back(e.value);
  return out;
}

Tensor ParamFactory::add(std::string name, Shape shape, const Init& init, std::string group,
                         std::optional<std::size_t> task, Partition partition) {
  Tensor value;
  if (materialize_) {
    Rng rng(fnv1a(name, seed_ * 0x9E3779B97F4A7C15ULL + 1));
    value = init(shape, rng);
    value.set_requires_grad(true);
  }
  set_.add(TrainableEntry{std::move(name), std::move(shape), partition, task, std::move(group), value});
  return value;
}

ParamFactory::Init ParamFactory::normal(double stddev) {
  return [stddev](const Shape& s, Rng& rng) { return randn(s, stddev, rng); };
}

ParamFactory::Init ParamFactory::zeros() {
  return [](const Shape& s, Rng&) { return Tensor::zeros(s); };
}

ParamFactory::Init ParamFactory::copy(const Tensor& source) {
  return [source](const Shape& s, Rng&) {
    if (!source.defined() || source.shape() != s) throw ConfigError("cannot copy an unmaterialized parameter");
    return source.detach().clone();
  };
}

ResolvedAttachments AttachmentSet::resolve(std::size_t task) const {
  if (num_tasks_ && task >= num_tasks_) {
    throw ConfigError("task index " + num(task) + " out of range for " + num(num_tasks_) + " tasks");
  }
  if (!resolver_) return {};
  return resolver_(task);
}

Tensor phm_weight(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.empty() || a.size() != b.size()) {
    throw DimensionError("phm_weight needs equally many A and B factors, got " + num(a.size()) + " and " +
                         num(b.size()));
  }
  std::vector<Tensor> terms;
  terms.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].dim() != 2 || b[i].dim() != 2) throw RankError("phm_weight factors must be 2-D");
    if (i > 0 && (a[i].shape() != a[0].shape() || b[i].shape() != b[0].shape())) {
      throw DimensionError("phm_weight factor " + num(i) + " shape differs from factor 0");
    }
    terms.push_back(kron(a[i], b[i]));
  }
  return terms.size() == 1 ? terms.front() : add_n(terms);
}

MethodBuild build_method(const MethodConfig& method, const HvtModel& model, std::size_t num_tasks, std::uint64_t seed) {
  method.validate();
  if (num_tasks == 0) throw ConfigError("num_tasks must be positive");
  if (is_hypernet_method(method.method)) return build_polyhistor(method, model, num_tasks, method.method, seed);

  TrainableSet ts;
  ParamFactory f(ts, model.materialized(), seed);
  using Role = NamedParam::Role;
  switch (method.method) {
    case Method::decoder_only: {
      MethodBuild out;
      out.attachments = AttachmentSet(num_tasks, false, nullptr);
      return out;
    }
    case Method::full_finetune:
      return override_method(model, num_tasks, f, ts, true, "full", [](const NamedParam&) { return true; });
    case Method::single_task_full:
      return override_method(model, num_tasks, f, ts, false, "full", [](const NamedParam&) { return true; });
    case Method::bitfit:
      return override_method(model, num_tasks, f, ts, false, "bitfit", [](const NamedParam& p) {
        return p.role == Role::bias || p.role == Role::norm_bias || p.role == Role::relative_bias;
      });
    case Method::relative_bias:
      if (!model.config().relative_bias) throw ConfigError("relative_bias method needs a backbone with relative bias tables");
      return override_method(model, num_tasks, f, ts, false, "relative_bias",
                             [](const NamedParam& p) { return p.role == Role::relative_bias; });
    case Method::vpt_shallow:
    case Method::vpt_deep: return build_vpt(method, model, num_tasks, f, ts);
    case Method::lora: return build_lora(method, model, num_tasks, f, ts);
    case Method::adapter:
    case Method::shared_adapter:
    case Method::low_rank_adapter: return build_adapter(method, model, num_tasks, f, ts);
    case Method::phm:
    case Method::compacter:
    case Method::compacter_pp: return build_phm(method, model, num_tasks, f, ts);
    default: break;
  }
  throw ConfigError("unsupported method " + std::string(to_string(method.method)));
}

}  // namespace polyhistor
