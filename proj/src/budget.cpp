#include "polyhistor/budget.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json_util.hpp"
#include "polyhistor/errors.hpp"
#include "polyhistor/multitask.hpp"

namespace polyhistor {

namespace detail {
extern const std::pair<std::string_view, std::string_view> kBundledTargets[];
extern const std::size_t kBundledTargetCount;
}  // namespace detail

namespace {

constexpr std::pair<Tolerance, std::string_view> kTolerances[] = {
    {Tolerance::exact_backbone, "exact_backbone"}, {Tolerance::pinned, "pinned"},
    {Tolerance::underreported, "underreported"},   {Tolerance::exact_zero, "exact_zero"},
    {Tolerance::ordering, "ordering"},
};

constexpr double kOrderingRatio = 10.0;

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string millions(std::size_t v) { return fixed(static_cast<double>(v) / 1e6, 2); }

std::size_t positions_of(const MethodConfig& m) {
  std::size_t n = 0;
  for (auto p : m.placement)
    if (p != Position::attention_qv) ++n;
  return n;
}

struct LayerShape {
  std::size_t d;
  std::size_t scale;
  std::size_t heads;
  std::size_t hidden;
};

std::vector<LayerShape> layer_shapes(const BackboneConfig& c) {
  const auto dims = c.dims();
  const auto scales = c.scales();
  std::vector<LayerShape> out;
  for (std::size_t b = 0; b < c.num_blocks(); ++b)
    for (std::size_t i = 0; i < c.depths[b]; ++i) out.push_back({dims[b], scales[b], c.num_heads[b], c.mlp_hidden(dims[b])});
  return out;
}

std::size_t rel_table(const BackboneConfig& c) {
  return c.relative_bias ? (2 * c.window_size - 1) * (2 * c.window_size - 1) : 0;
}

// Biases of linear maps, layer-norm shifts and relative-position tables.
std::size_t bias_like(const BackboneConfig& c) {
  const auto dims = c.dims();
  std::size_t n = 2 * dims[0];  // patch projection bias and its norm shift
  for (const auto& l : layer_shapes(c)) n += l.d + 3 * l.d + rel_table(c) * l.heads + l.d + l.d + l.hidden + l.d;
  for (std::size_t b = 0; b < dims.size(); ++b) {
    n += dims[b];
    if (b + 1 < dims.size()) n += 4 * dims[b];
  }
  return n;
}

std::string method_rho(const MethodConfig& m) {
  switch (m.method) {
    case Method::adapter:
    case Method::shared_adapter:
    case Method::low_rank_adapter:
    case Method::phm:
    case Method::compacter:
    case Method::compacter_pp:
    case Method::hyperformer:
    case Method::polyhistor:
    case Method::polyhistor_lite: {
      std::ostringstream os;
      os << m.rho;
      return os.str();
    }
    default: return "";
  }
}

std::string method_rank(const MethodConfig& m) {
  switch (m.method) {
    case Method::lora: return std::to_string(m.lora_rank);
    case Method::low_rank_adapter:
    case Method::polyhistor:
    case Method::polyhistor_lite: return m.rank.str();
    default: return "";
  }
}

std::string method_k(const MethodConfig& m) {
  return is_hypernet_method(m.method) ? std::to_string(m.task_embedding_k) : "";
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace

std::pair<std::size_t, std::size_t> count_trainable(const TrainableSet& ts) {
  return {ts.count(Partition::encoder), ts.total()};
}

std::size_t backbone_closed_form(const BackboneConfig& c) {
  c.validate();
  const auto dims = c.dims();
  std::size_t n = c.patch_size * c.patch_size * c.in_channels * dims[0] + dims[0] + 2 * dims[0];
  for (const auto& l : layer_shapes(c)) {
    const std::size_t d = l.d;
    n += 2 * d;                              // norm1
    n += 3 * d * d + 3 * d;                  // qkv
    n += rel_table(c) * l.heads;             // relative bias
    n += d * d + d;                          // proj
    n += 2 * d;                              // norm2
    n += 2 * d * l.hidden + l.hidden + d;    // mlp
  }
  for (std::size_t b = 0; b < dims.size(); ++b) {
    n += 2 * dims[b];
    if (b + 1 < dims.size()) n += 8 * dims[b] + 4 * dims[b] * dims[b + 1];
  }
  return n;
}

std::map<std::string, std::size_t> closed_form_breakdown(const MethodConfig& m, const BackboneConfig& c,
                                                         std::size_t T) {
  m.validate();
  c.validate();
  const auto layers = layer_shapes(c);
  const std::size_t P = positions_of(m);
  const std::size_t k = m.task_embedding_k;
  std::map<std::string, std::size_t> out;
  auto bias_terms = [&](std::size_t d, std::size_t n) { return m.adapter_bias ? n + d : 0; };

  switch (m.method) {
    case Method::decoder_only: break;
    case Method::full_finetune: out["backbone"] = backbone_closed_form(c); break;
    case Method::single_task_full: out["backbone"] = T * backbone_closed_form(c); break;
    case Method::bitfit: out["bias"] = T * bias_like(c); break;
    case Method::relative_bias: {
      std::size_t n = 0;
      for (const auto& l : layers) n += rel_table(c) * l.heads;
      out["relative_bias"] = T * n;
      break;
    }
    case Method::vpt_shallow: out["prompts"] = T * m.prompts_per_layer * layers.front().d; break;
    case Method::vpt_deep: {
      std::size_t n = 0;
      for (const auto& l : layers) n += m.prompts_per_layer * l.d;
      out["prompts"] = T * n;
      break;
    }
    case Method::lora: {
      std::size_t n = 0;
      for (const auto& l : layers) n += 2 * 2 * l.d * m.lora_rank;
      out["lora"] = T * n;
      break;
    }
    case Method::adapter:
    case Method::shared_adapter:
    case Method::low_rank_adapter: {
      std::size_t w = 0, b = 0;
      for (const auto& l : layers) {
        const std::size_t n = bottleneck_width(l.d, m.rho);
        if (m.method == Method::low_rank_adapter) {
          const std::size_t r = m.rank.resolve(n);
          w += P * (r * (l.d + n) + r * (n + l.d));
        } else {
          w += P * 2 * l.d * n;
        }
        b += P * bias_terms(l.d, n);
      }
      const std::size_t copies = m.method == Method::shared_adapter ? 1 : T;
      out["adapter"] = copies * w;
      if (b) out["adapter_bias"] = copies * b;
      break;
    }
    case Method::phm:
    case Method::compacter:
    case Method::compacter_pp: {
      const std::size_t N = m.phm_n;
      std::size_t fast = 0, b = 0, norms = 0;
      for (const auto& l : layers) {
        const std::size_t n = bottleneck_width(l.d, m.rho);
        // each projection is a sum of N Kronecker terms with (d/N x n/N) right factors
        fast += P * (m.method == Method::phm ? 2 * (l.d * n / N) : 2 * (l.d + n));
        b += P * bias_terms(l.d, n);
        norms += P * 2 * l.d;
      }
      out["phm_shared"] = T * 2 * N * N * N;
      out["phm_fast"] = T * fast;
      if (b) out["adapter_bias"] = T * b;
      out["layer_norm"] = T * norms;
      break;
    }
    case Method::hyperformer: {
      std::size_t h = 0;
      for (const auto& l : layers) h += P * 2 * k * l.d * bottleneck_width(l.d, m.rho);
      out["hypernet"] = h;
      out["task_embedding"] = T * k;
      break;
    }
    case Method::polyhistor: {
      std::size_t h = 0;
      for (const auto& l : layers) {
        const std::size_t n = bottleneck_width(l.d, m.rho);
        h += P * k * m.rank.resolve(n) * (l.d + 2 * n);
      }
      out["hypernet"] = h;
      out["task_embedding"] = T * k;
      break;
    }
    case Method::polyhistor_lite: {
      const std::size_t d = c.base_dim;
      const std::size_t n = bottleneck_width(d, m.rho);
      const std::size_t r = m.rank.resolve(n);
      std::size_t layer_emb = 0, kernels = 0;
      for (const auto& l : layers) {
        layer_emb += l.scale * (k / 2);
        kernels += l.scale * l.scale * l.scale;
      }
      out["hypernet"] = P * k * r * (d + 2 * n);
      out["layer_embedding"] = layer_emb;
      out["scaling_kernel"] = T * P * kernels;
      out["task_embedding"] = T * (k / 2);
      break;
    }
  }
  return out;
}

std::size_t closed_form(const MethodConfig& m, const BackboneConfig& c, std::size_t num_tasks) {
  std::size_t n = 0;
  for (const auto& [_, v] : closed_form_breakdown(m, c, num_tasks)) n += v;
  return n;
}

std::size_t decoder_closed_form(const BackboneConfig& c, const std::vector<std::size_t>& out_channels,
                                std::size_t E) {
  const auto dims = c.dims();
  std::size_t shared = 0;
  for (auto d : dims) shared += d * E + E;
  shared += dims.size() * E * E + E;
  std::size_t n = 0;
  for (auto out : out_channels) n += shared + E * out + out;
  return n;
}

Tolerance parse_tolerance(std::string_view s) {
  for (const auto& [t, name] : kTolerances)
    if (name == s) return t;
  throw ConfigError("unknown tolerance class '" + std::string(s) + "'");
}

std::string_view to_string(Tolerance t) {
  for (const auto& [v, name] : kTolerances)
    if (v == t) return name;
  return "?";
}

std::vector<std::string> TargetTable::bundled_names() {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < detail::kBundledTargetCount; ++i) out.emplace_back(detail::kBundledTargets[i].first);
  return out;
}

TargetTable TargetTable::load(std::string_view name_or_path) {
  for (std::size_t i = 0; i < detail::kBundledTargetCount; ++i) {
    if (detail::kBundledTargets[i].first == name_or_path) {
      return parse(detail::kBundledTargets[i].second, "<bundled " + std::string(name_or_path) + ">");
    }
  }
  std::ifstream in{std::string(name_or_path)};
  if (!in) {
    std::string names;
    for (const auto& n : bundled_names()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("targets '" + std::string(name_or_path) + "' is neither a bundled table (" + names +
                      ") nor a readable file");
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), std::string(name_or_path));
}

TargetTable TargetTable::parse(std::string_view json_text, std::string_view origin) {
  const detail::JsonSource src(json_text, std::string(origin));
  const auto& j = src.root();
  src.require_keys(j, "", {"name", "source", "backbone", "num_tasks", "decoder_millions", "rows"});
  TargetTable t;
  if (!j.contains("name") || !j["name"].is_string()) src.fail("", "'name' must be a string");
  t.name = j["name"].get<std::string>();
  if (j.contains("source")) {
    if (!j["source"].is_string()) src.fail("/source", "must be a string");
    t.source = j["source"].get<std::string>();
  }
  if (!j.contains("backbone") || !j["backbone"].is_string()) src.fail("", "'backbone' must be a preset name");
  t.backbone = j["backbone"].get<std::string>();
  if (j.contains("num_tasks")) {
    if (!j["num_tasks"].is_number_unsigned() || j["num_tasks"].get<std::size_t>() == 0) {
      src.fail("/num_tasks", "must be a positive integer");
    }
    t.num_tasks = j["num_tasks"].get<std::size_t>();
  }
  if (j.contains("decoder_millions")) {
    if (!j["decoder_millions"].is_number()) src.fail("/decoder_millions", "must be a number");
    t.decoder_millions = j["decoder_millions"].get<double>();
  }
  if (!j.contains("rows") || !j["rows"].is_array()) src.fail("", "'rows' must be an array");
  for (std::size_t i = 0; i < j["rows"].size(); ++i) {
    const std::string ptr = detail::child("/rows", i);
    const auto& row = j["rows"][i];
    src.require_keys(row, ptr, {"method", "encoder", "all", "tolerance"});
    TargetRow r;
    if (!row.contains("method")) src.fail(ptr, "missing 'method'");
    r.method = detail::method_from_json(src, row["method"], detail::child(ptr, "method"));
    if (!row.contains("encoder") || !row["encoder"].is_number() || row["encoder"].get<double>() < 0) {
      src.fail(ptr, "'encoder' must be a non-negative number (millions)");
    }
    r.encoder_millions = row["encoder"].get<double>();
    if (row.contains("all")) {
      if (!row["all"].is_number()) src.fail(detail::child(ptr, "all"), "must be a number");
      r.all_millions = row["all"].get<double>();
    }
    if (!row.contains("tolerance") || !row["tolerance"].is_string()) src.fail(ptr, "'tolerance' must be a string");
    try {
      r.tolerance = parse_tolerance(row["tolerance"].get<std::string>());
    } catch (const ConfigError& e) {
      src.fail(detail::child(ptr, "tolerance"), e.what());
    }
    t.rows.push_back(std::move(r));
  }
  return t;
}

bool same_row(const MethodConfig& a, const MethodConfig& b) {
  return a.method == b.method && a.rho == b.rho && a.rank == b.rank && a.task_embedding_k == b.task_embedding_k &&
         a.placement == b.placement && a.prompts_per_layer == b.prompts_per_layer && a.lora_rank == b.lora_rank &&
         a.phm_n == b.phm_n && a.adapter_bias == b.adapter_bias;
}

bool BudgetReport::all_within() const {
  if (!ordering_violations.empty()) return false;
  return std::all_of(records.begin(), records.end(), [](const auto& r) { return !r.within || *r.within; });
}

std::string BudgetReport::to_csv() const {
  std::ostringstream os;
  os << "method,rho,rank,k,encoder_params,total_params,closed_form,paper_target,rel_gap\n";
  for (const auto& r : records) {
    os << csv_field(r.method.display_name()) << ',' << method_rho(r.method) << ',' << csv_field(method_rank(r.method))
       << ',' << method_k(r.method) << ',' << r.encoder << ',' << r.total << ',' << r.closed_form << ',';
    if (r.target_millions) os << static_cast<long long>(std::llround(*r.target_millions * 1e6));
    os << ',';
    if (r.rel_gap) os << fixed(*r.rel_gap, 4);
    os << '\n';
  }
  return os.str();
}

std::string BudgetReport::to_text() const {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"method", "rho", "rank", "k", "encoder(M)", "all(M)", "closed_form", "target(M)", "gap", "class",
                  "status"});
  for (const auto& r : records) {
    rows.push_back({r.method.display_name(), method_rho(r.method), method_rank(r.method), method_k(r.method),
                    millions(r.encoder), millions(r.total), std::to_string(r.closed_form),
                    r.target_millions ? fixed(*r.target_millions, 2) : "-",
                    r.rel_gap ? fixed(*r.rel_gap * 100.0, 1) + "%" : "-",
                    r.tolerance ? std::string(to_string(*r.tolerance)) : "-",
                    r.within ? (*r.within ? "ok" : "FAIL") : "-"});
  }
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& row : rows)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::ostringstream os;
  os << "backbone " << backbone << ", " << num_tasks << " tasks, decoders " << millions(decoder_params) << "M";
  if (!target_table.empty()) os << ", targets " << target_table;
  os << "\n";
  for (std::size_t k = 0; k < rows.size(); ++k) {
    for (std::size_t i = 0; i < rows[k].size(); ++i) {
      os << (i ? "  " : "") << rows[k][i];
      if (i + 1 < rows[k].size()) os << std::string(width[i] - rows[k][i].size(), ' ');
    }
    os << "\n";
  }
  for (const auto& [a, b] : ordering_violations) os << "ordering violated: " << a << " should exceed " << b << "\n";
  for (const auto& d : discrepancies) os << "note [" << d.method << "] " << d.kind << ": " << d.detail << "\n";
  return os.str();
}

std::string BudgetReport::to_json() const {
  nlohmann::ordered_json j;
  j["backbone"] = backbone;
  j["target_table"] = target_table.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(target_table);
  j["num_tasks"] = num_tasks;
  j["decoder_params"] = decoder_params;
  j["records"] = nlohmann::ordered_json::array();
  for (const auto& r : records) {
    nlohmann::ordered_json rec;
    rec["method"] = r.method.display_name();
    rec["config"] = detail::method_to_json(r.method);
    rec["encoder_params"] = r.encoder;
    rec["total_params"] = r.total;
    rec["closed_form"] = r.closed_form;
    rec["breakdown"] = r.breakdown;
    rec["target_millions"] = r.target_millions ? nlohmann::ordered_json(*r.target_millions) : nlohmann::ordered_json(nullptr);
    rec["tolerance"] = r.tolerance ? nlohmann::ordered_json(std::string(to_string(*r.tolerance))) : nlohmann::ordered_json(nullptr);
    rec["rel_gap"] = r.rel_gap ? nlohmann::ordered_json(*r.rel_gap) : nlohmann::ordered_json(nullptr);
    rec["within"] = r.within ? nlohmann::ordered_json(*r.within) : nlohmann::ordered_json(nullptr);
    if (!r.note.empty()) rec["note"] = r.note;
    j["records"].push_back(rec);
  }
  j["discrepancies"] = nlohmann::ordered_json::array();
  for (const auto& d : discrepancies) {
    j["discrepancies"].push_back({{"method", d.method},
                                  {"kind", d.kind},
                                  {"target_millions", d.target_millions},
                                  {"count_millions", d.count_millions},
                                  {"ratio", d.ratio},
                                  {"detail", d.detail}});
  }
  j["ordering_violations"] = nlohmann::ordered_json::array();
  for (const auto& [a, b] : ordering_violations) j["ordering_violations"].push_back({{"larger", a}, {"smaller", b}});
  j["all_within"] = all_within();
  return j.dump(2) + "\n";
}

BudgetReport audit_table(const std::vector<MethodConfig>& methods, const BackboneConfig& config,
                         const TargetTable* targets, const AuditOptions& options) {
  config.validate();
  const HvtModel model = build(config, 0, false);
  BudgetReport report;
  report.backbone = config.preset.empty() ? "custom" : config.preset;
  report.num_tasks = options.num_tasks;
  if (targets) report.target_table = targets->name;

  TrainableSet heads;
  ParamFactory head_factory(heads, false, 0);
  std::vector<std::size_t> channels = options.head_channels;
  channels.resize(options.num_tasks, channels.empty() ? 1 : channels.back());
  for (std::size_t t = 0; t < options.num_tasks; ++t) make_head(config, channels[t], options.embed_dim, head_factory, t);
  report.decoder_params = heads.total();

  std::vector<MethodConfig> list = methods;
  if (list.empty() && targets)
    for (const auto& row : targets->rows) list.push_back(row.method);

  for (const auto& m : list) {
    BudgetRecord rec;
    rec.method = m;
    MethodBuild b = build_method(m, model, options.num_tasks, 0);
    b.trainables.merge(heads);
    std::tie(rec.encoder, rec.total) = count_trainable(b.trainables);
    rec.breakdown = closed_form_breakdown(m, config, options.num_tasks);
    rec.closed_form = closed_form(m, config, options.num_tasks);
    if (rec.closed_form != rec.encoder) {
      rec.note = "closed form " + std::to_string(rec.closed_form) + " differs from enumeration " +
                 std::to_string(rec.encoder);
    }

    const TargetRow* row = nullptr;
    if (targets)
      for (const auto& r : targets->rows)
        if (same_row(r.method, m)) row = &r;
    if (row) {
      rec.target_millions = row->encoder_millions;
      rec.tolerance = row->tolerance;
      const double target = row->encoder_millions * 1e6;
      const double count = static_cast<double>(rec.encoder);
      if (target > 0) rec.rel_gap = std::abs(count - target) / target;
      switch (row->tolerance) {
        case Tolerance::exact_backbone: rec.within = rec.rel_gap && *rec.rel_gap <= 0.03; break;
        case Tolerance::pinned: rec.within = rec.rel_gap && *rec.rel_gap <= 0.15; break;
        case Tolerance::underreported:
          rec.within = target > 0 && count >= target / 3.0 && count <= target * 3.0;
          report.discrepancies.push_back(Discrepancy{
              m.display_name(), "unreported_components", row->encoder_millions, count / 1e6, count / target,
              std::string("published count includes components that are not enumerated (candidates: ") +
                  (is_hypernet_method(m.method) ? "task projector networks, generated biases or layer norms"
                                                : "per-factor biases, extra layer norms or placements") +
                  "); counted structure: " +
                  [&] {
                    std::string s;
                    for (const auto& [name, v] : rec.breakdown) s += (s.empty() ? "" : ", ") + name + "=" + std::to_string(v);
                    return s;
                  }()});
          break;
        case Tolerance::exact_zero: rec.within = rec.encoder == 0; break;
        case Tolerance::ordering: rec.within = true; break;
      }
      if (rec.rel_gap && *rec.rel_gap > 0.05 && row->tolerance != Tolerance::underreported &&
          row->tolerance != Tolerance::ordering) {
        report.discrepancies.push_back(Discrepancy{m.display_name(), "residual_gap", row->encoder_millions, count / 1e6,
                                                   count / target,
                                                   "count differs from the published value by " +
                                                       fixed(*rec.rel_gap * 100.0, 1) + "%"});
      }
    }
    report.records.push_back(std::move(rec));
  }

  // Clearly separated targets (>= 10x apart) must keep their order in the counts.
  for (auto& a : report.records) {
    if (!a.tolerance || *a.tolerance != Tolerance::ordering) continue;
    for (const auto& b : report.records) {
      if (&a == &b || !b.target_millions || !b.tolerance) continue;
      if (*b.tolerance != Tolerance::ordering && *b.tolerance != Tolerance::exact_zero) continue;
      if (*a.target_millions >= kOrderingRatio * *b.target_millions && a.encoder <= b.encoder) {
        report.ordering_violations.emplace_back(a.method.display_name(), b.method.display_name());
        a.within = false;
      }
    }
  }
  return report;
}

}  // namespace polyhistor
