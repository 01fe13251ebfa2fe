// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "polyhistor/budget.hpp"
#include "polyhistor/cli.hpp"
#include "polyhistor/config.hpp"
#include "polyhistor/ops.hpp"
#include "polyhistor/polyhistor.hpp"
#include "polyhistor/random.hpp"

using namespace polyhistor;

namespace {

const std::string kToyConfig = POLYHISTOR_SOURCE_DIR "/configs/toy.json";

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const std::string& title, double budget_seconds, const std::function<Outcome()>& fn) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ostringstream timing;
  timing << std::fixed;
  timing.precision(2);
  timing << secs << " s";
  if (budget_seconds > 0) {
    timing << " (limit " << budget_seconds << " s)";
    if (secs >= budget_seconds) {
      o.pass = false;
      o.detail += "; over time";
    }
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << title << ": " << o.detail << " [" << timing.str()
            << "]" << std::endl;
}

std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double millions(std::size_t n) { return static_cast<double>(n) / 1e6; }

const BudgetRecord& record_for(const BudgetReport& r, Method m) {
  for (const auto& rec : r.records)
    if (rec.method.method == m) return rec;
  throw std::runtime_error("no record for " + std::string(to_string(m)));
}

bool same_pyramid(const FeaturePyramid& a, const FeaturePyramid& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto x = a[i].tokens.data();
    auto y = b[i].tokens.data();
    if (x.size() != y.size()) return false;
    for (std::size_t j = 0; j < x.size(); ++j)
      if (x[j] != y[j]) return false;
  }
  return true;
}

BudgetReport table1_audit() {
  static const BudgetReport report = [] {
    const TargetTable table = TargetTable::load("table1");
    std::vector<MethodConfig> methods;
    for (const auto& row : table.rows) methods.push_back(row.method);
    AuditOptions options;
    options.num_tasks = table.num_tasks;
    return audit_table(methods, BackboneConfig::from_preset(table.backbone), &table, options);
  }();
  return report;
}

Outcome backbone_budget() {
  const auto config = BackboneConfig::from_preset("swin_tiny");
  const HvtModel model = build(config, 0, false);
  const double m = millions(model.parameter_count());
  const double gap = std::abs(m - 27.51) / 27.51;
  return {gap <= 0.03, "swin_tiny encoder " + fmt(m) + "M vs 27.51M (gap " + fmt(100 * gap, 1) + "%, limit 3%)"};
}

Outcome pinned_budgets() {
  const BudgetReport report = table1_audit();
  const std::pair<Method, double> rows[] = {{Method::bitfit, 0.30},
                                            {Method::lora, 0.32},
                                            {Method::adapter, 8.69},
                                            {Method::shared_adapter, 2.20},
                                            {Method::compacter, 0.23}};
  bool pass = true;
  std::string detail;
  for (const auto& [m, target] : rows) {
    const double got = millions(record_for(report, m).encoder);
    const double gap = std::abs(got - target) / target;
    pass = pass && gap <= 0.15;
    detail += std::string(detail.empty() ? "" : ", ") + std::string(to_string(m)) + " " + fmt(got) + "/" + fmt(target) +
              " (" + fmt(100 * gap, 1) + "%)";
  }
  return {pass, detail + "; limit 15%"};
}

Outcome hypernet_budgets() {
  const BudgetReport report = table1_audit();
  const double hyper = millions(record_for(report, Method::hyperformer).encoder);
  const double poly = millions(record_for(report, Method::polyhistor).encoder);
  const double lite = millions(record_for(report, Method::polyhistor_lite).encoder);
  const double hyper_gap = std::abs(hyper - 72.77) / 72.77;
  const auto within3 = [](double got, double target) { return got <= 3 * target && got >= target / 3; };
  const auto noted = [&](Method m) {
    for (const auto& d : report.discrepancies)
      if (d.method == record_for(report, m).method.display_name() && !d.detail.empty()) return true;
    return false;
  };
  const double r1 = poly / hyper, r2 = lite / poly;
  const bool pass = hyper_gap <= 0.15 && within3(poly, 6.41) && within3(lite, 0.41) && noted(Method::polyhistor) &&
                    noted(Method::polyhistor_lite) && r1 <= 0.15 && r2 <= 0.15;
  return {pass, "hyperformer " + fmt(hyper) + "/72.77 (" + fmt(100 * hyper_gap, 1) + "%), polyhistor " + fmt(poly) +
                    "/6.41, lite " + fmt(lite) + "/0.41, discrepancy notes " +
                    (noted(Method::polyhistor) && noted(Method::polyhistor_lite) ? "present" : "MISSING") +
                    ", ratios " + fmt(100 * r1, 1) + "% and " + fmt(100 * r2, 1) + "% (limit 15%)"};
}

Outcome growth() {
  const auto small = BackboneConfig::from_preset("swin_tiny");
  auto large = small;
  large.base_dim *= 2;
  for (auto& h : large.num_heads) h *= 2;
  auto hyper = MethodConfig::defaults(Method::hyperformer);
  auto poly = MethodConfig::defaults(Method::polyhistor);
  poly.rank = RankSpec::fixed(4);
  const auto h = [](const MethodConfig& m, const BackboneConfig& c) {
    return static_cast<double>(closed_form_breakdown(m, c, 4).at("hypernet"));
  };
  const double gh = h(hyper, large) / h(hyper, small);
  const double gp = h(poly, large) / h(poly, small);
  return {std::abs(gh - 4.0) <= 0.1 && std::abs(gp - 2.0) <= 0.1,
          "hyperformer hypernet growth " + fmt(gh, 3) + " (4.0 +- 0.1), polyhistor " + fmt(gp, 3) + " (2.0 +- 0.1)"};
}

Outcome delta_up_rows() {
  struct Row {
    const char* name;
    std::vector<double> metrics;
    double printed;
  };
  const std::vector<double> baseline = {67.21, 61.93, 62.35, 17.97};
  const std::vector<Direction> dirs = {Direction::higher_better, Direction::higher_better, Direction::higher_better,
                                       Direction::lower_better};
  const std::vector<Row> rows = {
      {"decoder_only", {63.14, 52.37, 58.39, 20.89}, -11.02}, {"full_finetune", {68.71, 62.13, 64.18, 17.35}, 2.23},
      {"bitfit", {68.57, 55.99, 60.64, 19.42}, -4.60},        {"relative_bias", {63.51, 52.35, 57.74, 21.07}, -11.40},
      {"vpt_shallow", {62.96, 52.27, 58.31, 20.90}, -11.18},  {"vpt_deep", {64.35, 52.54, 58.15, 21.07}, -10.85},
      {"phm", {68.55, 56.28, 60.35, 19.23}, -4.34},           {"compacter", {68.08, 56.41, 60.08, 19.22}, -4.55},
      {"compacter_pp", {67.26, 55.69, 59.47, 19.54}, -5.84},  {"lora", {70.12, 57.73, 61.90, 18.96}, -2.17},
      {"adapter", {69.21, 57.38, 61.28, 18.83}, -2.71},       {"low_rank_adapter", {68.31, 56.53, 60.29, 19.36}, -4.54},
      {"shared_adapter", {70.21, 59.15, 62.29, 19.26}, -1.83}, {"hyperformer", {71.43, 60.73, 65.54, 17.77}, 2.64},
      {"polyhistor", {70.87, 59.54, 65.47, 17.47}, 2.34},     {"polyhistor_lite", {70.24, 59.12, 64.75, 17.40}, 1.74},
  };
  bool pass = std::abs(delta_up(baseline, baseline, dirs)) < 1e-12;
  double worst = 0.0;
  std::string worst_name, misses;
  for (const auto& r : rows) {
    const double gap = std::abs(delta_up(r.metrics, baseline, dirs) - r.printed);
    if (gap > 0.05) {
      pass = false;
      misses += std::string(" ") + r.name;
    }
    if (gap > worst) {
      worst = gap;
      worst_name = r.name;
    }
  }
  const double lite = delta_up(rows.back().metrics, baseline, dirs);
  const double poly = delta_up(rows[rows.size() - 2].metrics, baseline, dirs);
  return {pass, std::to_string(rows.size()) + " rows, largest gap " + fmt(worst, 3) + " (" + worst_name +
                    "), limit 0.05; lite " + fmt(lite, 3) + ", polyhistor " + fmt(poly, 3) +
                    (misses.empty() ? "" : "; off:" + misses)};
}

Outcome gradients() {
  const RunConfig rc = RunConfig::load(kToyConfig);
  constexpr double eps = 1e-4;
  bool pass = true;
  std::string detail = "eps " + sci(eps) + ";";
  for (const auto& m : rc.methods) {
    if (!is_hypernet_method(m.method)) continue;
    double worst = 0.0;
    std::string worst_group;
    for (const auto& g : cli::gradcheck_method(rc, m, eps)) {
      if (!g.max_relative_error) continue;
      if (*g.max_relative_error >= worst) {
        worst = *g.max_relative_error;
        worst_group = g.group;
      }
    }
    pass = pass && worst < 1e-4;
    detail += " " + m.display_name() + " " + sci(worst) + " (" + worst_group + ")";
  }
  return {pass, detail + "; limit 1e-4 for every group"};
}

Outcome identity_at_zero() {
  const RunConfig rc = RunConfig::load(kToyConfig);
  const HvtModel model = build(rc.backbone, rc.seed, true);
  Rng rng(99);
  const Tensor image = randn({rc.backbone.input_height, rc.backbone.input_width, rc.backbone.in_channels}, 1.0, rng);
  const FeaturePyramid frozen = forward(model, image);
  std::size_t checked = 0;
  std::string bad;
  for (const auto& m : rc.methods) {
    switch (m.method) {
      case Method::adapter:
      case Method::shared_adapter:
      case Method::low_rank_adapter:
      case Method::phm:
      case Method::compacter:
      case Method::compacter_pp:
      case Method::lora:
      case Method::hyperformer:
      case Method::polyhistor:
      case Method::polyhistor_lite:
        break;
      default:
        continue;
    }
    const MethodBuild b = build_method(m, model, rc.tasks.size(), rc.seed);
    if (is_hypernet_method(m.method)) {
      for (const char* group : {"task_embedding", "layer_embedding"})
        for (Tensor t : b.trainables.group_tensors(group))
          for (double& x : t.mutable_data()) x = 0.0;
    }
    for (std::size_t t = 0; t < rc.tasks.size(); ++t) {
      ++checked;
      if (!same_pyramid(forward(model, image, b.attachments.resolve(t)), frozen)) bad += " " + m.display_name();
    }
  }
  return {bad.empty(), std::to_string(checked) + " method/task forwards compared bit-exactly with the frozen backbone" +
                           (bad.empty() ? "" : "; differ:" + bad)};
}

Outcome frozen_discipline() {
  RunConfig rc = RunConfig::load(kToyConfig);
  rc.training.epochs = 5;
  const HvtModel model = build(rc.backbone, rc.seed, true);
  const Dataset data =
      synth_tasks(rc.seed, rc.backbone.input_height, rc.label_stride(), rc.tasks, rc.data.num_train, rc.data.num_val);
  std::string changed, mismatched;
  std::size_t grid = 0;
  for (const auto& m : rc.methods) {
    const MethodBuild b = build_method(m, model, rc.tasks.size(), rc.seed);
    const TrainReport rep = train(model, b, rc.tasks, data, rc.training, m.display_name());
    if (rep.frozen_checksum_before != rep.frozen_checksum_after) changed += " " + m.display_name();
    ++grid;
    if (count_trainable(b.trainables).first != closed_form(m, rc.backbone, rc.tasks.size()))
      mismatched += " toy:" + m.display_name();
  }
  for (const auto& name : TargetTable::bundled_names()) {
    const TargetTable table = TargetTable::load(name);
    std::vector<MethodConfig> methods;
    for (const auto& row : table.rows) methods.push_back(row.method);
    AuditOptions options;
    options.num_tasks = table.num_tasks;
    for (const auto& r : audit_table(methods, BackboneConfig::from_preset(table.backbone), nullptr, options).records) {
      ++grid;
      if (r.encoder != r.closed_form) mismatched += " " + name + ":" + r.method.display_name();
    }
  }
  return {changed.empty() && mismatched.empty(),
          std::to_string(rc.methods.size()) + " methods trained 5 epochs, frozen checksum " +
              (changed.empty() ? "unchanged" : "CHANGED for" + changed) + "; closed form == count on " +
              std::to_string(grid) + " configurations" + (mismatched.empty() ? "" : "; mismatch:" + mismatched)};
}

Outcome learning_signal() {
  // The methods at their default hyperparameters, not the narrowed toy entries used for gradient checks.
  const RunConfig base = RunConfig::load(kToyConfig);
  const MethodConfig lite_config = MethodConfig::defaults(Method::polyhistor_lite);
  const MethodConfig decoder_config = MethodConfig::defaults(Method::decoder_only);
  const MethodConfig* lite = &lite_config;
  const MethodConfig* decoder = &decoder_config;
  const std::size_t num_tasks = base.tasks.size();
  std::vector<double> lite_loss(num_tasks, 0.0), decoder_loss(num_tasks, 0.0);
  constexpr std::uint64_t kSeeds = 3;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    RunConfig rc = base;
    rc.seed = seed;
    rc.training.seed = seed;
    const HvtModel model = build(rc.backbone, seed, true);
    const Dataset data =
        synth_tasks(seed, rc.backbone.input_height, rc.label_stride(), rc.tasks, rc.data.num_train, rc.data.num_val);
    for (auto [m, acc] : {std::pair{lite, &lite_loss}, std::pair{decoder, &decoder_loss}}) {
      const TrainReport rep = train(model, build_method(*m, model, num_tasks, seed), rc.tasks, data, rc.training,
                                    m->display_name());
      for (std::size_t t = 0; t < num_tasks; ++t) (*acc)[t] += rep.result.per_task[t].val_loss / kSeeds;
    }
  }
  std::size_t wins = 0;
  std::string detail;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    const bool win = lite_loss[t] < decoder_loss[t];
    wins += win;
    detail += (t ? ", " : "") + base.tasks[t].name + " " + fmt(lite_loss[t], 4) + (win ? " < " : " >= ") +
              fmt(decoder_loss[t], 4);
  }
  return {wins >= 3, "lite beats decoder_only on " + std::to_string(wins) + "/" + std::to_string(num_tasks) +
                         " tasks (mean val loss over 3 seeds): " + detail};
}

Outcome lite_composition() {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 8;
    const std::size_t n = rng.uniform() < 0.5 ? 4 : 2;
    const std::size_t r = 1 + static_cast<std::size_t>(rng.uniform() * n) % n;
    const std::size_t s = rng.uniform() < 0.5 ? 1 : 2;
    const std::size_t half = 2 + static_cast<std::size_t>(rng.uniform() * 3) % 3;
    const std::size_t k = 2 * half;
    const Tensor task = randn({half}, 1.0, rng);
    std::vector<Tensor> layers, kernels;
    for (std::size_t i = 0; i < s; ++i) {
      layers.push_back(randn({half}, 1.0, rng));
      kernels.push_back(randn({s, s}, 1.0, rng));
    }
    const HyperNetPair pair{randn({k, d * r}, 1.0, rng), randn({k, 2 * n * r}, 1.0, rng), r};
    const Tensor w = polyhistor_lite_weights(task, layers, pair, kernels, s, d, n);
    std::vector<Tensor> templates;
    for (const auto& l : layers)
      templates.push_back(decomposed_weights(concat_cols({reshape(task, {1, half}), reshape(l, {1, half})}), pair, d, n));
    const Tensor expect = scaled_adapter_weight(templates, kernels, s);
    if (w.shape() != expect.shape()) return {false, "shape mismatch in trial " + std::to_string(trial)};
    for (std::size_t i = 0; i < w.size(); ++i) worst = std::max(worst, std::abs(w.at(i) - expect.at(i)));
  }
  return {worst <= 1e-12, "100 random instances, max abs difference " + sci(worst) + " (limit 1e-12)"};
}

}  // namespace

int main() {
  criterion(1, "backbone budget", 1.0, backbone_budget);
  criterion(2, "pinned baseline budgets", 1.0, pinned_budgets);
  criterion(3, "hypernet budgets and ratios", 0.0, hypernet_budgets);
  criterion(4, "hypernet growth with width", 0.0, growth);
  criterion(5, "delta_up reproduction", 1.0, delta_up_rows);
  criterion(6, "full-path gradients of hypernet methods", 60.0, gradients);
  criterion(7, "identity at zero", 0.0, identity_at_zero);
  criterion(8, "frozen discipline and closed form", 0.0, frozen_discipline);
  criterion(9, "learning signal", 600.0, learning_signal);
  criterion(10, "lite weights equal the composition", 0.0, lite_composition);
  std::cout << (failures == 0 ? "all criteria pass" : std::to_string(failures) + " criteria fail") << std::endl;
  return failures == 0 ? 0 : 1;
}
