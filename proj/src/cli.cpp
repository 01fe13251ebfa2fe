#include "polyhistor/cli.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "polyhistor/errors.hpp"
#include "polyhistor/gradcheck.hpp"
#include "polyhistor/ops.hpp"
#include "polyhistor/random.hpp"

namespace polyhistor::cli {

namespace {

// Heads in a gradient check are kept narrow; every coordinate costs two full passes.
constexpr std::size_t kGradcheckEmbedDim = 4;
constexpr std::size_t kGradcheckMaxBackbone = 200000;

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return numerical_error;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const RankError& e) {
    err << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const DimensionError& e) {
    err << "config error: " << e.what() << "\n";
    return config_error;
  }
}

RunConfig load_config(const std::string& path) {
  RunConfig rc = RunConfig::load(path);
  rc.apply_environment();
  return rc;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunResult read_result(const std::string& path) {
  try {
    return RunResult::from_json(read_file(path));
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    if (what.rfind(path, 0) == 0) throw;
    throw ConfigError(path + ": " + what);
  }
}

std::vector<MethodConfig> select_methods(const RunConfig& rc, const std::vector<std::string>& names) {
  if (names.empty()) {
    if (rc.methods.empty()) throw ConfigError("config lists no methods and none were selected");
    return rc.methods;
  }
  std::vector<MethodConfig> out;
  for (const auto& name : names) {
    const MethodConfig* hit = nullptr;
    for (const auto& m : rc.methods)
      if (m.label == name || m.display_name() == name) hit = &m;
    if (!hit)
      for (const auto& m : rc.methods)
        if (to_string(m.method) == name) hit = &m;
    if (hit) {
      out.push_back(*hit);
    } else {
      MethodConfig m = MethodConfig::defaults(parse_method(name));
      m.validate();
      out.push_back(m);
    }
  }
  return out;
}

std::string file_stem(const std::string& name) {
  std::string s;
  for (char c : name) s += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return s;
}

std::string format_error(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

}  // namespace

std::vector<GroupCheck> gradcheck_method(const RunConfig& rc, const MethodConfig& method, double eps) {
  const HvtModel model = build(rc.backbone, rc.seed, true);
  if (model.parameter_count() > kGradcheckMaxBackbone) {
    throw ConfigError("gradcheck needs a small backbone (" + std::to_string(model.parameter_count()) +
                      " parameters given, at most " + std::to_string(kGradcheckMaxBackbone) + "); use the toy preset");
  }
  const auto& tasks = rc.tasks;
  const MethodBuild mb = build_method(method, model, tasks.size(), rc.seed);

  Rng rng(rc.seed ^ 0x67726164ULL);
  for (const auto& e : mb.trainables.entries()) {
    Tensor v = e.value;
    for (double& x : v.mutable_data()) x = rng.normal(0.0, 0.3);
  }

  TrainableSet head_set;
  ParamFactory factory(head_set, true, rc.seed);
  std::vector<DecoderHead> heads;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    heads.push_back(make_head(model.config(), tasks[t].out_channels, kGradcheckEmbedDim, factory, t));
  }
  const Dataset data = synth_tasks(rc.seed, rc.backbone.input_height, rc.label_stride(), tasks, 1, 1);
  const Sample& sample = data.train.front();

  std::vector<Tensor> params;
  std::vector<std::string> groups;
  for (const auto& e : mb.trainables.entries()) {
    params.push_back(e.value);
    groups.push_back(e.group);
  }
  for (const auto& e : head_set.entries()) {
    params.push_back(e.value);
    groups.push_back(e.group);
  }
  const auto losses = [&] { return task_losses(model, resolve_all(mb.attachments, tasks.size()), heads, tasks, sample); };
  // Each loss is taken relative to its value at the check point. The difference of two nearby
  // doubles is exact, so the final sum no longer rounds at the scale of the full loss.
  std::vector<double> offsets;
  {
    NoGradGuard no_grad;
    for (const Tensor& l : losses()) offsets.push_back(l.item());
  }
  const auto objective = [&] {
    std::vector<Tensor> terms = losses();
    for (std::size_t t = 0; t < terms.size(); ++t) terms[t] = sub(terms[t], Tensor::scalar(offsets[t]));
    return add_n(terms);
  };
  const FdReport report = fd_check_report(objective, params, eps);

  std::vector<GroupCheck> out;
  out.push_back({method.display_name(), "backbone", model.parameter_count(), std::nullopt});
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto [it, fresh] = index.emplace(groups[i], out.size());
    if (fresh) out.push_back({method.display_name(), groups[i], 0, 0.0});
    GroupCheck& g = out[it->second];
    g.parameters += params[i].size();
    g.max_relative_error = std::max(*g.max_relative_error, report.per_parameter[i]);
  }
  return out;
}

int cmd_audit(const AuditArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig rc = load_config(args.config_path);
    if (args.format != "csv" && args.format != "table" && args.format != "json") {
      throw ConfigError("unknown format '" + args.format + "' (expected csv, table or json)");
    }
    std::optional<TargetTable> table;
    if (const auto name = args.targets ? args.targets : rc.targets) {
      table = TargetTable::load(*name);
      if (table->backbone != rc.backbone.preset) {
        throw ConfigError("targets '" + table->name + "' were measured on " + table->backbone + " but the config uses " +
                          rc.backbone.preset);
      }
    }
    AuditOptions options = rc.audit;
    if (table) options.num_tasks = table->num_tasks;
    std::vector<MethodConfig> methods = rc.methods;
    if (methods.empty() && !table)
      for (Method m : all_methods()) methods.push_back(MethodConfig::defaults(m));

    const BudgetReport report = audit_table(methods, rc.backbone, table ? &*table : nullptr, options);
    const std::string text = args.format == "csv" ? report.to_csv() : args.format == "json" ? report.to_json() : report.to_text();
    if (args.output) {
      const std::filesystem::path path(*args.output);
      if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
      std::ofstream f(path);
      if (!f) throw ConfigError(*args.output + ": cannot write");
      f << text;
      out << "wrote " << *args.output << "\n";
    } else {
      out << text;
    }
    if (args.format == "csv") {
      for (const auto& d : report.discrepancies) err << "note [" << d.method << "] " << d.kind << ": " << d.detail << "\n";
    }
    if (!report.all_within()) {
      err << "tolerance failure: ";
      bool first = true;
      for (const auto& r : report.records)
        if (r.within && !*r.within) {
          err << (first ? "" : ", ") << r.method.display_name();
          first = false;
        }
      err << "\n";
      return static_cast<int>(tolerance_failure);
    }
    return static_cast<int>(ok);
  });
}

int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig rc = load_config(args.config_path);
    if (!(args.eps > 0.0)) throw ConfigError("--eps must be positive");
    bool pass = true;
    for (const auto& m : select_methods(rc, args.methods)) {
      for (const auto& g : gradcheck_method(rc, m, args.eps)) {
        out << std::left << std::setw(22) << g.method << std::setw(20) << g.group << std::right << std::setw(9)
            << g.parameters << "  ";
        if (!g.max_relative_error) {
          out << "no gradient expected (frozen), skipped\n";
          continue;
        }
        const bool good = *g.max_relative_error < args.tolerance;
        pass = pass && good;
        out << "max rel err " << format_error(*g.max_relative_error) << (good ? "  ok" : "  FAIL") << "\n";
      }
    }
    if (!pass) {
      err << "tolerance failure: gradient error above " << format_error(args.tolerance) << "\n";
      return static_cast<int>(tolerance_failure);
    }
    return static_cast<int>(ok);
  });
}

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig rc = load_config(args.config_path);
    const auto methods = select_methods(rc, args.methods);
    if (rc.backbone.input_height != rc.backbone.input_width) throw ConfigError("training needs square images");
    std::optional<RunResult> baseline;
    if (args.baseline) baseline = read_result(*args.baseline);

    const HvtModel model = build(rc.backbone, rc.seed, true);
    const Dataset data =
        synth_tasks(rc.seed, rc.backbone.input_height, rc.label_stride(), rc.tasks, rc.data.num_train, rc.data.num_val);
    std::filesystem::create_directories(rc.output_dir);

    for (const auto& m : methods) {
      const std::string name = m.display_name();
      const MethodBuild mb = build_method(m, model, rc.tasks.size(), rc.seed);
      TrainReport rep = train(model, mb, rc.tasks, data, rc.training, name);
      if (rep.frozen_checksum_before != rep.frozen_checksum_after) {
        throw GradientError(name + ": frozen backbone parameters changed during training");
      }
      if (baseline) rep.result.delta_up = delta_up(rep.result, *baseline);

      const auto path = std::filesystem::path(rc.output_dir) / (file_stem(name) + ".json");
      std::ofstream f(path);
      if (!f) throw ConfigError(path.string() + ": cannot write");
      f << rep.result.to_json();

      out << name << ": encoder " << rep.trainable_encoder << ", heads " << rep.trainable_head << ", final train loss "
          << std::fixed << std::setprecision(4) << rep.epoch_losses.back() << "\n";
      for (const auto& t : rep.result.per_task) {
        out << "  " << std::left << std::setw(12) << t.name << std::right << " metric " << std::setprecision(2)
            << std::setw(7) << t.metric << "  val loss " << std::setprecision(4) << t.val_loss << "\n";
      }
      if (rep.result.delta_up) out << "  delta_up " << std::setprecision(2) << *rep.result.delta_up << "\n";
      out << "  wrote " << path.string() << "\n";
      out.unsetf(std::ios::floatfield);
    }
    return static_cast<int>(ok);
  });
}

int cmd_deltaup(const DeltaUpArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunResult result = read_result(args.results_path);
    const RunResult baseline = read_result(args.baseline_path);
    double v = delta_up(result, baseline);
    if (std::abs(v) < 0.005) v = 0.0;  // no "-0.00"
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    out << buf << "\n";
    return static_cast<int>(ok);
  });
}

}  // namespace polyhistor::cli
