#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "polyhistor/budget.hpp"
#include "polyhistor/cli.hpp"
#include "polyhistor/config.hpp"
#include "polyhistor/errors.hpp"
#include "polyhistor/polyhistor.hpp"

namespace py = pybind11;
using namespace polyhistor;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<Tensor> to_tensors(const std::vector<Array>& arrays) {
  std::vector<Tensor> out;
  for (const auto& a : arrays) out.push_back(to_tensor(a));
  return out;
}

py::tuple run(int code, const std::ostringstream& out, const std::ostringstream& err) {
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Parameter-efficient multi-task adaptation: budgets, weight synthesis and CLI commands";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<RankError>(m, "RankError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<GradientError>(m, "GradientError", PyExc_RuntimeError);

  py::enum_<Direction>(m, "Direction")
      .value("higher_better", Direction::higher_better)
      .value("lower_better", Direction::lower_better);

  m.def("methods", [] {
    std::vector<std::string> out;
    for (Method x : all_methods()) out.emplace_back(to_string(x));
    return out;
  });

  m.def(
      "budget",
      [](const std::string& config_json, std::size_t num_tasks) {
        const RunConfig rc = RunConfig::parse(config_json, "<config>");
        AuditOptions options = rc.audit;
        options.num_tasks = num_tasks;
        py::list out;
        for (const auto& r : audit_table(rc.methods, rc.backbone, nullptr, options).records) {
          py::dict d;
          d["method"] = r.method.display_name();
          d["encoder"] = r.encoder;
          d["total"] = r.total;
          d["closed_form"] = r.closed_form;
          d["breakdown"] = r.breakdown;
          out.append(d);
        }
        return out;
      },
      py::arg("config_json"), py::arg("num_tasks") = 4,
      "Encoder and total trainable counts for every method of a run config given as JSON text.");

  m.def("backbone_params", [](const std::string& preset) { return backbone_closed_form(BackboneConfig::from_preset(preset)); },
        py::arg("preset"));

  m.def("delta_up", py::overload_cast<const std::vector<double>&, const std::vector<double>&, const std::vector<Direction>&>(
                        &polyhistor::delta_up),
        py::arg("metrics"), py::arg("baseline"), py::arg("directions"));

  m.def(
      "hyperformer_weights",
      [](const Array& v, const Array& w_hat, std::size_t d, std::size_t n) {
        return to_array(hyperformer_weights(to_tensor(v), to_tensor(w_hat), d, n));
      },
      py::arg("v"), py::arg("w_hat"), py::arg("d"), py::arg("n"));

  m.def(
      "decomposed_weights",
      [](const Array& v, const Array& p_hat, const Array& q_hat, std::size_t rank, std::size_t d, std::size_t n) {
        return to_array(decomposed_weights(to_tensor(v), {to_tensor(p_hat), to_tensor(q_hat), rank}, d, n));
      },
      py::arg("v"), py::arg("p_hat"), py::arg("q_hat"), py::arg("rank"), py::arg("d"), py::arg("n"));

  m.def(
      "scaled_adapter_weight",
      [](const std::vector<Array>& templates, const std::vector<Array>& kernels, std::size_t s) {
        return to_array(scaled_adapter_weight(to_tensors(templates), to_tensors(kernels), s));
      },
      py::arg("templates"), py::arg("kernels"), py::arg("s"));

  m.def(
      "polyhistor_lite_weights",
      [](const Array& task, const std::vector<Array>& layer_embs, const Array& p_hat, const Array& q_hat,
         std::size_t rank, const std::vector<Array>& kernels, std::size_t s, std::size_t d, std::size_t n) {
        return to_array(polyhistor_lite_weights(to_tensor(task), to_tensors(layer_embs),
                                                {to_tensor(p_hat), to_tensor(q_hat), rank}, to_tensors(kernels), s, d, n));
      },
      py::arg("task"), py::arg("layer_embs"), py::arg("p_hat"), py::arg("q_hat"), py::arg("rank"), py::arg("kernels"),
      py::arg("s"), py::arg("d"), py::arg("n"));

  m.def(
      "gradcheck",
      [](const std::string& config_path, const std::string& method, double eps) {
        RunConfig rc = RunConfig::load(config_path);
        rc.apply_environment();
        MethodConfig chosen = MethodConfig::defaults(parse_method(method));
        for (const auto& c : rc.methods)
          if (c.display_name() == method || c.label == method) chosen = c;
        py::dict out;
        for (const auto& g : cli::gradcheck_method(rc, chosen, eps)) {
          if (g.max_relative_error) out[py::str(g.group)] = *g.max_relative_error;
          else out[py::str(g.group)] = py::none();
        }
        return out;
      },
      py::arg("config_path"), py::arg("method"), py::arg("eps") = 1e-4,
      "Maximum relative finite-difference error per trainable group; None for the frozen backbone.");

  // Command wrappers return (exit_code, stdout, stderr) exactly as the executable would.
  m.def(
      "audit",
      [](const std::string& config_path, std::optional<std::string> targets, const std::string& format) {
        std::ostringstream out, err;
        const int code = cli::cmd_audit({config_path, targets, format, std::nullopt}, out, err);
        return run(code, out, err);
      },
      py::arg("config_path"), py::arg("targets") = py::none(), py::arg("format") = "csv");

  m.def(
      "train",
      [](const std::string& config_path, std::vector<std::string> methods, std::optional<std::string> baseline) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::cmd_train({config_path, std::move(methods), baseline}, out, err);
        }
        return run(code, out, err);
      },
      py::arg("config_path"), py::arg("methods") = std::vector<std::string>{}, py::arg("baseline") = py::none());

  m.def(
      "deltaup",
      [](const std::string& results, const std::string& baseline) {
        std::ostringstream out, err;
        const int code = cli::cmd_deltaup({results, baseline}, out, err);
        return run(code, out, err);
      },
      py::arg("results"), py::arg("baseline"));
}
