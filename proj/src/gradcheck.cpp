#include "polyhistor/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "polyhistor/errors.hpp"

namespace polyhistor {

namespace {

double evaluate(const Objective& f) {
  NoGradGuard guard;
  const double v = f().item();
  if (!std::isfinite(v)) throw NumericalError("objective evaluated to a non-finite value");
  return v;
}

}  // namespace

FdReport fd_check_report(const Objective& f, std::vector<Tensor> params, double eps) {
  if (!(eps > 0.0)) throw ConfigError("fd_check: eps must be positive");
  for (auto& p : params) {
    if (!p.is_leaf()) throw GradientError("fd_check perturbs leaf parameters only");
    p.zero_grad();
  }

  const Tensor loss = f();
  if (!std::isfinite(loss.item())) throw NumericalError("objective evaluated to a non-finite value");
  if (loss.requires_grad()) backward(loss);

  FdReport report;
  report.per_parameter.assign(params.size(), 0.0);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    std::vector<double> analytic(p.size(), 0.0);
    if (p.has_grad()) {
      const auto g = p.grad();
      analytic.assign(g.begin(), g.end());
    }
    auto values = p.mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = evaluate(f);
      values[i] = saved - eps;
      const double down = evaluate(f);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
      worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
    }
    report.per_parameter[k] = worst;
    report.max_relative_error = std::max(report.max_relative_error, worst);
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

double fd_check(const Objective& f, std::vector<Tensor> params, double eps) {
  return fd_check_report(f, std::move(params), eps).max_relative_error;
}

}  // namespace polyhistor
