#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "polyhistor/config.hpp"

namespace polyhistor::cli {

enum ExitCode : int { ok = 0, config_error = 2, numerical_error = 3, tolerance_failure = 4 };

struct AuditArgs {
  std::string config_path;
  std::optional<std::string> targets;  // bundled name or path; falls back to the config's audit.targets
  std::string format = "table";        // csv, table or json
  std::optional<std::string> output;   // file instead of `out`
};

struct GradcheckArgs {
  std::string config_path;
  std::vector<std::string> methods;  // tags or labels; empty means every method in the config
  double eps = 1e-4;
  double tolerance = 1e-4;
};

struct TrainArgs {
  std::string config_path;
  std::vector<std::string> methods;
  std::optional<std::string> baseline;  // RunResult JSON; fills delta_up
};

struct DeltaUpArgs {
  std::string results_path;
  std::string baseline_path;
};

/// Each command reports to `out`/`err` and returns its exit code; library exceptions are mapped
/// to config_error (ConfigError, DimensionError, RankError) or numerical_error (NumericalError).
int cmd_audit(const AuditArgs& args, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out, std::ostream& err);
int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_deltaup(const DeltaUpArgs& args, std::ostream& out, std::ostream& err);

/// Per-group result of a gradient check.
struct GroupCheck {
  std::string method;
  std::string group;
  std::size_t parameters = 0;
  std::optional<double> max_relative_error;  // empty for groups without expected gradient
};

/// Finite-difference check of every trainable group (encoder and heads) of `method` through
/// synthesis, backbone, decoder and task losses on one synthetic sample. Trainables are
/// re-drawn from N(0, 0.3^2) so that zero-initialised factors do not hide gradient paths.
std::vector<GroupCheck> gradcheck_method(const RunConfig& config, const MethodConfig& method, double eps);

}  // namespace polyhistor::cli
