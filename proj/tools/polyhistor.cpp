#include <exception>
#include <iostream>

#include "CLI11.hpp"
#include "polyhistor/cli.hpp"

int main(int argc, char** argv) {
  using namespace polyhistor::cli;
  CLI::App app{"Parameter-efficient multi-task adaptation: budgets, gradient checks and toy training"};
  app.require_subcommand(1);

  AuditArgs audit;
  auto* a = app.add_subcommand("audit", "Count trainable parameters per method and compare with a target table");
  a->add_option("config", audit.config_path, "Run config (JSON)")->required();
  a->add_option("--targets", audit.targets, "Bundled table (table1, table5, table6, table8) or a JSON file");
  a->add_option("--format", audit.format, "Report format")->check(CLI::IsMember({"csv", "table", "json"}));
  a->add_option("-o,--output", audit.output, "Write the report to this file");

  GradcheckArgs grad;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every trainable group on a toy model");
  g->add_option("config", grad.config_path, "Run config (JSON)")->required();
  g->add_option("--method", grad.methods, "Method tag or label (repeatable); default: all methods in the config");
  g->add_option("--eps", grad.eps, "Central-difference step");
  g->add_option("--tolerance", grad.tolerance, "Largest accepted relative error");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train methods on the synthetic tasks and write one result JSON per method");
  t->add_option("config", train.config_path, "Run config (JSON)")->required();
  t->add_option("--method", train.methods, "Method tag or label (repeatable); default: all methods in the config");
  t->add_option("--baseline", train.baseline, "Result JSON to compute delta_up against");

  DeltaUpArgs delta;
  auto* d = app.add_subcommand("deltaup", "Mean signed relative change of a result against a baseline, in percent");
  d->add_option("results", delta.results_path, "Result JSON")->required();
  d->add_option("baseline", delta.baseline_path, "Baseline result JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(config_error);
  }

  try {
    if (*a) return cmd_audit(audit, std::cout, std::cerr);
    if (*g) return cmd_gradcheck(grad, std::cout, std::cerr);
    if (*t) return cmd_train(train, std::cout, std::cerr);
    if (*d) return cmd_deltaup(delta, std::cout, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
  }
  return 1;
}
