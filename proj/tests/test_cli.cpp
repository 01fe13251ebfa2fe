#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "polyhistor/cli.hpp"
#include "polyhistor/errors.hpp"

using namespace polyhistor;
namespace fs = std::filesystem;

namespace {

const std::string kConfigs = POLYHISTOR_SOURCE_DIR "/configs/";

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("polyhistor_cli_" + std::to_string(std::rand()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string write(const std::string& name, const std::string& text) const {
    const fs::path p = path / name;
    std::ofstream(p) << text;
    return p.string();
  }
};

std::string error_of(const std::string& text) {
  try {
    RunConfig::parse(text, "cfg.json");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

RunResult result_with(std::vector<double> metrics) {
  RunResult r;
  r.method = "m";
  const char* names[] = {"shapes", "parts", "foreground", "normals"};
  const Direction dirs[] = {Direction::higher_better, Direction::higher_better, Direction::higher_better,
                            Direction::lower_better};
  for (std::size_t i = 0; i < metrics.size(); ++i) r.per_task.push_back({names[i], metrics[i], dirs[i], 0.1});
  return r;
}

const char* kSmallTrain = R"({
  "backbone": "toy",
  "methods": ["decoder_only", {"method": "polyhistor_lite", "rho": 2, "rank": "n/4", "k": 8}],
  "training": {"epochs": 1, "batch_size": 2, "embed_dim": 8},
  "data": {"num_train": 4, "num_val": 2},
  "output_dir": "@OUT@"
})";

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) s.replace(pos, from.size(), to);
  return s;
}

}  // namespace

TEST_CASE("shipped configs parse") {
  for (const char* name : {"toy.json", "swin_tiny_table1.json", "swin_tiny_rho_sweep.json", "swin_tiny_rank_ablation.json",
                           "pvt_table8.json"}) {
    CAPTURE(name);
    const RunConfig rc = RunConfig::load(kConfigs + name);
    CHECK((!rc.methods.empty() || rc.targets.has_value()));
  }
  const RunConfig toy = RunConfig::load(kConfigs + "toy.json");
  CHECK(toy.methods.size() == 17);
  CHECK(toy.tasks.size() == 4);
  CHECK(toy.training.optimizer == Optimizer::adam);
}

TEST_CASE("config defaults and backbone overrides") {
  const RunConfig rc = RunConfig::parse(R"({"backbone": "toy"})", "cfg.json");
  CHECK(rc.tasks.size() == 4);
  CHECK(rc.backbone.preset == "toy");
  CHECK(rc.label_stride() == rc.backbone.patch_size);

  const RunConfig custom = RunConfig::parse(R"({"backbone": {"preset": "toy", "image_size": 64}})", "cfg.json");
  CHECK(custom.backbone.preset == "custom(toy)");
  CHECK(custom.backbone.input_height == 64);
}

TEST_CASE("config errors name file, line and pointer") {
  CHECK(error_of("{\n  \"backbone\": \"toy\",\n  \"colour\": 3\n}").rfind("cfg.json:3: /colour: unknown key", 0) == 0);
  CHECK(error_of("{\n  \"backbone\": \"toy\",\n  \"methods\": [\n    {\"method\": \"lora\", \"lora_rnk\": 2}\n  ]\n}")
            .rfind("cfg.json:4: /methods/0/lora_rnk", 0) == 0);
  CHECK(error_of(R"({"backbone": "resnet"})").find("/backbone") != std::string::npos);
  CHECK(error_of(R"({"backbone": "toy", "methods": [{"method": "polyhistor", "rank": "n/0"}]})").find("/methods/0/rank") !=
        std::string::npos);
  CHECK(error_of(R"({"backbone": "toy", "tasks": ["shapes", "shapes"]})").find("duplicate task") != std::string::npos);
  CHECK(error_of(R"({"backbone": "toy", "training": {"lr": -1}})").find("/training/lr") != std::string::npos);
  CHECK(error_of(R"({"backbone": "toy", "data": {"label_stride": 5}})").find("multiple of the label stride") !=
        std::string::npos);
  CHECK(error_of(R"({"methods": []})").find("missing 'backbone'") != std::string::npos);
  CHECK(error_of("{\"backbone\": ").find("cfg.json") != std::string::npos);
}

TEST_CASE("POLYHISTOR_SEED overrides the config seed") {
  RunConfig rc = RunConfig::parse(R"({"backbone": "toy", "seed": 3})", "cfg.json");
  ::setenv("POLYHISTOR_SEED", "17", 1);
  rc.apply_environment();
  CHECK(rc.seed == 17);
  CHECK(rc.training.seed == 17);
  ::setenv("POLYHISTOR_SEED", "17x", 1);
  CHECK_THROWS_AS(rc.apply_environment(), ConfigError);
  ::unsetenv("POLYHISTOR_SEED");
  rc.apply_environment();
  CHECK(rc.seed == 17);
}

TEST_CASE("audit exit codes") {
  std::ostringstream out, err;
  CHECK(cli::cmd_audit({kConfigs + "toy.json", std::nullopt, "csv", std::nullopt}, out, err) == cli::ok);
  CHECK(out.str().rfind("method,rho,rank,k,encoder_params,total_params,closed_form,paper_target,rel_gap\n", 0) == 0);

  out.str("");
  err.str("");
  CHECK(cli::cmd_audit({kConfigs + "swin_tiny_table1.json", std::nullopt, "table", std::nullopt}, out, err) == cli::ok);

  out.str("");
  err.str("");
  CHECK(cli::cmd_audit({kConfigs + "pvt_table8.json", std::nullopt, "json", std::nullopt}, out, err) ==
        cli::tolerance_failure);
  CHECK(err.str().find("tolerance failure") != std::string::npos);

  err.str("");
  CHECK(cli::cmd_audit({kConfigs + "toy.json", std::string("table1"), "csv", std::nullopt}, out, err) == cli::config_error);
  CHECK(err.str().find("swin_tiny") != std::string::npos);
  CHECK(cli::cmd_audit({kConfigs + "toy.json", std::nullopt, "yaml", std::nullopt}, out, err) == cli::config_error);
  CHECK(cli::cmd_audit({"/nonexistent.json", std::nullopt, "csv", std::nullopt}, out, err) == cli::config_error);
}

TEST_CASE("audit writes to a file") {
  TempDir dir;
  std::ostringstream out, err;
  const std::string path = (dir.path / "sub" / "audit.csv").string();
  CHECK(cli::cmd_audit({kConfigs + "toy.json", std::nullopt, "csv", path}, out, err) == cli::ok);
  CHECK(fs::exists(path));
}

TEST_CASE("deltaup command") {
  TempDir dir;
  const std::string base = dir.write("base.json", result_with({67.21, 61.93, 62.35, 17.97}).to_json());
  const std::string lite = dir.write("lite.json", result_with({70.24, 59.12, 64.75, 17.40}).to_json());
  std::ostringstream out, err;
  CHECK(cli::cmd_deltaup({base, base}, out, err) == cli::ok);
  CHECK(out.str() == "0.00\n");
  out.str("");
  CHECK(cli::cmd_deltaup({lite, base}, out, err) == cli::ok);
  CHECK(out.str() == "1.75\n");

  const std::string broken = dir.write("broken.json", "{\"method\": 1}");
  err.str("");
  CHECK(cli::cmd_deltaup({broken, base}, out, err) == cli::config_error);
  CHECK(err.str().find("broken.json") != std::string::npos);
  const std::string three = dir.write("three.json", result_with({1, 2, 3}).to_json());
  CHECK(cli::cmd_deltaup({three, base}, out, err) == cli::config_error);
}

TEST_CASE("train writes results that deltaup reads back") {
  TempDir dir;
  const std::string cfg = dir.write("cfg.json", replace_all(kSmallTrain, "@OUT@", (dir.path / "runs").string()));
  std::ostringstream out, err;
  REQUIRE(cli::cmd_train({cfg, {}, std::nullopt}, out, err) == cli::ok);
  const std::string base = (dir.path / "runs" / "decoder_only.json").string();
  const std::string lite = (dir.path / "runs" / "polyhistor_lite.json").string();
  REQUIRE(fs::exists(base));
  REQUIRE(fs::exists(lite));

  out.str("");
  CHECK(cli::cmd_deltaup({base, base}, out, err) == cli::ok);
  CHECK(out.str() == "0.00\n");

  out.str("");
  CHECK(cli::cmd_train({cfg, {"polyhistor_lite"}, base}, out, err) == cli::ok);
  CHECK(out.str().find("delta_up") != std::string::npos);
  const RunResult with_baseline = [&] {
    std::ifstream in(lite);
    std::stringstream ss;
    ss << in.rdbuf();
    return RunResult::from_json(ss.str());
  }();
  REQUIRE(with_baseline.delta_up.has_value());
}

TEST_CASE("train reports divergence as a numerical failure") {
  TempDir dir;
  std::string text = replace_all(kSmallTrain, "@OUT@", (dir.path / "runs").string());
  text = replace_all(text, "\"epochs\": 1,", "\"epochs\": 1, \"optimizer\": \"sgd\", \"lr\": 1e200,");
  const std::string cfg = dir.write("cfg.json", text);
  std::ostringstream out, err;
  CHECK(cli::cmd_train({cfg, {"polyhistor_lite"}, std::nullopt}, out, err) == cli::numerical_error);
  CHECK(err.str().find("numerical failure") != std::string::npos);
}

TEST_CASE("gradcheck on a cheap method") {
  std::ostringstream out, err;
  CHECK(cli::cmd_gradcheck({kConfigs + "toy.json", {"decoder_only"}, 1e-4, 1e-4}, out, err) == cli::ok);
  CHECK(out.str().find("no gradient expected (frozen), skipped") != std::string::npos);
  CHECK(cli::cmd_gradcheck({kConfigs + "toy.json", {"decoder_only"}, 0.0, 1e-4}, out, err) == cli::config_error);
  CHECK(cli::cmd_gradcheck({kConfigs + "swin_tiny_table1.json", {"bitfit"}, 1e-4, 1e-4}, out, err) == cli::config_error);
  CHECK(cli::cmd_gradcheck({kConfigs + "toy.json", {"no_such_method"}, 1e-4, 1e-4}, out, err) == cli::config_error);
}
