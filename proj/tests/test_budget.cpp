#include <string>

#include "doctest.h"
#include "polyhistor/budget.hpp"
#include "polyhistor/errors.hpp"
#include "polyhistor/multitask.hpp"

using namespace polyhistor;

namespace {

std::vector<MethodConfig> grid_for(const BackboneConfig& c) {
  std::vector<MethodConfig> out;
  const bool toy = c.preset == "toy";
  for (Method tag : all_methods()) {
    auto m = MethodConfig::defaults(tag);
    if (toy) {
      m.rank = RankSpec::fixed(2);
      if (tag == Method::phm || tag == Method::hyperformer || tag == Method::polyhistor) m.rho = 2;
      if (tag == Method::phm || tag == Method::compacter || tag == Method::compacter_pp) m.phm_n = 2;
      m.task_embedding_k = 8;
    }
    if (c.preset == "pvt_small_like" && tag == Method::phm) m.phm_n = 4;
    out.push_back(m);
    if (tag == Method::adapter || tag == Method::polyhistor_lite || tag == Method::compacter) {
      m.placement = {Position::post_attention};
      out.push_back(m);
      m.placement = {Position::post_attention, Position::post_mlp};
      m.adapter_bias = false;
      out.push_back(m);
    }
  }
  return out;
}

std::size_t enumerate(const MethodConfig& m, const HvtModel& model, std::size_t tasks) {
  return build_method(m, model, tasks, 0).trainables.count(Partition::encoder);
}

}  // namespace

TEST_CASE("backbone closed form equals the enumerated parameters") {
  for (const auto& name : BackboneConfig::preset_names()) {
    CAPTURE(name);
    const auto c = BackboneConfig::from_preset(name);
    CHECK(backbone_closed_form(c) == build(c, 0, false).parameter_count());
  }
}

TEST_CASE("closed form equals enumeration for every method") {
  for (const std::string name : {"toy", "swin_tiny", "pvt_small_like"}) {
    const auto c = BackboneConfig::from_preset(name);
    const HvtModel model = build(c, 0, false);
    for (const auto& m : grid_for(c))
      for (std::size_t tasks : {1, 4}) {
        CAPTURE(name);
        CAPTURE(m.display_name());
        CAPTURE(tasks);
        CHECK(closed_form(m, c, tasks) == enumerate(m, model, tasks));
      }
  }
}

TEST_CASE("decoder closed form equals enumerated heads") {
  for (const std::string name : {"toy", "swin_tiny"}) {
    const auto c = BackboneConfig::from_preset(name);
    TrainableSet set;
    ParamFactory f(set, false, 0);
    const std::vector<std::size_t> channels = {21, 7, 1, 3};
    for (std::size_t t = 0; t < channels.size(); ++t) make_head(c, channels[t], 64, f, t);
    CHECK(set.count(Partition::head) == decoder_closed_form(c, channels, 64));
    CHECK(set.count(Partition::encoder) == 0);
  }
}

TEST_CASE("shape-only builds count without allocating") {
  const auto c = BackboneConfig::from_preset("swin_tiny");
  const HvtModel model = build(c, 0, false);
  CHECK_FALSE(model.materialized());
  const auto b = build_method(MethodConfig::defaults(Method::adapter), model, 4, 0);
  for (const auto& e : b.trainables.entries()) CHECK_FALSE(e.value.defined());
}

TEST_CASE("hypernet cost grows quadratically for full and linearly for decomposed generation") {
  auto small = BackboneConfig::from_preset("swin_tiny");
  auto large = small;
  large.base_dim *= 2;
  large.num_heads = {6, 12, 24, 48};
  auto hyper = MethodConfig::defaults(Method::hyperformer);
  auto poly = MethodConfig::defaults(Method::polyhistor);
  poly.rank = RankSpec::fixed(4);
  const auto h = [&](const MethodConfig& m, const BackboneConfig& c) {
    return static_cast<double>(closed_form_breakdown(m, c, 4).at("hypernet"));
  };
  CHECK(h(hyper, large) / h(hyper, small) == doctest::Approx(4.0).epsilon(0.01));
  CHECK(h(poly, large) / h(poly, small) == doctest::Approx(2.0).epsilon(0.01));
}

TEST_CASE("tolerance names") {
  for (auto t : {Tolerance::exact_backbone, Tolerance::pinned, Tolerance::underreported, Tolerance::exact_zero,
                 Tolerance::ordering})
    CHECK(parse_tolerance(to_string(t)) == t);
  CHECK_THROWS_AS(parse_tolerance("loose"), ConfigError);
}

TEST_CASE("bundled target tables load") {
  const auto names = TargetTable::bundled_names();
  CHECK(names == std::vector<std::string>{"table1", "table5", "table6", "table8"});
  for (const auto& n : names) {
    const auto t = TargetTable::load(n);
    CHECK(t.name == n);
    CHECK_FALSE(t.rows.empty());
    CHECK_NOTHROW(BackboneConfig::from_preset(t.backbone));
  }
  CHECK_THROWS_AS(TargetTable::load("table99"), ConfigError);
}

TEST_CASE("target table errors name the line") {
  const std::string bad_tolerance = R"({
  "name": "t",
  "backbone": "toy",
  "rows": [
    {"method": "adapter", "encoder": 1.0,
     "tolerance": "loose"}
  ]
})";
  try {
    TargetTable::parse(bad_tolerance, "t.json");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("t.json:6:") == 0);
  }

  const std::string unknown_key = "{\n  \"name\": \"t\",\n  \"backbone\": \"toy\",\n  \"rows\": [],\n  \"colour\": 1\n}";
  try {
    TargetTable::parse(unknown_key, "u.json");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("colour") != std::string::npos);
  }

  CHECK_THROWS_AS(TargetTable::parse("{\n  \"name\": \n", "v.json"), ConfigError);
}

TEST_CASE("rows match on tag and count-relevant hyperparameters") {
  auto a = MethodConfig::defaults(Method::adapter);
  auto b = a;
  b.label = "renamed";
  CHECK(same_row(a, b));
  b.rho = 4;
  CHECK_FALSE(same_row(a, b));
  CHECK_FALSE(same_row(a, MethodConfig::defaults(Method::shared_adapter)));
}

TEST_CASE("audit without targets only counts") {
  const auto c = BackboneConfig::from_preset("toy");
  const auto report = audit_table(grid_for(c), c, nullptr);
  CHECK(report.all_within());
  for (const auto& r : report.records) {
    CHECK_FALSE(r.target_millions.has_value());
    CHECK(r.closed_form == r.encoder);
    CHECK(r.total == r.encoder + report.decoder_params);
  }
}

TEST_CASE("audit against the main table") {
  const auto t = TargetTable::load("table1");
  const auto c = BackboneConfig::from_preset(t.backbone);
  const auto report = audit_table({}, c, &t);
  CHECK(report.records.size() == t.rows.size());
  CHECK(report.all_within());
  CHECK(report.decoder_params == doctest::Approx(*t.decoder_millions * 1e6).epsilon(0.01));

  std::size_t notes = 0;
  for (const auto& d : report.discrepancies) notes += d.kind == "unreported_components";
  std::size_t underreported = 0;
  for (const auto& r : t.rows) underreported += r.tolerance == Tolerance::underreported;
  CHECK(notes == underreported);

  const std::string csv = report.to_csv();
  CHECK(csv.rfind("method,rho,rank,k,encoder_params,total_params,closed_form,paper_target,rel_gap\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(t.rows.size() + 1));
  CHECK(report.to_json().find("\"discrepancies\"") != std::string::npos);
}

TEST_CASE("ordering violations are detected") {
  TargetTable t;
  t.name = "synthetic";
  t.backbone = "toy";
  auto big = MethodConfig::defaults(Method::bitfit);
  auto small = MethodConfig::defaults(Method::relative_bias);
  t.rows.push_back({big, 0.0001, std::nullopt, Tolerance::ordering});
  t.rows.push_back({small, 0.01, std::nullopt, Tolerance::ordering});  // claims relative_bias is 100x larger
  const auto c = BackboneConfig::from_preset("toy");
  const auto report = audit_table({}, c, &t);
  CHECK_FALSE(report.all_within());
  REQUIRE(report.ordering_violations.size() == 1);
  CHECK(report.ordering_violations[0].first == "relative_bias");
}
