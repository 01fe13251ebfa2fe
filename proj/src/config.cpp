#include "polyhistor/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json_util.hpp"
#include "polyhistor/errors.hpp"

namespace polyhistor {

namespace {

using detail::child;
using detail::JsonSource;
using nlohmann::json;

class Reader {
 public:
  explicit Reader(const JsonSource& src) : src_(src) {}

  std::size_t positive(const json& v, const std::string& ptr) const {
    if (!v.is_number_unsigned() || v.get<std::size_t>() == 0) src_.fail(ptr, "must be a positive integer");
    return v.get<std::size_t>();
  }
  std::size_t non_negative(const json& v, const std::string& ptr) const {
    if (!v.is_number_unsigned()) src_.fail(ptr, "must be a non-negative integer");
    return v.get<std::size_t>();
  }
  double positive_number(const json& v, const std::string& ptr) const {
    if (!v.is_number() || !(v.get<double>() > 0.0)) src_.fail(ptr, "must be a positive number");
    return v.get<double>();
  }
  std::string string(const json& v, const std::string& ptr) const {
    if (!v.is_string()) src_.fail(ptr, "must be a string");
    return v.get<std::string>();
  }
  bool boolean(const json& v, const std::string& ptr) const {
    if (!v.is_boolean()) src_.fail(ptr, "must be a boolean");
    return v.get<bool>();
  }
  std::vector<std::size_t> positive_list(const json& v, const std::string& ptr) const {
    if (!v.is_array() || v.empty()) src_.fail(ptr, "must be a non-empty array of positive integers");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(positive(v[i], child(ptr, i)));
    return out;
  }

  template <typename Fn>
  auto anchored(const std::string& ptr, Fn&& fn) const {
    try {
      return fn();
    } catch (const ConfigError& e) {
      if (std::string(e.what()).find(": /") != std::string::npos) throw;
      src_.fail(ptr, e.what());
    } catch (const RankError& e) {
      src_.fail(ptr, e.what());
    }
  }

  BackboneConfig backbone(const json& j, const std::string& ptr) const {
    if (j.is_string()) return anchored(ptr, [&] { return BackboneConfig::from_preset(j.get<std::string>()); });
    src_.require_keys(j, ptr,
                      {"preset", "base_dim", "block_dims", "depths", "num_heads", "patch_size", "mlp_ratio",
                       "image_size", "in_channels", "window_size", "relative_bias"});
    if (!j.contains("preset")) src_.fail(ptr, "missing 'preset'");
    const std::string name = string(j["preset"], child(ptr, "preset"));
    BackboneConfig c = anchored(child(ptr, "preset"), [&] { return BackboneConfig::from_preset(name); });
    bool changed = false;
    auto field = [&](const char* key) -> const json* {
      if (!j.contains(key)) return nullptr;
      changed = true;
      return &j[key];
    };
    if (auto v = field("base_dim")) c.base_dim = positive(*v, child(ptr, "base_dim"));
    if (auto v = field("block_dims")) c.block_dims = positive_list(*v, child(ptr, "block_dims"));
    if (auto v = field("depths")) c.depths = positive_list(*v, child(ptr, "depths"));
    if (auto v = field("num_heads")) c.num_heads = positive_list(*v, child(ptr, "num_heads"));
    if (auto v = field("patch_size")) c.patch_size = positive(*v, child(ptr, "patch_size"));
    if (auto v = field("mlp_ratio")) c.mlp_ratio = positive_number(*v, child(ptr, "mlp_ratio"));
    if (auto v = field("image_size")) {
      const std::string p = child(ptr, "image_size");
      if (v->is_array()) {
        const auto hw = positive_list(*v, p);
        if (hw.size() != 2) src_.fail(p, "must be an integer or [height, width]");
        c.input_height = hw[0];
        c.input_width = hw[1];
      } else {
        c.input_height = c.input_width = positive(*v, p);
      }
    }
    if (auto v = field("in_channels")) c.in_channels = positive(*v, child(ptr, "in_channels"));
    if (auto v = field("window_size")) c.window_size = positive(*v, child(ptr, "window_size"));
    if (auto v = field("relative_bias")) c.relative_bias = boolean(*v, child(ptr, "relative_bias"));
    if (changed) c.preset = "custom(" + name + ")";
    anchored(ptr, [&] {
      c.validate();
      return 0;
    });
    return c;
  }

  TaskSpec task(const json& j, const std::string& ptr) const {
    if (j.is_string()) {
      const std::string name = j.get<std::string>();
      for (const auto& t : synthetic_tasks())
        if (t.name == name) return t;
      src_.fail(ptr, "unknown task '" + name + "' (built-in: shapes, parts, foreground, normals)");
    }
    src_.require_keys(j, ptr, {"name", "loss", "out_channels", "direction", "source"});
    for (const char* key : {"name", "loss", "out_channels", "source"})
      if (!j.contains(key)) src_.fail(ptr, std::string("missing '") + key + "'");
    TaskSpec t;
    t.name = string(j["name"], child(ptr, "name"));
    t.loss = anchored(child(ptr, "loss"), [&] { return parse_loss(string(j["loss"], child(ptr, "loss"))); });
    t.out_channels = positive(j["out_channels"], child(ptr, "out_channels"));
    t.source = anchored(child(ptr, "source"),
                        [&] { return parse_label_source(string(j["source"], child(ptr, "source"))); });
    t.direction = t.loss == LossKind::l1 ? Direction::lower_better : Direction::higher_better;
    if (j.contains("direction")) {
      t.direction = anchored(child(ptr, "direction"),
                             [&] { return parse_direction(string(j["direction"], child(ptr, "direction"))); });
    }
    anchored(ptr, [&] {
      t.validate();
      return 0;
    });
    return t;
  }

  void training(const json& j, const std::string& ptr, TrainConfig& t) const {
    src_.require_keys(j, ptr,
                      {"epochs", "lr", "batch_size", "optimizer", "adam_beta1", "adam_beta2", "adam_eps", "embed_dim"});
    if (j.contains("epochs")) t.epochs = positive(j["epochs"], child(ptr, "epochs"));
    if (j.contains("lr")) t.lr = positive_number(j["lr"], child(ptr, "lr"));
    if (j.contains("batch_size")) t.batch_size = positive(j["batch_size"], child(ptr, "batch_size"));
    if (j.contains("optimizer")) {
      const std::string p = child(ptr, "optimizer");
      t.optimizer = anchored(p, [&] { return parse_optimizer(string(j["optimizer"], p)); });
    }
    auto unit = [&](const char* key, double& out) {
      if (!j.contains(key)) return;
      const std::string p = child(ptr, key);
      const double v = positive_number(j[key], p);
      if (v >= 1.0) src_.fail(p, "must be below 1");
      out = v;
    };
    unit("adam_beta1", t.adam_beta1);
    unit("adam_beta2", t.adam_beta2);
    if (j.contains("adam_eps")) t.adam_eps = positive_number(j["adam_eps"], child(ptr, "adam_eps"));
    if (j.contains("embed_dim")) t.embed_dim = positive(j["embed_dim"], child(ptr, "embed_dim"));
  }

  void data(const json& j, const std::string& ptr, DataConfig& d) const {
    src_.require_keys(j, ptr, {"num_train", "num_val", "label_stride"});
    if (j.contains("num_train")) d.num_train = positive(j["num_train"], child(ptr, "num_train"));
    if (j.contains("num_val")) d.num_val = positive(j["num_val"], child(ptr, "num_val"));
    if (j.contains("label_stride")) d.label_stride = positive(j["label_stride"], child(ptr, "label_stride"));
  }

  void audit(const json& j, const std::string& ptr, RunConfig& rc) const {
    src_.require_keys(j, ptr, {"num_tasks", "head_channels", "embed_dim", "targets"});
    if (j.contains("num_tasks")) rc.audit.num_tasks = positive(j["num_tasks"], child(ptr, "num_tasks"));
    if (j.contains("head_channels")) rc.audit.head_channels = positive_list(j["head_channels"], child(ptr, "head_channels"));
    if (j.contains("embed_dim")) rc.audit.embed_dim = positive(j["embed_dim"], child(ptr, "embed_dim"));
    if (j.contains("targets")) rc.targets = string(j["targets"], child(ptr, "targets"));
  }

 private:
  const JsonSource& src_;
};

std::uint64_t parse_seed(std::string_view text) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size() || text.empty()) {
    throw ConfigError("POLYHISTOR_SEED='" + std::string(text) + "' is not a non-negative integer");
  }
  return v;
}

}  // namespace

RunConfig RunConfig::parse(std::string_view json_text, std::string origin) {
  const JsonSource src(json_text, std::move(origin));
  const Reader read(src);
  const json& j = src.root();
  src.require_keys(j, "",
                   {"$schema", "description", "backbone", "methods", "tasks", "training", "data", "audit", "seed",
                    "output_dir"});
  RunConfig rc;
  if (!j.contains("backbone")) src.fail("", "missing 'backbone'");
  rc.backbone = read.backbone(j["backbone"], "/backbone");

  if (j.contains("description")) read.string(j["description"], "/description");
  if (j.contains("methods")) {
    const auto& m = j["methods"];
    if (!m.is_array()) src.fail("/methods", "must be an array");
    for (std::size_t i = 0; i < m.size(); ++i) rc.methods.push_back(detail::method_from_json(src, m[i], child("/methods", i)));
  }

  rc.tasks = synthetic_tasks();
  if (j.contains("tasks")) {
    const auto& t = j["tasks"];
    if (!t.is_array() || t.empty()) src.fail("/tasks", "must be a non-empty array");
    rc.tasks.clear();
    for (std::size_t i = 0; i < t.size(); ++i) {
      rc.tasks.push_back(read.task(t[i], child("/tasks", i)));
      for (std::size_t k = 0; k + 1 < rc.tasks.size(); ++k)
        if (rc.tasks[k].name == rc.tasks.back().name) src.fail(child("/tasks", i), "duplicate task name");
    }
  }

  if (j.contains("training")) read.training(j["training"], "/training", rc.training);
  if (j.contains("data")) read.data(j["data"], "/data", rc.data);
  if (j.contains("audit")) read.audit(j["audit"], "/audit", rc);
  if (j.contains("seed")) rc.seed = read.non_negative(j["seed"], "/seed");
  if (j.contains("output_dir")) rc.output_dir = read.string(j["output_dir"], "/output_dir");
  rc.training.seed = rc.seed;

  const std::size_t stride = rc.label_stride();
  if (rc.backbone.input_height % stride != 0 || rc.backbone.input_width % stride != 0) {
    src.fail(j.contains("data") ? "/data" : "/backbone", "image size must be a multiple of the label stride " +
                                                             std::to_string(stride));
  }
  return rc;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

void RunConfig::apply_environment() {
  if (const char* env = std::getenv("POLYHISTOR_SEED"); env != nullptr) {
    seed = parse_seed(env);
    training.seed = seed;
  }
}

}  // namespace polyhistor
