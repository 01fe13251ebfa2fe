#include "json_util.hpp"

#include <cctype>

#include "polyhistor/errors.hpp"

namespace polyhistor::detail {

namespace {

std::size_t line_at(std::string_view text, std::size_t offset) {
  std::size_t line = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  return line;
}

// Walks an already validated document and records where every value begins.
class LineScanner {
 public:
  LineScanner(std::string_view text, std::map<std::string, std::size_t>& out) : text_(text), out_(out) {}

  void run() { value(""); }

 private:
  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) {
      if (text_[pos_] == '\n') ++line_;
      ++pos_;
    }
  }

  std::string string_token() {
    std::string s;
    ++pos_;  // opening quote
    while (pos_ < text_.size() && text_[pos_] != '"') {
      if (text_[pos_] == '\\' && pos_ + 1 < text_.size()) {
        s += text_[pos_ + 1];
        pos_ += 2;
        continue;
      }
      s += text_[pos_++];
    }
    ++pos_;
    return s;
  }

  void value(const std::string& pointer) {
    skip_ws();
    out_.emplace(pointer, line_);
    if (pos_ >= text_.size()) return;
    const char c = text_[pos_];
    if (c == '{') {
      ++pos_;
      skip_ws();
      if (text_[pos_] == '}') {
        ++pos_;
        return;
      }
      while (pos_ < text_.size()) {
        skip_ws();
        const std::string key = string_token();
        skip_ws();
        ++pos_;  // colon
        value(child(pointer, key));
        skip_ws();
        if (text_[pos_++] == '}') return;
      }
    } else if (c == '[') {
      ++pos_;
      skip_ws();
      if (text_[pos_] == ']') {
        ++pos_;
        return;
      }
      for (std::size_t i = 0; pos_ < text_.size(); ++i) {
        value(child(pointer, i));
        skip_ws();
        if (text_[pos_++] == ']') return;
      }
    } else if (c == '"') {
      string_token();
    } else {
      while (pos_ < text_.size() && text_[pos_] != ',' && text_[pos_] != '}' && text_[pos_] != ']' &&
             !std::isspace(static_cast<unsigned char>(text_[pos_])))
        ++pos_;
    }
  }

  std::string_view text_;
  std::map<std::string, std::size_t>& out_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
};

}  // namespace

std::string child(const std::string& pointer, std::string_view key) {
  std::string escaped;
  for (char c : key) {
    if (c == '~') escaped += "~0";
    else if (c == '/') escaped += "~1";
    else escaped += c;
  }
  return pointer + "/" + escaped;
}

std::string child(const std::string& pointer, std::size_t index) { return pointer + "/" + std::to_string(index); }

JsonSource::JsonSource(std::string_view text, std::string origin) : origin_(std::move(origin)) {
  try {
    root_ = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(origin_ + ":" + std::to_string(line_at(text, e.byte == 0 ? 0 : e.byte - 1)) +
                      ": malformed JSON (" + e.what() + ")");
  }
  LineScanner(text, lines_).run();
}

std::size_t JsonSource::line(const std::string& pointer) const {
  auto it = lines_.find(pointer);
  return it == lines_.end() ? 1 : it->second;
}

void JsonSource::fail(const std::string& pointer, const std::string& message) const {
  throw ConfigError(origin_ + ":" + std::to_string(line(pointer)) + ": " + (pointer.empty() ? "/" : pointer) + ": " +
                    message);
}

void JsonSource::require_keys(const nlohmann::json& object, const std::string& pointer,
                              std::initializer_list<std::string_view> allowed) const {
  if (!object.is_object()) fail(pointer, "expected an object");
  for (const auto& [key, _] : object.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || a == key;
    if (!ok) {
      std::string list;
      for (auto a : allowed) list += (list.empty() ? "" : ", ") + std::string(a);
      fail(child(pointer, key), "unknown key '" + key + "' (allowed: " + list + ")");
    }
  }
}

MethodConfig method_from_json(const JsonSource& src, const nlohmann::json& j, const std::string& pointer) {
  if (j.is_string()) {
    try {
      return MethodConfig::defaults(parse_method(j.get<std::string>()));
    } catch (const ConfigError& e) {
      src.fail(pointer, e.what());
    }
  }
  src.require_keys(j, pointer,
                   {"method", "label", "rho", "rank", "k", "placement", "prompts_per_layer", "lora_rank", "lora_scale",
                    "phm_n", "nonlinearity", "adapter_bias"});
  if (!j.contains("method") || !j["method"].is_string()) src.fail(pointer, "'method' must be a string");
  MethodConfig m;
  try {
    m = MethodConfig::defaults(parse_method(j["method"].get<std::string>()));
  } catch (const ConfigError& e) {
    src.fail(child(pointer, "method"), e.what());
  }
  auto positive_int = [&](const char* key) -> std::size_t {
    const auto& v = j[key];
    if (!v.is_number_unsigned() || v.get<std::size_t>() == 0) src.fail(child(pointer, key), "must be a positive integer");
    return v.get<std::size_t>();
  };
  auto number = [&](const char* key) -> double {
    const auto& v = j[key];
    if (!v.is_number()) src.fail(child(pointer, key), "must be a number");
    return v.get<double>();
  };
  try {
    if (j.contains("label")) {
      if (!j["label"].is_string()) src.fail(child(pointer, "label"), "must be a string");
      m.label = j["label"].get<std::string>();
    }
    if (j.contains("rho")) m.rho = number("rho");
    if (j.contains("rank")) {
      const auto& r = j["rank"];
      if (r.is_number_unsigned()) m.rank = RankSpec::fixed(positive_int("rank"));
      else if (r.is_string()) {
        try {
          m.rank = RankSpec::parse(r.get<std::string>());
        } catch (const std::exception& e) {
          src.fail(child(pointer, "rank"), e.what());
        }
      }
      else src.fail(child(pointer, "rank"), "must be a positive integer or a string like \"n/4\"");
    }
    if (j.contains("k")) m.task_embedding_k = positive_int("k");
    if (j.contains("placement")) {
      const auto& p = j["placement"];
      if (!p.is_array() || p.empty()) src.fail(child(pointer, "placement"), "must be a non-empty array of positions");
      m.placement.clear();
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (!p[i].is_string()) src.fail(child(child(pointer, "placement"), i), "must be a string");
        try {
          m.placement.push_back(parse_position(p[i].get<std::string>()));
        } catch (const ConfigError& e) {
          src.fail(child(child(pointer, "placement"), i), e.what());
        }
      }
    }
    if (j.contains("prompts_per_layer")) m.prompts_per_layer = positive_int("prompts_per_layer");
    if (j.contains("lora_rank")) m.lora_rank = positive_int("lora_rank");
    if (j.contains("lora_scale")) m.lora_scale = number("lora_scale");
    if (j.contains("phm_n")) m.phm_n = positive_int("phm_n");
    if (j.contains("nonlinearity")) {
      if (!j["nonlinearity"].is_string()) src.fail(child(pointer, "nonlinearity"), "must be a string");
      m.delta = parse_nonlinearity(j["nonlinearity"].get<std::string>());
    }
    if (j.contains("adapter_bias")) {
      if (!j["adapter_bias"].is_boolean()) src.fail(child(pointer, "adapter_bias"), "must be a boolean");
      m.adapter_bias = j["adapter_bias"].get<bool>();
    }
    m.validate();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    if (what.find(": /") != std::string::npos) throw;  // already anchored
    src.fail(pointer, what);
  } catch (const RankError& e) {
    src.fail(pointer, e.what());
  }
  return m;
}

nlohmann::ordered_json method_to_json(const MethodConfig& m) {
  nlohmann::ordered_json j;
  j["method"] = std::string(to_string(m.method));
  if (!m.label.empty()) j["label"] = m.label;
  j["rho"] = m.rho;
  j["rank"] = m.rank.is_fraction() ? nlohmann::ordered_json(m.rank.str()) : nlohmann::ordered_json(m.rank.absolute);
  j["k"] = m.task_embedding_k;
  auto placement = nlohmann::ordered_json::array();
  for (auto p : m.placement) placement.push_back(std::string(to_string(p)));
  j["placement"] = placement;
  j["prompts_per_layer"] = m.prompts_per_layer;
  j["lora_rank"] = m.lora_rank;
  j["lora_scale"] = m.lora_scale;
  j["phm_n"] = m.phm_n;
  j["nonlinearity"] = std::string(to_string(m.delta));
  j["adapter_bias"] = m.adapter_bias;
  return j;
}

}  // namespace polyhistor::detail
