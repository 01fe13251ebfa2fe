#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "polyhistor/backbone.hpp"
#include "polyhistor/budget.hpp"
#include "polyhistor/multitask.hpp"
#include "polyhistor/peft.hpp"

namespace polyhistor {

struct DataConfig {
  std::size_t num_train = 64;
  std::size_t num_val = 32;
  /// Spacing of label points in pixels; 0 means the backbone's patch size.
  std::size_t label_stride = 0;
};

/// Declarative description of one CLI invocation. Layout in schemas/run_config.schema.json.
struct RunConfig {
  BackboneConfig backbone;
  std::vector<MethodConfig> methods;
  std::vector<TaskSpec> tasks;
  TrainConfig training;
  DataConfig data;
  AuditOptions audit;
  /// Target table used by `audit` when --targets is not given.
  std::optional<std::string> targets;
  std::uint64_t seed = 0;
  std::string output_dir = "runs";

  /// Validates everything before returning; errors are ConfigError "origin:line: /pointer: message".
  static RunConfig parse(std::string_view json_text, std::string origin);
  static RunConfig load(const std::string& path);

  /// Replaces `seed` (and the training seed) with POLYHISTOR_SEED when it is set.
  void apply_environment();
  std::size_t label_stride() const { return data.label_stride ? data.label_stride : backbone.patch_size; }
};

}  // namespace polyhistor
