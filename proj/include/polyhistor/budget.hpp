#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "polyhistor/backbone.hpp"
#include "polyhistor/peft.hpp"

namespace polyhistor {

/// (encoder, total) trainable counts; total includes every head entry.
std::pair<std::size_t, std::size_t> count_trainable(const TrainableSet& ts);

/// Frozen backbone parameter count from the configuration alone.
std::size_t backbone_closed_form(const BackboneConfig& config);

/// Analytic encoder-side count split into named components
/// ("hypernet", "task_embedding", "layer_embedding", "scaling_kernel", "adapter", ...).
std::map<std::string, std::size_t> closed_form_breakdown(const MethodConfig& method, const BackboneConfig& config,
                                                         std::size_t num_tasks);

/// Sum of closed_form_breakdown.
std::size_t closed_form(const MethodConfig& method, const BackboneConfig& config, std::size_t num_tasks);

/// Parameters of one decoder head per entry of `out_channels`.
std::size_t decoder_closed_form(const BackboneConfig& config, const std::vector<std::size_t>& out_channels,
                                std::size_t embed_dim);

enum class Tolerance {
  exact_backbone,  // within 3%
  pinned,          // within 15%
  underreported,   // within a factor of 3, discrepancy note required
  exact_zero,      // must be exactly 0
  ordering,        // order of clearly separated targets must be preserved
};

Tolerance parse_tolerance(std::string_view s);
std::string_view to_string(Tolerance t);

struct TargetRow {
  MethodConfig method;
  double encoder_millions = 0.0;
  std::optional<double> all_millions;
  Tolerance tolerance = Tolerance::pinned;
};

struct TargetTable {
  std::string name;
  std::string backbone;  // preset name
  std::string source;
  std::size_t num_tasks = 4;
  std::optional<double> decoder_millions;
  std::vector<TargetRow> rows;

  /// Bundled tables: table1, table5, table6, table8.
  static std::vector<std::string> bundled_names();
  /// A bundled name or a path to a JSON file with the same layout.
  static TargetTable load(std::string_view name_or_path);
  static TargetTable parse(std::string_view json_text, std::string_view origin);
};

/// Two configs describe the same table row when tag and all count-relevant hyperparameters agree.
bool same_row(const MethodConfig& a, const MethodConfig& b);

struct BudgetRecord {
  MethodConfig method;
  std::size_t encoder = 0;
  std::size_t total = 0;
  std::size_t closed_form = 0;
  std::map<std::string, std::size_t> breakdown;
  std::optional<double> target_millions;
  std::optional<Tolerance> tolerance;
  std::optional<double> rel_gap;
  /// Empty when no target applies.
  std::optional<bool> within;
  std::string note;
};

struct Discrepancy {
  std::string method;
  std::string kind;
  double target_millions = 0.0;
  double count_millions = 0.0;
  double ratio = 0.0;
  std::string detail;
};

struct BudgetReport {
  std::string backbone;
  std::string target_table;
  std::size_t num_tasks = 0;
  std::size_t decoder_params = 0;
  std::vector<BudgetRecord> records;
  std::vector<Discrepancy> discrepancies;
  /// Pairs (a, b) whose targets differ by >= 10x but whose counts are not ordered the same way.
  std::vector<std::pair<std::string, std::string>> ordering_violations;

  /// True when every record with a target is within tolerance and no ordering is violated.
  bool all_within() const;
  std::string to_csv() const;
  std::string to_text() const;
  std::string to_json() const;
};

struct AuditOptions {
  std::size_t num_tasks = 4;
  std::vector<std::size_t> head_channels = {21, 7, 1, 3};
  std::size_t embed_dim = 256;
};

/// One record per method, counted from a shape-only build and from the closed form.
/// With targets, each method is matched to a row by same_row; unmatched methods carry no target.
BudgetReport audit_table(const std::vector<MethodConfig>& methods, const BackboneConfig& config,
                         const TargetTable* targets, const AuditOptions& options = {});

}  // namespace polyhistor
