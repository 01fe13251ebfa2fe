#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "polyhistor/adapter.hpp"
#include "polyhistor/backbone.hpp"
#include "polyhistor/random.hpp"
#include "polyhistor/tensor.hpp"

namespace polyhistor {

enum class Method {
  decoder_only,
  full_finetune,
  single_task_full,
  bitfit,
  relative_bias,
  vpt_shallow,
  vpt_deep,
  lora,
  adapter,
  shared_adapter,
  low_rank_adapter,
  phm,
  compacter,
  compacter_pp,
  hyperformer,
  polyhistor,
  polyhistor_lite,
};

Method parse_method(std::string_view name);
std::string_view to_string(Method m);
std::vector<Method> all_methods();
/// Hyperformer, Polyhistor and Polyhistor-Lite.
bool is_hypernet_method(Method m);

/// Either an absolute rank or a ceiling fraction of the bottleneck ("n/4").
struct RankSpec {
  std::size_t absolute = 0;
  std::size_t divisor = 0;

  static RankSpec fixed(std::size_t r) { return {r, 0}; }
  static RankSpec fraction(std::size_t div) { return {0, div}; }
  /// Accepts "4", "n", "n/8".
  static RankSpec parse(std::string_view text);

  bool is_fraction() const { return divisor != 0; }
  std::size_t resolve(std::size_t n) const;
  std::string str() const;
  bool operator==(const RankSpec&) const = default;
};

struct MethodConfig {
  Method method = Method::adapter;
  double rho = 2.0;
  RankSpec rank = RankSpec::fraction(4);
  std::size_t task_embedding_k = 64;
  std::vector<Position> placement{Position::post_mlp};
  std::size_t prompts_per_layer = 50;
  std::size_t lora_rank = 4;
  double lora_scale = 4.0;
  std::size_t phm_n = 4;
  Nonlinearity delta = Nonlinearity::gelu;
  /// Bias vectors on both adapter projections (adapter, shared, low-rank, PHM family).
  bool adapter_bias = true;
  /// Optional display name used in reports.
  std::string label;

  /// Calibrated defaults for each method.
  static MethodConfig defaults(Method m);

  bool places(Position p) const;
  std::string display_name() const;
  void validate() const;
};

/// n = round(d / rho); throws RankError when that is below one.
std::size_t bottleneck_width(std::size_t d, double rho);

enum class Partition { encoder, head };

struct TrainableEntry {
  std::string name;
  Shape shape;
  Partition partition = Partition::encoder;
  /// Owning task, or empty when shared by all tasks.
  std::optional<std::size_t> task;
  /// Parameter group used in gradient reports, e.g. "task_embedding".
  std::string group;
  Tensor value;  // undefined for shape-only builds

  std::size_t count() const { return shape_numel(shape); }
};

class TrainableSet {
 public:
  /// Throws ConfigError on a duplicate name.
  const TrainableEntry& add(TrainableEntry entry);
  void merge(const TrainableSet& other);

  const std::vector<TrainableEntry>& entries() const { return entries_; }
  bool contains(std::string_view name) const;
  const TrainableEntry& find(std::string_view name) const;

  std::size_t count(Partition p) const;
  std::size_t total() const;

  /// Defined tensors, in insertion order.
  std::vector<Tensor> tensors() const;
  std::vector<std::string> groups() const;
  std::vector<Tensor> group_tensors(std::string_view group) const;

 private:
  std::vector<TrainableEntry> entries_;
};

/// Creates trainable tensors, or records shapes only when not materializing.
/// Each tensor draws from a stream seeded by (seed, name), so values do not
/// depend on creation order.
class ParamFactory {
 public:
  using Init = std::function<Tensor(const Shape&, Rng&)>;

  ParamFactory(TrainableSet& set, bool materialize, std::uint64_t seed)
      : set_(set), materialize_(materialize), seed_(seed) {}

  Tensor add(std::string name, Shape shape, const Init& init, std::string group,
             std::optional<std::size_t> task = std::nullopt, Partition partition = Partition::encoder);
  bool materialize() const { return materialize_; }

  static Init normal(double stddev);
  static Init zeros();
  /// Clone of `source` (values copied, never aliased).
  static Init copy(const Tensor& source);

 private:
  TrainableSet& set_;
  bool materialize_;
  std::uint64_t seed_;
};

/// Maps a task index to the concrete tensors the backbone consumes.
/// Resolution re-runs any weight synthesis, so it records gradients when enabled.
class AttachmentSet {
 public:
  using Resolver = std::function<ResolvedAttachments(std::size_t task)>;

  AttachmentSet() = default;
  AttachmentSet(std::size_t num_tasks, bool task_specific, Resolver resolver)
      : num_tasks_(num_tasks), task_specific_(task_specific), resolver_(std::move(resolver)) {}

  /// Empty attachments for every task when no resolver was installed.
  ResolvedAttachments resolve(std::size_t task) const;
  std::size_t num_tasks() const { return num_tasks_; }
  /// False when every task sees the same attachments.
  bool task_specific() const { return task_specific_; }

 private:
  std::size_t num_tasks_ = 0;
  bool task_specific_ = false;
  Resolver resolver_;
};

struct MethodBuild {
  AttachmentSet attachments;
  TrainableSet trainables;
};

/// Builds the trainable encoder-side parameters of a method and the resolver that
/// turns them into attachments. A shape-only model yields a shape-only set whose
/// attachments throw on resolve.
MethodBuild build_method(const MethodConfig& method, const HvtModel& model, std::size_t num_tasks, std::uint64_t seed);

/// Sum over i of kron(a[i], b[i]).
Tensor phm_weight(const std::vector<Tensor>& a, const std::vector<Tensor>& b);

/// "task3." style prefix for per-task parameter names.
std::string task_prefix(std::size_t task);

}  // namespace polyhistor
