#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "polyhistor/backbone.hpp"
#include "polyhistor/peft.hpp"
#include "polyhistor/tensor.hpp"

namespace polyhistor {

enum class LossKind { cross_entropy, l1, balanced_bce };
enum class Direction { higher_better, lower_better };
/// What the synthetic generator writes as this task's label.
enum class LabelSource { shape_class, shape_part, foreground, surface_normal };

LossKind parse_loss(std::string_view s);
std::string_view to_string(LossKind k);
Direction parse_direction(std::string_view s);
std::string_view to_string(Direction d);
LabelSource parse_label_source(std::string_view s);
std::string_view to_string(LabelSource s);

struct TaskSpec {
  std::string name;
  LossKind loss = LossKind::cross_entropy;
  std::size_t out_channels = 1;
  Direction direction = Direction::higher_better;
  LabelSource source = LabelSource::shape_class;

  /// Throws ConfigError when the loss, channels, direction and label source disagree.
  void validate() const;
};

/// Four synthetic dense tasks: shape classes (CE, 4), shape parts (CE, 3),
/// foreground (balanced BCE, 1) and surface normals (L1, 3).
std::vector<TaskSpec> synthetic_tasks();
/// Output channels of the four dense tasks used for budget reports: 21, 7, 1, 3.
std::vector<std::size_t> reference_head_channels();

/// Linear projection of every stage to a common width, bilinear upsampling to
/// stage-1 resolution, channel concatenation, a fusion layer and a prediction layer.
struct DecoderHead {
  std::vector<Tensor> proj_weight;  // d_b x E
  std::vector<Tensor> proj_bias;    // E
  Tensor fuse_weight;               // (B*E) x E
  Tensor fuse_bias;
  Tensor pred_weight;  // E x out
  Tensor pred_bias;
  std::size_t embed_dim = 0;
  std::size_t out_channels = 0;
};

/// Registers the head's tensors in `factory` under "head<task>." with Partition::head.
DecoderHead make_head(const BackboneConfig& config, std::size_t out_channels, std::size_t embed_dim, ParamFactory& factory,
                      std::size_t task);

/// Returns H1 x W1 x out_channels where H1 x W1 is the first stage's grid.
Tensor decode(const FeaturePyramid& pyramid, const DecoderHead& head);

/// Row-interpolation matrix (out_h*out_w) x (in_h*in_w) for bilinear resizing with half-pixel centres.
Tensor bilinear_matrix(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w);

/// Per-pixel targets for one task. `classes` for cross entropy, `binary` for
/// balanced BCE, `values` (pixels x channels) for L1.
struct TaskTarget {
  std::vector<std::size_t> classes;
  std::vector<double> binary;
  Tensor values;

  std::size_t pixels() const;
};

/// Mean over pixels; `pred` is any tensor whose last dimension is the channel axis.
Tensor cross_entropy_loss(const Tensor& pred, const std::vector<std::size_t>& target);
Tensor l1_loss(const Tensor& pred, const Tensor& target);
/// Positive terms weighted by #neg/#pixels, negative terms by #pos/#pixels.
Tensor balanced_bce_loss(const Tensor& pred, const std::vector<double>& target);
Tensor task_loss(const Tensor& pred, const TaskTarget& target, LossKind kind);

/// (100 / T) * sum_t sigma_t * (M_t - B_t) / B_t, sigma_t = -1 for lower-is-better tasks.
double delta_up(const std::vector<double>& results, const std::vector<double>& baseline,
                const std::vector<Direction>& directions);

struct Sample {
  Tensor image;                     // H x W x 3
  std::vector<TaskTarget> targets;  // one per task
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::size_t label_height = 0;
  std::size_t label_width = 0;
};

/// Procedural images with 1-3 coloured shapes over a tilted height field. Labels are
/// sampled at the centre of every `stride` x `stride` cell. Deterministic in seed.
Dataset synth_tasks(std::uint64_t seed, std::size_t size, std::size_t stride, const std::vector<TaskSpec>& tasks,
                    std::size_t num_train, std::size_t num_val);

enum class Optimizer { sgd, adam };
Optimizer parse_optimizer(std::string_view s);
std::string_view to_string(Optimizer o);

struct TrainConfig {
  std::size_t epochs = 20;
  double lr = 0.01;
  std::size_t batch_size = 8;
  Optimizer optimizer = Optimizer::sgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t embed_dim = 32;
  std::uint64_t seed = 0;
};

struct TaskResult {
  std::string name;
  double metric = 0.0;
  Direction direction = Direction::higher_better;
  double val_loss = 0.0;
};

struct RunResult {
  std::string method;
  std::uint64_t seed = 0;
  std::vector<TaskResult> per_task;
  std::optional<double> delta_up;

  std::string to_json() const;
  static RunResult from_json(std::string_view text);
  std::vector<double> metrics() const;
  std::vector<Direction> directions() const;
};

/// delta_up of `result` against `baseline`, matching tasks by position; names must agree.
double delta_up(const RunResult& result, const RunResult& baseline);

struct TrainReport {
  RunResult result;
  std::vector<double> epoch_losses;
  std::uint64_t frozen_checksum_before = 0;
  std::uint64_t frozen_checksum_after = 0;
  std::size_t trainable_encoder = 0;
  std::size_t trainable_head = 0;
};

/// One resolve per task for task-specific attachments, a single one otherwise.
std::vector<ResolvedAttachments> resolve_all(const AttachmentSet& attachments, std::size_t num_tasks);

/// Per-task losses on one sample, in task order.
std::vector<Tensor> task_losses(const HvtModel& model, const std::vector<ResolvedAttachments>& resolved,
                                const std::vector<DecoderHead>& heads, const std::vector<TaskSpec>& tasks,
                                const Sample& sample);

/// Sum over tasks of the task loss on one sample.
Tensor multitask_loss(const HvtModel& model, const std::vector<ResolvedAttachments>& resolved,
                      const std::vector<DecoderHead>& heads, const std::vector<TaskSpec>& tasks, const Sample& sample);

/// Trains the method's trainables plus freshly initialised heads (seeded by cfg.seed
/// only) with uniform task weighting and a linearly decayed step size, then evaluates
/// on the validation split. Throws NumericalError when the loss becomes non-finite.
TrainReport train(const HvtModel& model, const MethodBuild& method, const std::vector<TaskSpec>& tasks,
                  const Dataset& data, const TrainConfig& cfg, std::string method_name);

/// Mean validation loss and metric per task for fixed heads and attachments.
std::vector<TaskResult> evaluate(const HvtModel& model, const AttachmentSet& attachments,
                                 const std::vector<DecoderHead>& heads, const std::vector<TaskSpec>& tasks,
                                 const std::vector<Sample>& samples);

}  // namespace polyhistor
