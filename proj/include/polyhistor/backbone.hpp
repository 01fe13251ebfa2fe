#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "polyhistor/adapter.hpp"
#include "polyhistor/tensor.hpp"

namespace polyhistor {

/// Hierarchical vision transformer layout.
///
/// Block b has width dims()[b] = base_dim * scales()[b]; each block halves the
/// token grid relative to the previous one. When `block_dims` is empty the
/// widths double per block.
struct BackboneConfig {
  std::string preset;
  std::size_t base_dim = 96;
  std::vector<std::size_t> block_dims;
  std::vector<std::size_t> depths{2, 2, 6, 2};
  std::vector<std::size_t> num_heads{3, 6, 12, 24};
  std::size_t patch_size = 4;
  double mlp_ratio = 4.0;
  std::size_t input_height = 224;
  std::size_t input_width = 224;
  std::size_t in_channels = 3;
  /// Relative-position tables cover offsets within [-(w-1), w-1] per axis.
  std::size_t window_size = 7;
  bool relative_bias = true;

  /// "swin_tiny", "swin_base", "pvt_small_like" or "toy".
  static BackboneConfig from_preset(std::string_view name);
  static std::vector<std::string> preset_names();

  std::size_t num_blocks() const { return depths.size(); }
  std::size_t num_layers() const;
  std::vector<std::size_t> dims() const;
  std::vector<std::size_t> scales() const;
  std::size_t mlp_hidden(std::size_t width) const;
  std::size_t block_of_layer(std::size_t layer) const;

  /// Throws ConfigError naming the first violated invariant.
  void validate() const;
};

struct NamedParam {
  enum class Role { weight, bias, norm_gain, norm_bias, relative_bias };
  std::string name;
  Shape shape;
  Role role = Role::weight;
  Tensor value;  // undefined for shape-only models

  std::size_t count() const { return shape_numel(shape); }
};

struct LayerInfo {
  std::size_t index = 0;
  std::size_t block = 0;
  std::size_t width = 0;
  std::size_t heads = 0;
  std::size_t hidden = 0;
  std::string prefix;  // parameter name prefix, e.g. "layers.3."
};

/// One pyramid stage: row-major tokens (height*width x channels).
struct FeatureMap {
  Tensor tokens;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t channels() const { return tokens.cols(); }
  Shape shape() const { return {height, width, channels()}; }
};

using FeaturePyramid = std::vector<FeatureMap>;

/// Frozen backbone. Immutable after build; share freely across forward passes.
class HvtModel {
 public:
  const BackboneConfig& config() const { return config_; }
  bool materialized() const { return materialized_; }
  const std::vector<NamedParam>& parameters() const { return params_; }
  const NamedParam& parameter(std::string_view name) const;
  bool has_parameter(std::string_view name) const;
  const std::vector<LayerInfo>& layers() const { return layers_; }

  std::size_t parameter_count() const;
  /// FNV-1a over the raw bytes of every parameter value, in declaration order.
  std::uint64_t checksum() const;

  friend HvtModel build(const BackboneConfig& config, std::uint64_t seed, bool materialize);

 private:
  void declare(std::string name, Shape shape, NamedParam::Role role);

  BackboneConfig config_;
  bool materialized_ = false;
  std::vector<NamedParam> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<LayerInfo> layers_;
};

/// Deterministic construction from `seed`; every parameter is frozen. With
/// materialize=false only shapes are recorded (counting without allocation).
HvtModel build(const BackboneConfig& config, std::uint64_t seed, bool materialize = true);

/// post_attention, post_mlp and attention_qv for every layer, ordered by layer.
std::vector<InsertionPoint> insertion_points(const HvtModel& model);

/// Runs the backbone on an H x W x C image; one feature map per block.
FeaturePyramid forward(const HvtModel& model, const Tensor& image,
                       const ResolvedAttachments& attachments = {});

}  // namespace polyhistor
