#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "aggpose/aggregation.hpp"
#include "aggpose/blocks.hpp"

namespace aggpose {

/// Declarative network description. Levels are 1-based (level 1 = 1/4 of the
/// input); stage s runs levels 1..s, so depths[i-1] lists the block counts of
/// level i for stages i..L.
struct ModelConfig {
  std::string variant = "custom";
  std::vector<Index> channels;
  std::vector<std::vector<int>> depths;
  std::vector<int> heads;
  std::vector<int> gamma;
  std::vector<int> expansion;
  int num_keypoints = 17;
  Index input_height = 256;
  Index input_width = 192;

  int levels() const { return static_cast<int>(channels.size()); }
  /// Blocks run on `level` during `stage`; 0 when the level is not active.
  int depth(int level, int stage) const;
  Index level_height(int level) const { return input_height >> (level + 1); }
  Index level_width(int level) const { return input_width >> (level + 1); }

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  /// FNV-1a over the canonical JSON text, as 16 hex digits.
  std::string hash() const;

  /// Deep variant: widths 64/128/320/512.
  static ModelConfig aggpose_l(int num_keypoints = 17);
  /// Shallower variant with the same widths.
  static ModelConfig aggpose_s(int num_keypoints = 17);
  /// Two-level desk-scale variant for verification and overfitting.
  static ModelConfig aggpose_t(int num_keypoints = 21);
  /// "aggpose-l" | "aggpose-s" | "aggpose-t".
  static ModelConfig named(const std::string& name, int num_keypoints);
};

/// Top-down heatmap network: stem embed (7,4,3) -> per stage {add a level via
/// a (3,2,1) embed of the current coarsest level, run each level's blocks,
/// fuse the pyramid} -> layer norm + pointwise projection on level 1.
template <typename T>
class AggPoseModel {
 public:
  struct Output {
    Tensor<T> heatmaps;           // [B, K, H/4, W/4]
    PyramidFeatures<T> pyramid;  // after the last fusion
  };

  explicit AggPoseModel(const ModelConfig& cfg, std::uint64_t seed = 0);
  AggPoseModel(const AggPoseModel&) = delete;
  AggPoseModel& operator=(const AggPoseModel&) = delete;
  AggPoseModel(AggPoseModel&&) = default;
  AggPoseModel& operator=(AggPoseModel&&) = default;

  const ModelConfig& config() const { return cfg_; }

  Tensor<T> forward(const Tensor<T>& images) const { return forward_with_features(images).heatmaps; }
  Output forward_with_features(const Tensor<T>& images) const;

  const ParameterList<T>& parameters() const { return params_; }
  Index parameter_count() const;
  /// Parameter by checkpoint name; throws std::out_of_range.
  const Parameter<T>& parameter(const std::string& name) const;

  /// Marks every parameter attributed to the given levels as non-trainable
  /// (requires_grad off) and all others as trainable.
  void set_frozen_levels(const std::set<int>& levels);
  std::set<int> frozen_levels() const { return frozen_; }

  /// Deep copy of all parameter values into an independent model.
  AggPoseModel clone() const;

  /// Zeroes the attention output projections, Mix-FFN outputs and fusion
  /// branches so every stage reduces to its residual path.
  void zero_residual_branches();

  OverlappedPatchEmbed<T>& stem() { return stem_; }
  std::vector<std::vector<std::vector<TransformerBlock<T>>>>& blocks() { return blocks_; }
  std::vector<PyramidFusion<T>>& fusions() { return fusions_; }

 private:
  void register_parameters();

  ModelConfig cfg_;
  OverlappedPatchEmbed<T> stem_;
  std::vector<OverlappedPatchEmbed<T>> level_embeds_;                // creates level s+2
  std::vector<std::vector<std::vector<TransformerBlock<T>>>> blocks_;  // [stage][level][block]
  std::vector<PyramidFusion<T>> fusions_;                             // one per stage
  LayerNorm<T> head_norm_;
  Linear<T> head_proj_;
  ParameterList<T> params_;
  std::set<int> frozen_;
};

}  // namespace aggpose
