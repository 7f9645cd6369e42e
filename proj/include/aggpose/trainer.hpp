#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "aggpose/checkpoint.hpp"
#include "aggpose/dataset.hpp"
#include "aggpose/heatmap.hpp"
#include "aggpose/model.hpp"

namespace aggpose {

/// Non-finite loss during training; the message carries step, lr and the
/// largest gradient norms.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::int64_t step = 0;  // updates applied so far, for bias correction
};

/// One decoupled-weight-decay Adam step; moments are allocated on first use.
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, AdamState<T>& state, const AdamWHyper& hyper);

struct FreezePhase {
  std::int64_t until_step = 0;  // phase covers steps [previous until, until)
  std::set<int> frozen_levels;
};

struct TrainConfig {
  AdamWHyper optimizer;
  int batch_size = 32;
  std::int64_t total_steps = 1000;
  /// Steps at which the lr is multiplied by `decay_factor`. Empty selects
  /// 70% and 90% of total_steps.
  std::vector<std::int64_t> milestones;
  double decay_factor = 0.1;
  std::uint64_t seed = 0;
  std::vector<FreezePhase> freeze_schedule;
  std::int64_t checkpoint_interval = 0;  // 0: final checkpoint only
  std::int64_t eval_interval = 0;        // 0: evaluate at the end only
  double heatmap_sigma = 2.0;
  bool augment = true;
  AugmentConfig augmentation;
  double crop_padding = 1.0;
  /// Fraction of instances held out for evaluation; 0 evaluates on the
  /// training instances.
  double val_fraction = 0.0;

  void validate() const;
  std::vector<std::int64_t> resolved_milestones() const;
  double lr_at(std::int64_t step) const;
  /// Frozen levels in effect at `step`.
  std::set<int> frozen_at(std::int64_t step) const;

  nlohmann::json to_json() const;
  /// Unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Decoded images and instances of a COCO-format dataset directory.
struct TrainingData {
  KeypointSchema schema;
  std::vector<ImageInfo> images;
  std::vector<Image> pixels;
  struct Instance {
    std::size_t image_index = 0;
    AnnotationRecord annotation;
  };
  std::vector<Instance> instances;

  /// Reads `dir/annotations.json` and every referenced image. Instances with
  /// no labeled keypoints are skipped.
  static TrainingData load(const std::filesystem::path& dir, const KeypointSchema& schema);
  static TrainingData from_dataset(const CocoDataset& data, const std::filesystem::path& dir,
                                   const KeypointSchema& schema);
  /// Subset with the given instance indices (images are shared).
  TrainingData subset(const std::vector<std::size_t>& indices) const;
  std::vector<AnnotationRecord> annotations() const;
};

template <typename T>
struct Batch {
  Tensor<T> images;   // [B, 3, H, W]
  Tensor<T> targets;  // [B, K, H/4, W/4]
  Tensor<T> mask;     // [B, K]
};

/// Crops, optionally augments and encodes the given instances. Sample `i`
/// draws its augmentation from derive_seed(seed, step, i).
template <typename T>
Batch<T> make_batch(const TrainingData& data, std::span<const std::size_t> indices, const ModelConfig& model,
                    const TrainConfig& cfg, std::int64_t step);

/// Runs the model on every instance's box (or on explicit boxes) and maps the
/// decoded keypoints back to image coordinates. Score is the mean peak.
template <typename T>
std::vector<DetectionRecord> predict_instances(const AggPoseModel<T>& model, const TrainingData& data,
                                               double crop_padding = 1.0, int batch_size = 16,
                                               const std::vector<BoxRecord>* boxes = nullptr);

/// Mean Euclidean error over labeled keypoints, in heatmap cells of each
/// annotation's crop.
double mean_cell_error(const std::vector<DetectionRecord>& dets, const std::vector<AnnotationRecord>& anns,
                       const CropOptions& crop, int stride = 4);

template <typename T>
class Trainer {
 public:
  Trainer(AggPoseModel<T>& model, TrainConfig cfg);

  const TrainConfig& config() const { return cfg_; }
  std::int64_t step() const { return step_; }
  double current_lr() const { return cfg_.lr_at(step_); }

  /// Forward, masked MSE, backward and one AdamW update of every trainable
  /// parameter. Returns the loss before the update.
  double train_step(const Batch<T>& batch);

  /// Instance indices for the given step: consecutive slices of per-epoch
  /// shuffles seeded from the config seed.
  std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::int64_t step) const;

  /// Model parameters plus "optim.m.*" / "optim.v.*" moments.
  Checkpoint checkpoint(const nlohmann::json& metadata = nlohmann::json::object()) const;
  /// Restores parameters, moments and step; the model config must match.
  void restore(const Checkpoint& ckpt);

  /// L2 norm of each parameter's gradient after the last step.
  const std::map<std::string, double>& grad_norms() const { return grad_norms_; }

 private:
  AggPoseModel<T>* model_;
  TrainConfig cfg_;
  std::int64_t step_ = 0;
  std::map<std::string, AdamState<T>> state_;
  std::map<std::string, double> grad_norms_;
};

struct FitOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume_from;
  /// Stop after this many steps in this call (for split runs); 0 = no limit.
  std::int64_t max_steps_this_run = 0;
  std::function<void(const nlohmann::json&)> on_log;
};

struct FitResult {
  std::vector<double> losses;  // one per step run in this call
  std::optional<double> best_ap;
  std::int64_t best_step = -1;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
  std::filesystem::path metrics_log;
  nlohmann::json final_eval;
};

/// Trains to cfg.total_steps, writing `last.ckpt`, `best.ckpt` (highest eval
/// AP) and `metrics.jsonl` under out_dir.
template <typename T>
FitResult fit(AggPoseModel<T>& model, const TrainingData& data, const TrainConfig& cfg, const FitOptions& options);

}  // namespace aggpose
