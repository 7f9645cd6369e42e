#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aggpose/checkpoint.hpp"
#include "aggpose/dataset.hpp"
#include "aggpose/heatmap.hpp"
#include "aggpose/image.hpp"
#include "aggpose/model.hpp"

namespace aggpose {

struct ImagePrediction {
  std::vector<DecodedKeypoint> keypoints;  // original image coordinates
  Tensor<float> heatmaps;                  // [K, H/4, W/4]
  Affine2D to_original;                    // crop pixels -> image pixels
  BoundingBox box;                         // region that was cropped
};

/// Crops `box` (the whole image when absent), runs the model and maps the
/// decoded keypoints back to the image.
template <typename T>
ImagePrediction predict_image(const AggPoseModel<T>& model, const Image& image,
                              const std::optional<BoundingBox>& box = std::nullopt, double crop_padding = 1.0);

/// Heatmap maximum blended in red, skeleton and keypoints drawn on top.
Image render_overlay(const Image& image, const ImagePrediction& prediction, const KeypointSchema& schema);

/// {"box": [...], "keypoints": [{"name", "x", "y", "confidence"}, ...]}.
nlohmann::json prediction_to_json(const ImagePrediction& prediction, const KeypointSchema& schema);

/// Schema recorded in checkpoint metadata, else chosen by keypoint count
/// (17 -> coco, 21 -> infant).
KeypointSchema schema_for_checkpoint(const Checkpoint& ckpt);

struct BenchReport {
  int batch = 1;
  int iterations = 0;
  double seconds = 0.0;
  double images_per_second = 0.0;
  /// Fraction of forward wall time per block category; "other" holds the
  /// untimed remainder so the shares sum to 1.
  std::map<std::string, double> shares;
  nlohmann::json to_json() const;
};

/// Times `iterations` forward passes on random input after one warm-up pass.
BenchReport benchmark_forward(const ModelConfig& config, int batch, int iterations, std::uint64_t seed);

}  // namespace aggpose
