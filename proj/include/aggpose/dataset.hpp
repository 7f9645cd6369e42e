#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "aggpose/image.hpp"
#include "aggpose/keypoints.hpp"
#include "aggpose/metrics.hpp"
#include "aggpose/rng.hpp"
#include "aggpose/tensor.hpp"

namespace aggpose {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageInfo {
  std::int64_t id = 0;
  std::string file_name;
  int width = 0;
  int height = 0;
};

/// One COCO keypoint category plus its images and annotations.
struct CocoDataset {
  std::vector<ImageInfo> images;
  std::vector<AnnotationRecord> annotations;
  std::int64_t category_id = 1;
  std::string category_name = "person";
  std::vector<std::string> warnings;

  const ImageInfo* find_image(std::int64_t id) const;
};

/// Area used when no segmentation is present: bbox area times this factor.
inline constexpr double kBoxAreaFactor = 0.53;

CocoDataset parse_coco_keypoints(const nlohmann::json& doc, const KeypointSchema& schema,
                                 const std::string& source = "<memory>");
CocoDataset load_coco_keypoints(const std::filesystem::path& path, const KeypointSchema& schema);
nlohmann::json coco_to_json(const CocoDataset& data, const KeypointSchema& schema);
void write_coco_keypoints(const CocoDataset& data, const KeypointSchema& schema, const std::filesystem::path& path);

/// COCO results format: [{image_id, category_id, keypoints, score}].
std::vector<DetectionRecord> load_coco_results(const std::filesystem::path& path, const KeypointSchema& schema);
nlohmann::json results_to_json(const std::vector<DetectionRecord>& dets);
void write_coco_results(const std::vector<DetectionRecord>& dets, const std::filesystem::path& path);

/// Person boxes from a detector: [{image_id, bbox: [x, y, w, h], score}].
struct BoxRecord {
  std::int64_t image_id = 0;
  BoundingBox bbox;
  double score = 1.0;
};
std::vector<BoxRecord> load_boxes(const std::filesystem::path& path);

/// 2x3 affine map p' = [a b c; d e f] p.
struct Affine2D {
  std::array<double, 6> m{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};

  static Affine2D identity() { return {}; }
  static Affine2D translation(double tx, double ty) { return {{1.0, 0.0, tx, 0.0, 1.0, ty}}; }
  static Affine2D scaling(double s) { return {{s, 0.0, 0.0, 0.0, s, 0.0}}; }
  /// Counter-clockwise on screen (y down) for positive degrees.
  static Affine2D rotation(double degrees);

  std::array<double, 2> apply(double x, double y) const;
  Keypoint apply(const Keypoint& kp) const;
  /// this followed by `next`.
  Affine2D then(const Affine2D& next) const;
  Affine2D inverse() const;
};

KeypointSet transform(const KeypointSet& kps, const Affine2D& a);

struct Normalization {
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> stddev{0.229, 0.224, 0.225};
};

struct CropOptions {
  Index height = 256;
  Index width = 192;
  /// The aspect-corrected box is enlarged by this factor around its center.
  double padding = 1.0;
  Normalization normalization;
};

struct AugmentConfig {
  double flip_prob = 0.5;
  double rot_max_deg = 40.0;
  double scale_lo = 0.65;
  double scale_hi = 1.35;

  void validate() const;
  static AugmentConfig none() { return {0.0, 0.0, 1.0, 1.0}; }
};

/// One draw of the augmentation. `scale` > 1 enlarges the content.
struct AugmentParams {
  double angle_deg = 0.0;
  double scale = 1.0;
  bool flip = false;
};

AugmentParams sample_augment(const AugmentConfig& cfg, Rng& rng);
/// Crop-space transform for `params` about the crop center, flip last.
Affine2D augment_transform(const AugmentParams& params, Index height, Index width);

struct InstanceSample {
  Tensor<float> image;      // [3, H, W], normalized
  KeypointSet keypoints;    // crop coordinates
  Affine2D to_crop;         // original image -> crop
  Affine2D to_original;     // crop -> original image
  std::int64_t image_id = 0;
  std::int64_t annotation_id = 0;
};

/// Crop pixels per source pixel for `bbox` under `options` (before augmentation).
double crop_scale(const BoundingBox& bbox, const CropOptions& options);

/// Aspect-preserving crop of `bbox` resized to the target. Augmentation, when
/// given, is folded into the same affine so pixels are resampled once.
InstanceSample crop_instance(const Image& image, const BoundingBox& bbox, const KeypointSet& keypoints,
                             const CropOptions& options, const AugmentParams& aug = {},
                             std::span<const int> flip_permutation = {});

/// Warps an existing sample by a fresh augmentation draw seeded from `seed`.
InstanceSample augment(const InstanceSample& sample, const AugmentConfig& cfg, std::uint64_t seed,
                       const KeypointSchema& schema, const Normalization& normalization = {});

/// Undo the normalization into an 8-bit image (for overlays).
Image denormalize(const Tensor<float>& chw, const Normalization& normalization = {});

struct SyntheticOptions {
  int height = 128;
  int width = 96;
  double noise = 0.12;
  /// Figure extent as a fraction of the image's limiting dimension.
  double min_extent = 0.6;
  double max_extent = 0.9;
};

/// Articulated stick figure with its exact keypoints.
struct SyntheticScene {
  std::vector<double> joint_angles;  // degrees
  std::vector<double> limb_lengths;  // torso units
  double scale = 0.0;                // pixels per torso unit
  double rotation = 0.0;             // body axis, degrees
  double tx = 0.0;
  double ty = 0.0;
  Image image;
  KeypointSet keypoints;
  BoundingBox bbox;
};

SyntheticScene render_synthetic_scene(std::uint64_t seed, const KeypointSchema& schema,
                                      const SyntheticOptions& options = {});

/// Writes `out_dir/images/NNNNNN.png` and `out_dir/annotations.json`.
CocoDataset generate_synthetic(int n, std::uint64_t seed, const KeypointSchema& schema,
                               const std::filesystem::path& out_dir, const SyntheticOptions& options = {});

/// Resolves an image file relative to a dataset directory (`dir/images/name`
/// first, then `dir/name`).
std::filesystem::path resolve_image_path(const std::filesystem::path& dir, const ImageInfo& info);

}  // namespace aggpose
