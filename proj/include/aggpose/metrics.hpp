#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "aggpose/keypoints.hpp"

namespace aggpose {

class SchemaMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AnnotationRecord {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  KeypointSet keypoints;
  BoundingBox bbox;
  /// Object area in px^2; s^2 in the OKS formula.
  double area = 0.0;
  bool iscrowd = false;
  /// Polygon or RLE segmentation as loaded, kept for round-tripping only.
  std::string segmentation_json;

  double scale() const;
};

struct DetectionRecord {
  std::int64_t image_id = 0;
  KeypointSet keypoints;
  double score = 0.0;
  std::int64_t category_id = 1;

  /// Area of the keypoint extent, used for the area-range filters.
  double extent_area() const;
};

/// Object keypoint similarity. Empty optional when no ground-truth keypoint is
/// labeled. Throws SchemaMismatch on keypoint-count disagreement.
std::optional<double> oks(const DetectionRecord& det, const AnnotationRecord& ann, const KeypointSchema& schema);

struct AreaRange {
  std::string name;
  double lo = 0.0;
  double hi = 0.0;
};

struct EvalParams {
  std::vector<double> thresholds;  // defaults to 0.50, 0.55, ..., 0.95
  std::vector<AreaRange> area_ranges;
  int max_detections = 20;
  int recall_points = 101;

  static EvalParams coco();
};

struct EvalResult {
  std::optional<double> ap;
  std::optional<double> ap50;
  std::optional<double> ap75;
  std::optional<double> ap_medium;
  std::optional<double> ap_large;
  std::optional<double> ar;
  std::optional<double> ar50;
  std::optional<double> ar75;
  std::optional<double> ar_medium;
  std::optional<double> ar_large;
  /// precision[area][threshold] averaged over recall points, -1 if undefined.
  std::vector<std::vector<double>> ap_table;
  std::vector<std::vector<double>> recall_table;
  std::size_t num_annotations = 0;
  std::size_t num_detections = 0;
};

/// Per-image matching result for one threshold and area range.
struct ImageMatch {
  std::vector<double> scores;       // detections in score order, truncated
  std::vector<int> matched_gt;      // -1 when unmatched
  std::vector<bool> det_ignored;
  int positives = 0;                // non-ignored annotations
};

/// Greedy COCO matching on one image. `ious` is [D x G] with detections in
/// score order and annotations with ignored ones last.
ImageMatch greedy_match(const std::vector<std::vector<double>>& ious, const std::vector<double>& scores,
                        const std::vector<bool>& gt_ignored, const std::vector<bool>& gt_crowd,
                        const std::vector<double>& det_areas, const AreaRange& range, double threshold);

/// COCO keypoint evaluation. Annotations without labeled keypoints are
/// dropped before matching. Every metric is empty when no annotation remains.
EvalResult evaluate(const std::vector<DetectionRecord>& dets, const std::vector<AnnotationRecord>& anns,
                    const KeypointSchema& schema, const EvalParams& params = EvalParams::coco());

/// 101-point interpolated AP from a pooled, score-sorted match list.
double interpolated_ap(const std::vector<bool>& true_positive, int positives, int recall_points = 101);

std::string format_report(const EvalResult& result);

}  // namespace aggpose
