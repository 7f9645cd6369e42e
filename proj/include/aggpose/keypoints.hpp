#pragma once

#include <string>
#include <utility>
#include <vector>

namespace aggpose {

/// Visibility flags follow COCO: 0 unlabeled, 1 labeled but occluded, 2 visible.
struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  int visibility = 0;
};

using KeypointSet = std::vector<Keypoint>;

struct BoundingBox {
  double x = 0.0;
  double y = 0.0;
  double width = 0.0;
  double height = 0.0;

  double area() const { return width * height; }
  double center_x() const { return x + 0.5 * width; }
  double center_y() const { return y + 0.5 * height; }
};

/// Keypoint layout of one dataset: names, the per-keypoint OKS constants k_i,
/// horizontal-flip pairs and the drawing skeleton (0-based index pairs).
struct KeypointSchema {
  std::string name;
  std::vector<std::string> keypoint_names;
  std::vector<double> k;
  std::vector<std::pair<int, int>> flip_pairs;
  std::vector<std::pair<int, int>> skeleton;

  int size() const { return static_cast<int>(keypoint_names.size()); }
  /// Throws std::invalid_argument if k_i <= 0, lengths disagree, or the flip
  /// pairs do not form an involution.
  void validate() const;
  /// index -> mirrored index.
  std::vector<int> flip_permutation() const;
  int index_of(const std::string& keypoint) const;

  /// COCO person keypoints. k_i = 2 * sigma_i of the COCO API, which makes
  /// exp(-d^2 / (2 s^2 k_i^2)) identical to the API's computation.
  static KeypointSchema coco17();
  /// 21-point infant layout with one shared k for every keypoint. The names
  /// and their order are provisional.
  static KeypointSchema infant21(double k = 0.08);
  /// "coco" | "infant".
  static KeypointSchema named(const std::string& name);
};

/// Number of keypoints with visibility > 0.
int count_labeled(const KeypointSet& kps);

}  // namespace aggpose
