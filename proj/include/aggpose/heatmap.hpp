#pragma once

#include <vector>

#include "aggpose/keypoints.hpp"
#include "aggpose/tensor.hpp"

namespace aggpose {

/// Heatmap grid relative to the network input. Input pixel x maps to heatmap
/// coordinate u = x / stride - 0.5, so cell centers sit at stride * (u + 0.5).
struct HeatmapGeometry {
  Index height = 64;
  Index width = 48;
  int stride = 4;
  double sigma = 2.0;  // in heatmap cells

  void validate() const;
  double to_heatmap(double px) const { return px / stride - 0.5; }
  double to_input(double u) const { return stride * (u + 0.5); }
};

template <typename T>
struct EncodedHeatmaps {
  Tensor<T> targets;   // [K, H, W]
  std::vector<T> mask; // [K], 1 where the keypoint contributes to the loss
};

/// Unnormalized Gaussians (peak 1) per keypoint. Keypoints with v == 0 or
/// outside the grid produce an all-zero channel and a zero mask.
template <typename T>
EncodedHeatmaps<T> encode(const KeypointSet& kps, const HeatmapGeometry& geom);

struct DecodedKeypoint {
  double x = 0.0;  // input pixels
  double y = 0.0;
  double confidence = 0.0;
  bool degenerate = false;  // channel was constant; position is the grid center
};

/// Argmax per channel (lowest row-major index wins ties) plus a quarter-cell
/// shift toward the larger neighbour on each axis where both neighbours exist.
/// `heatmaps` is [K, H, W]. Throws NumericError on non-finite values.
template <typename T>
std::vector<DecodedKeypoint> decode(const Tensor<T>& heatmaps, int stride = 4);

/// Same for one raw [K, H, W] block (e.g. a batch slice).
template <typename T>
std::vector<DecodedKeypoint> decode(const T* data, Index k, Index h, Index w, int stride = 4);

/// Decoded points as a KeypointSet with v = 2.
KeypointSet to_keypoints(const std::vector<DecodedKeypoint>& decoded);

}  // namespace aggpose
