#include "aggpose/heatmap.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace aggpose {

void HeatmapGeometry::validate() const {
  if (height <= 0 || width <= 0) throw std::invalid_argument("heatmap size must be positive");
  if (stride <= 0) throw std::invalid_argument("heatmap stride must be positive");
  if (!(sigma > 0.0)) throw std::invalid_argument("heatmap sigma must be positive");
}

template <typename T>
EncodedHeatmaps<T> encode(const KeypointSet& kps, const HeatmapGeometry& geom) {
  geom.validate();
  const auto k = static_cast<Index>(kps.size());
  if (k == 0) throw std::invalid_argument("encode: empty keypoint set");
  const Index h = geom.height;
  const Index w = geom.width;
  EncodedHeatmaps<T> out{Tensor<T>::zeros({k, h, w}), std::vector<T>(static_cast<std::size_t>(k), T(0))};
  T* dst = out.targets.mutable_ptr();
  const double inv = 1.0 / (2.0 * geom.sigma * geom.sigma);
  for (Index j = 0; j < k; ++j) {
    const Keypoint& kp = kps[static_cast<std::size_t>(j)];
    if (kp.visibility <= 0 || !std::isfinite(kp.x) || !std::isfinite(kp.y)) continue;
    const double u = geom.to_heatmap(kp.x);
    const double v = geom.to_heatmap(kp.y);
    if (u < -0.5 || v < -0.5 || u >= static_cast<double>(w) - 0.5 || v >= static_cast<double>(h) - 0.5) continue;
    out.mask[static_cast<std::size_t>(j)] = T(1);
    T* channel = dst + j * h * w;
    for (Index y = 0; y < h; ++y) {
      const double dy = static_cast<double>(y) - v;
      for (Index x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - u;
        channel[y * w + x] = static_cast<T>(std::exp(-(dx * dx + dy * dy) * inv));
      }
    }
  }
  return out;
}

template <typename T>
std::vector<DecodedKeypoint> decode(const T* data, Index k, Index h, Index w, int stride) {
  if (k <= 0 || h <= 0 || w <= 0) throw ShapeError("decode: empty heatmap");
  std::vector<DecodedKeypoint> out(static_cast<std::size_t>(k));
  for (Index j = 0; j < k; ++j) {
    const T* hm = data + j * h * w;
    Index best = 0;
    T lo = hm[0];
    for (Index i = 0; i < h * w; ++i) {
      if (!std::isfinite(static_cast<double>(hm[i]))) {
        throw NumericError("decode: non-finite heatmap value in channel " + std::to_string(j));
      }
      if (hm[i] > hm[best]) best = i;
      if (hm[i] < lo) lo = hm[i];
    }
    DecodedKeypoint& d = out[static_cast<std::size_t>(j)];
    d.confidence = static_cast<double>(hm[best]);
    double u = 0.0;
    double v = 0.0;
    if (hm[best] == lo) {
      d.degenerate = true;
      u = 0.5 * static_cast<double>(w - 1);
      v = 0.5 * static_cast<double>(h - 1);
    } else {
      const Index py = best / w;
      const Index px = best % w;
      u = static_cast<double>(px);
      v = static_cast<double>(py);
      if (px > 0 && px < w - 1) {
        const T diff = hm[best + 1] - hm[best - 1];
        if (diff > 0) u += 0.25;
        if (diff < 0) u -= 0.25;
      }
      if (py > 0 && py < h - 1) {
        const T diff = hm[best + w] - hm[best - w];
        if (diff > 0) v += 0.25;
        if (diff < 0) v -= 0.25;
      }
    }
    d.x = stride * (u + 0.5);
    d.y = stride * (v + 0.5);
  }
  return out;
}

template <typename T>
std::vector<DecodedKeypoint> decode(const Tensor<T>& heatmaps, int stride) {
  if (heatmaps.rank() != 3) throw ShapeError("decode expects [K, H, W], got " + to_string(heatmaps.shape()));
  return decode(heatmaps.ptr(), heatmaps.dim(0), heatmaps.dim(1), heatmaps.dim(2), stride);
}

KeypointSet to_keypoints(const std::vector<DecodedKeypoint>& decoded) {
  KeypointSet out;
  out.reserve(decoded.size());
  for (const auto& d : decoded) out.push_back({d.x, d.y, 2});
  return out;
}

#define AGGPOSE_INSTANTIATE_HEATMAP(T)                                                             \
  template EncodedHeatmaps<T> encode<T>(const KeypointSet&, const HeatmapGeometry&);               \
  template std::vector<DecodedKeypoint> decode<T>(const T*, Index, Index, Index, int);             \
  template std::vector<DecodedKeypoint> decode<T>(const Tensor<T>&, int);

AGGPOSE_INSTANTIATE_HEATMAP(float)
AGGPOSE_INSTANTIATE_HEATMAP(double)

}  // namespace aggpose
