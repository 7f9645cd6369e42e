#include "aggpose/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "aggpose/profile.hpp"
#include "aggpose/rng.hpp"

namespace aggpose {

using nlohmann::json;

template <typename T>
ImagePrediction predict_image(const AggPoseModel<T>& model, const Image& image, const std::optional<BoundingBox>& box,
                              double crop_padding) {
  if (image.empty()) throw ImageIoError("predict_image: empty image");
  const ModelConfig& cfg = model.config();
  ImagePrediction out;
  out.box = box.value_or(BoundingBox{0.0, 0.0, static_cast<double>(image.width), static_cast<double>(image.height)});
  CropOptions crop;
  crop.height = cfg.input_height;
  crop.width = cfg.input_width;
  crop.padding = crop_padding;
  const InstanceSample sample = crop_instance(image, out.box, {}, crop);
  out.to_original = sample.to_original;

  Tensor<T> input({1, 3, cfg.input_height, cfg.input_width});
  std::copy(sample.image.data().begin(), sample.image.data().end(), input.mutable_data().begin());
  const Tensor<T> heatmaps = model.forward(input);
  const Index k = heatmaps.dim(1), h = heatmaps.dim(2), w = heatmaps.dim(3);
  out.heatmaps = Tensor<float>({k, h, w});
  std::copy(heatmaps.data().begin(), heatmaps.data().end(), out.heatmaps.mutable_data().begin());
  out.keypoints = decode(out.heatmaps, 4);
  for (auto& d : out.keypoints) {
    const auto p = out.to_original.apply(d.x, d.y);
    d.x = p[0];
    d.y = p[1];
  }
  return out;
}

Image render_overlay(const Image& image, const ImagePrediction& prediction, const KeypointSchema& schema) {
  Canvas canvas = Canvas::from_image(image);
  const Tensor<float>& hm = prediction.heatmaps;
  const Index k = hm.dim(0), h = hm.dim(1), w = hm.dim(2);
  std::vector<double> peak(static_cast<std::size_t>(h * w), 0.0);
  for (Index c = 0; c < k; ++c) {
    for (Index i = 0; i < h * w; ++i) {
      auto& p = peak[static_cast<std::size_t>(i)];
      p = std::max(p, static_cast<double>(hm.ptr()[c * h * w + i]));
    }
  }
  auto sample = [&](double u, double v) {
    if (u < -0.5 || v < -0.5 || u > static_cast<double>(w) - 0.5 || v > static_cast<double>(h) - 0.5) return 0.0;
    const double cu = std::clamp(u, 0.0, static_cast<double>(w - 1));
    const double cv = std::clamp(v, 0.0, static_cast<double>(h - 1));
    const auto u0 = static_cast<Index>(std::floor(cu)), v0 = static_cast<Index>(std::floor(cv));
    const Index u1 = std::min(u0 + 1, w - 1), v1 = std::min(v0 + 1, h - 1);
    const double fu = cu - static_cast<double>(u0), fv = cv - static_cast<double>(v0);
    auto at = [&](Index x, Index y) { return peak[static_cast<std::size_t>(y * w + x)]; };
    return (1 - fv) * ((1 - fu) * at(u0, v0) + fu * at(u1, v0)) + fv * ((1 - fu) * at(u0, v1) + fu * at(u1, v1));
  };
  const Affine2D to_crop = prediction.to_original.inverse();
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const auto c = to_crop.apply(x + 0.5, y + 0.5);
      const double value = std::clamp(sample(c[0] / 4.0 - 0.5, c[1] / 4.0 - 0.5), 0.0, 1.0);
      if (value > 0.0) canvas.blend(x, y, {1.0, 0.1, 0.1}, 0.65 * value);
    }
  }
  const double scale = std::max(1.0, std::min(image.width, image.height) / 160.0);
  for (const auto& [a, b] : schema.skeleton) {
    const auto& p = prediction.keypoints.at(static_cast<std::size_t>(a));
    const auto& q = prediction.keypoints.at(static_cast<std::size_t>(b));
    canvas.draw_segment(p.x, p.y, q.x, q.y, 0.8 * scale, {1.0, 1.0, 1.0});
  }
  for (const auto& p : prediction.keypoints) {
    const double c = std::clamp(p.confidence, 0.0, 1.0);
    canvas.draw_disc(p.x, p.y, 2.0 * scale, {1.0 - c, c, 0.2});
  }
  return canvas.to_image();
}

json prediction_to_json(const ImagePrediction& prediction, const KeypointSchema& schema) {
  json kps = json::array();
  for (std::size_t i = 0; i < prediction.keypoints.size(); ++i) {
    const auto& d = prediction.keypoints[i];
    kps.push_back({{"name", i < schema.keypoint_names.size() ? schema.keypoint_names[i] : std::to_string(i)},
                   {"x", d.x},
                   {"y", d.y},
                   {"confidence", d.confidence}});
  }
  const auto& b = prediction.box;
  return {{"box", {b.x, b.y, b.width, b.height}}, {"keypoints", kps}};
}

KeypointSchema schema_for_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.metadata.contains("schema") && ckpt.metadata["schema"].is_string()) {
    return KeypointSchema::named(ckpt.metadata["schema"].get<std::string>());
  }
  const int k = ckpt.config.value("num_keypoints", 0);
  if (k == 17) return KeypointSchema::coco17();
  if (k == 21) return KeypointSchema::infant21();
  throw CheckpointError("cannot infer a keypoint schema for " + std::to_string(k) + " keypoints");
}

json BenchReport::to_json() const {
  return {{"batch", batch},
          {"iterations", iterations},
          {"seconds", seconds},
          {"images_per_second", images_per_second},
          {"shares", shares}};
}

BenchReport benchmark_forward(const ModelConfig& config, int batch, int iterations, std::uint64_t seed) {
  if (batch < 1 || iterations < 1) throw std::invalid_argument("bench: batch and iterations must be >= 1");
  AggPoseModel<float> model(config, seed);
  Rng rng(derive_seed(seed, 1));
  Tensor<float> input({batch, 3, config.input_height, config.input_width});
  for (auto& v : input.mutable_data()) v = static_cast<float>(rng.normal());
  model.forward(input);

  Profile profile;
  BenchReport report;
  report.batch = batch;
  report.iterations = iterations;
  {
    Profile::Install install(profile);
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < iterations; ++i) model.forward(input);
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  report.images_per_second = report.seconds > 0.0 ? batch * iterations / report.seconds : 0.0;
  double timed = 0.0;
  for (const auto& [name, s] : profile.seconds()) {
    report.shares[name] = report.seconds > 0.0 ? s / report.seconds : 0.0;
    timed += s;
  }
  report.shares["other"] = report.seconds > 0.0 ? std::max(0.0, report.seconds - timed) / report.seconds : 0.0;
  return report;
}

template ImagePrediction predict_image<float>(const AggPoseModel<float>&, const Image&,
                                              const std::optional<BoundingBox>&, double);
template ImagePrediction predict_image<double>(const AggPoseModel<double>&, const Image&,
                                               const std::optional<BoundingBox>&, double);

}  // namespace aggpose
