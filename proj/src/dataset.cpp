#include "aggpose/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "aggpose/fileutil.hpp"

namespace aggpose {

using nlohmann::json;

const ImageInfo* CocoDataset::find_image(std::int64_t id) const {
  for (const auto& info : images) {
    if (info.id == id) return &info;
  }
  return nullptr;
}

namespace {

json parse_file(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const std::exception& e) {
    throw DatasetError(e.what());
  }
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw DatasetError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

double number(const json& j, const std::string& what) {
  if (!j.is_number()) throw DatasetError(what + " is not a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw DatasetError(what + " is not finite");
  return v;
}

BoundingBox parse_bbox(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 4) throw DatasetError(what + ": bbox must be [x, y, w, h]");
  return {number(j[0], what + " bbox"), number(j[1], what + " bbox"), number(j[2], what + " bbox"),
          number(j[3], what + " bbox")};
}

KeypointSet parse_keypoints(const json& j, int k, const std::string& what) {
  if (!j.is_array() || j.size() != static_cast<std::size_t>(3 * k)) {
    throw DatasetError(what + ": expected " + std::to_string(3 * k) + " keypoint values, got " +
                       (j.is_array() ? std::to_string(j.size()) : std::string("non-array")));
  }
  KeypointSet kps(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    auto& kp = kps[static_cast<std::size_t>(i)];
    kp.x = number(j[3 * i], what + " keypoint x");
    kp.y = number(j[3 * i + 1], what + " keypoint y");
    const double v = number(j[3 * i + 2], what + " visibility");
    if (v != 0.0 && v != 1.0 && v != 2.0) {
      throw DatasetError(what + ": visibility flag " + j[3 * i + 2].dump() + " not in {0, 1, 2}");
    }
    kp.visibility = static_cast<int>(v);
  }
  return kps;
}

json keypoints_json(const KeypointSet& kps) {
  json out = json::array();
  for (const auto& kp : kps) {
    out.push_back(kp.x);
    out.push_back(kp.y);
    out.push_back(kp.visibility);
  }
  return out;
}

bool has_segmentation(const json& ann) {
  auto it = ann.find("segmentation");
  if (it == ann.end() || it->is_null()) return false;
  if (it->is_array()) return !it->empty();
  return it->is_object();
}

}  // namespace

CocoDataset parse_coco_keypoints(const json& doc, const KeypointSchema& schema, const std::string& source) {
  schema.validate();
  if (!doc.is_object()) throw DatasetError(source + ": top level must be an object");
  for (const char* key : {"images", "annotations", "categories"}) {
    if (!doc.contains(key) || !doc[key].is_array()) {
      throw DatasetError(source + ": missing array '" + key + "'");
    }
  }
  CocoDataset data;

  const json* category = nullptr;
  for (const auto& c : doc["categories"]) {
    if (!c.contains("keypoints")) continue;
    if (category == nullptr || c.value("name", "") == "person") category = &c;
  }
  if (category == nullptr) throw DatasetError(source + ": no keypoint category");
  const auto& names = (*category)["keypoints"];
  if (!names.is_array()) throw DatasetError(source + ": category keypoints must be a list");
  if (names.size() != static_cast<std::size_t>(schema.size())) {
    throw DatasetError(source + ": category declares " + std::to_string(names.size()) + " keypoints, schema '" +
                       schema.name + "' expects " + std::to_string(schema.size()));
  }
  data.category_id = category->at("id").get<std::int64_t>();
  data.category_name = category->value("name", "person");

  std::map<std::int64_t, std::size_t> index;
  for (const auto& im : doc["images"]) {
    ImageInfo info;
    try {
      info.id = im.at("id").get<std::int64_t>();
      info.file_name = im.at("file_name").get<std::string>();
      info.width = im.at("width").get<int>();
      info.height = im.at("height").get<int>();
    } catch (const json::exception& e) {
      throw DatasetError(source + ": malformed image record " + im.dump().substr(0, 80) + ": " + e.what());
    }
    if (info.width <= 0 || info.height <= 0) {
      throw DatasetError(source + ": image " + std::to_string(info.id) + " has non-positive size");
    }
    if (!index.emplace(info.id, data.images.size()).second) {
      throw DatasetError(source + ": duplicate image id " + std::to_string(info.id));
    }
    data.images.push_back(std::move(info));
  }

  for (const auto& a : doc["annotations"]) {
    if (!a.contains("id")) throw DatasetError(source + ": annotation without id");
    AnnotationRecord rec;
    rec.id = a["id"].get<std::int64_t>();
    const std::string what = source + ": annotation " + std::to_string(rec.id);
    if (a.value("category_id", data.category_id) != data.category_id) continue;
    if (!a.contains("image_id")) throw DatasetError(what + ": missing image_id");
    rec.image_id = a["image_id"].get<std::int64_t>();
    auto it = index.find(rec.image_id);
    if (it == index.end()) throw DatasetError(what + ": unknown image_id " + std::to_string(rec.image_id));
    const ImageInfo& info = data.images[it->second];
    if (!a.contains("keypoints")) throw DatasetError(what + ": missing keypoints");
    rec.keypoints = parse_keypoints(a["keypoints"], schema.size(), what);
    for (std::size_t i = 0; i < rec.keypoints.size(); ++i) {
      auto& kp = rec.keypoints[i];
      if (kp.visibility == 0) continue;
      const double cx = std::clamp(kp.x, 0.0, static_cast<double>(info.width));
      const double cy = std::clamp(kp.y, 0.0, static_cast<double>(info.height));
      if (cx != kp.x || cy != kp.y) {
        data.warnings.push_back(what + ": keypoint " + std::to_string(i) + " clipped to image bounds");
        kp.x = cx;
        kp.y = cy;
      }
    }
    if (a.contains("bbox")) {
      rec.bbox = parse_bbox(a["bbox"], what);
    } else {
      data.warnings.push_back(what + ": no bbox, using keypoint extent");
      double x0 = info.width, y0 = info.height, x1 = 0.0, y1 = 0.0;
      for (const auto& kp : rec.keypoints) {
        if (kp.visibility == 0) continue;
        x0 = std::min(x0, kp.x);
        y0 = std::min(y0, kp.y);
        x1 = std::max(x1, kp.x);
        y1 = std::max(y1, kp.y);
      }
      rec.bbox = x1 >= x0 ? BoundingBox{x0, y0, x1 - x0, y1 - y0} : BoundingBox{};
    }
    if (rec.bbox.width < 0.0 || rec.bbox.height < 0.0) throw DatasetError(what + ": negative bbox size");
    rec.iscrowd = a.value("iscrowd", 0) != 0;
    if (has_segmentation(a) && a.contains("area")) {
      rec.segmentation_json = a["segmentation"].dump();
      rec.area = number(a["area"], what + " area");
    } else {
      rec.area = rec.bbox.area() * kBoxAreaFactor;
    }
    if (count_labeled(rec.keypoints) > 0 && !(rec.area > 0.0)) {
      throw DatasetError(what + ": labeled keypoints but zero object area");
    }
    data.annotations.push_back(std::move(rec));
  }
  return data;
}

CocoDataset load_coco_keypoints(const std::filesystem::path& path, const KeypointSchema& schema) {
  return parse_coco_keypoints(parse_file(path), schema, path.string());
}

json coco_to_json(const CocoDataset& data, const KeypointSchema& schema) {
  json images = json::array();
  for (const auto& im : data.images) {
    images.push_back({{"id", im.id}, {"file_name", im.file_name}, {"width", im.width}, {"height", im.height}});
  }
  json skeleton = json::array();
  for (const auto& [a, b] : schema.skeleton) skeleton.push_back({a + 1, b + 1});
  json categories = json::array({{{"id", data.category_id},
                                  {"name", data.category_name},
                                  {"supercategory", "person"},
                                  {"keypoints", schema.keypoint_names},
                                  {"skeleton", skeleton}}});
  json anns = json::array();
  for (const auto& a : data.annotations) {
    json j = {{"id", a.id},
              {"image_id", a.image_id},
              {"category_id", data.category_id},
              {"keypoints", keypoints_json(a.keypoints)},
              {"num_keypoints", count_labeled(a.keypoints)},
              {"bbox", {a.bbox.x, a.bbox.y, a.bbox.width, a.bbox.height}},
              {"area", a.area},
              {"iscrowd", a.iscrowd ? 1 : 0}};
    if (!a.segmentation_json.empty()) j["segmentation"] = json::parse(a.segmentation_json);
    anns.push_back(std::move(j));
  }
  return {{"images", images}, {"annotations", anns}, {"categories", categories}};
}

void write_coco_keypoints(const CocoDataset& data, const KeypointSchema& schema, const std::filesystem::path& path) {
  atomic_write_text(path, coco_to_json(data, schema).dump(1) + "\n");
}

std::vector<DetectionRecord> load_coco_results(const std::filesystem::path& path, const KeypointSchema& schema) {
  const json doc = parse_file(path);
  if (!doc.is_array()) throw DatasetError(path.string() + ": results file must be a list");
  std::vector<DetectionRecord> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& r = doc[i];
    const std::string what = path.string() + ": result " + std::to_string(i);
    DetectionRecord det;
    try {
      det.image_id = r.at("image_id").get<std::int64_t>();
      det.category_id = r.value("category_id", std::int64_t{1});
      det.score = number(r.at("score"), what + " score");
    } catch (const json::exception& e) {
      throw DatasetError(what + ": " + e.what());
    }
    if (!r.contains("keypoints")) throw DatasetError(what + ": missing keypoints");
    const auto& kp = r["keypoints"];
    if (!kp.is_array() || kp.size() != static_cast<std::size_t>(3 * schema.size())) {
      throw SchemaMismatch(what + ": expected " + std::to_string(3 * schema.size()) + " keypoint values for schema '" +
                           schema.name + "'");
    }
    det.keypoints.resize(static_cast<std::size_t>(schema.size()));
    for (int k = 0; k < schema.size(); ++k) {
      det.keypoints[static_cast<std::size_t>(k)] = {number(kp[3 * k], what), number(kp[3 * k + 1], what), 2};
    }
    out.push_back(std::move(det));
  }
  return out;
}

json results_to_json(const std::vector<DetectionRecord>& dets) {
  json out = json::array();
  for (const auto& d : dets) {
    json kps = json::array();
    for (const auto& kp : d.keypoints) {
      kps.push_back(kp.x);
      kps.push_back(kp.y);
      kps.push_back(kp.visibility);
    }
    out.push_back({{"image_id", d.image_id}, {"category_id", d.category_id}, {"keypoints", kps}, {"score", d.score}});
  }
  return out;
}

void write_coco_results(const std::vector<DetectionRecord>& dets, const std::filesystem::path& path) {
  atomic_write_text(path, results_to_json(dets).dump(1) + "\n");
}

std::vector<BoxRecord> load_boxes(const std::filesystem::path& path) {
  const json doc = parse_file(path);
  if (!doc.is_array()) throw DatasetError(path.string() + ": box file must be a list");
  std::vector<BoxRecord> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const std::string what = path.string() + ": box " + std::to_string(i);
    BoxRecord b;
    try {
      b.image_id = doc[i].at("image_id").get<std::int64_t>();
      b.bbox = parse_bbox(doc[i].at("bbox"), what);
      b.score = doc[i].contains("score") ? number(doc[i]["score"], what + " score") : 1.0;
    } catch (const json::exception& e) {
      throw DatasetError(what + ": " + e.what());
    }
    out.push_back(b);
  }
  return out;
}

Affine2D Affine2D::rotation(double degrees) {
  const double r = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(r);
  const double s = std::sin(r);
  return {{c, s, 0.0, -s, c, 0.0}};
}

std::array<double, 2> Affine2D::apply(double x, double y) const {
  return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
}

Keypoint Affine2D::apply(const Keypoint& kp) const {
  const auto p = apply(kp.x, kp.y);
  return {p[0], p[1], kp.visibility};
}

Affine2D Affine2D::then(const Affine2D& n) const {
  const auto& a = m;
  const auto& b = n.m;
  return {{b[0] * a[0] + b[1] * a[3], b[0] * a[1] + b[1] * a[4], b[0] * a[2] + b[1] * a[5] + b[2],
           b[3] * a[0] + b[4] * a[3], b[3] * a[1] + b[4] * a[4], b[3] * a[2] + b[4] * a[5] + b[5]}};
}

Affine2D Affine2D::inverse() const {
  const double det = m[0] * m[4] - m[1] * m[3];
  if (det == 0.0 || !std::isfinite(det)) throw std::domain_error("affine transform is singular");
  const double a = m[4] / det, b = -m[1] / det, d = -m[3] / det, e = m[0] / det;
  return {{a, b, -(a * m[2] + b * m[5]), d, e, -(d * m[2] + e * m[5])}};
}

KeypointSet transform(const KeypointSet& kps, const Affine2D& a) {
  KeypointSet out;
  out.reserve(kps.size());
  for (const auto& kp : kps) out.push_back(a.apply(kp));
  return out;
}

void AugmentConfig::validate() const {
  if (flip_prob < 0.0 || flip_prob > 1.0) throw std::invalid_argument("augment: flip_prob must be in [0, 1]");
  if (rot_max_deg < 0.0) throw std::invalid_argument("augment: rot_max_deg must be >= 0");
  if (!(scale_lo > 0.0) || scale_hi < scale_lo) throw std::invalid_argument("augment: invalid scale range");
}

AugmentParams sample_augment(const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  AugmentParams p;
  p.flip = rng.bernoulli(cfg.flip_prob);
  p.angle_deg = rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg);
  p.scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  return p;
}

Affine2D augment_transform(const AugmentParams& p, Index height, Index width) {
  const double cx = 0.5 * static_cast<double>(width);
  const double cy = 0.5 * static_cast<double>(height);
  Affine2D a = Affine2D::translation(-cx, -cy)
                   .then(Affine2D::scaling(p.scale))
                   .then(Affine2D::rotation(p.angle_deg))
                   .then(Affine2D::translation(cx, cy));
  if (p.flip) a = a.then(Affine2D{{-1.0, 0.0, static_cast<double>(width), 0.0, 1.0, 0.0}});
  return a;
}

namespace {

bool is_identity(const AugmentParams& p) { return p.angle_deg == 0.0 && p.scale == 1.0 && !p.flip; }

KeypointSet permute_keypoints(const KeypointSet& kps, std::span<const int> perm) {
  if (perm.size() != kps.size()) throw std::invalid_argument("flip permutation does not match keypoint count");
  KeypointSet out(kps.size());
  for (std::size_t i = 0; i < kps.size(); ++i) out[static_cast<std::size_t>(perm[i])] = kps[i];
  return out;
}

// Bilinear sample at continuous index coordinates; `get` returns the fill
// value outside the source.
template <typename Get>
double bilinear(double sx, double sy, Get&& get) {
  const double fx = std::floor(sx);
  const double fy = std::floor(sy);
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const double ax = sx - fx;
  const double ay = sy - fy;
  return (1.0 - ay) * ((1.0 - ax) * get(x0, y0) + ax * get(x0 + 1, y0)) +
         ay * ((1.0 - ax) * get(x0, y0 + 1) + ax * get(x0 + 1, y0 + 1));
}

}  // namespace

double crop_scale(const BoundingBox& bbox, const CropOptions& options) {
  const double out_w = static_cast<double>(options.width);
  const double aspect = out_w / static_cast<double>(options.height);
  const double w = std::max(bbox.width, bbox.height * aspect) * options.padding;
  return out_w / w;
}

InstanceSample crop_instance(const Image& image, const BoundingBox& bbox, const KeypointSet& keypoints,
                             const CropOptions& options, const AugmentParams& aug, std::span<const int> flip_permutation) {
  if (image.empty()) throw DatasetError("crop_instance: empty image");
  if (!(bbox.width > 0.0) || !(bbox.height > 0.0) || !std::isfinite(bbox.x) || !std::isfinite(bbox.y)) {
    throw DatasetError("crop_instance: degenerate bbox");
  }
  if (options.height <= 0 || options.width <= 0 || !(options.padding > 0.0)) {
    throw std::invalid_argument("crop_instance: invalid crop options");
  }
  if (aug.flip && flip_permutation.empty()) throw std::invalid_argument("crop_instance: flip requires a permutation");
  const double out_w = static_cast<double>(options.width);
  const double out_h = static_cast<double>(options.height);
  const double scale = crop_scale(bbox, options);

  InstanceSample s;
  s.to_crop = Affine2D::translation(-bbox.center_x(), -bbox.center_y())
                  .then(Affine2D::scaling(scale))
                  .then(Affine2D::translation(0.5 * out_w, 0.5 * out_h))
                  .then(augment_transform(aug, options.height, options.width));
  s.to_original = s.to_crop.inverse();

  const Index hw = options.height * options.width;
  s.image = Tensor<float>({3, options.height, options.width});
  float* dst = s.image.mutable_ptr();
  const auto& norm = options.normalization;
  for (Index y = 0; y < options.height; ++y) {
    for (Index x = 0; x < options.width; ++x) {
      const auto src = s.to_original.apply(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
      for (int c = 0; c < 3; ++c) {
        const double v = bilinear(src[0] - 0.5, src[1] - 0.5, [&](int px, int py) -> double {
          if (px < 0 || py < 0 || px >= image.width || py >= image.height) return 0.0;
          return image.at(px, py)[c];
        });
        dst[c * hw + y * options.width + x] = static_cast<float>((v / 255.0 - norm.mean[c]) / norm.stddev[c]);
      }
    }
  }
  s.keypoints = transform(keypoints, s.to_crop);
  if (aug.flip) s.keypoints = permute_keypoints(s.keypoints, flip_permutation);
  return s;
}

InstanceSample augment(const InstanceSample& sample, const AugmentConfig& cfg, std::uint64_t seed,
                       const KeypointSchema& schema, const Normalization& norm) {
  Rng rng(seed);
  const AugmentParams p = sample_augment(cfg, rng);
  InstanceSample out = sample;
  out.image = sample.image.clone();
  if (is_identity(p)) return out;

  const Index h = sample.image.dim(1);
  const Index w = sample.image.dim(2);
  const Affine2D a = augment_transform(p, h, w);
  const Affine2D inv = a.inverse();
  const float* src = sample.image.ptr();
  float* dst = out.image.mutable_ptr();
  for (int c = 0; c < 3; ++c) {
    const double fill = -norm.mean[c] / norm.stddev[c];
    const float* plane = src + c * h * w;
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const auto q = inv.apply(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
        const double v = bilinear(q[0] - 0.5, q[1] - 0.5, [&](int px, int py) -> double {
          if (px < 0 || py < 0 || px >= w || py >= h) return fill;
          return plane[py * w + px];
        });
        dst[c * h * w + y * w + x] = static_cast<float>(v);
      }
    }
  }
  out.keypoints = transform(sample.keypoints, a);
  if (p.flip) {
    const auto perm = schema.flip_permutation();
    out.keypoints = permute_keypoints(out.keypoints, perm);
  }
  out.to_crop = sample.to_crop.then(a);
  out.to_original = out.to_crop.inverse();
  return out;
}

Image denormalize(const Tensor<float>& chw, const Normalization& norm) {
  if (chw.rank() != 3 || chw.dim(0) != 3) throw ShapeError("denormalize expects [3, H, W]");
  const Index h = chw.dim(1);
  const Index w = chw.dim(2);
  Image out(static_cast<int>(w), static_cast<int>(h));
  const float* p = chw.ptr();
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = p[c * h * w + y * w + x] * norm.stddev[c] + norm.mean[c];
        out.at(static_cast<int>(x), static_cast<int>(y))[c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  return out;
}

std::filesystem::path resolve_image_path(const std::filesystem::path& dir, const ImageInfo& info) {
  auto candidate = dir / "images" / info.file_name;
  if (std::filesystem::exists(candidate)) return candidate;
  return dir / info.file_name;
}

}  // namespace aggpose
