#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>

#include "aggpose/dataset.hpp"

namespace aggpose {

namespace {

struct Vec {
  double x = 0.0;
  double y = 0.0;
};

Vec operator+(Vec a, Vec b) { return {a.x + b.x, a.y + b.y}; }
Vec operator*(double s, Vec v) { return {s * v.x, s * v.y}; }

// Unit vector at `deg` from straight down, turned toward side `s` (+1 is the
// figure's left, which faces the viewer on the image's right).
Vec limb_dir(double deg, double s) {
  const double r = deg * std::numbers::pi / 180.0;
  return {s * std::sin(r), std::cos(r)};
}

Vec rotate(Vec v, double deg) {
  const double r = deg * std::numbers::pi / 180.0;
  return {v.x * std::cos(r) - v.y * std::sin(r), v.x * std::sin(r) + v.y * std::cos(r)};
}

Rgb hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h);
  const double f = h - i;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

const char* kLandmarks[] = {"head_top",      "nose",          "left_eye",      "right_eye",   "left_ear",
                            "right_ear",     "neck",          "left_shoulder", "right_shoulder", "left_elbow",
                            "right_elbow",   "left_wrist",    "right_wrist",   "left_finger", "right_finger",
                            "navel",         "pelvis",        "left_hip",      "right_hip",   "left_knee",
                            "right_knee",    "left_ankle",    "right_ankle",   "left_toe",    "right_toe"};
constexpr int kNumLandmarks = static_cast<int>(std::size(kLandmarks));

Rgb landmark_color(int i) { return hsv(0.61803398875 * i, 0.85, 1.0); }

}  // namespace

SyntheticScene render_synthetic_scene(std::uint64_t seed, const KeypointSchema& schema,
                                      const SyntheticOptions& options) {
  if (options.width < 16 || options.height < 16) throw std::invalid_argument("synthetic image must be >= 16x16");
  if (!(options.min_extent > 0.0) || options.max_extent > 0.98 || options.max_extent < options.min_extent) {
    throw std::invalid_argument("synthetic extent range must satisfy 0 < min <= max <= 0.98");
  }
  std::vector<int> pick;
  for (const auto& name : schema.keypoint_names) {
    int found = -1;
    for (int i = 0; i < kNumLandmarks; ++i) {
      if (name == kLandmarks[i]) found = i;
    }
    if (found < 0) throw std::invalid_argument("synthetic figures have no landmark named '" + name + "'");
    pick.push_back(found);
  }

  Rng rng(seed);
  SyntheticScene scene;
  auto angle = [&](double lo, double hi) {
    scene.joint_angles.push_back(rng.uniform(lo, hi));
    return scene.joint_angles.back();
  };
  auto length = [&](double nominal) {
    scene.limb_lengths.push_back(nominal * rng.uniform(0.9, 1.1));
    return scene.limb_lengths.back();
  };

  // Body frame in torso units, y down, pelvis at the origin.
  std::map<std::string, Vec> p;
  const Vec up{0.0, -1.0};
  const double tilt = angle(-25.0, 25.0);
  p["pelvis"] = {0.0, 0.0};
  p["neck"] = length(1.0) * up;
  p["navel"] = 0.45 * p["neck"];
  const Vec head_axis = rotate(up, tilt);
  const Vec head_side = rotate({1.0, 0.0}, tilt);
  const Vec head = p["neck"] + length(0.32) * head_axis;
  p["head_top"] = head + 0.2 * head_axis;
  p["nose"] = head + (-0.04) * head_axis;
  p["left_eye"] = head + 0.08 * head_side + 0.05 * head_axis;
  p["right_eye"] = head + (-0.08) * head_side + 0.05 * head_axis;
  p["left_ear"] = head + 0.18 * head_side;
  p["right_ear"] = head + (-0.18) * head_side;

  for (int side = 0; side < 2; ++side) {
    const double s = side == 0 ? 1.0 : -1.0;
    const std::string prefix = side == 0 ? "left_" : "right_";
    const Vec shoulder = p["neck"] + Vec{s * length(0.28), 0.06};
    const double a0 = angle(15.0, 165.0);
    const double a1 = a0 + angle(-110.0, 110.0);
    const double a2 = a1 + angle(-40.0, 40.0);
    const Vec elbow = shoulder + length(0.42) * limb_dir(a0, s);
    const Vec wrist = elbow + length(0.36) * limb_dir(a1, s);
    p[prefix + "shoulder"] = shoulder;
    p[prefix + "elbow"] = elbow;
    p[prefix + "wrist"] = wrist;
    p[prefix + "finger"] = wrist + length(0.14) * limb_dir(a2, s);

    const Vec hip{s * length(0.16), 0.04};
    const double b0 = angle(-5.0, 55.0);
    const double b1 = b0 + angle(-70.0, 70.0);
    const double b2 = b1 + angle(60.0, 110.0);
    const Vec knee = hip + length(0.5) * limb_dir(b0, s);
    const Vec ankle = knee + length(0.45) * limb_dir(b1, s);
    p[prefix + "hip"] = hip;
    p[prefix + "knee"] = knee;
    p[prefix + "ankle"] = ankle;
    p[prefix + "toe"] = ankle + length(0.15) * limb_dir(b2, s);
  }

  scene.rotation = rng.uniform(-35.0, 35.0);
  for (auto& [name, v] : p) v = rotate(v, scene.rotation);
  const Vec head_rot = rotate(head, scene.rotation);
  const double head_radius = 0.2;

  double x0 = head_rot.x - head_radius, x1 = head_rot.x + head_radius;
  double y0 = head_rot.y - head_radius, y1 = head_rot.y + head_radius;
  for (const auto& [name, v] : p) {
    x0 = std::min(x0, v.x);
    x1 = std::max(x1, v.x);
    y0 = std::min(y0, v.y);
    y1 = std::max(y1, v.y);
  }
  const double w = options.width;
  const double h = options.height;
  const double extent = rng.uniform(options.min_extent, options.max_extent);
  scene.scale = extent / std::max((x1 - x0) / w, (y1 - y0) / h);
  const double slack_x = w - (x1 - x0) * scene.scale;
  const double slack_y = h - (y1 - y0) * scene.scale;
  scene.tx = rng.uniform(0.0, slack_x) - x0 * scene.scale;
  scene.ty = rng.uniform(0.0, slack_y) - y0 * scene.scale;
  auto px = [&](Vec v) { return Vec{v.x * scene.scale + scene.tx, v.y * scene.scale + scene.ty}; };

  // Background: tinted gradient plus per-pixel noise.
  const Rgb base{rng.uniform(0.15, 0.5), rng.uniform(0.15, 0.5), rng.uniform(0.15, 0.5)};
  const double gx = rng.uniform(-0.2, 0.2);
  const double gy = rng.uniform(-0.2, 0.2);
  Canvas canvas(options.width, options.height);
  for (int y = 0; y < options.height; ++y) {
    for (int x = 0; x < options.width; ++x) {
      const double g = gx * (x / w - 0.5) + gy * (y / h - 0.5);
      Rgb c;
      for (int ch = 0; ch < 3; ++ch) c[ch] = base[ch] + g + rng.uniform(-options.noise, options.noise);
      canvas.set(x, y, c);
    }
  }

  const double L = scene.scale;
  const Rgb torso = hsv(rng.uniform(0.25, 0.45), 0.6, 0.8);
  const Rgb skin{0.95, 0.8, 0.65};
  const Rgb left_color{1.0, 0.45, 0.15};
  const Rgb right_color{0.15, 0.55, 1.0};
  auto seg = [&](const char* a, const char* b, double radius, Rgb c) {
    const Vec pa = px(p[a]);
    const Vec pb = px(p[b]);
    canvas.draw_segment(pa.x, pa.y, pb.x, pb.y, std::max(0.6, radius * L), c);
  };
  seg("neck", "pelvis", 0.15, torso);
  seg("left_shoulder", "right_shoulder", 0.07, torso);
  seg("left_hip", "right_hip", 0.08, torso);
  const Vec hc = px(head_rot);
  canvas.draw_disc(hc.x, hc.y, head_radius * L, skin);
  for (int side = 0; side < 2; ++side) {
    const Rgb c = side == 0 ? left_color : right_color;
    const std::string pr = side == 0 ? "left_" : "right_";
    auto limb = [&](const std::string& a, const std::string& b, double r) { seg((pr + a).c_str(), (pr + b).c_str(), r, c); };
    limb("shoulder", "elbow", 0.065);
    limb("elbow", "wrist", 0.055);
    limb("wrist", "finger", 0.04);
    limb("hip", "knee", 0.075);
    limb("knee", "ankle", 0.06);
    limb("ankle", "toe", 0.045);
  }
  const double blob = std::max(1.0, 0.045 * L);
  for (int i : pick) {
    const Vec q = px(p[kLandmarks[i]]);
    canvas.draw_disc(q.x, q.y, blob, landmark_color(i));
  }
  scene.image = canvas.to_image();

  for (int i : pick) {
    const Vec q = px(p[kLandmarks[i]]);
    scene.keypoints.push_back({q.x, q.y, 2});
  }
  const double margin = 0.1 * L;
  const double bx0 = std::max(0.0, x0 * L + scene.tx - margin);
  const double by0 = std::max(0.0, y0 * L + scene.ty - margin);
  const double bx1 = std::min(w, x1 * L + scene.tx + margin);
  const double by1 = std::min(h, y1 * L + scene.ty + margin);
  scene.bbox = {bx0, by0, bx1 - bx0, by1 - by0};
  return scene;
}

CocoDataset generate_synthetic(int n, std::uint64_t seed, const KeypointSchema& schema,
                               const std::filesystem::path& out_dir, const SyntheticOptions& options) {
  if (n < 1) throw std::invalid_argument("generate_synthetic: n must be >= 1");
  schema.validate();
  std::filesystem::create_directories(out_dir / "images");
  CocoDataset data;
  for (int i = 0; i < n; ++i) {
    const SyntheticScene scene = render_synthetic_scene(derive_seed(seed, static_cast<std::uint64_t>(i)), schema, options);
    char name[32];
    std::snprintf(name, sizeof(name), "%06d.png", i + 1);
    write_png(scene.image, out_dir / "images" / name);
    data.images.push_back({i + 1, name, options.width, options.height});
    AnnotationRecord ann;
    ann.id = i + 1;
    ann.image_id = i + 1;
    ann.keypoints = scene.keypoints;
    ann.bbox = scene.bbox;
    ann.area = scene.bbox.area() * kBoxAreaFactor;
    data.annotations.push_back(std::move(ann));
  }
  write_coco_keypoints(data, schema, out_dir / "annotations.json");
  return data;
}

}  // namespace aggpose
