#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "aggpose/dataset.hpp"
#include "aggpose/fileutil.hpp"
#include "aggpose/image.hpp"
#include "test_util.hpp"

using namespace aggpose;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json minimal_coco() {
  json kps = json::array();
  for (int i = 0; i < 17; ++i) {
    kps.push_back(10 + 3 * i);
    kps.push_back(20 + 2 * i);
    kps.push_back(i == 4 ? 0 : 2);
  }
  json names = json::array();
  for (const auto& n : KeypointSchema::coco17().keypoint_names) names.push_back(n);
  return {{"images", {{{"id", 7}, {"file_name", "a.png"}, {"width", 120}, {"height", 100}}}},
          {"annotations",
           {{{"id", 1}, {"image_id", 7}, {"category_id", 1}, {"keypoints", kps}, {"num_keypoints", 16},
             {"bbox", {5, 10, 70, 60}}, {"area", 2000.0}, {"iscrowd", 0}}}},
          {"categories", {{{"id", 1}, {"name", "person"}, {"keypoints", names}}}}};
}

}  // namespace

TEST(Coco, ParsesMinimalFixture) {
  const auto data = parse_coco_keypoints(minimal_coco(), KeypointSchema::coco17());
  ASSERT_EQ(data.images.size(), 1u);
  ASSERT_EQ(data.annotations.size(), 1u);
  const auto& a = data.annotations[0];
  EXPECT_EQ(a.keypoints.size(), 17u);
  EXPECT_EQ(a.keypoints[4].visibility, 0);
  EXPECT_EQ(a.keypoints[16].x, 58.0);
  // No segmentation: area comes from the box.
  EXPECT_NEAR(a.area, 70 * 60 * kBoxAreaFactor, 1e-9);
  EXPECT_EQ(data.find_image(7)->width, 120);
}

TEST(Coco, RejectsSchemaAndRecordErrors) {
  EXPECT_THROW(parse_coco_keypoints(minimal_coco(), KeypointSchema::infant21()), DatasetError);
  auto bad = minimal_coco();
  bad["annotations"][0]["image_id"] = 99;
  try {
    parse_coco_keypoints(bad, KeypointSchema::coco17());
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("99"), std::string::npos);
  }
  bad = minimal_coco();
  bad["annotations"][0]["keypoints"][2] = 5;
  EXPECT_THROW(parse_coco_keypoints(bad, KeypointSchema::coco17()), DatasetError);
  bad = minimal_coco();
  bad.erase("images");
  EXPECT_THROW(parse_coco_keypoints(bad, KeypointSchema::coco17()), DatasetError);
}

TEST(Coco, MissingAreaFallsBackToBox) {
  auto doc = minimal_coco();
  doc["annotations"][0].erase("area");
  const auto data = parse_coco_keypoints(doc, KeypointSchema::coco17());
  EXPECT_NEAR(data.annotations[0].area, 70 * 60 * kBoxAreaFactor, 1e-9);
}

TEST(Coco, SegmentationKeepsStoredArea) {
  auto doc = minimal_coco();
  doc["annotations"][0]["segmentation"] = {{5, 10, 75, 10, 75, 70}};
  EXPECT_EQ(parse_coco_keypoints(doc, KeypointSchema::coco17()).annotations[0].area, 2000.0);
}

TEST(Coco, WriteLoadRoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "aggpose_test_coco";
  fs::create_directories(dir);
  const auto schema = KeypointSchema::coco17();
  const auto data = parse_coco_keypoints(minimal_coco(), schema);
  write_coco_keypoints(data, schema, dir / "ann.json");
  const auto back = load_coco_keypoints(dir / "ann.json", schema);
  EXPECT_EQ(coco_to_json(back, schema), coco_to_json(data, schema));
  fs::remove_all(dir);
}

TEST(Crop, FullImageBoxIsPureScaling) {
  Image img(96, 128, 50);
  CropOptions opts;
  opts.height = 64;
  opts.width = 48;
  const auto s = crop_instance(img, {0, 0, 96, 128}, {{48, 64, 2}}, opts);
  EXPECT_NEAR(s.keypoints[0].x, 24.0, 1e-9);
  EXPECT_NEAR(s.keypoints[0].y, 32.0, 1e-9);
  EXPECT_NEAR(crop_scale({0, 0, 96, 128}, opts), 0.5, 1e-12);
  EXPECT_EQ(s.image.shape(), (Shape{3, 64, 48}));
}

TEST(Crop, ForwardInverseRoundTrip) {
  Rng rng(3);
  Image img(200, 150, 10);
  CropOptions opts;
  opts.height = 64;
  opts.width = 48;
  opts.padding = 1.25;
  KeypointSet kps;
  for (int i = 0; i < 100; ++i) kps.push_back({rng.uniform(0, 200), rng.uniform(0, 150), 2});
  const auto s = crop_instance(img, {30, 20, 90, 100}, kps, opts);
  double worst = 0.0;
  for (std::size_t i = 0; i < kps.size(); ++i) {
    const auto p = s.to_original.apply(s.keypoints[i].x, s.keypoints[i].y);
    worst = std::max({worst, std::abs(p[0] - kps[i].x), std::abs(p[1] - kps[i].y)});
  }
  EXPECT_LT(worst, 1e-6);
  EXPECT_THROW(crop_instance(img, {0, 0, 0, 10}, kps, opts), DatasetError);
}

TEST(Crop, WideBoxKeepsEveryInsideKeypoint) {
  Image img(300, 100, 0);
  CropOptions opts;
  opts.height = 64;
  opts.width = 48;
  KeypointSet kps{{10, 40, 2}, {289, 60, 2}, {150, 11, 2}, {150, 89, 2}};
  const auto s = crop_instance(img, {10, 40, 280, 30}, kps, opts);
  for (const auto& kp : s.keypoints) {
    EXPECT_GE(kp.x, -1e-9);
    EXPECT_LE(kp.x, 48.0 + 1e-9);
    EXPECT_GE(kp.y, -1e-9);
    EXPECT_LE(kp.y, 64.0 + 1e-9);
  }
}

TEST(Augment, FlipTwiceIsIdentityAndSwapsWrists) {
  const auto schema = KeypointSchema::infant21();
  Rng rng(4);
  Image img(96, 128, 80);
  KeypointSet kps;
  for (int i = 0; i < 21; ++i) kps.push_back({rng.uniform(20, 70), rng.uniform(20, 100), 2});
  CropOptions opts;
  opts.height = 64;
  opts.width = 48;
  const auto s = crop_instance(img, {0, 0, 96, 128}, kps, opts);
  const AugmentConfig flip_only{1.0, 0.0, 1.0, 1.0};
  const auto once = augment(s, flip_only, 1, schema);
  const auto twice = augment(once, flip_only, 2, schema);
  for (std::size_t i = 0; i < 21; ++i) {
    EXPECT_NEAR(twice.keypoints[i].x, s.keypoints[i].x, 1e-6);
    EXPECT_NEAR(twice.keypoints[i].y, s.keypoints[i].y, 1e-6);
  }
  const auto lw = static_cast<std::size_t>(schema.index_of("left_wrist"));
  const auto rw = static_cast<std::size_t>(schema.index_of("right_wrist"));
  EXPECT_NEAR(once.keypoints[lw].x, 48.0 - s.keypoints[rw].x, 1e-9);
  EXPECT_NEAR(once.keypoints[lw].y, s.keypoints[rw].y, 1e-9);
  EXPECT_NEAR(once.keypoints[rw].x, 48.0 - s.keypoints[lw].x, 1e-9);
}

TEST(Augment, IdentityConfigLeavesSampleUnchanged) {
  const auto schema = KeypointSchema::infant21();
  Image img(48, 64, 0);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 7);
  CropOptions opts;
  opts.height = 64;
  opts.width = 48;
  KeypointSet kps(21, {10, 12, 2});
  const auto s = crop_instance(img, {0, 0, 48, 64}, kps, opts);
  const auto a = augment(s, AugmentConfig::none(), 9, schema);
  EXPECT_EQ(aggpose::testing::max_abs_diff(a.image, s.image), 0.0);
  for (std::size_t i = 0; i < 21; ++i) EXPECT_EQ(a.keypoints[i].x, s.keypoints[i].x);
}

TEST(Augment, SeededAndWithinRange) {
  const AugmentConfig cfg;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng a(seed), b(seed);
    const auto p = sample_augment(cfg, a), q = sample_augment(cfg, b);
    EXPECT_EQ(p.angle_deg, q.angle_deg);
    EXPECT_EQ(p.flip, q.flip);
    EXPECT_LE(std::abs(p.angle_deg), 40.0);
    EXPECT_GE(p.scale, 0.65);
    EXPECT_LE(p.scale, 1.35);
  }
  EXPECT_THROW((AugmentConfig{1.5, 0, 1, 1}.validate()), std::invalid_argument);
}

TEST(Affine, ComposeAndInvert) {
  const Affine2D a = Affine2D::rotation(30).then(Affine2D::scaling(1.7)).then(Affine2D::translation(3, -2));
  const auto p = a.apply(5.0, 7.0);
  const auto q = a.inverse().apply(p[0], p[1]);
  EXPECT_NEAR(q[0], 5.0, 1e-12);
  EXPECT_NEAR(q[1], 7.0, 1e-12);
  EXPECT_THROW(Affine2D::scaling(0.0).inverse(), std::domain_error);
}

TEST(Png, RoundTripIsLossless) {
  const fs::path path = fs::temp_directory_path() / "aggpose_test_roundtrip.png";
  Image img(13, 7);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>((i * 37) % 256);
  write_png(img, path);
  const Image back = read_png(path);
  EXPECT_EQ(back.width, 13);
  EXPECT_EQ(back.height, 7);
  EXPECT_EQ(back.pixels, img.pixels);
  fs::remove(path);
  EXPECT_THROW(read_png(path), ImageIoError);
}

TEST(Synthetic, DeterministicFilesAndSelfConsistent) {
  const auto schema = KeypointSchema::infant21();
  const fs::path a = fs::temp_directory_path() / "aggpose_test_synth_a";
  const fs::path b = fs::temp_directory_path() / "aggpose_test_synth_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const auto data = generate_synthetic(4, 7, schema, a);
  generate_synthetic(4, 7, schema, b);
  EXPECT_EQ(read_text(a / "annotations.json"), read_text(b / "annotations.json"));
  for (const auto& info : data.images) {
    EXPECT_EQ(read_text(resolve_image_path(a, info)), read_text(resolve_image_path(b, info)));
  }
  const auto loaded = load_coco_keypoints(a / "annotations.json", schema);
  ASSERT_EQ(loaded.annotations.size(), 4u);
  for (const auto& ann : loaded.annotations) {
    DetectionRecord self{ann.image_id, ann.keypoints, 1.0, 1};
    EXPECT_DOUBLE_EQ(*oks(self, ann, schema), 1.0);
    EXPECT_EQ(count_labeled(ann.keypoints), 21);
  }
  generate_synthetic(4, 8, schema, b);
  EXPECT_NE(read_text(a / "annotations.json"), read_text(b / "annotations.json"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Synthetic, SceneKeypointsInsideImage) {
  const auto schema = KeypointSchema::infant21();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto scene = render_synthetic_scene(seed, schema);
    EXPECT_EQ(scene.image.width, 96);
    EXPECT_EQ(scene.image.height, 128);
    for (const auto& kp : scene.keypoints) {
      EXPECT_GE(kp.x, 0.0);
      EXPECT_LT(kp.x, 96.0);
      EXPECT_GE(kp.y, 0.0);
      EXPECT_LT(kp.y, 128.0);
    }
  }
}

TEST(Results, LoadRejectsWrongKeypointCount) {
  const fs::path path = fs::temp_directory_path() / "aggpose_test_results.json";
  atomic_write_text(path, R"([{"image_id": 1, "category_id": 1, "keypoints": [1, 2, 1], "score": 0.5}])");
  EXPECT_THROW(load_coco_results(path, KeypointSchema::coco17()), SchemaMismatch);
  atomic_write_text(path, "[]");
  EXPECT_TRUE(load_coco_results(path, KeypointSchema::coco17()).empty());
  fs::remove(path);
}
