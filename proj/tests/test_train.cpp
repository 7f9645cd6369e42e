#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "aggpose/checkpoint.hpp"
#include "aggpose/fileutil.hpp"
#include "aggpose/inference.hpp"
#include "aggpose/manifest.hpp"
#include "aggpose/parallel.hpp"
#include "aggpose/trainer.hpp"
#include "test_util.hpp"

using namespace aggpose;
namespace fs = std::filesystem;
using aggpose::testing::max_abs_diff;

namespace {

// Four synthetic infant images shared by every test in this file.
class TrainFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "aggpose_test_train_data";
    fs::remove_all(dir_);
    generate_synthetic(4, 7, KeypointSchema::infant21(), dir_);
    data_ = new TrainingData(TrainingData::load(dir_, KeypointSchema::infant21()));
  }
  static void TearDownTestSuite() {
    delete data_;
    data_ = nullptr;
    fs::remove_all(dir_);
  }

  static TrainConfig quiet_config() {
    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.total_steps = 100;
    cfg.augment = false;
    cfg.seed = 3;
    return cfg;
  }

  static Batch<float> batch_for(const ModelConfig& mc, const TrainConfig& cfg, std::vector<std::size_t> idx,
                                std::int64_t step = 0) {
    return make_batch<float>(*data_, idx, mc, cfg, step);
  }

  static std::map<std::string, std::vector<float>> snapshot(const AggPoseModel<float>& m) {
    std::map<std::string, std::vector<float>> out;
    for (const auto& p : m.parameters()) out[p.name].assign(p.value.data().begin(), p.value.data().end());
    return out;
  }

  static inline fs::path dir_;
  static inline TrainingData* data_ = nullptr;
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("aggpose_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(AdamW, ZeroGradientZeroDecayIsFixedPoint) {
  std::vector<double> p{1.5, -2.0}, g{0.0, 0.0};
  AdamState<double> st;
  adamw_update<double>(p, g, st, {1e-3, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_EQ(p, (std::vector<double>{1.5, -2.0}));
  EXPECT_EQ(st.step, 1);
}

TEST(AdamW, FirstStepMatchesHandComputation) {
  std::vector<double> p{1.0, 2.0}, g{0.5, -0.2};
  AdamState<double> st;
  const AdamWHyper h{0.1, 0.9, 0.999, 1e-8, 0.0};
  adamw_update<double>(p, g, st, h);
  // m_hat = g, v_hat = g^2 after bias correction.
  EXPECT_NEAR(p[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(p[1], 2.0 + 0.1 * 0.2 / (0.2 + 1e-8), 1e-12);
  EXPECT_NEAR(st.m[0], 0.05, 1e-15);
  EXPECT_NEAR(st.v[0], 0.001 * 0.25, 1e-15);
}

TEST(AdamW, DecayOnlyShrinksParameter) {
  std::vector<double> p{3.0}, g{0.0};
  AdamState<double> st;
  adamw_update<double>(p, g, st, {0.01, 0.9, 0.999, 1e-8, 0.1});
  EXPECT_DOUBLE_EQ(p[0], 3.0 * (1.0 - 0.01 * 0.1));
  std::vector<double> wrong{1.0, 2.0};
  EXPECT_THROW(adamw_update<double>(wrong, g, st, {}), ShapeError);
}

TEST(TrainConfigTest, ScheduleAndJson) {
  TrainConfig cfg;
  cfg.total_steps = 100;
  EXPECT_EQ(cfg.resolved_milestones(), (std::vector<std::int64_t>{70, 90}));
  EXPECT_DOUBLE_EQ(cfg.lr_at(69), 1e-3);
  EXPECT_NEAR(cfg.lr_at(70), 1e-4, 1e-18);
  EXPECT_NEAR(cfg.lr_at(95), 1e-5, 1e-18);
  cfg.freeze_schedule = {{10, {1}}, {20, {1, 2}}};
  EXPECT_EQ(cfg.frozen_at(5), (std::set<int>{1}));
  EXPECT_EQ(cfg.frozen_at(15), (std::set<int>{1, 2}));
  EXPECT_TRUE(cfg.frozen_at(20).empty());

  const TrainConfig back = TrainConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  auto j = cfg.to_json();
  j["learning_rate"] = 0.1;
  EXPECT_THROW(TrainConfig::from_json(j), std::invalid_argument);
  cfg.optimizer.lr = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.optimizer.lr = 1e-3;
  cfg.milestones = {50, 40};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST_F(TrainFixture, BatchShapesAndMasks) {
  const ModelConfig mc = ModelConfig::aggpose_t(21);
  const auto b = batch_for(mc, quiet_config(), {0, 3});
  EXPECT_EQ(b.images.shape(), (Shape{2, 3, 64, 48}));
  EXPECT_EQ(b.targets.shape(), (Shape{2, 21, 16, 12}));
  EXPECT_EQ(b.mask.shape(), (Shape{2, 21}));
}

TEST_F(TrainFixture, ThreadCountDoesNotChangeBatches) {
  const ModelConfig mc = ModelConfig::aggpose_t(21);
  TrainConfig cfg = quiet_config();
  cfg.augment = true;
  set_thread_count(1);
  const auto a = batch_for(mc, cfg, {0, 1, 2, 3}, 5);
  set_thread_count(4);
  const auto b = batch_for(mc, cfg, {0, 1, 2, 3}, 5);
  set_thread_count(1);
  EXPECT_EQ(max_abs_diff(a.images, b.images), 0.0);
  EXPECT_EQ(max_abs_diff(a.targets, b.targets), 0.0);
}

TEST(Parallel, PropagatesExceptionsAndCoversRange) {
  set_thread_count(3);
  std::vector<int> hits(10, 0);
  parallel_for(10, [&](std::size_t i) { hits[i] += 1; });
  EXPECT_EQ(hits, std::vector<int>(10, 1));
  EXPECT_THROW(parallel_for(10, [](std::size_t i) {
                 if (i == 7) throw std::runtime_error("boom");
               }),
               std::runtime_error);
  set_thread_count(1);
  EXPECT_THROW(set_thread_count(0), std::invalid_argument);
}

TEST_F(TrainFixture, ZeroHeadAndZeroTargetsGiveZeroLoss) {
  AggPoseModel<float> model(ModelConfig::aggpose_t(21), 1);
  auto b = batch_for(model.config(), quiet_config(), {0, 1});
  b.targets = Tensor<float>(b.targets.shape());
  Trainer<float> trainer(model, quiet_config());
  EXPECT_EQ(trainer.train_step(b), 0.0);
}

TEST_F(TrainFixture, FrozenLevelIsBitwiseUnchanged) {
  AggPoseModel<float> model(ModelConfig::aggpose_t(21), 1);
  TrainConfig cfg = quiet_config();
  cfg.freeze_schedule = {{1000, {1}}};
  Trainer<float> trainer(model, cfg);
  const auto before = snapshot(model);
  const auto b = batch_for(model.config(), cfg, {0, 1});
  for (int i = 0; i < 10; ++i) trainer.train_step(b);
  const auto after = snapshot(model);
  int changed_level2 = 0;
  for (const auto& p : model.parameters()) {
    if (p.level == 1) {
      EXPECT_EQ(before.at(p.name), after.at(p.name)) << p.name;
    } else if (before.at(p.name) != after.at(p.name)) {
      ++changed_level2;
    }
  }
  EXPECT_GT(changed_level2, 0);
}

TEST_F(TrainFixture, SingleSampleLossDecreasesMonotonically) {
  AggPoseModel<float> model(ModelConfig::aggpose_t(21), 1);
  TrainConfig cfg = quiet_config();
  cfg.batch_size = 1;
  Trainer<float> trainer(model, cfg);
  const auto b = batch_for(model.config(), cfg, {0});
  double prev = trainer.train_step(b);
  for (int i = 1; i < 50; ++i) {
    const double loss = trainer.train_step(b);
    EXPECT_LT(loss, prev) << "step " << i;
    prev = loss;
  }
}

TEST_F(TrainFixture, TenStepLossTraceIsBitwiseDeterministic) {
  auto run = [&] {
    AggPoseModel<float> model(ModelConfig::aggpose_t(21), 5);
    TrainConfig cfg = quiet_config();
    cfg.augment = true;
    Trainer<float> trainer(model, cfg);
    std::vector<double> trace;
    for (int s = 0; s < 10; ++s) {
      const auto idx = trainer.batch_indices(data_->instances.size(), s);
      trace.push_back(trainer.train_step(batch_for(model.config(), cfg, idx, s)));
    }
    return trace;
  };
  const auto a = run(), b = run();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]) << i;
}

TEST_F(TrainFixture, ResumeReproducesContinuationBitwise) {
  const fs::path dir = scratch("resume");
  TrainConfig cfg = quiet_config();
  cfg.augment = true;
  auto step = [&](Trainer<float>& t, const ModelConfig& mc) {
    const auto idx = t.batch_indices(data_->instances.size(), t.step());
    return t.train_step(batch_for(mc, cfg, idx, t.step()));
  };

  AggPoseModel<float> model(ModelConfig::aggpose_t(21), 9);
  Trainer<float> trainer(model, cfg);
  for (int i = 0; i < 5; ++i) step(trainer, model.config());
  write_checkpoint(trainer.checkpoint(), dir / "mid.ckpt");
  std::vector<double> straight;
  for (int i = 0; i < 5; ++i) straight.push_back(step(trainer, model.config()));

  const Checkpoint ckpt = read_checkpoint(dir / "mid.ckpt");
  AggPoseModel<float> resumed = model_from_checkpoint<float>(ckpt);
  Trainer<float> again(resumed, cfg);
  again.restore(ckpt);
  EXPECT_EQ(again.step(), 5);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(step(again, resumed.config()), straight[static_cast<std::size_t>(i)]) << i;
  fs::remove_all(dir);
}

TEST_F(TrainFixture, GradientReachesEveryLiveParameter) {
  AggPoseModel<float> model(ModelConfig::aggpose_t(21), 2);
  Trainer<float> trainer(model, quiet_config());
  const auto b = batch_for(model.config(), quiet_config(), {0, 1});
  // The first step leaves the zero-initialized head nonzero so gradients reach the body.
  trainer.train_step(b);
  trainer.train_step(b);
  for (const auto& [name, norm] : trainer.grad_norms()) {
    // The coarsest fusion output is never read by the head, and key biases
    // cancel inside the softmax.
    const bool dead = name.rfind("stage2.fuse.level2.", 0) == 0 || name.ends_with("attn.key.bias");
    if (dead) continue;
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST_F(TrainFixture, NonFiniteLossAbortsWithDiagnostics) {
  AggPoseModel<float> model(ModelConfig::aggpose_t(21), 1);
  auto b = batch_for(model.config(), quiet_config(), {0});
  b.targets.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  Trainer<float> trainer(model, quiet_config());
  try {
    trainer.train_step(b);
    FAIL();
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("lr"), std::string::npos) << msg;
  }
}

TEST_F(TrainFixture, FreezeThenUnfreezeTouchesIntendedSubsets) {
  AggPoseModel<float> model(ModelConfig::aggpose_t(21), 4);
  TrainConfig cfg = quiet_config();
  cfg.freeze_schedule = {{3, {1}}};
  Trainer<float> trainer(model, cfg);
  const auto b = batch_for(model.config(), cfg, {0, 1});
  const auto s0 = snapshot(model);
  for (int i = 0; i < 3; ++i) trainer.train_step(b);
  const auto s1 = snapshot(model);
  for (int i = 0; i < 3; ++i) trainer.train_step(b);
  const auto s2 = snapshot(model);
  int level1_changed_later = 0;
  for (const auto& p : model.parameters()) {
    if (p.level == 1) {
      EXPECT_EQ(s0.at(p.name), s1.at(p.name)) << p.name;
      level1_changed_later += s1.at(p.name) != s2.at(p.name) ? 1 : 0;
    }
  }
  EXPECT_GT(level1_changed_later, 0);
  EXPECT_TRUE(model.frozen_levels().empty());
}

TEST(Checkpoint, RoundTripPreservesForwardBitwise) {
  const fs::path dir = scratch("ckpt");
  const AggPoseModel<float> model(ModelConfig::aggpose_t(21), 3);
  write_checkpoint(make_checkpoint(model, 12, {{"schema", "infant"}}), dir / "m.ckpt");
  const Checkpoint ckpt = read_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(ckpt.step, 12);
  EXPECT_EQ(ckpt.metadata["schema"], "infant");
  const AggPoseModel<float> back = model_from_checkpoint<float>(ckpt);
  Rng rng(1);
  const Tensor<float> x = aggpose::testing::random_tensor<float>({2, 3, 64, 48}, rng);
  EXPECT_EQ(max_abs_diff(model.forward(x), back.forward(x)), 0.0);
  fs::remove_all(dir);
}

TEST(Checkpoint, PartialLoadingPolicies) {
  const AggPoseModel<float> src(ModelConfig::aggpose_t(21), 3);
  const Checkpoint ckpt = make_checkpoint(src);

  AggPoseModel<float> dst(ModelConfig::aggpose_t(21), 4);
  LoadOptions by_prefix{LoadPolicy::ByPrefix, {"stage1."}, {}, {}};
  const auto report = load_partial(dst, ckpt, by_prefix);
  for (const auto& name : report.loaded) EXPECT_TRUE(name.starts_with("stage1.")) << name;
  for (const auto& name : report.missing) EXPECT_FALSE(name.starts_with("stage1.")) << name;
  EXPECT_EQ(report.loaded.size() + report.missing.size(), dst.parameters().size());
  EXPECT_EQ(dst.parameter("stage1.embed.proj.weight").value.data()[0],
            src.parameter("stage1.embed.proj.weight").value.data()[0]);

  Checkpoint trimmed = ckpt;
  trimmed.tensors.pop_back();
  EXPECT_THROW(load_partial(dst, trimmed), CheckpointError);

  Checkpoint conflict = ckpt;
  conflict.tensors[0].shape = {1, static_cast<Index>(conflict.tensors[0].bytes.size() / 4)};
  EXPECT_THROW(load_partial(dst, conflict, by_prefix), CheckpointError);

  LoadOptions frozen{LoadPolicy::PerLevelFrozen, {}, {}, {1}};
  load_partial(dst, ckpt, frozen);
  EXPECT_EQ(dst.frozen_levels(), (std::set<int>{1}));
}

TEST(Checkpoint, ConvertsBetweenPrecisions) {
  const AggPoseModel<double> src(ModelConfig::aggpose_t(21), 3);
  const Checkpoint ckpt = make_checkpoint(src);
  EXPECT_EQ(ckpt.dtype, "float64");
  const AggPoseModel<float> dst = model_from_checkpoint<float>(ckpt);
  for (const auto& p : src.parameters()) {
    const auto& q = dst.parameter(p.name);
    for (Index i = 0; i < p.value.numel(); ++i) ASSERT_EQ(q.value.data()[i], static_cast<float>(p.value.data()[i]));
  }
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const fs::path dir = scratch("ckpt_bad");
  atomic_write_text(dir / "x.ckpt", "not a checkpoint");
  EXPECT_THROW(read_checkpoint(dir / "x.ckpt"), CheckpointError);
  EXPECT_THROW(read_checkpoint(dir / "missing.ckpt"), CheckpointError);
  fs::remove_all(dir);
}

TEST(Manifest, WritesOnlyWhenOutputsExist) {
  const fs::path dir = scratch("manifest");
  RunManifest m;
  m.command = "synth";
  m.arguments = {"aggpose", "synth"};
  m.seed = 7;
  m.started = utc_timestamp();
  m.finished = utc_timestamp();
  m.outputs = {dir / "absent.txt"};
  EXPECT_THROW(m.write(dir / "manifest.json"), std::runtime_error);
  EXPECT_FALSE(fs::exists(dir / "manifest.json"));
  atomic_write_text(dir / "absent.txt", "x");
  m.write(dir / "manifest.json");
  const auto back = RunManifest::from_json(nlohmann::json::parse(read_text(dir / "manifest.json")));
  EXPECT_EQ(back.to_json(), m.to_json());
  EXPECT_EQ(m.started.size(), 20u);
  fs::remove_all(dir);
}

TEST_F(TrainFixture, GroundTruthDetectionsHaveZeroCellError) {
  std::vector<DetectionRecord> dets;
  for (const auto& a : data_->annotations()) dets.push_back({a.image_id, a.keypoints, 1.0, 1});
  CropOptions crop;
  crop.height = 64;
  crop.width = 48;
  EXPECT_EQ(mean_cell_error(dets, data_->annotations(), crop), 0.0);
}

TEST_F(TrainFixture, InferenceOutputsAndOverlay) {
  const AggPoseModel<float> model(ModelConfig::aggpose_t(21), 1);
  const Image& img = data_->pixels[0];
  const auto pred = predict_image(model, img);
  ASSERT_EQ(pred.keypoints.size(), 21u);
  EXPECT_EQ(pred.heatmaps.shape(), (Shape{21, 16, 12}));
  const auto j = prediction_to_json(pred, KeypointSchema::infant21());
  EXPECT_EQ(j["keypoints"].size(), 21u);
  EXPECT_EQ(j["keypoints"][7]["name"], "left_wrist");
  const Image overlay = render_overlay(img, pred, KeypointSchema::infant21());
  EXPECT_EQ(overlay.width, img.width);
  EXPECT_EQ(overlay.height, img.height);
}

TEST(Bench, SharesSumToOne) {
  const BenchReport r = benchmark_forward(ModelConfig::aggpose_t(21), 1, 2, 0);
  double total = 0.0;
  for (const auto& [name, share] : r.shares) {
    EXPECT_GE(share, 0.0) << name;
    total += share;
  }
  EXPECT_NEAR(total, 1.0, 0.01);
  EXPECT_GT(r.images_per_second, 0.0);
}
