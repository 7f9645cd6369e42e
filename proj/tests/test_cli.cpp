#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "aggpose/dataset.hpp"
#include "aggpose/fileutil.hpp"

#ifndef AGGPOSE_CLI_PATH
#error "AGGPOSE_CLI_PATH must point at the aggpose executable"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

// Runs the CLI with stdout and stderr captured together.
Run cli(const std::string& args, const fs::path& scratch) {
  const fs::path log = scratch / "cli_output.txt";
  const std::string cmd = std::string("\"") + AGGPOSE_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = fs::exists(log) ? aggpose::read_text(log) : "";
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("aggpose_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write_config(int steps) {
    const json cfg = {{"schema", "infant"},
                      {"model", {{"variant", "aggpose-t"}}},
                      {"train", {{"total_steps", steps}, {"batch_size", 2}, {"seed", 11}, {"augment", true}}}};
    aggpose::atomic_write_text(dir_ / "run.json", cfg.dump(2));
    return dir_ / "run.json";
  }

  std::vector<double> losses(const fs::path& metrics) {
    std::vector<double> out;
    std::istringstream in(aggpose::read_text(metrics));
    for (std::string line; std::getline(in, line);) {
      const json j = json::parse(line);
      if (j.contains("loss")) out.push_back(j["loss"].get<double>());
    }
    return out;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, TrainMissingConfigIsUsageError) {
  const auto r = cli("train --config " + (dir_ / "nope.json").string() + " --data " + dir_.string() + " --out " +
                         (dir_ / "out").string(),
                     dir_);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("nope.json"), std::string::npos) << r.output;
}

TEST_F(CliTest, TrainSmokeAndRerunDeterminism) {
  ASSERT_EQ(cli("synth --n 4 --seed 7 --out " + (dir_ / "data").string(), dir_).code, 0);
  const fs::path cfg = write_config(12);
  const auto a = cli("train --config " + cfg.string() + " --data " + (dir_ / "data").string() + " --out " +
                         (dir_ / "a").string(),
                     dir_);
  ASSERT_EQ(a.code, 0) << a.output;
  EXPECT_TRUE(fs::exists(dir_ / "a" / "last.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "a" / "manifest.json"));
  const json manifest = json::parse(aggpose::read_text(dir_ / "a" / "manifest.json"));
  EXPECT_EQ(manifest["command"], "train");
  EXPECT_EQ(manifest["seed"], 11);
  for (const auto& p : manifest["outputs"]) EXPECT_TRUE(fs::exists(p.get<std::string>())) << p;

  const auto b = cli("train --config " + cfg.string() + " --data " + (dir_ / "data").string() + " --out " +
                         (dir_ / "b").string(),
                     dir_);
  ASSERT_EQ(b.code, 0) << b.output;
  const auto la = losses(dir_ / "a" / "metrics.jsonl");
  const auto lb = losses(dir_ / "b" / "metrics.jsonl");
  ASSERT_GE(la.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(la[i], lb[i]) << i;

  // Inference: one file without the overlay flag, two with it.
  const std::string image = (dir_ / "data" / "images" / "000001.png").string();
  fs::create_directories(dir_ / "inf1");
  ASSERT_EQ(cli("infer --checkpoint " + (dir_ / "a" / "last.ckpt").string() + " --image " + image + " --out " +
                    (dir_ / "inf1" / "kp.json").string(),
                dir_)
                .code,
            0);
  EXPECT_EQ(std::distance(fs::directory_iterator(dir_ / "inf1"), fs::directory_iterator{}), 1);
  const json kp = json::parse(aggpose::read_text(dir_ / "inf1" / "kp.json"));
  EXPECT_EQ(kp["keypoints"].size(), 21u);
  fs::create_directories(dir_ / "inf2");
  ASSERT_EQ(cli("infer --overlay --checkpoint " + (dir_ / "a" / "last.ckpt").string() + " --image " + image +
                    " --out " + (dir_ / "inf2" / "kp.json").string(),
                dir_)
                .code,
            0);
  EXPECT_EQ(std::distance(fs::directory_iterator(dir_ / "inf2"), fs::directory_iterator{}), 2);

  // A checkpoint evaluated on its own data produces a full report.
  const auto ev = cli("eval --annotations " + (dir_ / "data" / "annotations.json").string() + " --checkpoint " +
                          (dir_ / "a" / "last.ckpt").string(),
                      dir_);
  EXPECT_EQ(ev.code, 0) << ev.output;
  EXPECT_NE(ev.output.find("AP"), std::string::npos);
}

TEST_F(CliTest, InferUnreadableImageIsUsageError) {
  ASSERT_EQ(cli("synth --n 1 --seed 1 --out " + (dir_ / "data").string(), dir_).code, 0);
  ASSERT_EQ(cli("train --config " + write_config(1).string() + " --data " + (dir_ / "data").string() + " --out " +
                    (dir_ / "a").string(),
                dir_)
                .code,
            0);
  aggpose::atomic_write_text(dir_ / "broken.png", "this is not a png");
  const auto r = cli("infer --checkpoint " + (dir_ / "a" / "last.ckpt").string() + " --image " +
                         (dir_ / "broken.png").string() + " --out " + (dir_ / "kp.json").string(),
                     dir_);
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_FALSE(fs::exists(dir_ / "kp.json"));
}

TEST_F(CliTest, EvalGroundTruthAndEmptyResults) {
  ASSERT_EQ(cli("synth --n 3 --seed 2 --out " + (dir_ / "data").string(), dir_).code, 0);
  const auto schema = aggpose::KeypointSchema::infant21();
  const auto data = aggpose::load_coco_keypoints(dir_ / "data" / "annotations.json", schema);
  std::vector<aggpose::DetectionRecord> gt;
  for (const auto& a : data.annotations) gt.push_back({a.image_id, a.keypoints, 1.0, 1});
  aggpose::write_coco_results(gt, dir_ / "gt.json");
  const auto perfect = cli("eval --annotations " + (dir_ / "data" / "annotations.json").string() + " --results " +
                               (dir_ / "gt.json").string() + " --min-ap 0.999 --out " + (dir_ / "r.json").string(),
                           dir_);
  EXPECT_EQ(perfect.code, 0) << perfect.output;
  const json report = json::parse(aggpose::read_text(dir_ / "r.json"));
  EXPECT_DOUBLE_EQ(report["AP"].get<double>(), 1.0);

  aggpose::atomic_write_text(dir_ / "empty.json", "[]");
  const auto empty = cli("eval --annotations " + (dir_ / "data" / "annotations.json").string() + " --results " +
                             (dir_ / "empty.json").string() + " --out " + (dir_ / "e.json").string(),
                         dir_);
  EXPECT_EQ(empty.code, 0) << empty.output;
  const json er = json::parse(aggpose::read_text(dir_ / "e.json"));
  EXPECT_EQ(er["AP"].get<double>(), 0.0);
  EXPECT_EQ(er["AR"].get<double>(), 0.0);

  const auto below = cli("eval --annotations " + (dir_ / "data" / "annotations.json").string() + " --results " +
                             (dir_ / "empty.json").string() + " --min-ap 0.5",
                         dir_);
  EXPECT_EQ(below.code, 1);
}

TEST_F(CliTest, GradcheckScopes) {
  const auto ok = cli("gradcheck mix_ffn --seeds 2", dir_);
  EXPECT_EQ(ok.code, 0) << ok.output;
  const auto bad = cli("gradcheck no_such_block", dir_);
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.output.find("mix_ffn"), std::string::npos) << bad.output;
}

TEST_F(CliTest, SynthIsDeterministic) {
  ASSERT_EQ(cli("synth --n 3 --seed 7 --out " + (dir_ / "a").string(), dir_).code, 0);
  ASSERT_EQ(cli("synth --n 3 --seed 7 --out " + (dir_ / "b").string(), dir_).code, 0);
  for (const auto& entry : fs::recursive_directory_iterator(dir_ / "a")) {
    if (!entry.is_regular_file()) continue;
    const fs::path other = dir_ / "b" / fs::relative(entry.path(), dir_ / "a");
    ASSERT_TRUE(fs::exists(other)) << other;
    EXPECT_EQ(aggpose::read_text(entry.path()), aggpose::read_text(other)) << other;
  }
}

TEST_F(CliTest, BenchReportsShares) {
  const auto r = cli("bench --iterations 2", dir_);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto start = r.output.find('{');
  ASSERT_NE(start, std::string::npos);
  const json j = json::parse(r.output.substr(start));
  double total = 0.0;
  for (const auto& [name, share] : j["shares"].items()) total += share.get<double>();
  EXPECT_NEAR(total, 1.0, 0.01);
}

TEST_F(CliTest, UnknownFlagIsUsageError) {
  EXPECT_EQ(cli("synth --bogus", dir_).code, 2);
  EXPECT_EQ(cli("--help", dir_).code, 0);
}
