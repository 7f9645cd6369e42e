// aggpose command-line tool: train, eval, infer, gradcheck, synth, bench.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "aggpose/checkpoint.hpp"
#include "aggpose/dataset.hpp"
#include "aggpose/fileutil.hpp"
#include "aggpose/gradcheck.hpp"
#include "aggpose/inference.hpp"
#include "aggpose/manifest.hpp"
#include "aggpose/metrics.hpp"
#include "aggpose/parallel.hpp"
#include "aggpose/trainer.hpp"

#ifndef AGGPOSE_BUILD_ID
#define AGGPOSE_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace aggpose;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

/// Bad arguments or unusable input files.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

int env_int(const char* name, int fallback) {
  const char* v = std::getenv(name);
  if (v == nullptr || *v == '\0') return fallback;
  try {
    return std::stoi(v);
  } catch (const std::exception&) {
    throw UsageError(std::string(name) + " must be an integer, got '" + v + "'");
  }
}

void setup_logging() {
  auto logger = spdlog::stderr_color_st("aggpose");
  logger->set_pattern("[%l] %v");
  switch (env_int("AGGPOSE_VERBOSITY", 1)) {
    case 0: logger->set_level(spdlog::level::warn); break;
    case 1: logger->set_level(spdlog::level::info); break;
    default: logger->set_level(spdlog::level::debug); break;
  }
  spdlog::set_default_logger(logger);
}

json read_json_file(const fs::path& path, const char* what) {
  if (!fs::exists(path)) throw UsageError(std::string(what) + " '" + path.string() + "' does not exist");
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw UsageError(std::string(what) + " '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string schema = "infant";

  json to_json() const { return {{"model", model.to_json()}, {"train", train.to_json()}, {"schema", schema}}; }
};

/// {"model": {...}, "train": {...}, "schema": "infant" | "coco"}.
RunConfig load_run_config(const fs::path& path) {
  const json j = read_json_file(path, "config");
  if (!j.is_object()) throw UsageError("config '" + path.string() + "' must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "model" && key != "train" && key != "schema") {
      throw UsageError("config '" + path.string() + "': unknown key '" + key + "'");
    }
  }
  RunConfig cfg;
  try {
    cfg.schema = j.value("schema", cfg.schema);
    const KeypointSchema schema = KeypointSchema::named(cfg.schema);
    json model = j.value("model", json{{"variant", "aggpose-t"}});
    if (!model.contains("num_keypoints")) model["num_keypoints"] = schema.size();
    cfg.model = ModelConfig::from_json(model);
    cfg.train = TrainConfig::from_json(j.value("train", json::object()));
  } catch (const json::exception& e) {
    throw UsageError("config '" + path.string() + "': " + e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError("config '" + path.string() + "': " + e.what());
  }
  return cfg;
}

struct Common {
  std::vector<std::string> argv;
  std::string manifest;
};

RunManifest start_manifest(const std::string& command, const Common& common) {
  RunManifest m;
  m.command = command;
  m.arguments = common.argv;
  m.build_id = AGGPOSE_BUILD_ID;
  m.started = utc_timestamp();
  return m;
}

void write_manifest(RunManifest& manifest, const fs::path& path) {
  manifest.finished = utc_timestamp();
  manifest.write(path);
  spdlog::debug("manifest written to {}", path.string());
}

std::optional<BoundingBox> parse_bbox(const std::string& text) {
  if (text.empty()) return std::nullopt;
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      v.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw UsageError("--bbox expects x,y,w,h; got '" + text + "'");
    }
  }
  if (v.size() != 4 || !(v[2] > 0.0) || !(v[3] > 0.0)) throw UsageError("--bbox expects x,y,w,h with w,h > 0");
  return BoundingBox{v[0], v[1], v[2], v[3]};
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, data, out, resume;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a, const Common& common) {
  RunManifest manifest = start_manifest("train", common);
  RunConfig cfg = load_run_config(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  if (!fs::is_directory(a.data)) throw UsageError("data directory '" + a.data + "' does not exist");
  const KeypointSchema schema = KeypointSchema::named(cfg.schema);
  if (cfg.model.num_keypoints != schema.size()) {
    throw UsageError("model predicts " + std::to_string(cfg.model.num_keypoints) + " keypoints but schema '" +
                     cfg.schema + "' has " + std::to_string(schema.size()));
  }
  const TrainingData data = TrainingData::load(a.data, schema);
  spdlog::info("training {} ({} parameters) on {} instances for {} steps", cfg.model.variant,
               AggPoseModel<float>(cfg.model, 0).parameter_count(), data.instances.size(), cfg.train.total_steps);

  fs::create_directories(a.out);
  const fs::path config_out = fs::path(a.out) / "config.json";
  atomic_write_text(config_out, cfg.to_json().dump(2) + "\n");

  AggPoseModel<float> model(cfg.model, cfg.train.seed);
  FitOptions options;
  options.out_dir = a.out;
  if (!a.resume.empty()) options.resume_from = fs::path(a.resume);
  options.on_log = [](const json& line) {
    if (line.contains("eval")) {
      spdlog::info("step {} eval {}", line["step"].get<std::int64_t>(), line["eval"].dump());
    } else {
      spdlog::debug("step {} loss {:.6g} lr {:.3g}", line["step"].get<std::int64_t>(), line["loss"].get<double>(),
                    line["lr"].get<double>());
    }
  };
  const FitResult result = fit(model, data, cfg.train, options);
  std::cout << json{{"final_eval", result.final_eval},
                    {"best_ap", result.best_ap ? json(*result.best_ap) : json(nullptr)},
                    {"best_step", result.best_step},
                    {"last_checkpoint", result.last_checkpoint.string()}}
                   .dump(2)
            << "\n";

  manifest.config = cfg.to_json();
  manifest.seed = cfg.train.seed;
  manifest.outputs = {config_out, result.last_checkpoint, result.metrics_log};
  if (fs::exists(result.best_checkpoint)) manifest.outputs.push_back(result.best_checkpoint);
  write_manifest(manifest, fs::path(a.out) / "manifest.json");
  return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string annotations, results, checkpoint, boxes, images, schema, out;
  double padding = 1.0;
  std::optional<double> min_ap;
};

int run_eval(const EvalArgs& a, const Common& common) {
  RunManifest manifest = start_manifest("eval", common);
  if (a.results.empty() == a.checkpoint.empty()) throw UsageError("eval needs exactly one of --results or --checkpoint");
  if (!a.boxes.empty() && a.checkpoint.empty()) throw UsageError("--boxes requires --checkpoint");
  if (!fs::exists(a.annotations)) throw UsageError("annotations '" + a.annotations + "' do not exist");

  std::optional<Checkpoint> ckpt;
  if (!a.checkpoint.empty()) {
    if (!fs::exists(a.checkpoint)) throw UsageError("checkpoint '" + a.checkpoint + "' does not exist");
    ckpt = read_checkpoint(a.checkpoint);
  }
  const KeypointSchema schema = !a.schema.empty() ? KeypointSchema::named(a.schema)
                                : ckpt            ? schema_for_checkpoint(*ckpt)
                                                  : KeypointSchema::infant21();
  const CocoDataset dataset = load_coco_keypoints(a.annotations, schema);
  for (const auto& w : dataset.warnings) spdlog::warn("{}", w);

  std::vector<DetectionRecord> dets;
  if (!a.results.empty()) {
    if (!fs::exists(a.results)) throw UsageError("results '" + a.results + "' do not exist");
    dets = load_coco_results(a.results, schema);
  } else {
    const AggPoseModel<float> model = model_from_checkpoint<float>(*ckpt);
    if (model.config().num_keypoints != schema.size()) {
      throw SchemaMismatch("checkpoint predicts " + std::to_string(model.config().num_keypoints) +
                           " keypoints, schema '" + schema.name + "' has " + std::to_string(schema.size()));
    }
    const fs::path image_dir = a.images.empty() ? fs::path(a.annotations).parent_path() : fs::path(a.images);
    const TrainingData data = TrainingData::from_dataset(dataset, image_dir, schema);
    std::vector<BoxRecord> boxes;
    if (!a.boxes.empty()) boxes = load_boxes(a.boxes);
    dets = predict_instances(model, data, a.padding, 16, a.boxes.empty() ? nullptr : &boxes);
  }
  const EvalResult result = evaluate(dets, dataset.annotations, schema);
  const std::string report = format_report(result);
  std::cout << report << "\n";
  if (!a.out.empty()) {
    atomic_write_text(a.out, report + "\n");
    manifest.outputs.push_back(a.out);
  }
  if (!common.manifest.empty()) {
    manifest.config = {{"schema", schema.name}, {"padding", a.padding}};
    write_manifest(manifest, common.manifest);
  }
  if (a.min_ap) {
    const double ap = result.ap.value_or(0.0);
    if (ap < *a.min_ap) {
      spdlog::error("AP {:.4f} is below the required {:.4f}", ap, *a.min_ap);
      return kCheckFailed;
    }
  }
  return kOk;
}

// ---------------------------------------------------------------- infer

struct InferArgs {
  std::string checkpoint, image, out, bbox;
  bool overlay = false;
  double padding = 1.0;
};

int run_infer(const InferArgs& a, const Common& common) {
  RunManifest manifest = start_manifest("infer", common);
  if (!fs::exists(a.checkpoint)) throw UsageError("checkpoint '" + a.checkpoint + "' does not exist");
  const Checkpoint ckpt = read_checkpoint(a.checkpoint);
  const KeypointSchema schema = schema_for_checkpoint(ckpt);
  const AggPoseModel<float> model = model_from_checkpoint<float>(ckpt);
  Image image;
  try {
    image = read_png(a.image);
  } catch (const ImageIoError& e) {
    throw UsageError(e.what());
  }
  const auto box = parse_bbox(a.bbox);
  const auto& mc = model.config();
  if (!box && (image.height != mc.input_height || image.width != mc.input_width)) {
    spdlog::warn("image is {}x{} but the model expects {}x{}; cropping the whole image to the model aspect",
                 image.height, image.width, mc.input_height, mc.input_width);
  }
  const ImagePrediction pred = predict_image(model, image, box, a.padding);
  json doc = prediction_to_json(pred, schema);
  doc["image"] = a.image;
  doc["width"] = image.width;
  doc["height"] = image.height;
  atomic_write_text(a.out, doc.dump(2) + "\n");
  manifest.outputs.push_back(a.out);
  if (a.overlay) {
    fs::path overlay = a.out;
    overlay.replace_filename(overlay.stem().string() + "_overlay.png");
    write_png(render_overlay(image, pred, schema), overlay);
    manifest.outputs.push_back(overlay);
  }
  if (!common.manifest.empty()) write_manifest(manifest, common.manifest);
  return kOk;
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  std::string scope = "all";
  int seeds = 10;
  std::uint64_t seed = 0;
};

int run_gradcheck(const GradcheckArgs& a, const Common& common) {
  RunManifest manifest = start_manifest("gradcheck", common);
  std::vector<std::string> scopes;
  if (a.scope == "all") {
    scopes = gradcheck_scopes();
  } else if (is_gradcheck_scope(a.scope)) {
    scopes = {a.scope};
  } else {
    std::string valid = "all";
    for (const auto& s : gradcheck_scopes()) valid += ", " + s;
    throw UsageError("unknown gradcheck scope '" + a.scope + "'; valid names: " + valid);
  }
  bool ok = true;
  json report = json::array();
  std::printf("%-18s %-12s %-10s %-8s %s\n", "scope", "worst_rel", "tolerance", "result", "worst tensor");
  for (const auto& s : scopes) {
    const ScopeReport r = run_gradcheck_scope(s, a.seeds, a.seed);
    ok = ok && r.passed();
    std::printf("%-18s %-12.3e %-10.0e %-8s %s (%.1fs, %lld coords)\n", s.c_str(), r.worst_rel_error, r.tolerance,
                r.passed() ? "PASS" : "FAIL", r.worst_tensor.c_str(), r.seconds,
                static_cast<long long>(r.coordinates));
    std::fflush(stdout);
    report.push_back({{"scope", s},
                      {"worst_rel_error", r.worst_rel_error},
                      {"tolerance", r.tolerance},
                      {"worst_tensor", r.worst_tensor},
                      {"passed", r.passed()},
                      {"seconds", r.seconds}});
  }
  if (!common.manifest.empty()) {
    manifest.config = {{"scopes", scopes}, {"seeds", a.seeds}, {"report", report}};
    manifest.seed = a.seed;
    write_manifest(manifest, common.manifest);
  }
  return ok ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  int n = 16;
  std::uint64_t seed = 7;
  std::string out, schema = "infant";
  int height = 128, width = 96;
};

int run_synth(const SynthArgs& a, const Common& common) {
  RunManifest manifest = start_manifest("synth", common);
  SyntheticOptions options;
  options.height = a.height;
  options.width = a.width;
  const KeypointSchema schema = KeypointSchema::named(a.schema);
  const CocoDataset data = generate_synthetic(a.n, a.seed, schema, a.out, options);
  spdlog::info("wrote {} images to {}", data.images.size(), a.out);
  if (!common.manifest.empty()) {
    manifest.config = {{"n", a.n}, {"schema", a.schema}, {"height", a.height}, {"width", a.width}};
    manifest.seed = a.seed;
    manifest.outputs = {fs::path(a.out) / "annotations.json"};
    for (const auto& img : data.images) manifest.outputs.push_back(fs::path(a.out) / "images" / img.file_name);
    write_manifest(manifest, common.manifest);
  }
  return kOk;
}

// ---------------------------------------------------------------- bench

struct BenchArgs {
  std::string config, variant = "aggpose-t";
  int keypoints = 0, batch = 1, iterations = 10;
  std::uint64_t seed = 0;
};

int run_bench(const BenchArgs& a, const Common& common) {
  RunManifest manifest = start_manifest("bench", common);
  ModelConfig mc;
  if (!a.config.empty()) {
    mc = load_run_config(a.config).model;
  } else {
    try {
      mc = ModelConfig::named(a.variant, a.keypoints > 0 ? a.keypoints : (a.variant == "aggpose-t" ? 21 : 17));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  const BenchReport r = benchmark_forward(mc, a.batch, a.iterations, a.seed);
  spdlog::info("{}: {:.2f} images/s over {} x {} images", mc.variant, r.images_per_second, r.iterations, r.batch);
  double total = 0.0;
  for (const auto& [name, share] : r.shares) {
    spdlog::info("  {:<12} {:6.2f}%", name, 100.0 * share);
    total += share;
  }
  spdlog::debug("shares sum to {:.3f}%", 100.0 * total);
  json doc = r.to_json();
  doc["variant"] = mc.variant;
  doc["parameters"] = AggPoseModel<float>(mc, 0).parameter_count();
  std::cout << doc.dump(2) << "\n";
  if (!common.manifest.empty()) {
    manifest.config = mc.to_json();
    manifest.seed = a.seed;
    write_manifest(manifest, common.manifest);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  Common common;
  for (int i = 0; i < argc; ++i) common.argv.emplace_back(argv[i]);

  CLI::App app{"AggPose keypoint estimation toolkit"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads for data preparation (default: AGGPOSE_THREADS or 1)")
      ->check(CLI::PositiveNumber);
  app.add_option("--manifest", common.manifest, "Write a run manifest to this path");

  TrainArgs train;
  std::uint64_t train_seed = 0;
  auto* t = app.add_subcommand("train", "Train a model on a COCO-format keypoint dataset");
  t->add_option("--config", train.config, "Run config (JSON with model/train/schema)")->required();
  t->add_option("--data", train.data, "Dataset directory with annotations.json and images/")->required();
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_option("--resume", train.resume, "Checkpoint to resume from");
  auto* seed_opt = t->add_option("--seed", train_seed, "Overrides the config seed");

  EvalArgs eval;
  double min_ap = 0.0;
  auto* e = app.add_subcommand("eval", "Compute COCO-style keypoint AP");
  e->add_option("--annotations", eval.annotations, "Ground-truth COCO keypoint file")->required();
  e->add_option("--results", eval.results, "COCO results file with keypoint detections");
  e->add_option("--checkpoint", eval.checkpoint, "Run this model on the ground-truth (or --boxes) boxes");
  e->add_option("--boxes", eval.boxes, "Detected person boxes (COCO detection results)");
  e->add_option("--images", eval.images, "Image directory (default: next to the annotations)");
  e->add_option("--schema", eval.schema, "coco | infant (default: from checkpoint, else infant)");
  e->add_option("--padding", eval.padding, "Box padding factor")->check(CLI::PositiveNumber);
  e->add_option("--out", eval.out, "Also write the report here");
  auto* min_ap_opt = e->add_option("--min-ap", min_ap, "Exit 1 if AP falls below this value");

  InferArgs infer;
  auto* inf = app.add_subcommand("infer", "Predict keypoints on one image");
  inf->add_option("--checkpoint", infer.checkpoint, "Model checkpoint")->required();
  inf->add_option("--image", infer.image, "Input PNG")->required();
  inf->add_option("--out", infer.out, "Keypoint JSON output")->required();
  inf->add_option("--bbox", infer.bbox, "Person box x,y,w,h (default: whole image)");
  inf->add_option("--padding", infer.padding, "Box padding factor")->check(CLI::PositiveNumber);
  inf->add_flag("--overlay", infer.overlay, "Also write <out>_overlay.png with heatmaps and skeleton");

  GradcheckArgs grad;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  g->add_option("scope", grad.scope, "Block name or 'all'");
  g->add_option("--seeds", grad.seeds, "Random instances per block")->check(CLI::PositiveNumber);
  g->add_option("--seed", grad.seed, "Base seed");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic keypoint dataset");
  s->add_option("--n", synth.n, "Number of images")->check(CLI::PositiveNumber);
  s->add_option("--seed", synth.seed, "Seed");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--schema", synth.schema, "coco | infant");
  s->add_option("--height", synth.height, "Image height")->check(CLI::Range(16, 4096));
  s->add_option("--width", synth.width, "Image width")->check(CLI::Range(16, 4096));

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Forward-pass throughput and per-block time shares");
  b->add_option("--config", bench.config, "Run config; its model section is benchmarked");
  b->add_option("--variant", bench.variant, "aggpose-t | aggpose-s | aggpose-l");
  b->add_option("--keypoints", bench.keypoints, "Keypoint count for --variant");
  b->add_option("--batch", bench.batch, "Images per forward pass")->check(CLI::PositiveNumber);
  b->add_option("--iterations", bench.iterations, "Timed forward passes")->check(CLI::PositiveNumber);
  b->add_option("--seed", bench.seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    setup_logging();
    set_thread_count(threads > 0 ? threads : std::max(1, env_int("AGGPOSE_THREADS", 1)));
    if (seed_opt->count() > 0) train.seed = train_seed;
    if (min_ap_opt->count() > 0) eval.min_ap = min_ap;

    if (t->parsed()) return run_train(train, common);
    if (e->parsed()) return run_eval(eval, common);
    if (inf->parsed()) return run_infer(infer, common);
    if (g->parsed()) return run_gradcheck(grad, common);
    if (s->parsed()) return run_synth(synth, common);
    if (b->parsed()) return run_bench(bench, common);
  } catch (const UsageError& err) {
    spdlog::error("{}", err.what());
    return kUsage;
  } catch (const DatasetError& err) {
    spdlog::error("{}", err.what());
    return kUsage;
  } catch (const ImageIoError& err) {
    spdlog::error("{}", err.what());
    return kUsage;
  } catch (const CheckpointError& err) {
    spdlog::error("{}", err.what());
    return kUsage;
  } catch (const std::invalid_argument& err) {
    spdlog::error("{}", err.what());
    return kUsage;
  } catch (const fs::filesystem_error& err) {
    spdlog::error("{}", err.what());
    return kUsage;
  } catch (const std::exception& err) {
    spdlog::error("{}", err.what());
    return kCheckFailed;
  }
  return kUsage;
}
