#include "aggpose/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "aggpose/metrics.hpp"
#include "aggpose/ops.hpp"
#include "aggpose/parallel.hpp"
#include "aggpose/rng.hpp"

namespace aggpose {

using nlohmann::json;

template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, AdamState<T>& state, const AdamWHyper& h) {
  if (param.size() != grad.size()) throw ShapeError("adamw_update: parameter and gradient sizes differ");
  if (state.m.empty()) {
    state.m.assign(param.size(), T(0));
    state.v.assign(param.size(), T(0));
  }
  if (state.m.size() != param.size() || state.v.size() != param.size()) {
    throw ShapeError("adamw_update: optimizer state does not match the parameter");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  const double step_size = h.lr / bc1;
  const double bc2_sqrt = std::sqrt(bc2);
  const double decay = 1.0 - h.lr * h.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
    const double v = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    const double denom = std::sqrt(static_cast<double>(state.v[i])) / bc2_sqrt + h.eps;
    const double p = static_cast<double>(param[i]) * decay;
    param[i] = static_cast<T>(p - step_size * static_cast<double>(state.m[i]) / denom);
  }
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (!(optimizer.lr > 0.0)) fail("lr must be positive");
  if (optimizer.weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0 || optimizer.beta2 < 0.0 || optimizer.beta2 >= 1.0) {
    fail("betas must lie in [0, 1)");
  }
  if (!(optimizer.eps > 0.0)) fail("eps must be positive");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (total_steps < 1) fail("total_steps must be >= 1");
  for (std::size_t i = 1; i < milestones.size(); ++i) {
    if (milestones[i] <= milestones[i - 1]) fail("milestones must be strictly increasing");
  }
  if (!(decay_factor > 0.0)) fail("decay_factor must be positive");
  std::int64_t prev = 0;
  for (const auto& phase : freeze_schedule) {
    if (phase.until_step <= prev) fail("freeze_schedule phases must have increasing until_step");
    prev = phase.until_step;
  }
  if (checkpoint_interval < 0 || eval_interval < 0) fail("intervals must be >= 0");
  if (!(heatmap_sigma > 0.0)) fail("heatmap_sigma must be positive");
  if (!(crop_padding > 0.0)) fail("crop_padding must be positive");
  if (val_fraction < 0.0 || val_fraction >= 1.0) fail("val_fraction must lie in [0, 1)");
  augmentation.validate();
}

std::vector<std::int64_t> TrainConfig::resolved_milestones() const {
  if (!milestones.empty()) return milestones;
  return {static_cast<std::int64_t>(std::llround(0.7 * static_cast<double>(total_steps))),
          static_cast<std::int64_t>(std::llround(0.9 * static_cast<double>(total_steps)))};
}

double TrainConfig::lr_at(std::int64_t step) const {
  double lr = optimizer.lr;
  for (std::int64_t m : resolved_milestones()) {
    if (step >= m) lr *= decay_factor;
  }
  return lr;
}

std::set<int> TrainConfig::frozen_at(std::int64_t step) const {
  for (const auto& phase : freeze_schedule) {
    if (step < phase.until_step) return phase.frozen_levels;
  }
  return {};
}

json TrainConfig::to_json() const {
  json phases = json::array();
  for (const auto& p : freeze_schedule) phases.push_back({{"until_step", p.until_step}, {"frozen_levels", p.frozen_levels}});
  return {{"lr", optimizer.lr},
          {"weight_decay", optimizer.weight_decay},
          {"betas", {optimizer.beta1, optimizer.beta2}},
          {"eps", optimizer.eps},
          {"batch_size", batch_size},
          {"total_steps", total_steps},
          {"milestones", milestones},
          {"decay_factor", decay_factor},
          {"seed", seed},
          {"freeze_schedule", phases},
          {"checkpoint_interval", checkpoint_interval},
          {"eval_interval", eval_interval},
          {"heatmap_sigma", heatmap_sigma},
          {"augment", augment},
          {"augmentation",
           {{"flip_prob", augmentation.flip_prob},
            {"rot_max_deg", augmentation.rot_max_deg},
            {"scale_range", {augmentation.scale_lo, augmentation.scale_hi}}}},
          {"crop_padding", crop_padding},
          {"val_fraction", val_fraction}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("train config must be an object");
  static const std::set<std::string> known = {
      "lr",           "weight_decay", "betas",         "eps",           "batch_size",    "total_steps",
      "milestones",   "decay_factor", "seed",          "freeze_schedule", "checkpoint_interval",
      "eval_interval", "heatmap_sigma", "augment",     "augmentation",  "crop_padding",  "val_fraction"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("train config: unknown key '" + key + "'");
  }
  TrainConfig c;
  try {
    c.optimizer.lr = j.value("lr", c.optimizer.lr);
    c.optimizer.weight_decay = j.value("weight_decay", c.optimizer.weight_decay);
    if (j.contains("betas")) {
      const auto b = j["betas"].get<std::vector<double>>();
      if (b.size() != 2) throw std::invalid_argument("train config: betas must have two entries");
      c.optimizer.beta1 = b[0];
      c.optimizer.beta2 = b[1];
    }
    c.optimizer.eps = j.value("eps", c.optimizer.eps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.milestones = j.value("milestones", c.milestones);
    c.decay_factor = j.value("decay_factor", c.decay_factor);
    c.seed = j.value("seed", c.seed);
    if (j.contains("freeze_schedule")) {
      for (const auto& p : j["freeze_schedule"]) {
        c.freeze_schedule.push_back({p.at("until_step").get<std::int64_t>(), p.at("frozen_levels").get<std::set<int>>()});
      }
    }
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.heatmap_sigma = j.value("heatmap_sigma", c.heatmap_sigma);
    c.augment = j.value("augment", c.augment);
    if (j.contains("augmentation")) {
      const auto& a = j["augmentation"];
      for (const auto& [key, value] : a.items()) {
        if (key != "flip_prob" && key != "rot_max_deg" && key != "scale_range") {
          throw std::invalid_argument("train config: unknown augmentation key '" + key + "'");
        }
      }
      c.augmentation.flip_prob = a.value("flip_prob", c.augmentation.flip_prob);
      c.augmentation.rot_max_deg = a.value("rot_max_deg", c.augmentation.rot_max_deg);
      if (a.contains("scale_range")) {
        const auto s = a["scale_range"].get<std::vector<double>>();
        if (s.size() != 2) throw std::invalid_argument("train config: scale_range must be [lo, hi]");
        c.augmentation.scale_lo = s[0];
        c.augmentation.scale_hi = s[1];
      }
    }
    c.crop_padding = j.value("crop_padding", c.crop_padding);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainingData TrainingData::from_dataset(const CocoDataset& data, const std::filesystem::path& dir,
                                        const KeypointSchema& schema) {
  TrainingData out;
  out.schema = schema;
  std::map<std::int64_t, std::size_t> index;
  for (const auto& info : data.images) {
    index[info.id] = out.images.size();
    out.images.push_back(info);
    const auto path = resolve_image_path(dir, info);
    Image img = read_png(path);
    if (img.width != info.width || img.height != info.height) {
      throw DatasetError("image '" + path.string() + "' is " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + ", annotations say " + std::to_string(info.width) + "x" +
                         std::to_string(info.height));
    }
    out.pixels.push_back(std::move(img));
  }
  for (const auto& ann : data.annotations) {
    if (count_labeled(ann.keypoints) == 0 || ann.iscrowd) continue;
    out.instances.push_back({index.at(ann.image_id), ann});
  }
  return out;
}

TrainingData TrainingData::load(const std::filesystem::path& dir, const KeypointSchema& schema) {
  return from_dataset(load_coco_keypoints(dir / "annotations.json", schema), dir, schema);
}

TrainingData TrainingData::subset(const std::vector<std::size_t>& indices) const {
  TrainingData out;
  out.schema = schema;
  out.images = images;
  out.pixels = pixels;
  for (std::size_t i : indices) out.instances.push_back(instances.at(i));
  return out;
}

std::vector<AnnotationRecord> TrainingData::annotations() const {
  std::vector<AnnotationRecord> out;
  for (const auto& inst : instances) out.push_back(inst.annotation);
  return out;
}

template <typename T>
Batch<T> make_batch(const TrainingData& data, std::span<const std::size_t> indices, const ModelConfig& model,
                    const TrainConfig& cfg, std::int64_t step) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  if (data.schema.size() != model.num_keypoints) {
    throw std::invalid_argument("make_batch: schema '" + data.schema.name + "' has " +
                                std::to_string(data.schema.size()) + " keypoints, model expects " +
                                std::to_string(model.num_keypoints));
  }
  const auto b = static_cast<Index>(indices.size());
  const Index k = model.num_keypoints;
  const Index h = model.input_height;
  const Index w = model.input_width;
  HeatmapGeometry geom{h / 4, w / 4, 4, cfg.heatmap_sigma};
  CropOptions crop;
  crop.height = h;
  crop.width = w;
  crop.padding = cfg.crop_padding;
  const auto perm = data.schema.flip_permutation();

  Batch<T> batch{Tensor<T>({b, 3, h, w}), Tensor<T>({b, k, geom.height, geom.width}), Tensor<T>({b, k})};
  parallel_for(indices.size(), [&](std::size_t u) {
    const auto i = static_cast<Index>(u);
    const auto& inst = data.instances.at(indices[u]);
    AugmentParams params;
    if (cfg.augment) {
      Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)));
      params = sample_augment(cfg.augmentation, rng);
    }
    const InstanceSample s = crop_instance(data.pixels[inst.image_index], inst.annotation.bbox,
                                           inst.annotation.keypoints, crop, params, perm);
    std::copy(s.image.data().begin(), s.image.data().end(), batch.images.mutable_ptr() + i * 3 * h * w);
    const auto enc = encode<T>(s.keypoints, geom);
    std::copy(enc.targets.data().begin(), enc.targets.data().end(),
              batch.targets.mutable_ptr() + i * k * geom.height * geom.width);
    std::copy(enc.mask.begin(), enc.mask.end(), batch.mask.mutable_ptr() + i * k);
  });
  return batch;
}

template <typename T>
std::vector<DetectionRecord> predict_instances(const AggPoseModel<T>& model, const TrainingData& data,
                                               double crop_padding, int batch_size,
                                               const std::vector<BoxRecord>* boxes) {
  const ModelConfig& cfg = model.config();
  struct Job {
    std::size_t image_index;
    std::int64_t image_id;
    BoundingBox bbox;
  };
  std::vector<Job> jobs;
  if (boxes != nullptr) {
    for (const auto& box : *boxes) {
      auto it = std::find_if(data.images.begin(), data.images.end(), [&](const ImageInfo& i) { return i.id == box.image_id; });
      if (it == data.images.end()) throw DatasetError("box refers to unknown image id " + std::to_string(box.image_id));
      jobs.push_back({static_cast<std::size_t>(it - data.images.begin()), box.image_id, box.bbox});
    }
  } else {
    for (const auto& inst : data.instances) {
      jobs.push_back({inst.image_index, inst.annotation.image_id, inst.annotation.bbox});
    }
  }
  CropOptions crop;
  crop.height = cfg.input_height;
  crop.width = cfg.input_width;
  crop.padding = crop_padding;
  const Index h = cfg.input_height;
  const Index w = cfg.input_width;
  const Index k = cfg.num_keypoints;
  std::vector<DetectionRecord> out;
  for (std::size_t start = 0; start < jobs.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min(jobs.size() - start, static_cast<std::size_t>(batch_size));
    Tensor<T> images({static_cast<Index>(n), 3, h, w});
    std::vector<Affine2D> back(n);
    parallel_for(n, [&](std::size_t i) {
      const Job& job = jobs[start + i];
      const InstanceSample s = crop_instance(data.pixels[job.image_index], job.bbox, {}, crop);
      std::copy(s.image.data().begin(), s.image.data().end(), images.mutable_ptr() + static_cast<Index>(i) * 3 * h * w);
      back[i] = s.to_original;
    });
    const Tensor<T> heatmaps = model.forward(images);
    const Index hh = heatmaps.dim(2);
    const Index hw = heatmaps.dim(3);
    for (std::size_t i = 0; i < n; ++i) {
      const auto decoded = decode(heatmaps.ptr() + static_cast<Index>(i) * k * hh * hw, k, hh, hw, 4);
      DetectionRecord det;
      det.image_id = jobs[start + i].image_id;
      double conf = 0.0;
      for (const auto& d : decoded) {
        det.keypoints.push_back(back[i].apply(Keypoint{d.x, d.y, 2}));
        conf += d.confidence;
      }
      det.score = conf / static_cast<double>(decoded.size());
      out.push_back(std::move(det));
    }
  }
  return out;
}

double mean_cell_error(const std::vector<DetectionRecord>& dets, const std::vector<AnnotationRecord>& anns,
                       const CropOptions& crop, int stride) {
  if (dets.size() != anns.size()) throw std::invalid_argument("mean_cell_error: detections and annotations differ in count");
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t j = 0; j < anns[i].keypoints.size(); ++j) {
      const auto& g = anns[i].keypoints[j];
      if (g.visibility <= 0) continue;
      total += std::hypot(dets[i].keypoints.at(j).x - g.x, dets[i].keypoints.at(j).y - g.y) *
               crop_scale(anns[i].bbox, crop);
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("mean_cell_error: no labeled keypoints");
  return total / static_cast<double>(n) / static_cast<double>(stride);
}

template <typename T>
Trainer<T>::Trainer(AggPoseModel<T>& model, TrainConfig cfg) : model_(&model), cfg_(std::move(cfg)) {
  cfg_.validate();
}

template <typename T>
double Trainer<T>::train_step(const Batch<T>& batch) {
  const ModelConfig& mc = model_->config();
  if (batch.images.rank() != 4 || batch.images.dim(1) != 3 || batch.images.dim(2) != mc.input_height ||
      batch.images.dim(3) != mc.input_width) {
    throw ShapeError("train_step: batch images " + to_string(batch.images.shape()) + " do not match the model input");
  }
  const std::set<int> frozen = cfg_.frozen_at(step_);
  if (frozen != model_->frozen_levels()) model_->set_frozen_levels(frozen);
  for (const auto& p : model_->parameters()) {
    Tensor<T> v = p.value;
    v.zero_grad();
  }

  Tape<T> tape;
  Tensor<T> loss;
  {
    auto recording = tape.record();
    loss = masked_mse(model_->forward(batch.images), batch.targets, batch.mask);
  }
  const double value = static_cast<double>(loss.item());
  if (tape.size() > 0) tape.backward(loss);

  grad_norms_.clear();
  for (const auto& p : model_->parameters()) {
    if (!p.value.requires_grad()) continue;
    double sq = 0.0;
    if (p.value.has_grad()) {
      for (T g : p.value.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    grad_norms_[p.name] = std::sqrt(sq);
  }
  const double lr = cfg_.lr_at(step_);
  if (!std::isfinite(value)) {
    std::vector<std::pair<double, std::string>> ranked;
    for (const auto& [name, norm] : grad_norms_) ranked.emplace_back(std::isfinite(norm) ? norm : HUGE_VAL, name);
    std::sort(ranked.rbegin(), ranked.rend());
    std::ostringstream os;
    os << "non-finite loss at step " << step_ << " (lr " << lr << "); largest gradient norms:";
    for (std::size_t i = 0; i < std::min<std::size_t>(5, ranked.size()); ++i) {
      os << "\n  " << ranked[i].second << ": " << ranked[i].first;
    }
    throw TrainingError(os.str());
  }

  AdamWHyper hyper = cfg_.optimizer;
  hyper.lr = lr;
  for (const auto& p : model_->parameters()) {
    if (!p.value.requires_grad()) continue;
    Tensor<T> v = p.value;
    std::vector<T> zeros;
    std::span<const T> grad = v.grad();
    if (!v.has_grad()) {
      zeros.assign(static_cast<std::size_t>(v.numel()), T(0));
      grad = zeros;
    }
    adamw_update<T>(v.mutable_data(), grad, state_[p.name], hyper);
  }
  ++step_;
  return value;
}

template <typename T>
std::vector<std::size_t> Trainer<T>::batch_indices(std::size_t n, std::int64_t step) const {
  if (n == 0) throw std::invalid_argument("batch_indices: empty dataset");
  std::map<std::uint64_t, std::vector<std::size_t>> epochs;
  auto order = [&](std::uint64_t epoch) -> const std::vector<std::size_t>& {
    auto it = epochs.find(epoch);
    if (it != epochs.end()) return it->second;
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(derive_seed(cfg_.seed, epoch, 0x5eed));
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    return epochs.emplace(epoch, std::move(perm)).first->second;
  };
  std::vector<std::size_t> out;
  const auto start = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg_.batch_size);
  for (std::uint64_t pos = start; pos < start + static_cast<std::uint64_t>(cfg_.batch_size); ++pos) {
    out.push_back(order(pos / n)[pos % n]);
  }
  return out;
}

template <typename T>
Checkpoint Trainer<T>::checkpoint(const json& metadata) const {
  json meta = metadata;
  meta["train_config"] = cfg_.to_json();
  json steps = json::object();
  for (const auto& [name, st] : state_) steps[name] = st.step;
  meta["optim_steps"] = steps;
  Checkpoint ckpt = make_checkpoint(*model_, step_, meta);
  for (const auto& [name, st] : state_) {
    const Shape shape = model_->parameter(name).value.shape();
    ckpt.add("optim.m." + name, Tensor<T>(shape, st.m));
    ckpt.add("optim.v." + name, Tensor<T>(shape, st.v));
  }
  return ckpt;
}

template <typename T>
void Trainer<T>::restore(const Checkpoint& ckpt) {
  if (ckpt.config_hash != model_->config().hash()) {
    throw CheckpointError("cannot resume: checkpoint was written for config " + ckpt.config_hash + ", model is " +
                          model_->config().hash());
  }
  if (ckpt.dtype != dtype_name<T>()) throw CheckpointError("cannot resume: checkpoint dtype is " + ckpt.dtype);
  load_partial(*model_, ckpt);
  state_.clear();
  const json steps = ckpt.metadata.value("optim_steps", json::object());
  for (const auto& [name, count] : steps.items()) {
    const auto* m = ckpt.find("optim.m." + name);
    const auto* v = ckpt.find("optim.v." + name);
    if (m == nullptr || v == nullptr) throw CheckpointError("checkpoint lacks optimizer moments for '" + name + "'");
    AdamState<T> st;
    const Tensor<T> mt = ckpt.tensor<T>(*m);
    const Tensor<T> vt = ckpt.tensor<T>(*v);
    st.m.assign(mt.data().begin(), mt.data().end());
    st.v.assign(vt.data().begin(), vt.data().end());
    st.step = count.template get<std::int64_t>();
    state_[name] = std::move(st);
  }
  step_ = ckpt.step;
}

namespace {

json eval_json(const EvalResult& r, double cell_error) {
  auto value = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"AP", value(r.ap)},          {"AP50", value(r.ap50)},       {"AP75", value(r.ap75)},
          {"AP_M", value(r.ap_medium)}, {"AP_L", value(r.ap_large)},   {"AR", value(r.ar)},
          {"mean_cell_error", cell_error}};
}

}  // namespace

template <typename T>
FitResult fit(AggPoseModel<T>& model, const TrainingData& data, const TrainConfig& cfg, const FitOptions& options) {
  cfg.validate();
  if (data.instances.empty()) throw std::invalid_argument("fit: dataset has no labeled instances");
  if (options.out_dir.empty()) throw std::invalid_argument("fit: out_dir is required");
  std::filesystem::create_directories(options.out_dir);

  // Held-out split, fixed by the seed.
  TrainingData train = data;
  TrainingData val = data;
  if (cfg.val_fraction > 0.0 && data.instances.size() > 1) {
    std::vector<std::size_t> idx(data.instances.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, 0, 0xe7a1));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    auto held = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(idx.size())));
    held = std::clamp<std::size_t>(held, 1, idx.size() - 1);
    train = data.subset(std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(held), idx.end()));
    val = data.subset(std::vector<std::size_t>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(held)));
  }

  Trainer<T> trainer(model, cfg);
  FitResult result;
  result.metrics_log = options.out_dir / "metrics.jsonl";
  result.last_checkpoint = options.out_dir / "last.ckpt";
  result.best_checkpoint = options.out_dir / "best.ckpt";
  if (options.resume_from) {
    const Checkpoint ckpt = read_checkpoint(*options.resume_from);
    trainer.restore(ckpt);
    if (ckpt.metadata.contains("best_ap") && !ckpt.metadata["best_ap"].is_null()) {
      result.best_ap = ckpt.metadata["best_ap"].get<double>();
      result.best_step = ckpt.metadata.value("best_step", std::int64_t{-1});
    }
  }
  std::ofstream log(result.metrics_log, options.resume_from ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open metrics log '" + result.metrics_log.string() + "'");
  auto emit = [&](const json& line) {
    log << line.dump() << "\n";
    log.flush();
    if (options.on_log) options.on_log(line);
  };
  auto metadata = [&]() {
    json meta = json::object();
    meta["best_ap"] = result.best_ap ? json(*result.best_ap) : json(nullptr);
    meta["best_step"] = result.best_step;
    meta["schema"] = data.schema.name;
    return meta;
  };
  auto evaluate_now = [&]() {
    const auto dets = predict_instances(model, val, cfg.crop_padding);
    const auto anns = val.annotations();
    const EvalResult r = evaluate(dets, anns, data.schema);
    CropOptions crop;
    crop.height = model.config().input_height;
    crop.width = model.config().input_width;
    crop.padding = cfg.crop_padding;
    return eval_json(r, mean_cell_error(dets, anns, crop));
  };

  std::int64_t ran = 0;
  while (trainer.step() < cfg.total_steps && (options.max_steps_this_run == 0 || ran < options.max_steps_this_run)) {
    const std::int64_t step = trainer.step();
    const auto indices = trainer.batch_indices(train.instances.size(), step);
    const Batch<T> batch = make_batch<T>(train, indices, model.config(), cfg, step);
    const double lr = trainer.current_lr();
    const double loss = trainer.train_step(batch);
    result.losses.push_back(loss);
    ++ran;
    emit({{"step", trainer.step()}, {"loss", loss}, {"lr", lr}});

    const bool last = trainer.step() == cfg.total_steps;
    if ((cfg.eval_interval > 0 && trainer.step() % cfg.eval_interval == 0) || last) {
      json ev = evaluate_now();
      emit({{"step", trainer.step()}, {"eval", ev}});
      result.final_eval = ev;
      if (!ev["AP"].is_null() && (!result.best_ap || ev["AP"].get<double>() > *result.best_ap)) {
        result.best_ap = ev["AP"].get<double>();
        result.best_step = trainer.step();
        write_checkpoint(trainer.checkpoint(metadata()), result.best_checkpoint);
      }
    }
    if (cfg.checkpoint_interval > 0 && trainer.step() % cfg.checkpoint_interval == 0 && !last) {
      write_checkpoint(trainer.checkpoint(metadata()), result.last_checkpoint);
    }
  }
  write_checkpoint(trainer.checkpoint(metadata()), result.last_checkpoint);
  return result;
}

#define AGGPOSE_INSTANTIATE_TRAINER(T)                                                                         \
  template void adamw_update<T>(std::span<T>, std::span<const T>, AdamState<T>&, const AdamWHyper&);           \
  template Batch<T> make_batch<T>(const TrainingData&, std::span<const std::size_t>, const ModelConfig&,       \
                                  const TrainConfig&, std::int64_t);                                           \
  template std::vector<DetectionRecord> predict_instances<T>(const AggPoseModel<T>&, const TrainingData&,      \
                                                             double, int, const std::vector<BoxRecord>*);      \
  template class Trainer<T>;                                                                                   \
  template FitResult fit<T>(AggPoseModel<T>&, const TrainingData&, const TrainConfig&, const FitOptions&);

AGGPOSE_INSTANTIATE_TRAINER(float)
AGGPOSE_INSTANTIATE_TRAINER(double)

}  // namespace aggpose
