#include "aggpose/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

namespace aggpose {

double AnnotationRecord::scale() const { return std::sqrt(std::max(area, 0.0)); }

double DetectionRecord::extent_area() const {
  if (keypoints.empty()) return 0.0;
  double x0 = keypoints[0].x, x1 = x0, y0 = keypoints[0].y, y1 = y0;
  for (const auto& kp : keypoints) {
    x0 = std::min(x0, kp.x);
    x1 = std::max(x1, kp.x);
    y0 = std::min(y0, kp.y);
    y1 = std::max(y1, kp.y);
  }
  return (x1 - x0) * (y1 - y0);
}

std::optional<double> oks(const DetectionRecord& det, const AnnotationRecord& ann, const KeypointSchema& schema) {
  const auto n = static_cast<std::size_t>(schema.size());
  if (det.keypoints.size() != n || ann.keypoints.size() != n) {
    throw SchemaMismatch("oks: schema '" + schema.name + "' has " + std::to_string(n) + " keypoints, detection has " +
                         std::to_string(det.keypoints.size()) + ", annotation " + std::to_string(ann.id) + " has " +
                         std::to_string(ann.keypoints.size()));
  }
  double total = 0.0;
  int labeled = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Keypoint& g = ann.keypoints[i];
    if (g.visibility <= 0) continue;
    ++labeled;
    const double dx = det.keypoints[i].x - g.x;
    const double dy = det.keypoints[i].y - g.y;
    const double ki = schema.k[i];
    total += std::exp(-(dx * dx + dy * dy) / (2.0 * ann.area * ki * ki));
  }
  if (labeled == 0) return std::nullopt;
  if (!(ann.area > 0.0)) {
    throw std::invalid_argument("oks: annotation " + std::to_string(ann.id) + " has non-positive area");
  }
  return total / labeled;
}

EvalParams EvalParams::coco() {
  EvalParams p;
  for (int i = 0; i < 10; ++i) p.thresholds.push_back((50.0 + 5.0 * i) / 100.0);
  p.area_ranges = {{"all", 0.0, 1e10}, {"medium", 32.0 * 32.0, 96.0 * 96.0}, {"large", 96.0 * 96.0, 1e10}};
  return p;
}

ImageMatch greedy_match(const std::vector<std::vector<double>>& ious, const std::vector<double>& scores,
                        const std::vector<bool>& gt_ignored, const std::vector<bool>& gt_crowd,
                        const std::vector<double>& det_areas, const AreaRange& range, double threshold) {
  const std::size_t nd = scores.size();
  const std::size_t ng = gt_ignored.size();
  ImageMatch m;
  m.scores = scores;
  m.matched_gt.assign(nd, -1);
  m.det_ignored.assign(nd, false);
  std::vector<int> gt_matched(ng, -1);
  for (std::size_t d = 0; d < nd; ++d) {
    double best = std::min(threshold, 1.0 - 1e-10);
    int pick = -1;
    for (std::size_t g = 0; g < ng; ++g) {
      if (gt_matched[g] >= 0 && !gt_crowd[g]) continue;
      // Annotations are sorted with ignored ones last; stop once a real match exists.
      if (pick > -1 && !gt_ignored[static_cast<std::size_t>(pick)] && gt_ignored[g]) break;
      if (ious[d][g] < best) continue;
      best = ious[d][g];
      pick = static_cast<int>(g);
    }
    if (pick == -1) continue;
    m.det_ignored[d] = gt_ignored[static_cast<std::size_t>(pick)];
    m.matched_gt[d] = pick;
    gt_matched[static_cast<std::size_t>(pick)] = static_cast<int>(d);
  }
  for (std::size_t d = 0; d < nd; ++d) {
    if (m.matched_gt[d] == -1 && (det_areas[d] < range.lo || det_areas[d] > range.hi)) m.det_ignored[d] = true;
  }
  for (bool ig : gt_ignored) m.positives += ig ? 0 : 1;
  return m;
}

double interpolated_ap(const std::vector<bool>& true_positive, int positives, int recall_points) {
  if (positives <= 0) throw std::invalid_argument("interpolated_ap: no positives");
  const std::size_t nd = true_positive.size();
  std::vector<double> recall(nd), precision(nd);
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < nd; ++i) {
    (true_positive[i] ? tp : fp) += 1.0;
    recall[i] = tp / positives;
    precision[i] = tp / (tp + fp + std::numeric_limits<double>::epsilon());
  }
  for (std::size_t i = nd; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  const double step = 1.0 / (recall_points - 1);
  double sum = 0.0;
  for (int r = 0; r < recall_points; ++r) {
    const double level = r * step;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level);
    if (it == recall.end()) break;
    sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / recall_points;
}

namespace {

struct Pooled {
  std::vector<double> scores;
  std::vector<bool> tp;
  std::vector<bool> ignored;
  int positives = 0;
};

std::optional<double> mean_defined(const std::vector<double>& values) {
  double sum = 0.0;
  int n = 0;
  for (double v : values) {
    if (v > -1.0) {
      sum += v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

std::optional<double> at_threshold(const std::vector<double>& values, const std::vector<double>& thresholds,
                                   double t) {
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (std::abs(thresholds[i] - t) < 1e-12) return values[i] > -1.0 ? std::optional<double>(values[i]) : std::nullopt;
  }
  return std::nullopt;
}

}  // namespace

EvalResult evaluate(const std::vector<DetectionRecord>& dets, const std::vector<AnnotationRecord>& anns,
                    const KeypointSchema& schema, const EvalParams& params) {
  const auto nk = static_cast<std::size_t>(schema.size());
  if (params.thresholds.empty() || params.area_ranges.empty() || params.max_detections < 1 ||
      params.recall_points < 2) {
    throw std::invalid_argument("evaluate: invalid parameters");
  }

  std::map<std::int64_t, std::vector<const AnnotationRecord*>> gts;
  std::map<std::int64_t, std::vector<const DetectionRecord*>> dts;
  std::set<std::int64_t> images;
  EvalResult result;
  for (const auto& a : anns) {
    if (a.keypoints.size() != nk) {
      throw SchemaMismatch("annotation " + std::to_string(a.id) + " has " + std::to_string(a.keypoints.size()) +
                           " keypoints, schema '" + schema.name + "' expects " + std::to_string(nk));
    }
    images.insert(a.image_id);
    if (count_labeled(a.keypoints) == 0) continue;
    gts[a.image_id].push_back(&a);
    ++result.num_annotations;
  }
  for (const auto& d : dets) {
    if (d.keypoints.size() != nk) {
      throw SchemaMismatch("detection on image " + std::to_string(d.image_id) + " has " +
                           std::to_string(d.keypoints.size()) + " keypoints, schema '" + schema.name + "' expects " +
                           std::to_string(nk));
    }
    if (!std::isfinite(d.score)) {
      throw std::invalid_argument("detection on image " + std::to_string(d.image_id) + " has a non-finite score");
    }
    images.insert(d.image_id);
    dts[d.image_id].push_back(&d);
    ++result.num_detections;
  }

  const std::size_t na = params.area_ranges.size();
  const std::size_t nt = params.thresholds.size();
  std::vector<std::vector<Pooled>> pooled(na, std::vector<Pooled>(nt));

  for (std::int64_t image : images) {
    std::vector<const AnnotationRecord*> g = gts.count(image) ? gts[image] : std::vector<const AnnotationRecord*>{};
    std::vector<const DetectionRecord*> d = dts.count(image) ? dts[image] : std::vector<const DetectionRecord*>{};
    if (g.empty() && d.empty()) continue;
    std::stable_sort(d.begin(), d.end(), [](const auto* a, const auto* b) { return a->score > b->score; });
    if (d.size() > static_cast<std::size_t>(params.max_detections)) d.resize(static_cast<std::size_t>(params.max_detections));

    std::vector<double> scores, det_areas;
    for (const auto* det : d) {
      scores.push_back(det->score);
      det_areas.push_back(det->extent_area());
    }

    for (std::size_t a = 0; a < na; ++a) {
      const AreaRange& range = params.area_ranges[a];
      std::vector<std::size_t> order(g.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      auto ignored = [&](std::size_t i) {
        return g[i]->iscrowd || g[i]->area < range.lo || g[i]->area > range.hi;
      };
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t x, std::size_t y) { return !ignored(x) && ignored(y); });
      std::vector<bool> gt_ignored, gt_crowd;
      for (std::size_t i : order) {
        gt_ignored.push_back(ignored(i));
        gt_crowd.push_back(g[i]->iscrowd);
      }
      std::vector<std::vector<double>> ious(d.size(), std::vector<double>(g.size(), 0.0));
      for (std::size_t i = 0; i < d.size(); ++i) {
        for (std::size_t j = 0; j < order.size(); ++j) ious[i][j] = *oks(*d[i], *g[order[j]], schema);
      }
      for (std::size_t t = 0; t < nt; ++t) {
        const ImageMatch m = greedy_match(ious, scores, gt_ignored, gt_crowd, det_areas, range, params.thresholds[t]);
        Pooled& p = pooled[a][t];
        p.positives += m.positives;
        for (std::size_t i = 0; i < m.scores.size(); ++i) {
          p.scores.push_back(m.scores[i]);
          p.tp.push_back(m.matched_gt[i] != -1);
          p.ignored.push_back(m.det_ignored[i]);
        }
      }
    }
  }

  result.ap_table.assign(na, std::vector<double>(nt, -1.0));
  result.recall_table.assign(na, std::vector<double>(nt, -1.0));
  for (std::size_t a = 0; a < na; ++a) {
    for (std::size_t t = 0; t < nt; ++t) {
      const Pooled& p = pooled[a][t];
      if (p.positives == 0) continue;
      std::vector<std::size_t> order(p.scores.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t x, std::size_t y) { return p.scores[x] > p.scores[y]; });
      std::vector<bool> tp;
      for (std::size_t i : order) {
        if (!p.ignored[i]) tp.push_back(p.tp[i]);
      }
      const auto hits = std::count(tp.begin(), tp.end(), true);
      result.recall_table[a][t] = tp.empty() ? 0.0 : static_cast<double>(hits) / p.positives;
      result.ap_table[a][t] = interpolated_ap(tp, p.positives, params.recall_points);
    }
  }

  auto area_index = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t a = 0; a < na; ++a) {
      if (params.area_ranges[a].name == name) return a;
    }
    return std::nullopt;
  };
  if (auto all = area_index("all")) {
    result.ap = mean_defined(result.ap_table[*all]);
    result.ar = mean_defined(result.recall_table[*all]);
    result.ap50 = at_threshold(result.ap_table[*all], params.thresholds, 0.5);
    result.ap75 = at_threshold(result.ap_table[*all], params.thresholds, 0.75);
    result.ar50 = at_threshold(result.recall_table[*all], params.thresholds, 0.5);
    result.ar75 = at_threshold(result.recall_table[*all], params.thresholds, 0.75);
  }
  if (auto medium = area_index("medium")) {
    result.ap_medium = mean_defined(result.ap_table[*medium]);
    result.ar_medium = mean_defined(result.recall_table[*medium]);
  }
  if (auto large = area_index("large")) {
    result.ap_large = mean_defined(result.ap_table[*large]);
    result.ar_large = mean_defined(result.recall_table[*large]);
  }
  return result;
}

std::string format_report(const EvalResult& r) {
  auto value = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j = {{"AP", value(r.ap)},         {"AP50", value(r.ap50)},   {"AP75", value(r.ap75)},
                      {"AP_M", value(r.ap_medium)}, {"AP_L", value(r.ap_large)}, {"AR", value(r.ar)},
                      {"AR50", value(r.ar50)},     {"AR75", value(r.ar75)},   {"AR_M", value(r.ar_medium)},
                      {"AR_L", value(r.ar_large)}, {"num_annotations", r.num_annotations},
                      {"num_detections", r.num_detections}};
  return j.dump(2);
}

}  // namespace aggpose
