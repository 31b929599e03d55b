#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include "scratchdet/detector.hpp"

namespace scratchdet {

enum class SizeBucket { small, medium, large };

// Normalized-area thresholds (artifact constants, not COCO's pixel ones):
// area < 0.01 -> small, < 0.09 -> medium, else large.
struct BucketThresholds {
  double small_max = 0.01;
  double medium_max = 0.09;

  SizeBucket bucket_of(const Box& b) const {
    double a = b.area();
    if (a < small_max) return SizeBucket::small;
    if (a < medium_max) return SizeBucket::medium;
    return SizeBucket::large;
  }
};

struct GroundTruth {
  int image_id = 0;
  int class_id = 0;
  Box box;
};

struct DetectionRecord {
  int image_id = 0;
  int class_id = 0;
  double score = 0.0;
  Box box;
};

enum class ApProtocol { voc11, allpoint };

namespace detail {

struct RankedDet {
  double score;
  int order;      // insertion order, the tie-break
  int image_id;
  Box box;
};

}  // namespace detail

// Single-class average precision. Detections are ranked by descending score
// (ties by insertion order); each detection greedily matches the
// highest-IoU unmatched GT of its image. GTs flagged ignored absorb
// detections (neither TP nor FP) without counting toward recall.
// Returns nullopt when there is no non-ignored GT.
inline std::optional<double> average_precision(
    const std::vector<DetectionRecord>& dets,
    const std::vector<GroundTruth>& gts, double iou_threshold = 0.5,
    ApProtocol protocol = ApProtocol::voc11,
    const std::vector<bool>& ignored = {}) {
  if (!ignored.empty() && ignored.size() != gts.size())
    throw ContractError("average_precision: ignore mask size mismatch");
  int num_gt = 0;
  for (size_t i = 0; i < gts.size(); ++i)
    if (ignored.empty() || !ignored[i]) ++num_gt;
  if (num_gt == 0) return std::nullopt;

  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return dets[static_cast<size_t>(a)].score > dets[static_cast<size_t>(b)].score;
  });

  std::vector<bool> matched(gts.size(), false);
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (int di : order) {
    const auto& d = dets[static_cast<size_t>(di)];
    double best = -1.0;
    int bg = -1;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (matched[gi]) continue;
      if (gts[gi].image_id != d.image_id) continue;
      double v = iou(d.box, gts[gi].box);
      if (v > best) {
        best = v;
        bg = static_cast<int>(gi);
      }
    }
    if (bg >= 0 && best >= iou_threshold) {
      bool ig = !ignored.empty() && ignored[static_cast<size_t>(bg)];
      if (ig) continue;  // neither TP nor FP; ignored GT stays available
      matched[static_cast<size_t>(bg)] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / num_gt);
  }

  if (protocol == ApProtocol::voc11) {
    double ap = 0.0;
    for (int i = 0; i <= 10; ++i) {
      double r = i / 10.0;
      double pmax = 0.0;
      for (size_t j = 0; j < recall.size(); ++j)
        if (recall[j] >= r - 1e-12) pmax = std::max(pmax, precision[j]);
      ap += pmax;
    }
    return ap / 11.0;
  }
  // all-point: area under the monotone precision envelope
  double ap = 0.0;
  double prev_r = 0.0;
  for (size_t j = 0; j < recall.size(); ++j) {
    double pmax = 0.0;
    for (size_t k = j; k < recall.size(); ++k)
      pmax = std::max(pmax, precision[k]);
    ap += (recall[j] - prev_r) * pmax;
    prev_r = recall[j];
  }
  return ap;
}

// Arithmetic mean over defined per-class APs.
inline double mean_ap(const std::map<int, double>& per_class_ap) {
  if (per_class_ap.empty()) throw ContractError("mean_ap: empty map");
  double s = 0.0;
  for (const auto& [cls, ap] : per_class_ap) s += ap;
  return s / static_cast<double>(per_class_ap.size());
}

// AP with GTs outside the bucket marked ignore.
inline std::optional<double> size_bucketed_ap(
    const std::vector<DetectionRecord>& dets,
    const std::vector<GroundTruth>& gts, SizeBucket bucket,
    double iou_threshold = 0.5, ApProtocol protocol = ApProtocol::voc11,
    const BucketThresholds& thresholds = {}) {
  std::vector<bool> ignored(gts.size());
  for (size_t i = 0; i < gts.size(); ++i)
    ignored[i] = thresholds.bucket_of(gts[i].box) != bucket;
  return average_precision(dets, gts, iou_threshold, protocol, ignored);
}

struct EvalReport {
  std::map<int, double> per_class_ap;
  double map = 0.0;
  std::optional<double> ap_small, ap_medium, ap_large;
};

// Full evaluation over multi-class detections and ground truth. Classes with
// no GT are excluded from the mAP.
inline EvalReport evaluate(const std::vector<DetectionRecord>& dets,
                           const std::vector<GroundTruth>& gts,
                           int num_classes, double iou_threshold = 0.5,
                           ApProtocol protocol = ApProtocol::voc11,
                           const BucketThresholds& thresholds = {}) {
  EvalReport rep;
  for (int cls = 1; cls < num_classes; ++cls) {
    std::vector<DetectionRecord> d;
    std::vector<GroundTruth> g;
    for (const auto& x : dets)
      if (x.class_id == cls) d.push_back(x);
    for (const auto& x : gts)
      if (x.class_id == cls) g.push_back(x);
    auto ap = average_precision(d, g, iou_threshold, protocol);
    if (ap) rep.per_class_ap[cls] = *ap;
  }
  rep.map = rep.per_class_ap.empty() ? 0.0 : mean_ap(rep.per_class_ap);

  for (SizeBucket b : {SizeBucket::small, SizeBucket::medium, SizeBucket::large}) {
    std::map<int, double> per_class;
    for (int cls = 1; cls < num_classes; ++cls) {
      std::vector<DetectionRecord> d;
      std::vector<GroundTruth> g;
      for (const auto& x : dets)
        if (x.class_id == cls) d.push_back(x);
      for (const auto& x : gts)
        if (x.class_id == cls) g.push_back(x);
      auto ap = size_bucketed_ap(d, g, b, iou_threshold, protocol, thresholds);
      if (ap) per_class[cls] = *ap;
    }
    std::optional<double> v;
    if (!per_class.empty()) v = mean_ap(per_class);
    if (b == SizeBucket::small) rep.ap_small = v;
    else if (b == SizeBucket::medium) rep.ap_medium = v;
    else rep.ap_large = v;
  }
  return rep;
}

}  // namespace scratchdet
