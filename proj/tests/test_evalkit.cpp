#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "scratchdet/evalkit.hpp"

using namespace scratchdet;

namespace {

Box random_box(SeededRng& rng) {
  double x1 = rng.uniform(0.0, 0.8), y1 = rng.uniform(0.0, 0.8);
  double x2 = x1 + rng.uniform(0.02, 1.0 - x1);
  double y2 = y1 + rng.uniform(0.02, 1.0 - y1);
  return {x1, y1, x2, y2};
}

// Literal PASCAL-style evaluator written against the protocol description,
// independent of the library code path: exhaustive re-sort per rank, recall
// sweep with explicit envelopes.
std::optional<double> reference_ap(std::vector<DetectionRecord> dets,
                                   const std::vector<GroundTruth>& gts,
                                   double thr, ApProtocol proto,
                                   const std::vector<bool>& ignored) {
  int num_gt = 0;
  for (size_t i = 0; i < gts.size(); ++i)
    if (ignored.empty() || !ignored[i]) ++num_gt;
  if (num_gt == 0) return std::nullopt;

  // stable sort by score desc via score-with-index pairs
  std::stable_sort(dets.begin(), dets.end(),
                   [](const DetectionRecord& a, const DetectionRecord& b) {
                     return a.score > b.score;
                   });
  std::vector<bool> used(gts.size(), false);
  std::vector<double> prec, rec;
  double tp = 0, fp = 0;
  for (const auto& d : dets) {
    int best_gi = -1;
    double best_iou = -1;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (used[gi] || gts[gi].image_id != d.image_id) continue;
      double v = iou(d.box, gts[gi].box);
      if (v > best_iou) {
        best_iou = v;
        best_gi = static_cast<int>(gi);
      }
    }
    if (best_gi >= 0 && best_iou >= thr) {
      if (!ignored.empty() && ignored[static_cast<size_t>(best_gi)]) continue;
      used[static_cast<size_t>(best_gi)] = true;
      tp += 1;
    } else {
      fp += 1;
    }
    prec.push_back(tp / (tp + fp));
    rec.push_back(tp / num_gt);
  }

  if (proto == ApProtocol::voc11) {
    double ap = 0;
    for (int i = 0; i <= 10; ++i) {
      double r = i / 10.0, pmax = 0;
      for (size_t j = 0; j < rec.size(); ++j)
        if (rec[j] >= r - 1e-12) pmax = std::max(pmax, prec[j]);
      ap += pmax / 11.0;
    }
    return ap;
  }
  double ap = 0, prev = 0;
  for (size_t j = 0; j < rec.size(); ++j) {
    double pmax = 0;
    for (size_t k = j; k < rec.size(); ++k) pmax = std::max(pmax, prec[k]);
    ap += (rec[j] - prev) * pmax;
    prev = rec[j];
  }
  return ap;
}

}  // namespace

TEST_CASE("AP hand-computed example, both protocols") {
  // one image, two GTs; three detections: hit, miss, hit.
  std::vector<GroundTruth> gts{
      {0, 1, {0.0, 0.0, 0.2, 0.2}},
      {0, 1, {0.5, 0.5, 0.8, 0.8}},
  };
  std::vector<DetectionRecord> dets{
      {0, 1, 0.9, {0.0, 0.0, 0.2, 0.2}},    // TP, p=1, r=0.5
      {0, 1, 0.8, {0.3, 0.0, 0.45, 0.2}},   // FP, p=2/3
      {0, 1, 0.7, {0.5, 0.5, 0.8, 0.8}},    // TP, p=2/3... wait p=2/3, r=1
  };
  // precision at ranks: 1, 1/2, 2/3; recall: 0.5, 0.5, 1.0
  // voc11: recalls 0..0.5 -> pmax 1 (6 points), 0.6..1.0 -> 2/3 (5 points)
  double want11 = (6 * 1.0 + 5 * (2.0 / 3.0)) / 11.0;
  auto ap11 = average_precision(dets, gts, 0.5, ApProtocol::voc11);
  REQUIRE(ap11.has_value());
  REQUIRE_THAT(*ap11, Catch::Matchers::WithinAbs(want11, 1e-12));
  // all-point: 0.5*1 + 0.5*(2/3)
  auto apall = average_precision(dets, gts, 0.5, ApProtocol::allpoint);
  REQUIRE_THAT(*apall,
               Catch::Matchers::WithinAbs(0.5 + 0.5 * 2.0 / 3.0, 1e-12));

  // perfect detector: AP 1 under both protocols
  std::vector<DetectionRecord> perfect{
      {0, 1, 0.9, gts[0].box}, {0, 1, 0.8, gts[1].box}};
  REQUIRE(*average_precision(perfect, gts, 0.5, ApProtocol::voc11) == 1.0);
  REQUIRE(*average_precision(perfect, gts, 0.5, ApProtocol::allpoint) == 1.0);

  // no GT -> undefined
  REQUIRE_FALSE(average_precision(dets, {}, 0.5).has_value());
  // no detections but GT present -> 0
  REQUIRE(*average_precision({}, gts, 0.5) == 0.0);
}

TEST_CASE("duplicate detections on one GT: first is TP, rest are FP") {
  std::vector<GroundTruth> gts{{0, 1, {0.1, 0.1, 0.5, 0.5}}};
  std::vector<DetectionRecord> dets{
      {0, 1, 0.9, {0.1, 0.1, 0.5, 0.5}},
      {0, 1, 0.8, {0.1, 0.1, 0.5, 0.5}},
  };
  // ranks: p=1 r=1; then FP p=0.5; voc11 pmax at all recalls = 1
  REQUIRE(*average_precision(dets, gts, 0.5, ApProtocol::voc11) == 1.0);
  // all-point: 1*1 = 1 as well (envelope from the left)
  REQUIRE(*average_precision(dets, gts, 0.5, ApProtocol::allpoint) == 1.0);
}

TEST_CASE("AP matches the reference on randomized instances") {
  SeededRng rng(10);
  for (int trial = 0; trial < 1000; ++trial) {
    int images = 1 + static_cast<int>(rng.next_below(3));
    std::vector<GroundTruth> gts;
    for (int im = 0; im < images; ++im) {
      int G = static_cast<int>(rng.next_below(4));
      for (int g = 0; g < G; ++g) gts.push_back({im, 1, random_box(rng)});
    }
    std::vector<DetectionRecord> dets;
    int D = static_cast<int>(rng.next_below(10));
    for (int d = 0; d < D; ++d) {
      Box b;
      if (!gts.empty() && rng.next_double() < 0.6) {
        // jittered copy of a GT
        const Box& g = gts[rng.next_below(gts.size())].box;
        double j = rng.uniform(0.0, 0.08);
        b = {g.x1 + j, g.y1 - j / 2, g.x2 + j, g.y2 - j / 2};
      } else {
        b = random_box(rng);
      }
      dets.push_back({static_cast<int>(rng.next_below(images)), 1,
                      static_cast<double>(rng.next_below(10)) / 10.0, b});
    }
    std::vector<bool> ignored;
    if (!gts.empty() && rng.next_double() < 0.5) {
      ignored.resize(gts.size());
      for (size_t i = 0; i < gts.size(); ++i)
        ignored[i] = rng.next_double() < 0.3;
    }
    for (ApProtocol proto : {ApProtocol::voc11, ApProtocol::allpoint}) {
      auto got = average_precision(dets, gts, 0.5, proto, ignored);
      auto want = reference_ap(dets, gts, 0.5, proto, ignored);
      REQUIRE(got.has_value() == want.has_value());
      if (got)
        REQUIRE_THAT(*got, Catch::Matchers::WithinAbs(*want, 1e-12));
    }
  }
}

TEST_CASE("size buckets classify by normalized area") {
  BucketThresholds t;
  REQUIRE(t.bucket_of({0, 0, 0.05, 0.05}) == SizeBucket::small);    // 0.0025
  REQUIRE(t.bucket_of({0, 0, 0.2, 0.2}) == SizeBucket::medium);     // 0.04
  REQUIRE(t.bucket_of({0, 0, 0.5, 0.5}) == SizeBucket::large);      // 0.25
  REQUIRE(t.bucket_of({0, 0, 0.1, 0.1}) == SizeBucket::medium);     // exactly 0.01
  REQUIRE(t.bucket_of({0, 0, 0.3, 0.3}) == SizeBucket::large);      // exactly 0.09
}

TEST_CASE("size-bucketed AP ignores out-of-bucket GTs without penalizing") {
  std::vector<GroundTruth> gts{
      {0, 1, {0.0, 0.0, 0.05, 0.05}},  // small
      {0, 1, {0.3, 0.3, 0.8, 0.8}},    // large
  };
  // detector finds both perfectly
  std::vector<DetectionRecord> dets{
      {0, 1, 0.9, gts[0].box},
      {0, 1, 0.8, gts[1].box},
  };
  auto small = size_bucketed_ap(dets, gts, SizeBucket::small);
  auto large = size_bucketed_ap(dets, gts, SizeBucket::large);
  auto medium = size_bucketed_ap(dets, gts, SizeBucket::medium);
  REQUIRE(small.has_value());
  REQUIRE(*small == 1.0);  // the large-GT hit is absorbed, not an FP
  REQUIRE(*large == 1.0);
  REQUIRE_FALSE(medium.has_value());  // no medium GT

  // a detection on an ignored GT is not an FP, and the ignored GT can still
  // absorb later detections
  std::vector<DetectionRecord> noisy{
      {0, 1, 0.95, gts[1].box},  // hits the large (ignored for small bucket)
      {0, 1, 0.90, gts[0].box},  // hits the small
  };
  REQUIRE(*size_bucketed_ap(noisy, gts, SizeBucket::small) == 1.0);
}

TEST_CASE("mean_ap and evaluate") {
  REQUIRE(mean_ap({{1, 0.5}, {2, 1.0}}) == 0.75);
  REQUIRE_THROWS_AS(mean_ap({}), ContractError);

  std::vector<GroundTruth> gts{
      {0, 1, {0.0, 0.0, 0.4, 0.4}},
      {0, 2, {0.5, 0.5, 0.9, 0.9}},
      {1, 1, {0.2, 0.2, 0.6, 0.6}},
  };
  std::vector<DetectionRecord> dets{
      {0, 1, 0.9, {0.0, 0.0, 0.4, 0.4}},
      {0, 2, 0.8, {0.5, 0.5, 0.9, 0.9}},
      {1, 1, 0.7, {0.2, 0.2, 0.6, 0.6}},
  };
  EvalReport rep = evaluate(dets, gts, 4);
  REQUIRE(rep.per_class_ap.size() == 2);  // class 3 has no GT, excluded
  REQUIRE(rep.per_class_ap.at(1) == 1.0);
  REQUIRE(rep.per_class_ap.at(2) == 1.0);
  REQUIRE(rep.map == 1.0);
  REQUIRE(rep.ap_large.has_value());
  REQUIRE_FALSE(rep.ap_small.has_value());  // no small GTs
}
