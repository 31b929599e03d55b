#pragma once

#include <vector>

#include "scratchdet/detector.hpp"
#include "scratchdet/network.hpp"

namespace scratchdet {

// Anchor layout for the desk configs: linear scales across the ladder,
// ratios {1, 2, 1/2} plus the interpolated extra scale.
struct AnchorConfig {
  double min_scale = 0.15;
  double max_scale = 0.9;
  std::vector<double> ratios = {1.0, 2.0, 0.5};
  double final_extra_scale = 1.0;

  AnchorSet build(const std::vector<int>& ladder) const {
    std::vector<double> scales;
    int L = static_cast<int>(ladder.size());
    for (int i = 0; i < L; ++i)
      scales.push_back(L == 1 ? min_scale
                              : min_scale + (max_scale - min_scale) * i /
                                                static_cast<double>(L - 1));
    return generate_anchors(ladder, scales, ratios, final_extra_scale);
  }
};

inline void to_json(json& j, const AnchorConfig& c) {
  j = json{{"min_scale", c.min_scale},
           {"max_scale", c.max_scale},
           {"ratios", c.ratios},
           {"final_extra_scale", c.final_extra_scale}};
}

inline void from_json(const json& j, AnchorConfig& c) {
  AnchorConfig d;
  c.min_scale = j.value("min_scale", d.min_scale);
  c.max_scale = j.value("max_scale", d.max_scale);
  c.ratios = j.value("ratios", d.ratios);
  c.final_extra_scale = j.value("final_extra_scale", d.final_extra_scale);
}

inline void to_json(json& j, const HeadConfig& c) {
  j = json{{"bn_in_head", c.bn_in_head},
           {"anchors_per_cell", c.anchors_per_cell},
           {"num_classes", c.num_classes}};
}

inline void from_json(const json& j, HeadConfig& c) {
  HeadConfig d;
  c.bn_in_head = j.value("bn_in_head", d.bn_in_head);
  c.anchors_per_cell = j.value("anchors_per_cell", d.anchors_per_cell);
  c.num_classes = j.value("num_classes", d.num_classes);
}

// Backbone + detection head + anchors: the trainable detector.
class DetectorModel {
 public:
  DetectorModel() = default;

  DetectorModel(const BackboneConfig& bcfg, HeadConfig hcfg,
                const AnchorConfig& acfg, uint64_t seed)
      : anchors_(acfg.build(bcfg.target_ladder)) {
    hcfg.anchors_per_cell = static_cast<int>(acfg.ratios.size()) + 1;
    NetworkSpec spec = build_backbone(bcfg);
    SeededRng root(seed);
    backbone_ = Network(spec, root.split(1));
    head_ = DetectionHead(hcfg, spec.tap_channels, root.split(2));
  }

  Network& backbone() { return backbone_; }
  DetectionHead& head() { return head_; }
  const AnchorSet& anchors() const { return anchors_; }

  void set_mode(BnMode mode) {
    backbone_.set_mode(mode);
    head_.set_mode(mode);
  }

  std::vector<ParamTensor*> params() {
    auto out = backbone_.params();
    auto hp = head_.params();
    out.insert(out.end(), hp.begin(), hp.end());
    return out;
  }

  std::vector<Network::RunningStat> running_stats() {
    auto out = backbone_.running_stats();
    auto hs = head_.running_stats();
    out.insert(out.end(), hs.begin(), hs.end());
    return out;
  }

  struct TrainStep {
    LossBreakdown loss;
  };

  // Forward + multibox loss + full backward; parameter grads are populated
  // (not yet applied).
  LossBreakdown train_step_backward(const Tensor& batch,
                                    const std::vector<std::vector<GtObject>>& gts) {
    set_mode(BnMode::train);
    NetworkCache ncache;
    FeaturePyramid pyr = backbone_.forward(batch, &ncache);
    HeadCache hcache;
    Tensor loc_pred, cls_pred;
    head_.forward(pyr, loc_pred, cls_pred, &hcache);

    std::vector<MatchResult> matches;
    for (const auto& img_gts : gts) {
      std::vector<Box> boxes;
      for (const auto& g : img_gts) boxes.push_back(g.box);
      matches.push_back(match_anchors(anchors_, boxes));
    }
    MultiboxGrads mg;
    LossBreakdown loss =
        multibox_loss(loc_pred, cls_pred, matches, gts, anchors_, &mg);
    std::vector<Tensor> feat_grads =
        head_.backward(pyr, hcache, mg.grad_loc, mg.grad_cls);
    backbone_.backward(ncache, feat_grads);
    return loss;
  }

  // Inference: per-image detections in normalized coordinates.
  std::vector<std::vector<Detection>> predict(const Tensor& batch,
                                              double conf_threshold = 0.01,
                                              double nms_threshold = 0.45,
                                              int top_k = 200) {
    set_mode(BnMode::inference);
    FeaturePyramid pyr = backbone_.forward(batch, nullptr);
    Tensor loc_pred, cls_pred;
    head_.forward(pyr, loc_pred, cls_pred, nullptr);
    int N = batch.shape[0];
    int A = loc_pred.shape[1];
    int K = cls_pred.shape[2];
    std::vector<std::vector<Detection>> out;
    for (int n = 0; n < N; ++n) {
      Tensor lo({A, 4});
      Tensor cl({A, K});
      std::copy(loc_pred.data.begin() + static_cast<int64_t>(n) * A * 4,
                loc_pred.data.begin() + static_cast<int64_t>(n + 1) * A * 4,
                lo.data.begin());
      std::copy(cls_pred.data.begin() + static_cast<int64_t>(n) * A * K,
                cls_pred.data.begin() + static_cast<int64_t>(n + 1) * A * K,
                cl.data.begin());
      out.push_back(
          detect(lo, cl, anchors_, conf_threshold, nms_threshold, top_k));
    }
    return out;
  }

 private:
  Network backbone_;
  DetectionHead head_;
  AnchorSet anchors_;
};

}  // namespace scratchdet
