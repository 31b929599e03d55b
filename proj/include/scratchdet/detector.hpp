#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "scratchdet/network.hpp"
#include "scratchdet/nn.hpp"

namespace scratchdet {

// Corner-form box, normalized [0,1] coordinates.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }
};

inline double iou(const Box& a, const Box& b) {
  double ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
  double ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
  double inter = std::max(0.0, ix2 - ix1) * std::max(0.0, iy2 - iy1);
  double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;  // degenerate boxes score 0
  return inter / uni;
}

// Center-form anchor (cx, cy, w, h), normalized.
struct Anchor {
  double cx, cy, w, h;
  Box to_box() const {
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  }
};

struct AnchorSet {
  std::vector<Anchor> anchors;            // flattened, level-major
  std::vector<int> grid_sizes;            // per detection layer
  std::vector<int> level_offsets;         // anchor index where each level starts
  int anchors_per_cell = 0;
  double v_center = 0.1, v_size = 0.2;    // encode variances
  int total() const { return static_cast<int>(anchors.size()); }
};

// SSD default-box generation: per cell one anchor per aspect ratio at the
// level scale plus one extra at sqrt(s_k * s_{k+1}) with ratio 1. Centers at
// ((i+0.5)/grid, (j+0.5)/grid). Anchor order within a level: row-major cells,
// then anchor index.
inline AnchorSet generate_anchors(const std::vector<int>& ladder,
                                  const std::vector<double>& scales,
                                  const std::vector<double>& ratios,
                                  double final_extra_scale = 1.0) {
  if (ladder.size() != scales.size())
    throw ConfigError("generate_anchors: ladder/scales length mismatch");
  for (size_t i = 0; i < scales.size(); ++i) {
    if (scales[i] <= 0.0 || scales[i] > 1.0)
      throw ConfigError("generate_anchors: scales must lie in (0,1]");
    if (i > 0 && scales[i] <= scales[i - 1])
      throw ConfigError("generate_anchors: scales must be strictly increasing");
  }
  AnchorSet set;
  set.grid_sizes = ladder;
  set.anchors_per_cell = static_cast<int>(ratios.size()) + 1;
  for (size_t lvl = 0; lvl < ladder.size(); ++lvl) {
    set.level_offsets.push_back(set.total());
    int g = ladder[lvl];
    double s = scales[lvl];
    double s_next = lvl + 1 < scales.size() ? scales[lvl + 1] : final_extra_scale;
    double s_extra = std::sqrt(s * s_next);
    for (int i = 0; i < g; ++i)
      for (int j = 0; j < g; ++j) {
        double cx = (j + 0.5) / g, cy = (i + 0.5) / g;
        for (double r : ratios)
          set.anchors.push_back({cx, cy, s * std::sqrt(r), s / std::sqrt(r)});
        set.anchors.push_back({cx, cy, s_extra, s_extra});
      }
  }
  return set;
}

// SSD offset parameterization.
inline std::array<double, 4> encode_box(const Box& gt, const Anchor& a,
                                        double v_center, double v_size) {
  double gw = gt.x2 - gt.x1, gh = gt.y2 - gt.y1;
  if (gw <= 0.0 || gh <= 0.0)
    throw ContractError("encode_box: non-positive ground-truth size");
  double gcx = (gt.x1 + gt.x2) / 2, gcy = (gt.y1 + gt.y2) / 2;
  return {((gcx - a.cx) / a.w) / v_center, ((gcy - a.cy) / a.h) / v_center,
          std::log(gw / a.w) / v_size, std::log(gh / a.h) / v_size};
}

inline Box decode_box(const std::array<double, 4>& t, const Anchor& a,
                      double v_center, double v_size) {
  double cx = t[0] * v_center * a.w + a.cx;
  double cy = t[1] * v_center * a.h + a.cy;
  double w = std::exp(t[2] * v_size) * a.w;
  double h = std::exp(t[3] * v_size) * a.h;
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

// Per-anchor assignment. NEGATIVE == -1.
struct MatchResult {
  static constexpr int NEGATIVE = -1;
  std::vector<int> anchor_to_gt;   // gt index or NEGATIVE
  std::vector<int> gt_to_anchor;   // bipartite anchor per GT

  int num_positive() const {
    int n = 0;
    for (int v : anchor_to_gt)
      if (v >= 0) ++n;
    return n;
  }
};

// SSD matching: (1) bipartite — greedily over the global IoU matrix, each GT
// claims its highest-IoU unclaimed anchor (ties by lowest anchor index, then
// lowest GT index); (2) every remaining anchor with IoU >= threshold becomes
// positive toward its argmax GT; all others are NEGATIVE.
inline MatchResult match_anchors(const AnchorSet& anchors,
                                 const std::vector<Box>& gts,
                                 double pos_threshold = 0.5) {
  int A = anchors.total();
  int G = static_cast<int>(gts.size());
  MatchResult m;
  m.anchor_to_gt.assign(static_cast<size_t>(A), MatchResult::NEGATIVE);
  m.gt_to_anchor.assign(static_cast<size_t>(G), -1);
  if (G == 0) return m;

  std::vector<double> mat(static_cast<size_t>(A) * G);
  for (int a = 0; a < A; ++a) {
    Box ab = anchors.anchors[static_cast<size_t>(a)].to_box();
    for (int g = 0; g < G; ++g)
      mat[static_cast<size_t>(a) * G + g] = iou(ab, gts[static_cast<size_t>(g)]);
  }

  std::vector<bool> gt_done(static_cast<size_t>(G), false);
  std::vector<bool> anchor_claimed(static_cast<size_t>(A), false);
  for (int round = 0; round < G; ++round) {
    double best = -1.0;
    int ba = -1, bg = -1;
    for (int a = 0; a < A; ++a) {
      if (anchor_claimed[static_cast<size_t>(a)]) continue;
      for (int g = 0; g < G; ++g) {
        if (gt_done[static_cast<size_t>(g)]) continue;
        double v = mat[static_cast<size_t>(a) * G + g];
        if (v > best) {
          best = v;
          ba = a;
          bg = g;
        }
      }
    }
    gt_done[static_cast<size_t>(bg)] = true;
    anchor_claimed[static_cast<size_t>(ba)] = true;
    m.anchor_to_gt[static_cast<size_t>(ba)] = bg;
    m.gt_to_anchor[static_cast<size_t>(bg)] = ba;
  }

  for (int a = 0; a < A; ++a) {
    if (anchor_claimed[static_cast<size_t>(a)]) continue;
    double best = -1.0;
    int bg = -1;
    for (int g = 0; g < G; ++g) {
      double v = mat[static_cast<size_t>(a) * G + g];
      if (v > best) {
        best = v;
        bg = g;
      }
    }
    if (best >= pos_threshold) m.anchor_to_gt[static_cast<size_t>(a)] = bg;
  }
  return m;
}

// ---------------------------------------------------------------------------

struct HeadConfig {
  bool bn_in_head = false;
  int anchors_per_cell = 4;
  int num_classes = 2;  // includes background class 0

  void validate() const {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (anchors_per_cell < 1) throw ConfigError("anchors_per_cell must be >= 1");
  }
};

struct HeadCache {
  std::vector<Tensor> features;     // per level, post-BN input to the convs
  std::vector<BnCache> bn;
  std::vector<int> grids;
  int batch = 0;
};

// SSD-style detection head: per level an optional BatchNorm on the feature
// map followed by one 3x3 localization conv and one 3x3 classification conv.
class DetectionHead {
 public:
  DetectionHead() = default;

  DetectionHead(HeadConfig cfg, const std::vector<int>& level_channels,
                SeededRng rng)
      : cfg_(cfg) {
    cfg_.validate();
    for (size_t l = 0; l < level_channels.size(); ++l) {
      int c = level_channels[l];
      std::string p = "head" + std::to_string(l);
      SeededRng r1 = rng.split(2 * l), r2 = rng.split(2 * l + 1);
      loc_w_.emplace_back(p + ".loc.w",
                          xavier_init({4 * cfg_.anchors_per_cell, c, 3, 3}, r1));
      loc_b_.emplace_back(p + ".loc.b", Tensor({4 * cfg_.anchors_per_cell}));
      cls_w_.emplace_back(
          p + ".cls.w",
          xavier_init({cfg_.num_classes * cfg_.anchors_per_cell, c, 3, 3}, r2));
      cls_b_.emplace_back(p + ".cls.b",
                          Tensor({cfg_.num_classes * cfg_.anchors_per_cell}));
      if (cfg_.bn_in_head) {
        bn_.emplace_back(c);
        Tensor g({c});
        g.fill(1.0);
        gamma_.emplace_back(p + ".bn.gamma", std::move(g));
        beta_.emplace_back(p + ".bn.beta", Tensor({c}));
      }
    }
  }

  const HeadConfig& config() const { return cfg_; }
  size_t levels() const { return loc_w_.size(); }
  int batchnorm_count() const { return static_cast<int>(bn_.size()); }

  void set_mode(BnMode mode) {
    for (auto& s : bn_) s.mode = mode;
  }

  // Flattened anchor order: level, then cell row-major, then anchor index.
  // loc_pred (N, A, 4); cls_pred (N, A, K).
  void forward(const FeaturePyramid& pyr, Tensor& loc_pred, Tensor& cls_pred,
               HeadCache* cache) {
    if (pyr.maps.size() != levels())
      throw DimensionError("head: pyramid level count mismatch");
    int N = pyr.maps[0].shape[0];
    int apc = cfg_.anchors_per_cell, K = cfg_.num_classes;
    int A = 0;
    for (int g : pyr.sizes) A += g * g * apc;
    loc_pred = Tensor({N, A, 4});
    cls_pred = Tensor({N, A, K});
    HeadCache local;
    HeadCache& c = cache ? *cache : local;
    c.features.assign(levels(), Tensor{});
    c.bn.assign(levels(), BnCache{});
    c.grids = pyr.sizes;
    c.batch = N;

    int base = 0;
    for (size_t l = 0; l < levels(); ++l) {
      Tensor feat = pyr.maps[l];
      if (cfg_.bn_in_head) {
        bn_[l].gamma = gamma_[l].value.data;
        bn_[l].beta = beta_[l].value.data;
        feat = batchnorm_forward(feat, bn_[l], c.bn[l]);
      }
      c.features[l] = feat;
      Tensor lo = conv2d_forward(feat, loc_w_[l].value, loc_b_[l].value.data, 1, 1);
      Tensor cl = conv2d_forward(feat, cls_w_[l].value, cls_b_[l].value.data, 1, 1);
      int G = pyr.sizes[l];
      for (int n = 0; n < N; ++n)
        for (int h = 0; h < G; ++h)
          for (int w = 0; w < G; ++w)
            for (int a = 0; a < apc; ++a) {
              int idx = base + (h * G + w) * apc + a;
              for (int j = 0; j < 4; ++j)
                loc_pred.data[static_cast<size_t>(
                    (static_cast<int64_t>(n) * A + idx) * 4 + j)] =
                    lo.at(n, a * 4 + j, h, w);
              for (int k = 0; k < K; ++k)
                cls_pred.data[static_cast<size_t>(
                    (static_cast<int64_t>(n) * A + idx) * K + k)] =
                    cl.at(n, a * K + k, h, w);
            }
      base += G * G * apc;
    }
  }

  // Propagates (grad_loc, grad_cls) back to per-level feature-map gradients
  // (same shapes as the pyramid maps) and accumulates parameter gradients.
  std::vector<Tensor> backward(const FeaturePyramid& pyr, const HeadCache& c,
                               const Tensor& grad_loc, const Tensor& grad_cls) {
    int N = c.batch;
    int apc = cfg_.anchors_per_cell, K = cfg_.num_classes;
    int A = grad_loc.shape[1];
    std::vector<Tensor> feat_grads;
    int base = 0;
    for (size_t l = 0; l < levels(); ++l) {
      int G = c.grids[l];
      int C = c.features[l].shape[1];
      Tensor glo({N, 4 * apc, G, G});
      Tensor gcl({N, K * apc, G, G});
      for (int n = 0; n < N; ++n)
        for (int h = 0; h < G; ++h)
          for (int w = 0; w < G; ++w)
            for (int a = 0; a < apc; ++a) {
              int idx = base + (h * G + w) * apc + a;
              for (int j = 0; j < 4; ++j)
                glo.at(n, a * 4 + j, h, w) = grad_loc.data[static_cast<size_t>(
                    (static_cast<int64_t>(n) * A + idx) * 4 + j)];
              for (int k = 0; k < K; ++k)
                gcl.at(n, a * K + k, h, w) = grad_cls.data[static_cast<size_t>(
                    (static_cast<int64_t>(n) * A + idx) * K + k)];
            }
      ConvGrads g1 = conv2d_backward(glo, c.features[l], loc_w_[l].value, 1, 1);
      ConvGrads g2 = conv2d_backward(gcl, c.features[l], cls_w_[l].value, 1, 1);
      accum(loc_w_[l].grad, g1.grad_weight);
      accum(cls_w_[l].grad, g2.grad_weight);
      for (int o = 0; o < 4 * apc; ++o)
        loc_b_[l].grad.data[static_cast<size_t>(o)] += g1.grad_bias[static_cast<size_t>(o)];
      for (int o = 0; o < K * apc; ++o)
        cls_b_[l].grad.data[static_cast<size_t>(o)] += g2.grad_bias[static_cast<size_t>(o)];
      Tensor gfeat = g1.grad_input;
      accum(gfeat, g2.grad_input);
      if (cfg_.bn_in_head) {
        BnGrads bg = batchnorm_backward(gfeat, c.bn[l]);
        for (int ch = 0; ch < C; ++ch) {
          gamma_[l].grad.data[static_cast<size_t>(ch)] += bg.grad_gamma[static_cast<size_t>(ch)];
          beta_[l].grad.data[static_cast<size_t>(ch)] += bg.grad_beta[static_cast<size_t>(ch)];
        }
        gfeat = std::move(bg.grad_x);
      }
      feat_grads.push_back(std::move(gfeat));
      base += G * G * apc;
    }
    (void)pyr;
    return feat_grads;
  }

  std::vector<ParamTensor*> params() {
    std::vector<ParamTensor*> out;
    for (size_t l = 0; l < levels(); ++l) {
      if (cfg_.bn_in_head) {
        out.push_back(&gamma_[l]);
        out.push_back(&beta_[l]);
      }
      out.push_back(&loc_w_[l]);
      out.push_back(&loc_b_[l]);
      out.push_back(&cls_w_[l]);
      out.push_back(&cls_b_[l]);
    }
    return out;
  }

  std::vector<Network::RunningStat> running_stats() {
    std::vector<Network::RunningStat> out;
    for (size_t l = 0; l < bn_.size(); ++l) {
      std::string p = "head" + std::to_string(l);
      out.push_back({p + ".bn.running_mean", &bn_[l].running_mean});
      out.push_back({p + ".bn.running_var", &bn_[l].running_var});
    }
    return out;
  }

 private:
  static void accum(Tensor& dst, const Tensor& src) {
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
  }

  HeadConfig cfg_;
  std::vector<ParamTensor> loc_w_, loc_b_, cls_w_, cls_b_;
  std::vector<BatchNormState> bn_;
  std::vector<ParamTensor> gamma_, beta_;
};

// ---------------------------------------------------------------------------

struct LossBreakdown {
  double total = 0.0;
  double loc = 0.0;
  double conf = 0.0;
  int num_matched = 0;
};

struct GtObject {
  int class_id = 1;  // >= 1; 0 is background
  Box box;
};

struct MultiboxGrads {
  Tensor grad_loc;  // (N, A, 4)
  Tensor grad_cls;  // (N, A, K)
};

// SSD multibox loss with hard negative mining: smooth-L1 over positive
// anchors plus softmax-CE over positives and the top-(ratio*N_i)-loss
// negatives per image (ranked by background loss, ties by anchor index),
// normalized by the total positive count. Images with zero positives
// contribute `neg_pos_ratio` mined negatives; if the whole batch has zero
// positives the conf loss is normalized by the mined negative count.
inline LossBreakdown multibox_loss(const Tensor& loc_pred,
                                   const Tensor& cls_pred,
                                   const std::vector<MatchResult>& matches,
                                   const std::vector<std::vector<GtObject>>& gts,
                                   const AnchorSet& anchors,
                                   MultiboxGrads* grads,
                                   int neg_pos_ratio = 3) {
  int N = loc_pred.shape[0], A = loc_pred.shape[1];
  int K = cls_pred.shape[2];
  if (cls_pred.shape[0] != N || cls_pred.shape[1] != A)
    throw DimensionError("multibox_loss: loc/cls batch mismatch");
  if (static_cast<int>(matches.size()) != N ||
      static_cast<int>(gts.size()) != N)
    throw DimensionError("multibox_loss: match/gt count mismatch");

  LossBreakdown out;
  MultiboxGrads local;
  MultiboxGrads& g = grads ? *grads : local;
  g.grad_loc = Tensor({N, A, 4});
  g.grad_cls = Tensor({N, A, K});

  double loc_sum = 0.0, conf_sum = 0.0;
  int total_pos = 0, total_neg_selected = 0;

  struct Selected {
    int n, a, label;
  };
  std::vector<Selected> conf_anchors;

  for (int n = 0; n < N; ++n) {
    const MatchResult& m = matches[static_cast<size_t>(n)];
    if (static_cast<int>(m.anchor_to_gt.size()) != A)
      throw DimensionError("multibox_loss: match size != anchor count");
    int n_pos = m.num_positive();
    total_pos += n_pos;

    // localization over positives
    for (int a = 0; a < A; ++a) {
      int gi = m.anchor_to_gt[static_cast<size_t>(a)];
      if (gi < 0) continue;
      auto t = encode_box(gts[static_cast<size_t>(n)][static_cast<size_t>(gi)].box,
                          anchors.anchors[static_cast<size_t>(a)],
                          anchors.v_center, anchors.v_size);
      for (int j = 0; j < 4; ++j) {
        double d = loc_pred.data[static_cast<size_t>(
                       (static_cast<int64_t>(n) * A + a) * 4 + j)] -
                   t[static_cast<size_t>(j)];
        if (std::abs(d) < 1.0) {
          loc_sum += 0.5 * d * d;
          g.grad_loc.data[static_cast<size_t>(
              (static_cast<int64_t>(n) * A + a) * 4 + j)] = d;
        } else {
          loc_sum += std::abs(d) - 0.5;
          g.grad_loc.data[static_cast<size_t>(
              (static_cast<int64_t>(n) * A + a) * 4 + j)] = d > 0 ? 1.0 : -1.0;
        }
      }
      conf_anchors.push_back(
          {n, a, gts[static_cast<size_t>(n)][static_cast<size_t>(gi)].class_id});
    }

    // hard negative mining, ranked by background-class loss
    Tensor neg_logits({std::max(1, A - n_pos), K});
    std::vector<int> neg_idx;
    neg_idx.reserve(static_cast<size_t>(A));
    int r = 0;
    for (int a = 0; a < A; ++a) {
      if (m.anchor_to_gt[static_cast<size_t>(a)] >= 0) continue;
      for (int k = 0; k < K; ++k)
        neg_logits.data[static_cast<size_t>(r * K + k)] =
            cls_pred.data[static_cast<size_t>(
                (static_cast<int64_t>(n) * A + a) * K + k)];
      neg_idx.push_back(a);
      ++r;
    }
    int want = neg_pos_ratio * std::max(n_pos, 1);
    if (r > 0 && want > 0) {
      Tensor logits({r, K},
                    std::vector<double>(neg_logits.data.begin(),
                                        neg_logits.data.begin() +
                                            static_cast<int64_t>(r) * K));
      SoftmaxCeResult ce =
          softmax_cross_entropy(logits, std::vector<int>(static_cast<size_t>(r), 0));
      std::vector<int> order(static_cast<size_t>(r));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
        return ce.loss[static_cast<size_t>(x)] > ce.loss[static_cast<size_t>(y)];
      });
      int take = std::min(want, r);
      total_neg_selected += take;
      for (int i = 0; i < take; ++i)
        conf_anchors.push_back({n, neg_idx[static_cast<size_t>(order[static_cast<size_t>(i)])], 0});
    }
  }

  // confidence loss over the selected anchors
  if (!conf_anchors.empty()) {
    Tensor logits({static_cast<int>(conf_anchors.size()), K});
    std::vector<int> labels(conf_anchors.size());
    for (size_t i = 0; i < conf_anchors.size(); ++i) {
      const auto& s = conf_anchors[i];
      for (int k = 0; k < K; ++k)
        logits.data[i * static_cast<size_t>(K) + static_cast<size_t>(k)] =
            cls_pred.data[static_cast<size_t>(
                (static_cast<int64_t>(s.n) * A + s.a) * K + k)];
      labels[i] = s.label;
    }
    SoftmaxCeResult ce = softmax_cross_entropy(logits, labels);
    double denom = total_pos > 0 ? static_cast<double>(total_pos)
                                 : static_cast<double>(std::max(1, total_neg_selected));
    for (size_t i = 0; i < conf_anchors.size(); ++i) {
      conf_sum += ce.loss[i];
      const auto& s = conf_anchors[i];
      for (int k = 0; k < K; ++k)
        g.grad_cls.data[static_cast<size_t>(
            (static_cast<int64_t>(s.n) * A + s.a) * K + k)] +=
            ce.grad_logits.data[i * static_cast<size_t>(K) +
                                static_cast<size_t>(k)] /
            denom;
    }
    conf_sum /= denom;
  }

  double loc_denom = total_pos > 0 ? static_cast<double>(total_pos) : 1.0;
  for (auto& v : g.grad_loc.data) v /= loc_denom;
  out.loc = loc_sum / loc_denom;
  out.conf = conf_sum;
  out.total = out.loc + out.conf;
  out.num_matched = total_pos;
  return out;
}

// Greedy NMS by descending score (ties by index); suppresses boxes with
// IoU > threshold against any kept box; keeps at most top_k.
inline std::vector<int> nms(const std::vector<Box>& boxes,
                            const std::vector<double>& scores,
                            double iou_threshold, int top_k) {
  if (boxes.size() != scores.size())
    throw DimensionError("nms: boxes/scores size mismatch");
  for (double s : scores)
    if (!std::isfinite(s)) throw ContractError("nms: non-finite score");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  std::vector<int> kept;
  for (int idx : order) {
    if (static_cast<int>(kept.size()) >= top_k) break;
    bool ok = true;
    for (int k : kept)
      if (iou(boxes[static_cast<size_t>(idx)], boxes[static_cast<size_t>(k)]) >
          iou_threshold) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(idx);
  }
  return kept;
}

struct Detection {
  int class_id = 0;  // >= 1
  double score = 0.0;
  Box box;
};

// Full inference post-processing for one image's (A,4)/(A,K) predictions.
inline std::vector<Detection> detect(const Tensor& loc_pred,
                                     const Tensor& cls_pred,
                                     const AnchorSet& anchors,
                                     double conf_threshold = 0.01,
                                     double nms_threshold = 0.45,
                                     int top_k = 200) {
  int A = loc_pred.shape[0];
  int K = cls_pred.shape[1];
  SoftmaxCeResult sm = softmax_cross_entropy(
      cls_pred, std::vector<int>(static_cast<size_t>(A), 0));
  std::vector<Detection> out;
  for (int cls = 1; cls < K; ++cls) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int a = 0; a < A; ++a) {
      double p = sm.probs.data[static_cast<size_t>(a * K + cls)];
      if (p < conf_threshold) continue;
      std::array<double, 4> t;
      for (int j = 0; j < 4; ++j)
        t[static_cast<size_t>(j)] =
            loc_pred.data[static_cast<size_t>(a * 4 + j)];
      Box b = decode_box(t, anchors.anchors[static_cast<size_t>(a)],
                         anchors.v_center, anchors.v_size);
      b.x1 = std::clamp(b.x1, 0.0, 1.0);
      b.y1 = std::clamp(b.y1, 0.0, 1.0);
      b.x2 = std::clamp(b.x2, 0.0, 1.0);
      b.y2 = std::clamp(b.y2, 0.0, 1.0);
      if (b.x1 >= b.x2 || b.y1 >= b.y2) continue;
      boxes.push_back(b);
      scores.push_back(p);
    }
    for (int k : nms(boxes, scores, nms_threshold, top_k))
      out.push_back({cls, scores[static_cast<size_t>(k)],
                     boxes[static_cast<size_t>(k)]});
  }
  return out;
}

}  // namespace scratchdet
