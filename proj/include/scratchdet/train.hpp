#pragma once

#include <algorithm>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "scratchdet/data.hpp"
#include "scratchdet/evalkit.hpp"
#include "scratchdet/landscape.hpp"
#include "scratchdet/model.hpp"

namespace scratchdet {

struct TrainConfig {
  double base_lr = 0.01;
  std::vector<double> milestones = {0.6, 0.8, 0.95};  // fractions of max_steps
  double lr_decay = 0.1;
  int batch_size = 16;
  int max_steps = 1000;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  uint64_t seed = 0;
  int checkpoint_interval = 0;  // 0 = final checkpoint only
};

struct LandscapeConfig {
  int window = 50;
  double blowup_factor = 10.0;
  int patience = 100;
};

struct EvalConfig {
  double iou_threshold = 0.5;
  std::string protocol = "voc11";  // or "allpoint"
  double conf_threshold = 0.01;
  double nms_threshold = 0.45;
  int top_k = 200;

  ApProtocol ap_protocol() const {
    if (protocol == "voc11") return ApProtocol::voc11;
    if (protocol == "allpoint") return ApProtocol::allpoint;
    throw ConfigError("eval.protocol must be voc11 or allpoint");
  }
};

struct RunConfig {
  BackboneConfig backbone;
  HeadConfig head;
  AnchorConfig anchor;
  TrainConfig train;
  LandscapeConfig landscape;
  EvalConfig eval;
  std::string manifest_path;

  void validate() const {
    backbone.validate();
    head.validate();
    if (train.base_lr <= 0) throw ConfigError("train.base_lr must be > 0");
    if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (train.max_steps < 1) throw ConfigError("train.max_steps must be >= 1");
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"base_lr", c.base_lr},
           {"milestones", c.milestones},
           {"lr_decay", c.lr_decay},
           {"batch_size", c.batch_size},
           {"max_steps", c.max_steps},
           {"momentum", c.momentum},
           {"weight_decay", c.weight_decay},
           {"seed", c.seed},
           {"checkpoint_interval", c.checkpoint_interval}};
}
inline void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.base_lr = j.value("base_lr", d.base_lr);
  c.milestones = j.value("milestones", d.milestones);
  c.lr_decay = j.value("lr_decay", d.lr_decay);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.seed = j.value("seed", d.seed);
  c.checkpoint_interval = j.value("checkpoint_interval", d.checkpoint_interval);
}
inline void to_json(json& j, const LandscapeConfig& c) {
  j = json{{"window", c.window},
           {"blowup_factor", c.blowup_factor},
           {"patience", c.patience}};
}
inline void from_json(const json& j, LandscapeConfig& c) {
  LandscapeConfig d;
  c.window = j.value("window", d.window);
  c.blowup_factor = j.value("blowup_factor", d.blowup_factor);
  c.patience = j.value("patience", d.patience);
}
inline void to_json(json& j, const EvalConfig& c) {
  j = json{{"iou_threshold", c.iou_threshold},
           {"protocol", c.protocol},
           {"conf_threshold", c.conf_threshold},
           {"nms_threshold", c.nms_threshold},
           {"top_k", c.top_k}};
}
inline void from_json(const json& j, EvalConfig& c) {
  EvalConfig d;
  c.iou_threshold = j.value("iou_threshold", d.iou_threshold);
  c.protocol = j.value("protocol", d.protocol);
  c.conf_threshold = j.value("conf_threshold", d.conf_threshold);
  c.nms_threshold = j.value("nms_threshold", d.nms_threshold);
  c.top_k = j.value("top_k", d.top_k);
}
inline void to_json(json& j, const RunConfig& c) {
  j = json{{"backbone", c.backbone}, {"head", c.head},
           {"anchor", c.anchor},     {"train", c.train},
           {"landscape", c.landscape}, {"eval", c.eval},
           {"manifest", c.manifest_path}};
}
inline void from_json(const json& j, RunConfig& c) {
  if (j.contains("backbone")) j.at("backbone").get_to(c.backbone);
  if (j.contains("head")) j.at("head").get_to(c.head);
  if (j.contains("anchor")) j.at("anchor").get_to(c.anchor);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("landscape")) j.at("landscape").get_to(c.landscape);
  if (j.contains("eval")) j.at("eval").get_to(c.eval);
  c.manifest_path = j.value("manifest", "");
}

inline RunConfig parse_run_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  RunConfig c = j.get<RunConfig>();
  c.validate();
  return c;
}

// --- Checkpoint --------------------------------------------------------------
//
// Layout: magic "SDCK" | u32 version | u64 header length | JSON header |
// little-endian float32 blobs in header order | SHA-256 of all preceding
// bytes. Saving rounds the live training state (parameters, momentum
// buffers, BN running stats) to float32 so a resumed run is bit-identical
// to an uninterrupted one that checkpointed at the same step.

namespace detail {

inline void round_to_f32(std::vector<double>& v) {
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

inline void append_f32(std::string& out, const std::vector<double>& v) {
  for (double x : v) {
    float f = static_cast<float>(x);
    char b[4];
    std::memcpy(b, &f, 4);
    out.append(b, 4);
  }
}

inline void read_f32(const char* p, std::vector<double>& v) {
  for (auto& x : v) {
    float f;
    std::memcpy(&f, p, 4);
    p += 4;
    x = static_cast<double>(f);
  }
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, DetectorModel& model,
                            const RunConfig& cfg, int64_t step) {
  json params = json::array();
  for (ParamTensor* p : model.params()) {
    detail::round_to_f32(p->value.data);
    detail::round_to_f32(p->momentum_buf.data);
    params.push_back(json{{"name", p->name}, {"shape", p->value.shape}});
  }
  json stats = json::array();
  for (auto& rs : model.running_stats()) {
    detail::round_to_f32(*rs.data);
    stats.push_back(json{{"name", rs.name},
                         {"size", static_cast<int>(rs.data->size())}});
  }
  json header = {{"run_config", cfg},
                 {"network_spec", model.backbone().spec()},
                 {"params", params},
                 {"running_stats", stats},
                 {"step", step},
                 {"rng_state", cfg.train.seed}};
  std::string hdr = header.dump();

  std::string out = "SDCK";
  uint32_t version = 1;
  uint64_t hlen = hdr.size();
  out.append(reinterpret_cast<const char*>(&version), 4);
  out.append(reinterpret_cast<const char*>(&hlen), 8);
  out += hdr;
  for (ParamTensor* p : model.params()) {
    detail::append_f32(out, p->value.data);
    detail::append_f32(out, p->momentum_buf.data);
  }
  for (auto& rs : model.running_stats()) detail::append_f32(out, *rs.data);
  auto digest = Sha256::of(out.data(), out.size());
  out.append(reinterpret_cast<const char*>(digest.data()), digest.size());

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_checkpoint: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

struct LoadedCheckpoint {
  RunConfig config;
  DetectorModel model;
  int64_t step = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  if (bytes.size() < 4 + 4 + 8 + 32 || bytes.substr(0, 4) != "SDCK")
    throw IntegrityError("checkpoint " + path + ": bad magic or truncated");
  auto digest = Sha256::of(bytes.data(), bytes.size() - 32);
  if (std::memcmp(digest.data(), bytes.data() + bytes.size() - 32, 32) != 0)
    throw IntegrityError("checkpoint " + path + ": SHA-256 digest mismatch");
  uint32_t version;
  uint64_t hlen;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&hlen, bytes.data() + 8, 8);
  if (version != 1)
    throw IntegrityError("checkpoint " + path + ": unsupported version");
  json header = json::parse(bytes.substr(16, hlen));

  LoadedCheckpoint lc;
  lc.config = header.at("run_config").get<RunConfig>();
  lc.step = header.at("step").get<int64_t>();
  lc.model = DetectorModel(lc.config.backbone, lc.config.head,
                           lc.config.anchor, lc.config.train.seed);

  const char* p = bytes.data() + 16 + hlen;
  auto params = lc.model.params();
  const json& jp = header.at("params");
  if (jp.size() != params.size())
    throw IntegrityError("checkpoint " + path + ": parameter list mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    if (jp[i].at("name").get<std::string>() != params[i]->name)
      throw IntegrityError("checkpoint " + path + ": parameter order mismatch");
    detail::read_f32(p, params[i]->value.data);
    p += params[i]->value.data.size() * 4;
    detail::read_f32(p, params[i]->momentum_buf.data);
    p += params[i]->momentum_buf.data.size() * 4;
  }
  auto stats = lc.model.running_stats();
  const json& js = header.at("running_stats");
  if (js.size() != stats.size())
    throw IntegrityError("checkpoint " + path + ": running-stat list mismatch");
  for (size_t i = 0; i < stats.size(); ++i) {
    detail::read_f32(p, *stats[i].data);
    p += stats[i].data->size() * 4;
  }
  return lc;
}

// --- Training loop -----------------------------------------------------------

inline double lr_at_step(const TrainConfig& t, int64_t step) {
  double lr = t.base_lr;
  for (double m : t.milestones)
    if (static_cast<double>(step) >= m * t.max_steps) lr *= t.lr_decay;
  return lr;
}

struct TrainResult {
  std::string status;  // "converging" or "diverged"
  std::string reason;
  double final_loss = 0.0;
  int64_t steps = 0;
  TrainingTrace trace;
};

// Deterministic batch sampling: the index stream is a pure function of
// (seed, step), so resumed runs see the same data order.
inline std::vector<int> sample_batch_ids(const TrainConfig& t,
                                         const std::vector<int>& pool,
                                         int64_t step) {
  if (pool.empty())
    throw ConfigError("sample_batch_ids: empty training pool");
  SeededRng r = SeededRng(t.seed).split(0x5a5a5a5aULL + static_cast<uint64_t>(step));
  std::vector<int> ids;
  for (int i = 0; i < t.batch_size; ++i)
    ids.push_back(pool[r.next_below(pool.size())]);
  return ids;
}

// Full loop: sample -> augment -> forward -> multibox loss -> backward ->
// record -> SGD -> divergence check. Stops early on divergence. Enabling the
// trace changes no weight (observation only).
// `stop_step` ends the session early (simulating an interruption) without
// touching the schedule, which is always laid out over cfg.train.max_steps.
inline TrainResult run_training(DetectorModel& model, const RunConfig& cfg,
                                const Manifest& mf, int64_t start_step = 0,
                                const std::string& checkpoint_path = "",
                                bool enable_trace = true,
                                const AugmentPolicy& policy = {},
                                int64_t stop_step = -1) {
  const TrainConfig& t = cfg.train;
  if (cfg.head.num_classes != mf.config.num_classes + 1)
    throw ConfigError("head.num_classes must be dataset classes + background ("
                      + std::to_string(mf.config.num_classes + 1) + "), got "
                      + std::to_string(cfg.head.num_classes));
  TrainResult res;
  res.trace.window = cfg.landscape.window;
  auto ann = load_annotations(mf);

  auto params = model.params();
  std::vector<const Tensor*> grad_view;
  for (ParamTensor* p : params) grad_view.push_back(&p->grad);

  double initial_loss = 0.0;
  int blowup_run = 0;
  std::string status = "converging", reason = "none";

  int64_t end_step = t.max_steps;
  if (stop_step >= 0) end_step = std::min<int64_t>(stop_step, end_step);
  int64_t step = start_step;
  for (; step < end_step; ++step) {
    auto ids = sample_batch_ids(t, mf.train_ids, step);
    std::vector<Sample> samples;
    SeededRng aug_rng =
        SeededRng(t.seed).split(0xA06ULL ^ static_cast<uint64_t>(step));
    for (int id : ids) {
      Sample s = load_sample(mf, id, &ann);
      samples.push_back(augment(s, aug_rng, policy));
    }
    Batch batch = make_batch(samples);
    LossBreakdown loss = model.train_step_backward(batch.images, batch.gts);
    double lr = lr_at_step(t, step);
    if (enable_trace)
      record_step(res.trace, step + 1, loss.total, grad_view, lr);

    // on-line divergence check
    if (step == start_step) initial_loss = loss.total;
    if (!std::isfinite(loss.total)) {
      status = "diverged";
      reason = "non_finite_loss";
      res.final_loss = loss.total;
      ++step;
      break;
    }
    if (loss.total > cfg.landscape.blowup_factor * initial_loss) {
      if (++blowup_run >= cfg.landscape.patience) {
        status = "diverged";
        reason = "sustained_blowup";
        res.final_loss = loss.total;
        ++step;
        break;
      }
    } else {
      blowup_run = 0;
    }

    sgd_step(params, lr, t.momentum, t.weight_decay);
    res.final_loss = loss.total;

    if (!checkpoint_path.empty() && t.checkpoint_interval > 0 &&
        (step + 1) % t.checkpoint_interval == 0)
      save_checkpoint(checkpoint_path, model, cfg, step + 1);
  }
  res.status = status;
  res.reason = reason;
  res.steps = step - start_step;
  if (!checkpoint_path.empty())
    save_checkpoint(checkpoint_path, model, cfg, step);
  return res;
}

// --- Evaluation --------------------------------------------------------------

inline EvalReport evaluate_model(DetectorModel& model, const RunConfig& cfg,
                                 const Manifest& mf,
                                 std::vector<DetectionRecord>* out_dets = nullptr) {
  auto ann = load_annotations(mf);
  std::vector<DetectionRecord> dets;
  std::vector<GroundTruth> gts;
  for (int id : mf.eval_ids) {
    Sample s = load_sample(mf, id, &ann);
    for (const auto& g : sample_gts_normalized(s))
      gts.push_back({id, g.class_id, g.box});
    Batch b = make_batch({s});
    auto per_image = model.predict(b.images, cfg.eval.conf_threshold,
                                   cfg.eval.nms_threshold, cfg.eval.top_k);
    for (const auto& d : per_image[0])
      dets.push_back({id, d.class_id, d.score, d.box});
  }
  if (out_dets) *out_dets = dets;
  return evaluate(dets, gts, cfg.head.num_classes, cfg.eval.iou_threshold,
                  cfg.eval.ap_protocol());
}

inline json report_to_json(const EvalReport& rep) {
  json per_class = json::object();
  for (const auto& [cls, ap] : rep.per_class_ap)
    per_class[std::to_string(cls)] = ap;
  json j = {{"per_class_ap", per_class}, {"map", rep.map}};
  j["ap_small"] = rep.ap_small ? json(*rep.ap_small) : json(nullptr);
  j["ap_medium"] = rep.ap_medium ? json(*rep.ap_medium) : json(nullptr);
  j["ap_large"] = rep.ap_large ? json(*rep.ap_large) : json(nullptr);
  return j;
}

}  // namespace scratchdet
