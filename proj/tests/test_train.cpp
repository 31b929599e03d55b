#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "scratchdet/train.hpp"

using namespace scratchdet;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f);
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

// Tiny 32-px setup so end-to-end tests run in seconds.
RunConfig tiny_config(const std::string& manifest) {
  RunConfig cfg;
  cfg.backbone.input_size = 32;
  cfg.backbone.target_ladder = {4, 2, 1};
  cfg.backbone.stage_channels = {8, 16, 16};
  cfg.backbone.stage_blocks = {1, 1, 1};
  cfg.backbone.root_depth = 1;
  cfg.backbone.extra_block_channels = 16;
  cfg.head.num_classes = 3;
  cfg.train.batch_size = 2;
  cfg.train.max_steps = 12;
  cfg.train.seed = 17;
  cfg.manifest_path = manifest;
  return cfg;
}

Manifest tiny_dataset(const char* name) {
  SceneConfig sc;
  sc.image_size = 32;
  sc.num_images = 10;
  sc.num_classes = 2;
  sc.max_objects = 2;
  sc.seed = 40;
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return generate_dataset(sc, dir.string());
}

}  // namespace

TEST_CASE("lr schedule: base for 60%, then x0.1 at 60/80/95% of max steps") {
  TrainConfig t;
  t.base_lr = 0.05;
  t.max_steps = 1000;
  REQUIRE(lr_at_step(t, 0) == 0.05);
  REQUIRE(lr_at_step(t, 599) == 0.05);
  REQUIRE_THAT(lr_at_step(t, 600), Catch::Matchers::WithinRel(0.005, 1e-12));
  REQUIRE_THAT(lr_at_step(t, 799), Catch::Matchers::WithinRel(0.005, 1e-12));
  REQUIRE_THAT(lr_at_step(t, 800), Catch::Matchers::WithinRel(5e-4, 1e-12));
  REQUIRE_THAT(lr_at_step(t, 950), Catch::Matchers::WithinRel(5e-5, 1e-12));
  REQUIRE_THAT(lr_at_step(t, 999), Catch::Matchers::WithinRel(5e-5, 1e-12));
}

TEST_CASE("run config JSON round-trip and parse errors") {
  RunConfig c;
  c.backbone.first_conv_stride = 2;
  c.head.bn_in_head = false;
  c.head.num_classes = 4;
  c.train.base_lr = 0.05;
  c.train.milestones = {0.5, 0.9};
  c.eval.protocol = "allpoint";
  c.manifest_path = "/tmp/m.json";
  json j = c;
  RunConfig back = j.get<RunConfig>();
  REQUIRE(back.backbone.first_conv_stride == 2);
  REQUIRE_FALSE(back.head.bn_in_head);
  REQUIRE(back.head.num_classes == 4);
  REQUIRE(back.train.base_lr == 0.05);
  REQUIRE(back.train.milestones == std::vector<double>{0.5, 0.9});
  REQUIRE(back.eval.protocol == "allpoint");
  REQUIRE(back.manifest_path == "/tmp/m.json");

  // defaults survive a sparse config
  RunConfig sparse = json::parse(R"({"train":{"base_lr":0.001}})").get<RunConfig>();
  REQUIRE(sparse.train.base_lr == 0.001);
  REQUIRE(sparse.train.momentum == 0.9);
  REQUIRE(sparse.train.weight_decay == 0.0005);
  REQUIRE(sparse.backbone.input_size == 96);

  std::string bad = (fs::temp_directory_path() / "bad.json").string();
  std::ofstream(bad) << "{not json";
  REQUIRE_THROWS_AS(parse_run_config(bad), ConfigError);
  REQUIRE_THROWS_AS(parse_run_config("/nonexistent.json"), ConfigError);
  std::ofstream(bad) << R"({"train":{"base_lr":-1}})";
  REQUIRE_THROWS_AS(parse_run_config(bad), ConfigError);
  fs::remove(bad);
}

TEST_CASE("batch sampling is a pure function of seed and step") {
  TrainConfig t;
  t.seed = 5;
  t.batch_size = 4;
  std::vector<int> pool{0, 1, 2, 3, 4, 5, 6, 7};
  auto a = sample_batch_ids(t, pool, 3);
  auto b = sample_batch_ids(t, pool, 3);
  REQUIRE(a == b);
  REQUIRE(a.size() == 4);
  for (int id : a) REQUIRE(std::count(pool.begin(), pool.end(), id) == 1);
  REQUIRE(sample_batch_ids(t, pool, 4) != a);
  TrainConfig t2 = t;
  t2.seed = 6;
  REQUIRE(sample_batch_ids(t2, pool, 3) != a);
}

TEST_CASE("checkpoint save/load round-trip and integrity checks") {
  Manifest mf = tiny_dataset("ckpt_ds");
  RunConfig cfg = tiny_config(mf.dir + "/manifest.json");
  DetectorModel model(cfg.backbone, cfg.head, cfg.anchor, cfg.train.seed);

  std::string p = (fs::temp_directory_path() / "m.sdck").string();
  save_checkpoint(p, model, cfg, 7);
  // save quantizes the live state, so the loaded copy matches it exactly
  LoadedCheckpoint lc = load_checkpoint(p);
  REQUIRE(lc.step == 7);
  REQUIRE(lc.config.train.seed == cfg.train.seed);
  auto pa = model.params();
  auto pb = lc.model.params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i]->name == pb[i]->name);
    REQUIRE(pa[i]->value.data == pb[i]->value.data);
    REQUIRE(pa[i]->momentum_buf.data == pb[i]->momentum_buf.data);
  }
  auto sa = model.running_stats();
  auto sb = lc.model.running_stats();
  REQUIRE(sa.size() == sb.size());
  for (size_t i = 0; i < sa.size(); ++i) REQUIRE(*sa[i].data == *sb[i].data);

  // single-bit corruption is caught
  std::string bytes = slurp(p);
  std::string corrupted = bytes;
  corrupted[bytes.size() / 2] ^= 1;
  std::ofstream(p, std::ios::binary).write(corrupted.data(),
                                           static_cast<std::streamsize>(corrupted.size()));
  REQUIRE_THROWS_AS(load_checkpoint(p), IntegrityError);

  // truncation is caught
  std::ofstream(p, std::ios::binary).write(bytes.data(), 20);
  REQUIRE_THROWS_AS(load_checkpoint(p), IntegrityError);

  // wrong magic
  std::string wrong = "XXXX" + bytes.substr(4);
  std::ofstream(p, std::ios::binary).write(wrong.data(),
                                           static_cast<std::streamsize>(wrong.size()));
  REQUIRE_THROWS_AS(load_checkpoint(p), IntegrityError);
  fs::remove(p);
}

TEST_CASE("training is deterministic and checkpoint resume is bitwise exact") {
  Manifest mf = tiny_dataset("resume_ds");
  RunConfig cfg = tiny_config(mf.dir + "/manifest.json");
  cfg.train.max_steps = 12;
  cfg.train.checkpoint_interval = 6;

  fs::path dir = fs::temp_directory_path() / "resume_out";
  fs::remove_all(dir);
  fs::create_directories(dir);

  // run A: 12 uninterrupted steps
  DetectorModel a(cfg.backbone, cfg.head, cfg.anchor, cfg.train.seed);
  std::string ck_a = (dir / "a.sdck").string();
  TrainResult ra = run_training(a, cfg, mf, 0, ck_a);
  REQUIRE(ra.status == "converging");
  REQUIRE(ra.steps == 12);
  REQUIRE(ra.trace.records.size() == 12);

  // run B: identical seed and config reproduces the trace exactly
  DetectorModel b(cfg.backbone, cfg.head, cfg.anchor, cfg.train.seed);
  std::string ck_b = (dir / "b.sdck").string();
  TrainResult rb = run_training(b, cfg, mf, 0, ck_b);
  for (size_t i = 0; i < ra.trace.records.size(); ++i) {
    REQUIRE(ra.trace.records[i].loss == rb.trace.records[i].loss);
    REQUIRE(ra.trace.records[i].grad_norm == rb.trace.records[i].grad_norm);
  }
  REQUIRE(slurp(ck_a) == slurp(ck_b));

  // run C: interrupt at step 6, reload, resume to 12; final checkpoint is
  // identical (the schedule is still laid out over the full 12 steps)
  DetectorModel c(cfg.backbone, cfg.head, cfg.anchor, cfg.train.seed);
  std::string ck_c = (dir / "c.sdck").string();
  run_training(c, cfg, mf, 0, ck_c, true, {}, 6);
  LoadedCheckpoint lc = load_checkpoint(ck_c);
  REQUIRE(lc.step == 6);
  TrainResult rc = run_training(lc.model, cfg, mf, 6, ck_c);
  REQUIRE(rc.steps == 6);
  REQUIRE(slurp(ck_c) == slurp(ck_a));
  // the resumed trace continues the original one exactly
  for (size_t i = 0; i < rc.trace.records.size(); ++i) {
    REQUIRE(rc.trace.records[i].step == ra.trace.records[i + 6].step);
    REQUIRE(rc.trace.records[i].loss == ra.trace.records[i + 6].loss);
    REQUIRE(rc.trace.records[i].grad_norm ==
            ra.trace.records[i + 6].grad_norm);
  }

  fs::remove_all(dir);
}

TEST_CASE("an absurd learning rate is flagged as diverged") {
  Manifest mf = tiny_dataset("diverge_ds");
  RunConfig cfg = tiny_config(mf.dir + "/manifest.json");
  cfg.train.base_lr = 1000.0;
  cfg.train.max_steps = 60;
  cfg.landscape.patience = 10;
  DetectorModel model(cfg.backbone, cfg.head, cfg.anchor, cfg.train.seed);
  TrainResult r = run_training(model, cfg, mf);
  REQUIRE(r.status == "diverged");
  REQUIRE((r.reason == "non_finite_loss" || r.reason == "sustained_blowup"));
  REQUIRE(r.steps < 60);
}

TEST_CASE("class count must match the dataset") {
  Manifest mf = tiny_dataset("clsmatch_ds");
  RunConfig cfg = tiny_config(mf.dir + "/manifest.json");
  cfg.head.num_classes = 5;  // dataset has 2 classes -> needs 3
  DetectorModel model(cfg.backbone, cfg.head, cfg.anchor, cfg.train.seed);
  REQUIRE_THROWS_AS(run_training(model, cfg, mf), ConfigError);
}

TEST_CASE("evaluate_model produces a sane report") {
  Manifest mf = tiny_dataset("eval_ds");
  RunConfig cfg = tiny_config(mf.dir + "/manifest.json");
  cfg.train.max_steps = 30;
  DetectorModel model(cfg.backbone, cfg.head, cfg.anchor, cfg.train.seed);
  run_training(model, cfg, mf);
  std::vector<DetectionRecord> dets;
  EvalReport rep = evaluate_model(model, cfg, mf, &dets);
  REQUIRE(rep.map >= 0.0);
  REQUIRE(rep.map <= 1.0);
  for (const auto& [cls, ap] : rep.per_class_ap) {
    REQUIRE(cls >= 1);
    REQUIRE(cls < cfg.head.num_classes);
    REQUIRE(ap >= 0.0);
    REQUIRE(ap <= 1.0);
  }
  json j = report_to_json(rep);
  REQUIRE(j.contains("map"));
  REQUIRE(j.contains("ap_small"));
}

TEST_CASE("batch sampling rejects an empty training pool") {
  TrainConfig t;
  REQUIRE_THROWS_AS(sample_batch_ids(t, {}, 0), ConfigError);
}
