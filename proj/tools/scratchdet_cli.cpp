// scratchdet command-line interface: dataset generation, training with the
// BN/learning-rate and backbone ablation grids, evaluation, and landscape
// trace export.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "scratchdet/train.hpp"

extern "C" void openblas_set_num_threads(int);

namespace fs = std::filesystem;
using namespace scratchdet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIntegrity = 3;

json read_json_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path);
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << text;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
  SceneConfig cfg = read_json_file(config_path).get<SceneConfig>();
  Manifest mf = generate_dataset(cfg, out_dir);
  std::cout << "dataset written to " << out_dir << " (" << cfg.num_images
            << " images, digest " << mf.digest << ")\n";
  return kExitOk;
}

RunConfig apply_overrides(RunConfig cfg, std::optional<uint64_t> seed,
                          const std::string& manifest_override) {
  if (seed) cfg.train.seed = *seed;
  if (!manifest_override.empty()) cfg.manifest_path = manifest_override;
  return cfg;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& resume, std::optional<uint64_t> seed,
              const std::string& manifest_override, int64_t stop_step) {
  RunConfig cfg = apply_overrides(parse_run_config(config_path), seed,
                                  manifest_override);
  if (cfg.manifest_path.empty())
    throw ConfigError("config has no manifest path (set \"manifest\")");
  Manifest mf = load_manifest(cfg.manifest_path);

  fs::create_directories(out_dir);
  // echo the effective config for provenance
  write_text(out_dir + "/config.json", json(cfg).dump(2) + "\n");

  DetectorModel model;
  int64_t start_step = 0;
  if (!resume.empty()) {
    LoadedCheckpoint lc = load_checkpoint(resume);
    model = std::move(lc.model);
    start_step = lc.step;
    cfg = lc.config;  // the run continues under its original config
  } else {
    model = DetectorModel(cfg.backbone, cfg.head, cfg.anchor, cfg.train.seed);
  }

  TrainResult res = run_training(model, cfg, mf, start_step,
                                 out_dir + "/checkpoint.sdck", true, {},
                                 stop_step);
  export_trace(res.trace, out_dir + "/trace.csv");
  json report = {{"status", res.status},
                 {"reason", res.reason},
                 {"final_loss", res.final_loss},
                 {"steps", res.steps}};
  write_text(out_dir + "/report.json", report.dump(2) + "\n");
  std::cout << report.dump() << "\n";
  return kExitOk;  // divergence is a reported outcome, not a failure
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest,
             const std::string& out_path) {
  LoadedCheckpoint lc = load_checkpoint(checkpoint);
  Manifest mf = load_manifest(manifest.empty() ? lc.config.manifest_path
                                               : manifest);
  std::vector<DetectionRecord> dets;
  EvalReport rep = evaluate_model(lc.model, lc.config, mf, &dets);
  json j = report_to_json(rep);
  write_text(out_path, j.dump(2) + "\n");
  // detections as JSON lines alongside the report
  std::string det_path =
      (fs::path(out_path).parent_path() / "detections.jsonl").string();
  std::string lines;
  for (const auto& d : dets) {
    json dj = {{"image_id", d.image_id},
               {"class", d.class_id},
               {"score", d.score},
               {"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}};
    lines += dj.dump();
    lines += "\n";
  }
  write_text(det_path, lines);
  std::cout << j.dump() << "\n";
  return kExitOk;
}

int cmd_ablate(const std::string& grid_path, const std::string& out_dir) {
  json grid = read_json_file(grid_path);
  RunConfig base;
  if (grid.contains("base")) grid.at("base").get_to(base);
  if (base.manifest_path.empty())
    throw ConfigError("grid config needs base.manifest");
  Manifest mf = load_manifest(base.manifest_path);

  auto bn_combos = grid.value("bn", std::vector<std::vector<bool>>{});
  if (bn_combos.empty())
    bn_combos = {{base.backbone.bn_in_backbone, base.head.bn_in_head}};
  auto lrs = grid.value("lr", std::vector<double>{base.train.base_lr});
  auto strides = grid.value("first_conv_stride",
                            std::vector<int>{base.backbone.first_conv_stride});
  auto roots = grid.value("root_depth",
                          std::vector<int>{base.backbone.root_depth});
  auto seeds = grid.value("seeds", std::vector<uint64_t>{base.train.seed});

  fs::create_directories(out_dir);
  std::string csv =
      "bn_backbone,bn_head,lr,first_conv_stride,root_depth,seed,status,"
      "final_loss,map,ap_small\n";
  int cell = 0;
  for (const auto& bn : bn_combos)
    for (double lr : lrs)
      for (int stride : strides)
        for (int root : roots)
          for (uint64_t seed : seeds) {
            RunConfig cfg = base;
            cfg.backbone.bn_in_backbone = bn.at(0);
            cfg.head.bn_in_head = bn.at(1);
            cfg.train.base_lr = lr;
            cfg.backbone.first_conv_stride = stride;
            cfg.backbone.root_depth = root;
            if (root > 1) cfg.backbone.first_conv_kernel = 3;
            cfg.train.seed = seed;
            std::ostringstream row;
            row << (bn.at(0) ? 1 : 0) << ',' << (bn.at(1) ? 1 : 0) << ','
                << lr << ',' << stride << ',' << root << ',' << seed << ',';
            try {
              DetectorModel model(cfg.backbone, cfg.head, cfg.anchor,
                                  cfg.train.seed);
              std::string cell_dir =
                  out_dir + "/cell_" + std::to_string(cell);
              fs::create_directories(cell_dir);
              TrainResult res = run_training(model, cfg, mf, 0,
                                             cell_dir + "/checkpoint.sdck");
              export_trace(res.trace, cell_dir + "/trace.csv");
              if (res.status == "diverged") {
                row << "diverged," << res.final_loss << ",,";
              } else {
                EvalReport rep = evaluate_model(model, cfg, mf);
                row << "converging," << res.final_loss << ',' << rep.map
                    << ',' << (rep.ap_small ? std::to_string(*rep.ap_small) : "");
              }
            } catch (const std::exception& e) {
              row << "error,,,";
              std::cerr << "cell " << cell << " failed: " << e.what() << "\n";
            }
            csv += row.str() + "\n";
            ++cell;
          }
  write_text(out_dir + "/ablation.csv", csv);
  std::cout << "wrote " << out_dir << "/ablation.csv (" << cell << " cells)\n";
  return kExitOk;
}

int cmd_landscape(const std::vector<std::string>& trace_paths,
                  const std::string& out_path) {
  // Values are copied verbatim from the source CSVs so the merged file is
  // byte-faithful.
  static const char* kHeader = "step,loss,grad_norm,grad_fluct,lr";
  std::string out = "run,step,metric,value\n";
  for (const auto& path : trace_paths) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open trace " + path);
    std::string line;
    if (!std::getline(f, line) || line != kHeader)
      throw ConfigError("trace " + path + ": unexpected header");
    std::string run = fs::path(path).parent_path().filename().string();
    if (run.empty()) run = path;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string step, loss, gnorm, fluct, lr;
      std::getline(ss, step, ',');
      std::getline(ss, loss, ',');
      std::getline(ss, gnorm, ',');
      std::getline(ss, fluct, ',');
      std::getline(ss, lr, ',');
      out += run + "," + step + ",loss," + loss + "\n";
      out += run + "," + step + ",grad_norm," + gnorm + "\n";
      if (!fluct.empty()) out += run + "," + step + ",grad_fluct," + fluct + "\n";
      out += run + "," + step + ",lr," + lr + "\n";
    }
  }
  write_text(out_path, out);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  int threads = 1;
  if (const char* env = std::getenv("SCRATCHDET_THREADS")) {
    threads = std::max(1, std::atoi(env));
  }
  openblas_set_num_threads(threads);

  CLI::App app{"scratchdet: train-from-scratch single-shot detector"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", resume, manifest, checkpoint,
              out_path = "report.json";
  std::optional<uint64_t> seed;
  std::vector<std::string> traces;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "SceneConfig JSON")->required();
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a detector");
  train->add_option("--config", config_path, "RunConfig JSON")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_option("--seed", seed, "override train.seed");
  train->add_option("--manifest", manifest, "override dataset manifest");
  int64_t stop_step = -1;
  train->add_option("--stop-step", stop_step,
                    "stop this session after N total steps (simulates an "
                    "interruption; the schedule still spans max_steps)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  eval->add_option("--manifest", manifest, "dataset manifest");
  eval->add_option("--out", out_path, "report JSON path")->required();

  auto* ablate = app.add_subcommand("ablate", "run a configuration grid");
  ablate->add_option("--config", config_path, "grid JSON")->required();
  ablate->add_option("--out", out_dir, "output directory")->required();

  auto* land = app.add_subcommand("landscape", "merge traces for plotting");
  land->add_option("--traces", traces, "trace.csv paths")->required();
  land->add_option("--out", out_path, "merged CSV path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_dir);
    if (train->parsed())
      return cmd_train(config_path, out_dir, resume, seed, manifest,
                       stop_step);
    if (eval->parsed()) return cmd_eval(checkpoint, manifest, out_path);
    if (ablate->parsed()) return cmd_ablate(config_path, out_dir);
    if (land->parsed()) return cmd_landscape(traces, out_path);
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return kExitIntegrity;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
