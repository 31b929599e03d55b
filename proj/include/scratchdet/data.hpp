#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "scratchdet/detector.hpp"
#include "scratchdet/sha256.hpp"
#include "scratchdet/tensor.hpp"

namespace scratchdet {

namespace fs = std::filesystem;

// 8-bit RGB raster.
struct Image {
  int width = 0, height = 0;
  std::vector<uint8_t> rgb;  // row-major, 3 bytes per pixel

  uint8_t& at(int x, int y, int c) {
    return rgb[static_cast<size_t>((y * width + x) * 3 + c)];
  }
  uint8_t at(int x, int y, int c) const {
    return rgb[static_cast<size_t>((y * width + x) * 3 + c)];
  }
};

struct PixelBox {
  int class_id = 1;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // pixel coordinates
};

struct Sample {
  int id = 0;
  Image image;
  std::vector<PixelBox> boxes;
};

// --- PPM (binary P6) --------------------------------------------------------

inline void write_ppm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_ppm: cannot open " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (!f) throw IoError("write_ppm: write failed for " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_ppm: cannot open " + path);
  std::string magic;
  f >> magic;
  int w = 0, h = 0, maxv = 0;
  f >> w >> h >> maxv;
  f.get();  // single whitespace after header
  if (magic != "P6" || w <= 0 || h <= 0 || maxv != 255)
    throw IoError("read_ppm: " + path + " is not a valid 8-bit P6 file");
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(img.rgb.data()),
         static_cast<std::streamsize>(img.rgb.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.rgb.size()))
    throw IoError("read_ppm: truncated pixel data in " + path);
  return img;
}

// --- Scene configuration ----------------------------------------------------

struct SceneConfig {
  int image_size = 96;
  int num_images = 500;
  int num_classes = 3;  // disk, square, triangle
  int min_objects = 1, max_objects = 3;
  double min_size_frac = 0.06, max_size_frac = 0.5;
  double small_object_fraction = 0.5;
  double noise_level = 18.0;
  uint64_t seed = 0;

  void validate() const {
    if (image_size < 16) throw ConfigError("image_size too small");
    if (num_images < 1) throw ConfigError("num_images must be >= 1");
    if (num_classes < 1 || num_classes > 3)
      throw ConfigError("num_classes must be in 1..3");
    if (min_objects < 0 || max_objects < min_objects)
      throw ConfigError("objects_per_image range is empty");
    if (min_size_frac <= 0 || max_size_frac >= 1 ||
        min_size_frac >= max_size_frac)
      throw ConfigError("size fractions must satisfy 0 < min < max < 1");
    if (small_object_fraction < 0 || small_object_fraction > 1)
      throw ConfigError("small_object_fraction must lie in [0,1]");
  }
};

inline void to_json(json& j, const SceneConfig& c) {
  j = json{{"image_size", c.image_size},
           {"num_images", c.num_images},
           {"num_classes", c.num_classes},
           {"min_objects", c.min_objects},
           {"max_objects", c.max_objects},
           {"min_size_frac", c.min_size_frac},
           {"max_size_frac", c.max_size_frac},
           {"small_object_fraction", c.small_object_fraction},
           {"noise_level", c.noise_level},
           {"seed", c.seed}};
}

inline void from_json(const json& j, SceneConfig& c) {
  SceneConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.num_images = j.value("num_images", d.num_images);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.min_objects = j.value("min_objects", d.min_objects);
  c.max_objects = j.value("max_objects", d.max_objects);
  c.min_size_frac = j.value("min_size_frac", d.min_size_frac);
  c.max_size_frac = j.value("max_size_frac", d.max_size_frac);
  c.small_object_fraction = j.value("small_object_fraction", d.small_object_fraction);
  c.noise_level = j.value("noise_level", d.noise_level);
  c.seed = j.value("seed", d.seed);
}

// --- Synthetic scene rendering ----------------------------------------------

namespace detail {

// Analytic membership test for the three shape kinds. (cx, cy) center and
// `half` half-extent, in pixel coordinates.
inline bool inside_shape(int kind, double px, double py, double cx, double cy,
                         double half) {
  double dx = px - cx, dy = py - cy;
  switch (kind) {
    case 0:  // disk
      return dx * dx + dy * dy <= half * half;
    case 1:  // axis-aligned square
      return std::abs(dx) <= half && std::abs(dy) <= half;
    default: {  // up-pointing isoceles triangle
      if (dy < -half || dy > half) return false;
      double t = (dy + half) / (2.0 * half);  // 0 at apex, 1 at base
      return std::abs(dx) <= t * half;
    }
  }
}

// 4x4 supersampled coverage in [0,1].
inline double coverage(int kind, int x, int y, double cx, double cy,
                       double half) {
  int hit = 0;
  for (int sy = 0; sy < 4; ++sy)
    for (int sx = 0; sx < 4; ++sx) {
      double px = x + (sx + 0.5) / 4.0;
      double py = y + (sy + 0.5) / 4.0;
      if (inside_shape(kind, px, py, cx, cy, half)) ++hit;
    }
  return hit / 16.0;
}

inline uint8_t clamp8(double v) {
  return static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
}

}  // namespace detail

// Renders one deterministic scene; the per-image rng stream comes from
// splitting the dataset seed by image index.
inline Sample render_scene(const SceneConfig& cfg, int image_index) {
  SeededRng rng = SeededRng(cfg.seed).split(static_cast<uint64_t>(image_index));
  int S = cfg.image_size;
  Sample s;
  s.id = image_index;
  s.image.width = S;
  s.image.height = S;
  s.image.rgb.resize(static_cast<size_t>(S) * S * 3);

  // textured background: base gray, slow gradient, per-pixel noise
  double base = rng.uniform(70.0, 120.0);
  double gx = rng.uniform(-0.3, 0.3), gy = rng.uniform(-0.3, 0.3);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double v = base + gx * x + gy * y;
      for (int c = 0; c < 3; ++c)
        s.image.at(x, y, c) = detail::clamp8(
            v + rng.uniform(-cfg.noise_level, cfg.noise_level));
    }

  static const double kBaseColor[3][3] = {
      {205, 70, 65},   // disk: red
      {70, 190, 80},   // square: green
      {75, 95, 215}};  // triangle: blue

  int count = cfg.min_objects +
              static_cast<int>(rng.next_below(
                  static_cast<uint64_t>(cfg.max_objects - cfg.min_objects + 1)));
  double small_side_max = 0.095;  // just under the small-bucket boundary
  for (int obj = 0; obj < count; ++obj) {
    for (int attempt = 0; attempt < 30; ++attempt) {
      int kind = static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.num_classes)));
      bool small = rng.next_double() < cfg.small_object_fraction;
      double lo = small ? std::max(cfg.min_size_frac, 0.04) : 0.11;
      double hi = small ? std::min(small_side_max, cfg.max_size_frac)
                        : cfg.max_size_frac;
      if (lo >= hi) { lo = cfg.min_size_frac; hi = cfg.max_size_frac; }
      double side = rng.uniform(lo, hi) * S;
      double half = side / 2.0;
      double cx = rng.uniform(half + 1.0, S - half - 1.0);
      double cy = rng.uniform(half + 1.0, S - half - 1.0);
      Box nb = {(cx - half) / S, (cy - half) / S, (cx + half) / S,
                (cy + half) / S};
      bool ok = true;
      for (const auto& pb : s.boxes) {
        Box other = {pb.x1 / S, pb.y1 / S, pb.x2 / S, pb.y2 / S};
        if (iou(nb, other) > 0.3) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;

      double color[3];
      for (int c = 0; c < 3; ++c)
        color[c] = kBaseColor[kind][c] + rng.uniform(-25.0, 25.0);
      int x0 = std::max(0, static_cast<int>(std::floor(cx - half)));
      int x1 = std::min(S - 1, static_cast<int>(std::ceil(cx + half)));
      int y0 = std::max(0, static_cast<int>(std::floor(cy - half)));
      int y1 = std::min(S - 1, static_cast<int>(std::ceil(cy + half)));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          double cov = detail::coverage(kind, x, y, cx, cy, half);
          if (cov <= 0.0) continue;
          for (int c = 0; c < 3; ++c)
            s.image.at(x, y, c) = detail::clamp8(
                (1.0 - cov) * s.image.at(x, y, c) + cov * color[c]);
        }
      PixelBox pb;
      pb.class_id = kind + 1;
      pb.x1 = std::max(0.0, cx - half);
      pb.y1 = std::max(0.0, cy - half);
      pb.x2 = std::min(static_cast<double>(S), cx + half);
      pb.y2 = std::min(static_cast<double>(S), cy + half);
      s.boxes.push_back(pb);
      break;
    }
  }
  return s;
}

// --- Dataset on disk ---------------------------------------------------------

struct Manifest {
  SceneConfig config;
  std::vector<int> train_ids;
  std::vector<int> eval_ids;
  std::string dir;
  std::string digest;  // SHA-256 over images + annotations

  std::string image_path(int id) const {
    std::ostringstream os;
    os << dir << "/img_" << id << ".ppm";
    return os.str();
  }
  std::string annotation_path() const { return dir + "/annotations.jsonl"; }
};

// Deterministic dataset generation: per-image seeds, PPM P6 images,
// JSON-lines annotations, manifest JSON with a content digest. The last 20%
// of images form the eval split.
inline Manifest generate_dataset(const SceneConfig& cfg,
                                 const std::string& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("generate_dataset: cannot create " + out_dir);

  Manifest mf;
  mf.config = cfg;
  mf.dir = out_dir;

  Sha256 hash;
  std::string ann;
  for (int i = 0; i < cfg.num_images; ++i) {
    Sample s = render_scene(cfg, i);
    write_ppm(s.image, mf.image_path(i));
    hash.update(s.image.rgb.data(), s.image.rgb.size());
    json boxes = json::array();
    for (const auto& b : s.boxes)
      boxes.push_back(json{{"class", b.class_id},
                           {"x1", b.x1},
                           {"y1", b.y1},
                           {"x2", b.x2},
                           {"y2", b.y2}});
    json line = {{"id", s.id}, {"boxes", boxes}};
    ann += line.dump();
    ann += "\n";
  }
  hash.update(ann.data(), ann.size());
  {
    std::ofstream f(mf.annotation_path(), std::ios::binary);
    if (!f) throw IoError("generate_dataset: cannot write annotations");
    f << ann;
  }
  int n_eval = std::max(1, cfg.num_images / 5);
  for (int i = 0; i < cfg.num_images; ++i)
    (i < cfg.num_images - n_eval ? mf.train_ids : mf.eval_ids).push_back(i);
  mf.digest = Sha256::hex(hash.digest());

  json j = {{"config", cfg},
            {"train", mf.train_ids},
            {"eval", mf.eval_ids},
            {"sha256", mf.digest}};
  std::ofstream f(out_dir + "/manifest.json", std::ios::binary);
  if (!f) throw IoError("generate_dataset: cannot write manifest");
  f << j.dump(2) << "\n";
  return mf;
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_manifest: cannot open " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("load_manifest: " + path + ": " + e.what());
  }
  Manifest mf;
  mf.config = j.at("config").get<SceneConfig>();
  mf.train_ids = j.at("train").get<std::vector<int>>();
  mf.eval_ids = j.at("eval").get<std::vector<int>>();
  mf.digest = j.value("sha256", "");
  mf.dir = fs::path(path).parent_path().string();
  if (mf.dir.empty()) mf.dir = ".";
  return mf;
}

// Reads one sample (image + annotations) back from disk.
inline Sample load_sample(const Manifest& mf, int id,
                          const std::vector<std::vector<PixelBox>>* ann_cache = nullptr) {
  Sample s;
  s.id = id;
  s.image = read_ppm(mf.image_path(id));
  if (ann_cache) {
    s.boxes = (*ann_cache)[static_cast<size_t>(id)];
    return s;
  }
  std::ifstream f(mf.annotation_path(), std::ios::binary);
  if (!f) throw IoError("load_sample: cannot open " + mf.annotation_path());
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (j.at("id").get<int>() != id) continue;
    for (const auto& b : j.at("boxes")) {
      PixelBox pb;
      pb.class_id = b.at("class").get<int>();
      pb.x1 = b.at("x1").get<double>();
      pb.y1 = b.at("y1").get<double>();
      pb.x2 = b.at("x2").get<double>();
      pb.y2 = b.at("y2").get<double>();
      s.boxes.push_back(pb);
    }
    return s;
  }
  throw IoError("load_sample: id " + std::to_string(id) + " not found in " +
                mf.annotation_path());
}

inline std::vector<std::vector<PixelBox>> load_annotations(const Manifest& mf) {
  std::vector<std::vector<PixelBox>> out(
      static_cast<size_t>(mf.config.num_images));
  std::ifstream f(mf.annotation_path(), std::ios::binary);
  if (!f) throw IoError("load_annotations: cannot open " + mf.annotation_path());
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    int id = j.at("id").get<int>();
    for (const auto& b : j.at("boxes")) {
      PixelBox pb;
      pb.class_id = b.at("class").get<int>();
      pb.x1 = b.at("x1").get<double>();
      pb.y1 = b.at("y1").get<double>();
      pb.x2 = b.at("x2").get<double>();
      pb.y2 = b.at("y2").get<double>();
      out[static_cast<size_t>(id)].push_back(pb);
    }
  }
  return out;
}

// --- Augmentation ------------------------------------------------------------

struct AugmentPolicy {
  bool hflip = true;
  bool ssd_crop = true;
  bool photometric = true;
  double force_hflip_prob = -1.0;  // >= 0 overrides the 0.5 coin, for tests
};

namespace detail {

inline uint8_t bilinear(const Image& img, double x, double y, int c) {
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
  int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  double fx = x - x0, fy = y - y0;
  double v = (1 - fx) * (1 - fy) * img.at(x0, y0, c) +
             fx * (1 - fy) * img.at(x1, y0, c) +
             (1 - fx) * fy * img.at(x0, y1, c) + fx * fy * img.at(x1, y1, c);
  return clamp8(std::round(v));
}

}  // namespace detail

// SSD-style augmentation: horizontal flip (p=0.5), min-IoU patch crop
// rescaled back to the native size (boxes kept iff their center lies in the
// crop), photometric brightness/contrast jitter within +/-12.5%.
inline Sample augment(const Sample& in, SeededRng& rng,
                      const AugmentPolicy& policy = {}) {
  Sample s = in;
  int S = s.image.width;

  if (policy.ssd_crop) {
    static const double kMinIous[] = {-1.0, 0.1, 0.3, 0.5, 0.7, 0.9};
    double min_iou = kMinIous[rng.next_below(6)];
    if (min_iou >= 0.0 && !s.boxes.empty()) {
      for (int attempt = 0; attempt < 50; ++attempt) {
        double scale = rng.uniform(0.3, 1.0);
        double ar = rng.uniform(0.5, 2.0);
        double cw = S * scale * std::sqrt(ar);
        double ch = S * scale / std::sqrt(ar);
        if (cw > S || ch > S) continue;
        double cx0 = rng.uniform(0.0, S - cw);
        double cy0 = rng.uniform(0.0, S - ch);
        Box crop = {cx0, cy0, cx0 + cw, cy0 + ch};
        bool satisfied = false;
        for (const auto& b : s.boxes) {
          Box bb = {b.x1, b.y1, b.x2, b.y2};
          if (iou(crop, bb) >= min_iou) {
            satisfied = true;
            break;
          }
        }
        if (!satisfied) continue;
        // keep boxes whose center falls inside the crop
        std::vector<PixelBox> kept;
        for (const auto& b : s.boxes) {
          double bx = (b.x1 + b.x2) / 2, by = (b.y1 + b.y2) / 2;
          if (bx < crop.x1 || bx >= crop.x2 || by < crop.y1 || by >= crop.y2)
            continue;
          PixelBox nb = b;
          nb.x1 = (std::clamp(b.x1, crop.x1, crop.x2) - crop.x1) * S / cw;
          nb.x2 = (std::clamp(b.x2, crop.x1, crop.x2) - crop.x1) * S / cw;
          nb.y1 = (std::clamp(b.y1, crop.y1, crop.y2) - crop.y1) * S / ch;
          nb.y2 = (std::clamp(b.y2, crop.y1, crop.y2) - crop.y1) * S / ch;
          if (nb.x2 - nb.x1 >= 1.0 && nb.y2 - nb.y1 >= 1.0) kept.push_back(nb);
        }
        if (kept.empty()) continue;
        Image out;
        out.width = out.height = S;
        out.rgb.resize(static_cast<size_t>(S) * S * 3);
        for (int y = 0; y < S; ++y)
          for (int x = 0; x < S; ++x) {
            double sx = crop.x1 + (x + 0.5) * cw / S - 0.5;
            double sy = crop.y1 + (y + 0.5) * ch / S - 0.5;
            for (int c = 0; c < 3; ++c)
              out.at(x, y, c) = detail::bilinear(s.image, sx, sy, c);
          }
        s.image = std::move(out);
        s.boxes = std::move(kept);
        break;
      }
    }
  }

  if (policy.hflip) {
    double p = policy.force_hflip_prob >= 0.0 ? policy.force_hflip_prob : 0.5;
    if (rng.next_double() < p) {
      Image out = s.image;
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
          for (int c = 0; c < 3; ++c)
            out.at(x, y, c) = s.image.at(S - 1 - x, y, c);
      s.image = std::move(out);
      for (auto& b : s.boxes) {
        double nx1 = S - b.x2, nx2 = S - b.x1;
        b.x1 = nx1;
        b.x2 = nx2;
      }
    }
  }

  if (policy.photometric) {
    double brightness = rng.uniform(-0.125, 0.125) * 255.0;
    double contrast = 1.0 + rng.uniform(-0.125, 0.125);
    for (auto& v : s.image.rgb)
      v = detail::clamp8((v - 127.5) * contrast + 127.5 + brightness);
  }
  return s;
}

// --- Batching ----------------------------------------------------------------

// Pixel -> [-1, 1]: v = px/127.5 - 1 (exactly invertible on bytes).
inline Tensor image_to_tensor(const Image& img, bool normalize = true) {
  Tensor t({1, 3, img.height, img.width});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        t.at(0, c, y, x) = normalize
                               ? img.at(x, y, c) / 127.5 - 1.0
                               : static_cast<double>(img.at(x, y, c));
  return t;
}

inline std::vector<GtObject> sample_gts_normalized(const Sample& s) {
  std::vector<GtObject> out;
  double S = s.image.width;
  for (const auto& b : s.boxes)
    out.push_back({b.class_id, {b.x1 / S, b.y1 / S, b.x2 / S, b.y2 / S}});
  return out;
}

struct Batch {
  Tensor images;                           // (N, 3, S, S)
  std::vector<std::vector<GtObject>> gts;  // normalized corner boxes
  std::vector<int> ids;
};

inline Batch make_batch(const std::vector<Sample>& samples, bool normalize = true) {
  if (samples.empty()) throw ContractError("make_batch: empty sample list");
  int S = samples[0].image.width;
  Batch b;
  b.images = Tensor({static_cast<int>(samples.size()), 3, S, S});
  for (size_t n = 0; n < samples.size(); ++n) {
    Tensor t = image_to_tensor(samples[n].image, normalize);
    std::copy(t.data.begin(), t.data.end(),
              b.images.data.begin() +
                  static_cast<int64_t>(n) * 3 * S * S);
    b.gts.push_back(sample_gts_normalized(samples[n]));
    b.ids.push_back(samples[n].id);
  }
  return b;
}

// Loads images by id from a manifest into a normalized NCHW batch.
inline Batch load_batch(const Manifest& mf, const std::vector<int>& indices,
                        bool normalize = true,
                        const std::vector<std::vector<PixelBox>>* ann = nullptr) {
  std::vector<Sample> samples;
  for (int id : indices) samples.push_back(load_sample(mf, id, ann));
  return make_batch(samples, normalize);
}

}  // namespace scratchdet
