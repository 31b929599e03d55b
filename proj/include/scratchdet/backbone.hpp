#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "scratchdet/error.hpp"

namespace scratchdet {

using json = nlohmann::json;

// One node in the declarative layer graph. Node 0 is the network input;
// layer i produces node i+1. `input` / `input2` are node indices.
struct LayerDesc {
  enum class Kind { Conv, BatchNorm, ReLU, MaxPool, Add };
  Kind kind = Kind::Conv;
  int input = -1;
  int input2 = -1;  // Add only
  int in_ch = 0, out_ch = 0;
  int kernel = 0, stride = 1, pad = 0;
  bool bias = true;
  std::string name;
};

struct NetworkSpec {
  int input_channels = 3;
  int input_size = 0;
  std::vector<LayerDesc> layers;
  std::vector<int> detection_taps;   // node indices
  std::vector<int> tap_sizes;        // expected spatial size per tap
  std::vector<int> tap_channels;

  int num_nodes() const { return static_cast<int>(layers.size()) + 1; }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& l : layers) {
      if (l.kind == LayerDesc::Kind::Conv) {
        n += static_cast<int64_t>(l.out_ch) * l.in_ch * l.kernel * l.kernel;
        if (l.bias) n += l.out_ch;
      } else if (l.kind == LayerDesc::Kind::BatchNorm) {
        n += 2 * static_cast<int64_t>(l.in_ch);
      }
    }
    return n;
  }

  int batchnorm_count() const {
    int n = 0;
    for (const auto& l : layers)
      if (l.kind == LayerDesc::Kind::BatchNorm) ++n;
    return n;
  }
};

// Shape inference over the graph: per node (channels, spatial size).
struct NodeShape {
  int channels = 0;
  int size = 0;
};

inline std::vector<NodeShape> infer_shapes(const NetworkSpec& spec) {
  std::vector<NodeShape> shapes(static_cast<size_t>(spec.num_nodes()));
  shapes[0] = {spec.input_channels, spec.input_size};
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const NodeShape in = shapes[static_cast<size_t>(l.input)];
    NodeShape out = in;
    switch (l.kind) {
      case LayerDesc::Kind::Conv:
        if (in.channels != l.in_ch)
          throw DimensionError("layer " + l.name + ": expects " +
                               std::to_string(l.in_ch) + " channels, got " +
                               std::to_string(in.channels));
        out.channels = l.out_ch;
        out.size = (in.size + 2 * l.pad - l.kernel) / l.stride + 1;
        if (in.size + 2 * l.pad < l.kernel)
          throw DimensionError("layer " + l.name + ": kernel too large");
        break;
      case LayerDesc::Kind::MaxPool:
        if (in.size < l.kernel)
          throw DimensionError("layer " + l.name + ": pool window too large");
        out.size = (in.size - l.kernel) / l.stride + 1;
        break;
      case LayerDesc::Kind::Add: {
        const NodeShape in2 = shapes[static_cast<size_t>(l.input2)];
        if (in.channels != in2.channels || in.size != in2.size)
          throw DimensionError("layer " + l.name +
                               ": add branch shape mismatch");
        break;
      }
      case LayerDesc::Kind::BatchNorm:
      case LayerDesc::Kind::ReLU:
        break;
    }
    shapes[i + 1] = out;
  }
  return shapes;
}

// ---------------------------------------------------------------------------

struct BackboneConfig {
  int first_conv_kernel = 3;         // {3, 7}
  int first_conv_stride = 1;         // {1, 2}
  int root_depth = 3;                // stacked 3x3 convs when > 1
  bool use_first_maxpool = true;
  std::vector<int> stage_channels = {16, 32, 64, 64};
  std::vector<int> stage_blocks = {2, 2, 2, 2};
  bool bn_in_backbone = true;
  int input_size = 96;
  std::vector<int> target_ladder = {12, 6, 3, 1};
  int extra_block_channels = 128;

  void validate() const {
    if (first_conv_kernel != 3 && first_conv_kernel != 7)
      throw ConfigError("first_conv_kernel must be 3 or 7");
    if (first_conv_stride != 1 && first_conv_stride != 2)
      throw ConfigError("first_conv_stride must be 1 or 2");
    if (root_depth < 1 || root_depth > 5)
      throw ConfigError("root_depth must be in 1..5");
    if (root_depth > 1 && first_conv_kernel != 3)
      throw ConfigError("root_depth > 1 requires first_conv_kernel == 3");
    if (stage_channels.empty() || stage_channels.size() != stage_blocks.size())
      throw ConfigError("stage_channels/stage_blocks length mismatch");
    if (target_ladder.size() < 2)
      throw ConfigError("target_ladder needs at least 2 entries");
    for (size_t i = 1; i < target_ladder.size(); ++i)
      if (target_ladder[i] >= target_ladder[i - 1])
        throw ConfigError("target_ladder must be strictly decreasing");
    if (target_ladder.back() < 1) throw ConfigError("ladder entries must be >= 1");
    if (input_size < 8) throw ConfigError("input_size too small");
  }
};

namespace detail {

// Spatial size after a stride-2 3x3 pad-1 (or 7x7 pad-3) conv.
inline int ceil_halve(int n) { return (n - 1) / 2 + 1; }

// Graph assembly helper.
struct SpecBuilder {
  NetworkSpec spec;
  int last = 0;  // most recent node

  explicit SpecBuilder(int in_ch, int in_size) {
    spec.input_channels = in_ch;
    spec.input_size = in_size;
  }

  int add(LayerDesc l) {
    spec.layers.push_back(std::move(l));
    last = static_cast<int>(spec.layers.size());
    return last;
  }

  int conv(const std::string& name, int from, int in_ch, int out_ch, int k,
           int stride, int pad, bool bias) {
    LayerDesc l;
    l.kind = LayerDesc::Kind::Conv;
    l.input = from;
    l.in_ch = in_ch;
    l.out_ch = out_ch;
    l.kernel = k;
    l.stride = stride;
    l.pad = pad;
    l.bias = bias;
    l.name = name;
    return add(l);
  }

  int bn(const std::string& name, int from, int ch) {
    LayerDesc l;
    l.kind = LayerDesc::Kind::BatchNorm;
    l.input = from;
    l.in_ch = l.out_ch = ch;
    l.name = name;
    return add(l);
  }

  int relu(const std::string& name, int from, int ch) {
    LayerDesc l;
    l.kind = LayerDesc::Kind::ReLU;
    l.input = from;
    l.in_ch = l.out_ch = ch;
    l.name = name;
    return add(l);
  }

  int maxpool(const std::string& name, int from, int ch, int k, int stride) {
    LayerDesc l;
    l.kind = LayerDesc::Kind::MaxPool;
    l.input = from;
    l.in_ch = l.out_ch = ch;
    l.kernel = k;
    l.stride = stride;
    l.name = name;
    return add(l);
  }

  int add_nodes(const std::string& name, int a, int b, int ch) {
    LayerDesc l;
    l.kind = LayerDesc::Kind::Add;
    l.input = a;
    l.input2 = b;
    l.in_ch = l.out_ch = ch;
    l.name = name;
    return add(l);
  }

  // conv [+ BN] + ReLU
  int conv_bn_relu(const std::string& name, int from, int in_ch, int out_ch,
                   int k, int stride, int pad, bool use_bn) {
    int n = conv(name, from, in_ch, out_ch, k, stride, pad, !use_bn);
    if (use_bn) n = bn(name + ".bn", n, out_ch);
    return relu(name + ".relu", n, out_ch);
  }

  // Standard basic residual block; 1x1 projection shortcut when the channel
  // count or stride changes.
  int basic_block(const std::string& name, int from, int in_ch, int out_ch,
                  int stride, bool use_bn) {
    int n = conv(name + ".conv1", from, in_ch, out_ch, 3, stride, 1, !use_bn);
    if (use_bn) n = bn(name + ".bn1", n, out_ch);
    n = relu(name + ".relu1", n, out_ch);
    n = conv(name + ".conv2", n, out_ch, out_ch, 3, 1, 1, !use_bn);
    if (use_bn) n = bn(name + ".bn2", n, out_ch);
    int shortcut = from;
    if (stride != 1 || in_ch != out_ch) {
      shortcut = conv(name + ".proj", from, in_ch, out_ch, 1, stride, 0, !use_bn);
      if (use_bn) shortcut = bn(name + ".proj_bn", shortcut, out_ch);
    }
    n = add_nodes(name + ".add", n, shortcut, out_ch);
    return relu(name + ".relu2", n, out_ch);
  }
};

// Solve (stride, pad) so a k-kernel conv maps spatial size n to m.
inline bool solve_downsample(int n, int m, int k, int& stride, int& pad) {
  for (int s = 2; s <= n; ++s)
    for (int p = 0; p <= 3; ++p) {
      if (n + 2 * p < k) continue;
      if ((n + 2 * p - k) / s + 1 == m) {
        stride = s;
        pad = p;
        return true;
      }
    }
  return false;
}

}  // namespace detail

// The paper's root block: one conv of the configured kernel when depth == 1,
// otherwise `depth` stacked 3x3 convs (the first carries the configured
// stride), each followed by BN+ReLU when enabled.
inline void build_root_block(detail::SpecBuilder& b, int depth, int channels,
                             int in_channels, int kernel, int stride,
                             bool use_bn) {
  if (depth < 1 || depth > 5)
    throw ConfigError("root block depth must be in 1..5");
  if (depth > 1) kernel = 3;
  int pad = (kernel - 1) / 2;
  int n = b.last;
  for (int d = 0; d < depth; ++d) {
    std::string name = "root.conv" + std::to_string(d + 1);
    n = b.conv_bn_relu(name, n, d == 0 ? in_channels : channels, channels,
                       d == 0 ? kernel : 3, d == 0 ? stride : 1,
                       d == 0 ? pad : 1, use_bn);
  }
}

// Residual downsampling blocks appended after the backbone stages. Two
// branches summed: a 1x1 conv and a 3x3 conv followed by a 3x3 stride-1
// conv; strides/pads are solved per block from the size transition.
inline void build_extra_blocks(detail::SpecBuilder& b,
                               const std::vector<int>& sizes, int in_channels,
                               int channels, bool use_bn,
                               std::vector<int>* taps) {
  int in_ch = in_channels;
  int cur = sizes.empty() ? 0 : sizes[0];
  for (size_t i = 1; i < sizes.size(); ++i) {
    int target = sizes[i];
    std::string name = "extra" + std::to_string(i);
    int sa, pa, sb, pb;
    if (!detail::solve_downsample(cur, target, 1, sa, pa) ||
        !detail::solve_downsample(cur, target, 3, sb, pb))
      throw ConfigError("extra block cannot map size " + std::to_string(cur) +
                        " to " + std::to_string(target));
    int from = b.last;
    // branch A: 1x1 downsampling conv
    int a = b.conv(name + ".a.conv", from, in_ch, channels, 1, sa, pa, !use_bn);
    if (use_bn) a = b.bn(name + ".a.bn", a, channels);
    // branch B: 3x3 downsampling conv + 3x3 stride-1 conv
    int bb = b.conv_bn_relu(name + ".b.conv1", from, in_ch, channels, 3, sb,
                            pb, use_bn);
    bb = b.conv(name + ".b.conv2", bb, channels, channels, 3, 1, 1, !use_bn);
    if (use_bn) bb = b.bn(name + ".b.bn2", bb, channels);
    int n = b.add_nodes(name + ".add", a, bb, channels);
    n = b.relu(name + ".relu", n, channels);
    if (taps) taps->push_back(n);
    in_ch = channels;
    cur = target;
  }
}

// Builds the full backbone graph for one Fig.-3-style variant. The stride-2
// schedule of the residual stages is derived from target_ladder so that the
// detection taps land exactly on the requested spatial sizes regardless of
// the first-conv stride / maxpool toggles.
inline NetworkSpec build_backbone(const BackboneConfig& cfg) {
  cfg.validate();
  const int S = static_cast<int>(cfg.stage_channels.size());
  const auto& ladder = cfg.target_ladder;

  // stem size
  int s = cfg.input_size;
  if (cfg.first_conv_stride == 2) s = detail::ceil_halve(s);
  if (cfg.use_first_maxpool) {
    if (s < 2) throw ConfigError("input too small for first maxpool");
    s = (s - 2) / 2 + 1;
  }

  // how many stride-2 stages are needed before the first detection tap
  // (which is the output of stage S-1, 1-based)
  int h = -1;
  std::vector<int> achievable;
  {
    int v = s;
    for (int j = 0; j <= S - 1; ++j) {
      achievable.push_back(v);
      if (v == ladder[0]) {
        h = j;
        break;
      }
      v = detail::ceil_halve(v);
    }
  }
  if (h < 0) {
    std::string msg = "target_ladder[0]=" + std::to_string(ladder[0]) +
                      " unreachable from input " +
                      std::to_string(cfg.input_size) +
                      "; achievable first entries:";
    for (int v : achievable) msg += " " + std::to_string(v);
    throw ConfigError(msg);
  }
  // last stage feeds the second tap
  int last_stride;
  if (ladder[1] == detail::ceil_halve(ladder[0]))
    last_stride = 2;
  else if (ladder[1] == ladder[0])
    last_stride = 1;
  else
    throw ConfigError("target_ladder[1]=" + std::to_string(ladder[1]) +
                      " must equal ladder[0] or its stride-2 reduction " +
                      std::to_string(detail::ceil_halve(ladder[0])));

  std::vector<int> stage_stride(static_cast<size_t>(S), 1);
  for (int i = S - 2; i >= 0 && h > 0; --i, --h) stage_stride[static_cast<size_t>(i)] = 2;
  stage_stride[static_cast<size_t>(S - 1)] = last_stride;

  detail::SpecBuilder b(3, cfg.input_size);
  build_root_block(b, cfg.root_depth, cfg.stage_channels[0], 3,
                   cfg.first_conv_kernel, cfg.first_conv_stride,
                   cfg.bn_in_backbone);
  if (cfg.use_first_maxpool)
    b.maxpool("stem.pool", b.last, cfg.stage_channels[0], 2, 2);

  int in_ch = cfg.stage_channels[0];
  std::vector<int> taps;
  for (int i = 0; i < S; ++i) {
    int out_ch = cfg.stage_channels[static_cast<size_t>(i)];
    for (int j = 0; j < cfg.stage_blocks[static_cast<size_t>(i)]; ++j) {
      std::string name = "stage" + std::to_string(i + 1) + ".block" +
                         std::to_string(j + 1);
      b.basic_block(name, b.last, in_ch, out_ch,
                    j == 0 ? stage_stride[static_cast<size_t>(i)] : 1,
                    cfg.bn_in_backbone);
      in_ch = out_ch;
    }
    if (i == S - 2 || i == S - 1) taps.push_back(b.last);
  }

  // remaining ladder entries come from the extra residual blocks
  std::vector<int> tail_sizes(ladder.begin() + 1, ladder.end());
  build_extra_blocks(b, tail_sizes, in_ch, cfg.extra_block_channels,
                     cfg.bn_in_backbone, &taps);

  b.spec.detection_taps = taps;
  auto shapes = infer_shapes(b.spec);
  for (size_t i = 0; i < taps.size(); ++i) {
    b.spec.tap_sizes.push_back(shapes[static_cast<size_t>(taps[i])].size);
    b.spec.tap_channels.push_back(shapes[static_cast<size_t>(taps[i])].channels);
  }
  if (b.spec.tap_sizes != ladder)
    throw ConfigError("internal: realized tap sizes do not match the ladder");
  return b.spec;
}

// --- JSON round-trip (checkpoint header) -----------------------------------

inline void to_json(json& j, const LayerDesc& l) {
  static const char* kinds[] = {"conv", "bn", "relu", "maxpool", "add"};
  j = json{{"kind", kinds[static_cast<int>(l.kind)]},
           {"input", l.input},
           {"input2", l.input2},
           {"in_ch", l.in_ch},
           {"out_ch", l.out_ch},
           {"kernel", l.kernel},
           {"stride", l.stride},
           {"pad", l.pad},
           {"bias", l.bias},
           {"name", l.name}};
}

inline void from_json(const json& j, LayerDesc& l) {
  std::string k = j.at("kind");
  if (k == "conv") l.kind = LayerDesc::Kind::Conv;
  else if (k == "bn") l.kind = LayerDesc::Kind::BatchNorm;
  else if (k == "relu") l.kind = LayerDesc::Kind::ReLU;
  else if (k == "maxpool") l.kind = LayerDesc::Kind::MaxPool;
  else if (k == "add") l.kind = LayerDesc::Kind::Add;
  else throw ConfigError("unknown layer kind: " + k);
  j.at("input").get_to(l.input);
  j.at("input2").get_to(l.input2);
  j.at("in_ch").get_to(l.in_ch);
  j.at("out_ch").get_to(l.out_ch);
  j.at("kernel").get_to(l.kernel);
  j.at("stride").get_to(l.stride);
  j.at("pad").get_to(l.pad);
  j.at("bias").get_to(l.bias);
  j.at("name").get_to(l.name);
}

inline void to_json(json& j, const NetworkSpec& s) {
  j = json{{"input_channels", s.input_channels},
           {"input_size", s.input_size},
           {"layers", s.layers},
           {"detection_taps", s.detection_taps},
           {"tap_sizes", s.tap_sizes},
           {"tap_channels", s.tap_channels}};
}

inline void from_json(const json& j, NetworkSpec& s) {
  j.at("input_channels").get_to(s.input_channels);
  j.at("input_size").get_to(s.input_size);
  j.at("layers").get_to(s.layers);
  j.at("detection_taps").get_to(s.detection_taps);
  j.at("tap_sizes").get_to(s.tap_sizes);
  j.at("tap_channels").get_to(s.tap_channels);
}

inline void to_json(json& j, const BackboneConfig& c) {
  j = json{{"first_conv_kernel", c.first_conv_kernel},
           {"first_conv_stride", c.first_conv_stride},
           {"root_depth", c.root_depth},
           {"use_first_maxpool", c.use_first_maxpool},
           {"stage_channels", c.stage_channels},
           {"stage_blocks", c.stage_blocks},
           {"bn_in_backbone", c.bn_in_backbone},
           {"input_size", c.input_size},
           {"target_ladder", c.target_ladder},
           {"extra_block_channels", c.extra_block_channels}};
}

inline void from_json(const json& j, BackboneConfig& c) {
  BackboneConfig d;
  c.first_conv_kernel = j.value("first_conv_kernel", d.first_conv_kernel);
  c.first_conv_stride = j.value("first_conv_stride", d.first_conv_stride);
  c.root_depth = j.value("root_depth", d.root_depth);
  c.use_first_maxpool = j.value("use_first_maxpool", d.use_first_maxpool);
  c.stage_channels = j.value("stage_channels", d.stage_channels);
  c.stage_blocks = j.value("stage_blocks", d.stage_blocks);
  c.bn_in_backbone = j.value("bn_in_backbone", d.bn_in_backbone);
  c.input_size = j.value("input_size", d.input_size);
  c.target_ladder = j.value("target_ladder", d.target_ladder);
  c.extra_block_channels = j.value("extra_block_channels", d.extra_block_channels);
}

}  // namespace scratchdet
