#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "octyolo/blocks.hpp"

namespace octyolo {

/// YOLOv8 scaling: depth multiplier, width multiplier, and max channels
/// = 512 * ratio before the width multiplier.
struct ScaleSpec {
  std::string name;
  double depth = 1.0;
  double width = 1.0;
  double ratio = 1.0;

  [[nodiscard]] int max_channels() const { return static_cast<int>(std::lround(512 * ratio)); }
  friend bool operator==(const ScaleSpec&, const ScaleSpec&) = default;
};

inline ScaleSpec scale_n() { return {"N", 1.0 / 3, 0.25, 2.0}; }
inline ScaleSpec scale_s() { return {"S", 1.0 / 3, 0.50, 2.0}; }
inline ScaleSpec scale_m() { return {"M", 2.0 / 3, 0.75, 1.5}; }
inline ScaleSpec scale_l() { return {"L", 1.0, 1.00, 1.0}; }
inline ScaleSpec scale_x() { return {"X", 1.0, 1.25, 1.0}; }

inline std::vector<ScaleSpec> all_scales() { return {scale_n(), scale_s(), scale_m(), scale_l(), scale_x()}; }

inline ScaleSpec scale_from_name(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  for (const auto& sc : all_scales())
    if (sc.name == s) return sc;
  throw ConfigError("unknown scale '" + s + "' (expected one of n, s, m, l, x)");
}

/// Rounds up to a multiple of `divisor`.
inline int make_divisible(double x, int divisor = 8) {
  return std::max(divisor, static_cast<int>(std::ceil(x / divisor)) * divisor);
}

inline int scaled_channels(const ScaleSpec& s, int c) {
  return make_divisible(std::min(c, s.max_channels()) * s.width, 8);
}

inline int scaled_depth(const ScaleSpec& s, int n) { return std::max(static_cast<int>(std::lround(n * s.depth)), 1); }

enum class Stage { P1, P2, P3, P4, P5, Neck, Head };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::P1: return "P1";
    case Stage::P2: return "P2";
    case Stage::P3: return "P3";
    case Stage::P4: return "P4";
    case Stage::P5: return "P5";
    case Stage::Neck: return "neck";
    case Stage::Head: return "head";
  }
  return "?";
}

struct BuildOptions {
  bool use_fsb = false;
  bool use_dsdown = false;
  bool use_fssa = false;
  bool use_transformer = false;  // full-resolution transformer after SPPF
  bool backbone_only = false;    // FSB replaces only backbone C2f blocks
  double alpha = 0.5;
  int split_k = 1;
  bool depthwise = true;  // FSB bottleneck type
  int classes = 80;

  friend bool operator==(const BuildOptions&, const BuildOptions&) = default;
};

/// Input id of the image in LayerNode::inputs.
inline constexpr int kImage = -1;

struct LayerNode {
  int id = 0;
  BlockSpec spec;
  std::vector<int> inputs;
  Stage stage = Stage::P1;
  std::vector<Shape> out_shapes;  // at the graph's declared resolution

  friend bool operator==(const LayerNode&, const LayerNode&) = default;
};

struct LayerGraph {
  std::string name;
  ScaleSpec scale;
  BuildOptions options;
  int resolution = 640;
  int in_channels = 3;
  std::vector<LayerNode> nodes;

  friend bool operator==(const LayerGraph&, const LayerGraph&) = default;
};

namespace detail {
inline void require_even(const BlockSpec& s, const Shape& x) {
  if (x.h % 2 != 0 || x.w % 2 != 0) {
    throw ShapeError(std::string(to_string(s.kind)) + ": input " + x.str() + " needs even spatial dims");
  }
}
}  // namespace detail

/// Output shapes of one block from its input shapes, validating channels.
inline std::vector<Shape> block_out_shapes(const BlockSpec& s, const std::vector<Shape>& in) {
  const std::string kind = to_string(s.kind);
  if (in.empty()) throw ShapeError(kind + ": no inputs");
  auto check_c = [&](const Shape& x, int c) {
    if (x.c != c) throw ShapeError(kind + ": input has " + std::to_string(x.c) + " channels, spec expects " + std::to_string(c));
  };
  const Shape& x = in.front();
  switch (s.kind) {
    case BlockKind::ConvUnit: {
      check_c(x, s.c_in);
      const int pad = s.k / 2;
      if (s.stride == 2) detail::require_even(s, x);
      return {Shape{x.n, s.c_out, conv_out_dim(x.h, s.k, s.stride, pad), conv_out_dim(x.w, s.k, s.stride, pad)}};
    }
    case BlockKind::FSB:
    case BlockKind::FSSA: detail::require_even(s, x); [[fallthrough]];
    case BlockKind::Bottleneck:
    case BlockKind::DWBottleneck:
    case BlockKind::C2f:
    case BlockKind::SPPF:
    case BlockKind::Transformer: check_c(x, s.c_in); return {Shape{x.n, s.c_out, x.h, x.w}};
    case BlockKind::DSDown:
      check_c(x, s.c_in);
      detail::require_even(s, x);
      return {Shape{x.n, s.c_out, x.h / 2, x.w / 2}};
    case BlockKind::Upsample: check_c(x, s.c_in); return {Shape{x.n, x.c, 2 * x.h, 2 * x.w}};
    case BlockKind::Concat: {
      if (in.size() != s.c_ins.size()) throw ShapeError("Concat: input count does not match spec");
      int c = 0;
      for (std::size_t i = 0; i < in.size(); ++i) {
        check_c(in[i], s.c_ins[i]);
        if (in[i].n != x.n || in[i].h != x.h || in[i].w != x.w) {
          throw ShapeError("Concat: " + in[i].str() + " not conformable with " + x.str());
        }
        c += in[i].c;
      }
      return {Shape{x.n, c, x.h, x.w}};
    }
    case BlockKind::Detect: {
      if (in.size() != s.c_ins.size()) throw ShapeError("Detect: input count does not match spec");
      std::vector<Shape> out;
      for (std::size_t i = 0; i < in.size(); ++i) {
        check_c(in[i], s.c_ins[i]);
        out.push_back(Shape{in[i].n, 4 * s.reg_max + s.classes, in[i].h, in[i].w});
      }
      return out;
    }
  }
  throw ConfigError("unknown block kind");
}

/// Checks topology (inputs precede consumers, exactly one Detect at the end)
/// and returns every node's output shapes for an input of the given shape.
inline std::vector<std::vector<Shape>> infer_shapes(const LayerGraph& g, Shape input) {
  if (input.c != g.in_channels) {
    throw ShapeError("graph expects " + std::to_string(g.in_channels) + " input channels, got " + input.str());
  }
  std::vector<std::vector<Shape>> shapes;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const auto& n = g.nodes[i];
    if (n.id != static_cast<int>(i)) throw ConfigError("graph: node ids must be 0..N-1 in order");
    std::vector<Shape> in;
    for (int src : n.inputs) {
      if (src == kImage) {
        in.push_back(input);
      } else if (src < 0 || src >= n.id) {
        throw ConfigError("graph: node " + std::to_string(n.id) + " reads node " + std::to_string(src) +
                          ", which does not precede it");
      } else {
        if (shapes[static_cast<std::size_t>(src)].size() != 1) {
          throw ConfigError("graph: node " + std::to_string(src) + " has no single output to consume");
        }
        in.push_back(shapes[static_cast<std::size_t>(src)].front());
      }
    }
    try {
      shapes.push_back(block_out_shapes(n.spec, in));
    } catch (const ShapeError& e) {
      throw ShapeError("graph " + g.name + " node " + std::to_string(n.id) + ": " + e.what());
    }
  }
  if (g.nodes.empty() || g.nodes.back().spec.kind != BlockKind::Detect) {
    throw ConfigError("graph: last node must be Detect");
  }
  return shapes;
}

/// Input sides must be multiples of this: 32 for the five strides, 64 when
/// an octave block runs at stride 32 (its high part must have even sides).
inline int required_divisor(const LayerGraph& g) {
  constexpr int probe = 1280;
  const auto shapes = infer_shapes(g, Shape{1, g.in_channels, probe, probe});
  int d = 32;
  for (const auto& n : g.nodes) {
    const bool octave = n.spec.kind == BlockKind::FSB || n.spec.kind == BlockKind::FSSA;
    const int stride = probe / shapes[static_cast<std::size_t>(n.id)].front().h;
    if (octave) d = std::max(d, 2 * stride);
  }
  return d;
}

/// Throws unless both sides are positive multiples of the graph's divisor.
inline void check_resolution(const LayerGraph& g, int h, int w) {
  const int d = required_divisor(g);
  if (h < d || w < d || h % d != 0 || w % d != 0) {
    throw ShapeError("input " + std::to_string(h) + "x" + std::to_string(w) + " for " + g.name +
                     ": height and width must be multiples of " + std::to_string(d));
  }
}

inline void validate(LayerGraph& g) {
  check_resolution(g, g.resolution, g.resolution);
  auto shapes = infer_shapes(g, Shape{1, g.in_channels, g.resolution, g.resolution});
  for (std::size_t i = 0; i < shapes.size(); ++i) g.nodes[i].out_shapes = shapes[i];
}

inline std::string model_name(bool octave, const ScaleSpec& s) {
  std::string n = s.name;
  for (auto& ch : n) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return (octave ? "octave-yolo-" : "yolov8-") + n;
}

/// YOLOv8 skeleton with the octave replacements switched by `opts`. The stem
/// is always a plain stride-2 conv unit.
inline LayerGraph build_graph(const ScaleSpec& sc, const BuildOptions& opts, int resolution = 640,
                              std::string name = {}) {
  if (!(opts.alpha >= 0.0 && opts.alpha <= 1.0)) throw ConfigError("alpha must be in [0,1]");
  if (opts.use_fssa && opts.use_transformer) throw ConfigError("use_fssa and use_transformer are exclusive");
  LayerGraph g;
  g.scale = sc;
  g.options = opts;
  g.resolution = resolution;
  const bool octave = opts.use_fsb || opts.use_dsdown || opts.use_fssa;
  g.name = name.empty() ? model_name(octave, sc) : std::move(name);

  auto ch = [&](int c) { return scaled_channels(sc, c); };
  auto dep = [&](int n) { return scaled_depth(sc, n); };
  auto add = [&](BlockSpec s, std::vector<int> inputs, Stage stage) {
    const int id = static_cast<int>(g.nodes.size());
    g.nodes.push_back({id, std::move(s), std::move(inputs), stage, {}});
    return id;
  };
  auto last = [&] { return static_cast<int>(g.nodes.size()) - 1; };

  auto down = [&](int ci, int co, Stage st) {
    BlockSpec s;
    if (opts.use_dsdown) {
      s.kind = BlockKind::DSDown;
    } else {
      s.kind = BlockKind::ConvUnit;
      s.k = 3;
      s.stride = 2;
    }
    s.c_in = ci;
    s.c_out = co;
    return add(s, {last()}, st);
  };
  auto block = [&](int ci, int co, int n, bool shortcut, bool neck, Stage st) {
    BlockSpec s;
    const bool fsb = opts.use_fsb && !(neck && opts.backbone_only);
    s.kind = fsb ? BlockKind::FSB : BlockKind::C2f;
    s.c_in = ci;
    s.c_out = co;
    s.n = n;
    s.shortcut = shortcut;
    if (fsb) {
      s.alpha = opts.alpha;
      s.split_k = opts.split_k;
      s.depthwise = opts.depthwise;
    }
    return add(s, {last()}, st);
  };
  auto upsample = [&](int c) {
    BlockSpec s;
    s.kind = BlockKind::Upsample;
    s.c_in = s.c_out = c;
    return add(s, {last()}, Stage::Neck);
  };
  auto concat = [&](int a, int b) {
    BlockSpec s;
    s.kind = BlockKind::Concat;
    s.c_ins = {g.nodes[static_cast<std::size_t>(a)].spec.c_out, g.nodes[static_cast<std::size_t>(b)].spec.c_out};
    s.c_in = s.c_out = s.c_ins[0] + s.c_ins[1];
    return add(s, {a, b}, Stage::Neck);
  };

  BlockSpec stem;
  stem.kind = BlockKind::ConvUnit;
  stem.c_in = g.in_channels;
  stem.c_out = ch(64);
  stem.k = 3;
  stem.stride = 2;
  g.nodes.push_back({0, stem, {kImage}, Stage::P1, {}});

  down(ch(64), ch(128), Stage::P2);
  block(ch(128), ch(128), dep(3), true, false, Stage::P2);
  down(ch(128), ch(256), Stage::P3);
  const int p3 = block(ch(256), ch(256), dep(6), true, false, Stage::P3);
  down(ch(256), ch(512), Stage::P4);
  const int p4 = block(ch(512), ch(512), dep(6), true, false, Stage::P4);
  down(ch(512), ch(1024), Stage::P5);
  block(ch(1024), ch(1024), dep(3), true, false, Stage::P5);
  {
    BlockSpec s;
    s.kind = BlockKind::SPPF;
    s.c_in = s.c_out = ch(1024);
    add(s, {last()}, Stage::P5);
  }
  if (opts.use_fssa || opts.use_transformer) {
    BlockSpec s;
    s.kind = opts.use_fssa ? BlockKind::FSSA : BlockKind::Transformer;
    s.c_in = s.c_out = ch(1024);
    if (opts.use_fssa) {
      s.alpha = opts.alpha;
      s.split_k = opts.split_k;
    }
    add(s, {last()}, Stage::P5);
  }
  const int p5 = last();

  upsample(ch(1024));
  concat(last(), p4);
  const int n12 = block(ch(1024) + ch(512), ch(512), dep(3), false, true, Stage::Neck);
  upsample(ch(512));
  concat(last(), p3);
  const int o3 = block(ch(512) + ch(256), ch(256), dep(3), false, true, Stage::Neck);
  down(ch(256), ch(256), Stage::Neck);
  concat(last(), n12);
  const int o4 = block(ch(256) + ch(512), ch(512), dep(3), false, true, Stage::Neck);
  down(ch(512), ch(512), Stage::Neck);
  concat(last(), p5);
  const int o5 = block(ch(512) + ch(1024), ch(1024), dep(3), false, true, Stage::Neck);

  BlockSpec det;
  det.kind = BlockKind::Detect;
  det.c_ins = {ch(256), ch(512), ch(1024)};
  det.c_in = det.c_ins[0];
  det.c_out = 4 * det.reg_max + opts.classes;
  det.classes = opts.classes;
  add(det, {o3, o4, o5}, Stage::Head);

  validate(g);
  return g;
}

inline LayerGraph build_yolov8(const ScaleSpec& s, int resolution = 640) { return build_graph(s, {}, resolution); }

/// Defaults to the full model: FSB, DS downsampling and FSSA all enabled.
inline LayerGraph build_octave_yolo(const ScaleSpec& s, BuildOptions opts = {true, true, true}, int resolution = 640) {
  return build_graph(s, opts, resolution);
}

/// Parses "yolov8-n" or "octave-yolo-s" style names.
inline LayerGraph build_named(const std::string& name, const BuildOptions& overrides = {true, true, true},
                              int resolution = 640) {
  std::string lower = name;
  for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  const auto dash = lower.rfind('-');
  if (dash == std::string::npos || dash + 1 >= lower.size()) throw ConfigError("unknown model '" + name + "'");
  const std::string family = lower.substr(0, dash);
  const ScaleSpec sc = scale_from_name(lower.substr(dash + 1));
  if (family == "yolov8") return build_yolov8(sc, resolution);
  if (family == "octave-yolo") return build_octave_yolo(sc, overrides, resolution);
  throw ConfigError("unknown model family '" + family + "' (expected yolov8 or octave-yolo)");
}

inline std::vector<std::string> model_names() {
  std::vector<std::string> out;
  for (bool oct : {false, true})
    for (const auto& s : all_scales()) out.push_back(model_name(oct, s));
  return out;
}

/// A graph with instantiated weights. Conv weights are Kaiming-uniform from a
/// fixed seed, norms start as identity in eval mode.
template <std::floating_point T>
class Network {
 public:
  Network(LayerGraph graph, std::uint64_t seed = 0) : graph_(std::move(graph)) {
    Rng rng(seed);
    params_.reserve(graph_.nodes.size());
    for (const auto& n : graph_.nodes) {
      params_.push_back(make_block<T>(n.spec));
      init_block(params_.back(), rng);
    }
  }

  [[nodiscard]] const LayerGraph& graph() const { return graph_; }
  BlockParams<T>& params(int id) { return params_.at(static_cast<std::size_t>(id)); }

  [[nodiscard]] std::size_t param_count() {
    std::size_t total = 0;
    for (auto& p : params_) total += count_params<T>(p);
    return total;
  }

  /// Executes the DAG in node order and returns the Detect outputs (strides
  /// 8, 16, 32). Intermediate maps are released after their last consumer.
  template <class Ops>
  std::vector<typename Ops::Value> forward(Ops& ops, const typename Ops::Value& x) {
    using V = typename Ops::Value;
    const Shape s = Ops::shape(x);
    check_resolution(graph_, s.h, s.w);
    infer_shapes(graph_, s);
    const std::size_t n = graph_.nodes.size();
    std::vector<std::size_t> last_use(n, 0);
    for (const auto& node : graph_.nodes)
      for (int src : node.inputs)
        if (src >= 0) last_use[static_cast<std::size_t>(src)] = static_cast<std::size_t>(node.id);
    std::vector<std::vector<V>> outs(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& node = graph_.nodes[i];
      std::vector<V> in;
      for (int src : node.inputs) in.push_back(src == kImage ? x : outs[static_cast<std::size_t>(src)].front());
      outs[i] = block_forward(ops, node.spec, params_[i], in);
      for (int src : node.inputs)
        if (src >= 0 && last_use[static_cast<std::size_t>(src)] == i) outs[static_cast<std::size_t>(src)].clear();
    }
    return outs.back();
  }

  std::vector<Tensor<T>> forward(const Tensor<T>& x) {
    EagerOps<T> ops;
    return forward(ops, x);
  }

 private:
  LayerGraph graph_;
  std::vector<BlockParams<T>> params_;
};

}  // namespace octyolo
