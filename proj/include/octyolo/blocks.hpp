#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstddef>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "octyolo/octave.hpp"

namespace octyolo {

enum class BlockKind {
  ConvUnit,
  Bottleneck,
  DWBottleneck,
  C2f,
  FSB,
  SPPF,
  FSSA,
  DSDown,
  Transformer,
  Upsample,
  Concat,
  Detect,
};

inline const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::ConvUnit: return "Conv";
    case BlockKind::Bottleneck: return "Bottleneck";
    case BlockKind::DWBottleneck: return "DWBottleneck";
    case BlockKind::C2f: return "C2f";
    case BlockKind::FSB: return "FSB";
    case BlockKind::SPPF: return "SPPF";
    case BlockKind::FSSA: return "FSSA";
    case BlockKind::DSDown: return "DSDown";
    case BlockKind::Transformer: return "Transformer";
    case BlockKind::Upsample: return "Upsample";
    case BlockKind::Concat: return "Concat";
    case BlockKind::Detect: return "Detect";
  }
  return "?";
}

inline BlockKind block_kind_from_string(const std::string& s) {
  for (int i = 0; i <= static_cast<int>(BlockKind::Detect); ++i) {
    const auto k = static_cast<BlockKind>(i);
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown block kind '" + s + "'");
}

struct BlockSpec {
  BlockKind kind = BlockKind::ConvUnit;
  int c_in = 0;
  int c_out = 0;
  int k = 1;        // ConvUnit kernel
  int stride = 1;   // ConvUnit stride
  int n = 1;        // bottleneck repeats (C2f, FSB)
  bool shortcut = false;
  double alpha = 0.5;     // FSB / FSSA low-branch fraction
  int heads = 0;          // FSSA / Transformer; 0 picks channels / 64, at least 1
  int split_k = 1;        // kernel of the FSB / FSSA split and merge convs
  bool depthwise = true;  // FSB bottleneck type
  int pool_k = 5;         // SPPF
  std::vector<int> c_ins; // Concat and Detect inputs
  int classes = 80;       // Detect
  int reg_max = 16;       // Detect

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

inline int default_heads(int channels) { return std::max(channels / 64, 1); }

// ---------------------------------------------------------------------------
// Conv-BN-SiLU

template <std::floating_point T>
struct ConvUnitParams {
  ConvParams<T> conv;
  NormParams<T> norm;
  bool act = true;

  static ConvUnitParams create(int c_in, int c_out, int k, int stride = 1, int groups = 1, bool act = true) {
    return {make_conv<T>(c_in, c_out, k, stride, groups), NormParams<T>::identity(c_out), act};
  }
  template <class Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    visit_conv(conv, prefix + "conv.", fn);
    visit_norm(norm, prefix + "bn.", fn);
  }
  void init(Rng& rng) {
    init_conv(conv, rng);
    init_norm(norm);
  }
};

template <class Ops, std::floating_point T>
typename Ops::Value conv_unit(Ops& ops, const typename Ops::Value& x, ConvUnitParams<T>& p) {
  if (p.conv.stride == 2) {
    const Shape s = Ops::shape(x);
    if (s.h % 2 != 0 || s.w % 2 != 0) {
      throw ShapeError("conv unit: stride 2 needs even dims, got h=" + std::to_string(s.h) + " w=" + std::to_string(s.w));
    }
  }
  auto y = ops.norm(ops.conv(x, p.conv), p.norm);
  return p.act ? ops.silu(y) : y;
}

// ---------------------------------------------------------------------------
// Bottlenecks. Both variants are two conv units: 3x3 + 3x3 for the standard
// one, depthwise 3x3 + pointwise 1x1 for the DW one.

template <std::floating_point T>
struct BottleneckParams {
  ConvUnitParams<T> a, b;
  bool add = false;
  bool depthwise = false;

  /// The residual is used only when shortcut is set and channels match.
  static BottleneckParams standard(int c_in, int c_out, bool shortcut) {
    return {ConvUnitParams<T>::create(c_in, c_out, 3), ConvUnitParams<T>::create(c_out, c_out, 3),
            shortcut && c_in == c_out, false};
  }
  static BottleneckParams dw(int c_in, int c_out, bool shortcut) {
    if (shortcut && c_in != c_out) {
      throw ConfigError("dw bottleneck: shortcut needs c_in == c_out, got " + std::to_string(c_in) + " and " +
                        std::to_string(c_out));
    }
    return {ConvUnitParams<T>::create(c_in, c_in, 3, 1, c_in), ConvUnitParams<T>::create(c_in, c_out, 1), shortcut,
            true};
  }
  template <class Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    a.visit_params(prefix + "cv1.", fn);
    b.visit_params(prefix + "cv2.", fn);
  }
  void init(Rng& rng) {
    a.init(rng);
    b.init(rng);
  }
};

template <class Ops, std::floating_point T>
typename Ops::Value bottleneck(Ops& ops, const typename Ops::Value& x, BottleneckParams<T>& p) {
  auto y = conv_unit(ops, conv_unit(ops, x, p.a), p.b);
  return p.add ? ops.add(x, y) : y;
}

// ---------------------------------------------------------------------------
// C2f: 1x1 to 2*hid, split, chained bottlenecks on the second half, concat of
// all 2+n pieces, 1x1 to c_out.

template <std::floating_point T>
struct C2fParams {
  ConvUnitParams<T> cv1, cv2;
  std::vector<BottleneckParams<T>> m;
  int hidden = 0;

  static C2fParams create(int c_in, int c_out, int n, bool shortcut) {
    if (n < 1) throw ConfigError("c2f: n must be >= 1");
    const int hid = c_out / 2;
    if (hid < 1) throw ConfigError("c2f: c_out must be >= 2");
    C2fParams p;
    p.hidden = hid;
    p.cv1 = ConvUnitParams<T>::create(c_in, 2 * hid, 1);
    for (int i = 0; i < n; ++i) p.m.push_back(BottleneckParams<T>::standard(hid, hid, shortcut));
    p.cv2 = ConvUnitParams<T>::create((2 + n) * hid, c_out, 1);
    return p;
  }
  template <class Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    cv1.visit_params(prefix + "cv1.", fn);
    for (std::size_t i = 0; i < m.size(); ++i) m[i].visit_params(prefix + "m" + std::to_string(i) + ".", fn);
    cv2.visit_params(prefix + "cv2.", fn);
  }
  void init(Rng& rng) {
    cv1.init(rng);
    for (auto& b : m) b.init(rng);
    cv2.init(rng);
  }
};

template <class Ops, std::floating_point T>
typename Ops::Value c2f(Ops& ops, const typename Ops::Value& x, C2fParams<T>& p) {
  auto pieces = ops.split(conv_unit(ops, x, p.cv1), {p.hidden, p.hidden});
  auto cur = pieces.back();
  for (auto& b : p.m) {
    cur = bottleneck(ops, cur, b);
    pieces.push_back(cur);
  }
  return conv_unit(ops, ops.concat(pieces), p.cv2);
}

// ---------------------------------------------------------------------------
// FSB: split into high and low parts, run the bottleneck chain on the low part
// only while keeping every intermediate output, then merge with the untouched
// high part.

template <std::floating_point T>
struct FSBParams {
  OctaveUnitParams<T> split;
  std::vector<BottleneckParams<T>> m;
  OctaveUnitParams<T> merge;

  static FSBParams create(int c_in, int c_out, int n, bool shortcut, double alpha = 0.5, bool depthwise = true,
                          int split_k = 1) {
    if (n < 1) throw ConfigError("fsb: n must be >= 1");
    const int hid = c_out / 2;
    if (hid < 1) throw ConfigError("fsb: c_out must be >= 2");
    FSBParams p;
    p.split = OctaveUnitParams<T>::create(make_split<T>(c_in, 2 * hid, alpha, split_k));
    const int cl = p.split.conv.c_out_low;
    const int ch = p.split.conv.c_out_high;
    if (cl < 1) throw ConfigError("fsb: alpha=" + std::to_string(alpha) + " leaves no low-frequency channels");
    for (int i = 0; i < n; ++i) {
      p.m.push_back(depthwise ? BottleneckParams<T>::dw(cl, cl, shortcut)
                              : BottleneckParams<T>::standard(cl, cl, shortcut));
    }
    p.merge = OctaveUnitParams<T>::create(make_merge<T>(ch, (1 + n) * cl, c_out, split_k));
    return p;
  }
  [[nodiscard]] int low_channels() const { return split.conv.c_out_low; }
  template <class Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    split.visit_params(prefix + "split.", fn);
    for (std::size_t i = 0; i < m.size(); ++i) m[i].visit_params(prefix + "m" + std::to_string(i) + ".", fn);
    merge.visit_params(prefix + "merge.", fn);
  }
  void init(Rng& rng) {
    split.init(rng);
    for (auto& b : m) b.init(rng);
    merge.init(rng);
  }
};

template <class Ops, std::floating_point T>
typename Ops::Value fsb(Ops& ops, const typename Ops::Value& x, FSBParams<T>& p) {
  using V = typename Ops::Value;
  auto parts = octave_unit(ops, Octave<V>{x, std::nullopt}, p.split);
  std::vector<V> lows{*parts.low};
  V cur = *parts.low;
  for (auto& b : p.m) {
    cur = bottleneck(ops, cur, b);
    lows.push_back(cur);
  }
  parts.low = ops.concat(lows);
  return *octave_unit(ops, parts, p.merge).high;
}

// ---------------------------------------------------------------------------
// SPPF: 1x1 to c_in/2, three chained max pools, concat x4, 1x1 to c_out.

template <std::floating_point T>
struct SPPFParams {
  ConvUnitParams<T> cv1, cv2;
  int pool_k = 5;

  static SPPFParams create(int c_in, int c_out, int k = 5) {
    const int c = c_in / 2;
    if (c < 1) throw ConfigError("sppf: c_in must be >= 2");
    return {ConvUnitParams<T>::create(c_in, c, 1), ConvUnitParams<T>::create(4 * c, c_out, 1), k};
  }
  template <class Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    cv1.visit_params(prefix + "cv1.", fn);
    cv2.visit_params(prefix + "cv2.", fn);
  }
  void init(Rng& rng) {
    cv1.init(rng);
    cv2.init(rng);
  }
};

template <class Ops, std::floating_point T>
typename Ops::Value sppf(Ops& ops, const typename Ops::Value& x, SPPFParams<T>& p) {
  const int pad = p.pool_k / 2;
  auto y0 = conv_unit(ops, x, p.cv1);
  auto y1 = ops.maxpool(y0, p.pool_k, 1, pad);
  auto y2 = ops.maxpool(y1, p.pool_k, 1, pad);
  auto y3 = ops.maxpool(y2, p.pool_k, 1, pad);
  return conv_unit(ops, ops.concat({y0, y1, y2, y3}), p.cv2);
}

// ---------------------------------------------------------------------------
// Self-attention core: qkv projection (conv + BN), multi-head attention,
// output projection (conv + BN) with residual, then a 2x FFN with residual.

template <std::floating_point T>
struct AttentionParams {
  ConvUnitParams<T> qkv, proj, ffn1, ffn2;
  int heads = 1;

  static AttentionParams create(int c, int heads = 0) {
    if (heads == 0) heads = default_heads(c);
    if (heads < 1 || c % heads != 0) {
      throw ConfigError("attention: heads=" + std::to_string(heads) + " must divide channels=" + std::to_string(c));
    }
    return {ConvUnitParams<T>::create(c, 3 * c, 1, 1, 1, false), ConvUnitParams<T>::create(c, c, 1, 1, 1, false),
            ConvUnitParams<T>::create(c, 2 * c, 1), ConvUnitParams<T>::create(2 * c, c, 1, 1, 1, false), heads};
  }
  template <class Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    qkv.visit_params(prefix + "qkv.", fn);
    proj.visit_params(prefix + "proj.", fn);
    ffn1.visit_params(prefix + "ffn1.", fn);
    ffn2.visit_params(prefix + "ffn2.", fn);
  }
  void init(Rng& rng) {
    qkv.init(rng);
    proj.init(rng);
    ffn1.init(rng);
    ffn2.init(rng);
  }
};

template <class Ops, std::floating_point T>
typename Ops::Value attention_block(Ops& ops, const typename Ops::Value& x, AttentionParams<T>& p) {
  auto a = conv_unit(ops, ops.attention(conv_unit(ops, x, p.qkv), p.heads), p.proj);
  auto y = ops.add(x, a);
  return ops.add(y, conv_unit(ops, conv_unit(ops, y, p.ffn1), p.ffn2));
}

/// Full-resolution transformer block (attention over every position).
template <std::floating_point T>
using TransformerParams = AttentionParams<T>;

template <class Ops, std::floating_point T>
typename Ops::Value transformer(Ops& ops, const typename Ops::Value& x, TransformerParams<T>& p) {
  return attention_block(ops, x, p);
}

// FSSA: the attention core runs on the low part only.
template <std::floating_point T>
struct FSSAParams {
  OctaveUnitParams<T> split;
  AttentionParams<T> core;
  OctaveUnitParams<T> merge;

  static FSSAParams create(int c, double alpha = 0.5, int heads = 0, int split_k = 1) {
    FSSAParams p;
    p.split = OctaveUnitParams<T>::create(make_split<T>(c, c, alpha, split_k));
    const int cl = p.split.conv.c_out_low;
    if (cl < 1) throw ConfigError("fssa: alpha=" + std::to_string(alpha) + " leaves no low-frequency channels");
    p.core = AttentionParams<T>::create(cl, heads);
    p.merge = OctaveUnitParams<T>::create(make_merge<T>(p.split.conv.c_out_high, cl, c, split_k));
    return p;
  }
  template <class Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    split.visit_params(prefix + "split.", fn);
    core.visit_params(prefix + "attn.", fn);
    merge.visit_params(prefix + "merge.", fn);
  }
  void init(Rng& rng) {
    split.init(rng);
    core.init(rng);
    merge.init(rng);
  }
};

template <class Ops, std::floating_point T>
typename Ops::Value fssa(Ops& ops, const typename Ops::Value& x, FSSAParams<T>& p) {
  using V = typename Ops::Value;
  auto parts = octave_unit(ops, Octave<V>{x, std::nullopt}, p.split);
  parts.low = attention_block(ops, *parts.low, p.core);
  return *octave_unit(ops, parts, p.merge).high;
}

// ---------------------------------------------------------------------------
// Depthwise separable downsampling: DW 3x3 stride 2 then PW 1x1.

template <std::floating_point T>
struct DSDownParams {
  ConvUnitParams<T> dw, pw;

  static DSDownParams create(int c_in, int c_out) {
    return {ConvUnitParams<T>::create(c_in, c_in, 3, 2, c_in), ConvUnitParams<T>::create(c_in, c_out, 1)};
  }
  template <class Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    dw.visit_params(prefix + "dw.", fn);
    pw.visit_params(prefix + "pw.", fn);
  }
  void init(Rng& rng) {
    dw.init(rng);
    pw.init(rng);
  }
};

template <class Ops, std::floating_point T>
typename Ops::Value ds_down(Ops& ops, const typename Ops::Value& x, DSDownParams<T>& p) {
  return conv_unit(ops, conv_unit(ops, x, p.dw), p.pw);
}

// ---------------------------------------------------------------------------
// Decoupled detection head. Per scale: a box branch (3x3, 3x3, 1x1 to
// 4*reg_max) and a class branch (3x3, 3x3, 1x1 to classes). The returned map
// per scale is concat(box, cls). The DFL projection is a fixed 0..reg_max-1
// vector, counted as parameters but never trained.

template <std::floating_point T>
struct DetectParams {
  struct Branch {
    ConvUnitParams<T> a, b;
    ConvParams<T> out;
  };
  std::vector<Branch> box, cls;
  std::vector<T> dfl;

  static DetectParams create(const std::vector<int>& chs, int classes = 80, int reg_max = 16) {
    if (chs.empty()) throw ConfigError("detect: needs at least one input");
    const int c2 = std::max({16, chs[0] / 4, reg_max * 4});
    const int c3 = std::max(chs[0], std::min(classes, 100));
    DetectParams p;
    for (int c : chs) {
      p.box.push_back({ConvUnitParams<T>::create(c, c2, 3), ConvUnitParams<T>::create(c2, c2, 3),
                       make_conv<T>(c2, 4 * reg_max, 1, 1, 1, true)});
      p.cls.push_back({ConvUnitParams<T>::create(c, c3, 3), ConvUnitParams<T>::create(c3, c3, 3),
                       make_conv<T>(c3, classes, 1, 1, 1, true)});
    }
    p.dfl.resize(static_cast<std::size_t>(reg_max));
    std::iota(p.dfl.begin(), p.dfl.end(), T{0});
    return p;
  }
  template <class Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    for (std::size_t i = 0; i < box.size(); ++i) {
      const std::string s = std::to_string(i);
      for (auto* br : {&box[i], &cls[i]}) {
        const std::string pre = prefix + (br == &box[i] ? "box" : "cls") + s + ".";
        br->a.visit_params(pre + "cv1.", fn);
        br->b.visit_params(pre + "cv2.", fn);
        visit_conv(br->out, pre + "out.", fn);
      }
    }
    fn(prefix + "dfl", std::span<T>(dfl));
  }
  void init(Rng& rng) {
    for (auto* v : {&box, &cls})
      for (auto& br : *v) {
        br.a.init(rng);
        br.b.init(rng);
        init_conv(br.out, rng);
      }
  }
};

template <class Ops, std::floating_point T>
std::vector<typename Ops::Value> detect(Ops& ops, const std::vector<typename Ops::Value>& xs, DetectParams<T>& p) {
  if (xs.size() != p.box.size()) throw ShapeError("detect: expected " + std::to_string(p.box.size()) + " inputs");
  std::vector<typename Ops::Value> out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    auto run = [&](auto& br) { return ops.conv(conv_unit(ops, conv_unit(ops, xs[i], br.a), br.b), br.out); };
    out.push_back(ops.concat({run(p.box[i]), run(p.cls[i])}));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Type-erased block parameters and dispatch.

template <std::floating_point T>
using BlockParams = std::variant<std::monostate, ConvUnitParams<T>, BottleneckParams<T>, C2fParams<T>, FSBParams<T>,
                                 SPPFParams<T>, FSSAParams<T>, DSDownParams<T>, AttentionParams<T>, DetectParams<T>>;

/// Zero-initialized parameters for a spec; call init_block to randomize.
template <std::floating_point T>
BlockParams<T> make_block(const BlockSpec& s) {
  switch (s.kind) {
    case BlockKind::ConvUnit: return ConvUnitParams<T>::create(s.c_in, s.c_out, s.k, s.stride);
    case BlockKind::Bottleneck: return BottleneckParams<T>::standard(s.c_in, s.c_out, s.shortcut);
    case BlockKind::DWBottleneck: return BottleneckParams<T>::dw(s.c_in, s.c_out, s.shortcut);
    case BlockKind::C2f: return C2fParams<T>::create(s.c_in, s.c_out, s.n, s.shortcut);
    case BlockKind::FSB:
      return FSBParams<T>::create(s.c_in, s.c_out, s.n, s.shortcut, s.alpha, s.depthwise, s.split_k);
    case BlockKind::SPPF: return SPPFParams<T>::create(s.c_in, s.c_out, s.pool_k);
    case BlockKind::FSSA:
      if (s.c_in != s.c_out) throw ConfigError("fssa: c_in must equal c_out");
      return FSSAParams<T>::create(s.c_in, s.alpha, s.heads, s.split_k);
    case BlockKind::DSDown: return DSDownParams<T>::create(s.c_in, s.c_out);
    case BlockKind::Transformer:
      if (s.c_in != s.c_out) throw ConfigError("transformer: c_in must equal c_out");
      return AttentionParams<T>::create(s.c_in, s.heads);
    case BlockKind::Upsample:
    case BlockKind::Concat: return std::monostate{};
    case BlockKind::Detect: return DetectParams<T>::create(s.c_ins, s.classes, s.reg_max);
  }
  throw ConfigError("make_block: unknown kind");
}

template <std::floating_point T>
void init_block(BlockParams<T>& p, Rng& rng) {
  std::visit(
      [&](auto& b) {
        if constexpr (!std::is_same_v<std::decay_t<decltype(b)>, std::monostate>) b.init(rng);
      },
      p);
}

template <std::floating_point T, class Fn>
void visit_block_params(BlockParams<T>& p, const std::string& prefix, Fn&& fn) {
  std::visit(
      [&](auto& b) {
        if constexpr (!std::is_same_v<std::decay_t<decltype(b)>, std::monostate>) b.visit_params(prefix, fn);
      },
      p);
}

/// Total scalar count of all parameter buffers of a block.
template <std::floating_point T, class P>
std::size_t count_params(P& p) {
  std::size_t total = 0;
  p.visit_params("", [&](const std::string&, std::span<T> d) { total += d.size(); });
  return total;
}

template <std::floating_point T>
std::size_t count_params(BlockParams<T>& p) {
  std::size_t total = 0;
  visit_block_params<T>(p, "", [&](const std::string&, std::span<T> d) { total += d.size(); });
  return total;
}

/// Runs one block on its inputs. Every kind but Concat and Detect takes one
/// input; every kind but Detect yields one output.
template <class Ops, std::floating_point T>
std::vector<typename Ops::Value> block_forward(Ops& ops, const BlockSpec& s, BlockParams<T>& p,
                                               const std::vector<typename Ops::Value>& xs) {
  using V = typename Ops::Value;
  if (xs.empty()) throw ShapeError(std::string(to_string(s.kind)) + ": no inputs");
  if (s.kind != BlockKind::Concat && s.kind != BlockKind::Detect && xs.size() != 1) {
    throw ShapeError(std::string(to_string(s.kind)) + ": expected one input");
  }
  const V& x = xs.front();
  switch (s.kind) {
    case BlockKind::ConvUnit: return {conv_unit(ops, x, std::get<ConvUnitParams<T>>(p))};
    case BlockKind::Bottleneck:
    case BlockKind::DWBottleneck: return {bottleneck(ops, x, std::get<BottleneckParams<T>>(p))};
    case BlockKind::C2f: return {c2f(ops, x, std::get<C2fParams<T>>(p))};
    case BlockKind::FSB: return {fsb(ops, x, std::get<FSBParams<T>>(p))};
    case BlockKind::SPPF: return {sppf(ops, x, std::get<SPPFParams<T>>(p))};
    case BlockKind::FSSA: return {fssa(ops, x, std::get<FSSAParams<T>>(p))};
    case BlockKind::DSDown: return {ds_down(ops, x, std::get<DSDownParams<T>>(p))};
    case BlockKind::Transformer: return {transformer(ops, x, std::get<AttentionParams<T>>(p))};
    case BlockKind::Upsample: return {ops.upsample(x)};
    case BlockKind::Concat: return {ops.concat(xs)};
    case BlockKind::Detect: return detect(ops, xs, std::get<DetectParams<T>>(p));
  }
  throw ConfigError("block_forward: unknown kind");
}


/// Finite-difference check of a whole block: input plus every parameter
/// buffer. The scalar is sum(y * R) for a fixed random R, since a plain sum of
/// a batch-normalized output is constant. Norms use batch statistics on both
/// sides. Analytic gradients come from the tape in double; the central
/// differences are evaluated on a mirror of the block in precision F. With
/// F = double, coordinates whose true gradient is exactly zero (key biases
/// under softmax, constant shifts absorbed by a later norm) show rounding
/// noise of about 1e-10, above the 1e-8 floor of the relative error.
template <std::floating_point F = long double>
ag::GradCheckReport check_block_gradients(const BlockSpec& spec, BlockParams<double>& p, Tensor<double> x,
                                          double h, double tol, std::uint64_t seed = 7) {
  auto run = [&spec](auto& ops, auto& params, const auto& in) {
    return block_forward(ops, spec, params, {in}).front();
  };
  EagerOps<double> probe{NormPolicy::batch_stats};
  const Shape out_shape = run(probe, p, x).shape();
  Rng rng(seed);
  const auto r = Tensor<double>::uniform(out_shape, rng);

  std::vector<ag::CheckedInput<double>> inputs{{"x", x.data()}};
  visit_block_params<double>(p, "", [&](const std::string& name, std::span<double> d) { inputs.push_back({name, d}); });

  auto mirror = make_block<F>(spec);
  std::vector<std::span<F>> mirror_spans;
  visit_block_params<F>(mirror, "", [&](const std::string&, std::span<F> d) { mirror_spans.push_back(d); });
  if (mirror_spans.size() + 1 != inputs.size()) throw Error("check_block_gradients: parameter layout mismatch");

  auto analytic = [&] {
    TapeOps<double> tape;
    auto xl = ag::leaf(x, "x");
    auto root = ag::sum(ag::mul(run(tape, p, xl), ag::constant(r)));
    auto grads = ag::backward(root);
    std::vector<std::vector<double>> out;
    auto gx = grads.find(xl.get());
    out.push_back(gx == grads.end() ? std::vector<double>(x.numel(), 0.0) : gx->second.vec());
    for (std::size_t i = 1; i < inputs.size(); ++i) out.push_back(tape.grad(inputs[i].data, grads));
    return out;
  };
  const auto r_hi = r.template cast<F>();
  EagerOps<F> eager{NormPolicy::batch_stats};
  auto evaluate = [&]() -> F {
    for (std::size_t i = 0; i < mirror_spans.size(); ++i) {
      std::copy(inputs[i + 1].data.begin(), inputs[i + 1].data.end(), mirror_spans[i].begin());
    }
    auto y = run(eager, mirror, x.template cast<F>());
    F s{0};
    for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * r_hi[i];
    return s;
  };
  return ag::gradient_check<double, F>(analytic, evaluate, inputs, h, tol);
}

}  // namespace octyolo
