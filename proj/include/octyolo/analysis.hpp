#pragma once

#include <cstdint>
#include <iomanip>
#include <locale>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "octyolo/model_zoo.hpp"

// Closed-form parameter and FLOP accounting. One multiply-accumulate counts
// as 2 FLOPs. Norms count 4 FLOPs per element and 2 parameters per channel,
// SiLU and residual adds 1 per element, average pooling 1 per input element,
// max pooling k*k per output element, attention 4*tokens^2 per channel for
// the two products plus 3 per score for the softmax. Upsampling, concat and
// split are free. Totals run through the detection head's final convs; box
// decoding and NMS are not counted.

namespace octyolo {

struct Cost {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;

  Cost& operator+=(const Cost& o) {
    params += o.params;
    flops += o.flops;
    return *this;
  }
  friend Cost operator+(Cost a, const Cost& b) { return a += b; }
  friend bool operator==(const Cost&, const Cost&) = default;
};

namespace cost {

inline std::uint64_t u(std::size_t v) { return static_cast<std::uint64_t>(v); }

/// Plain convolution producing `out`.
inline Cost conv(int c_in, int c_out, int k, int groups, const Shape& out, bool bias = false) {
  const std::uint64_t w = u(k) * u(k) * u(c_in / groups) * u(c_out);
  return {w + (bias ? u(c_out) : 0), 2 * u(k) * u(k) * u(c_in / groups) * out.numel()};
}
inline Cost norm(const Shape& s) { return {2 * u(s.c), 4 * s.numel()}; }
inline Cost elementwise(const Shape& s) { return {0, s.numel()}; }

/// Conv + norm (+ SiLU). Returns the cost and writes the output shape.
inline Cost conv_unit(const Shape& x, int c_out, int k, int stride, int groups, bool act, Shape* out_shape = nullptr) {
  const int pad = k / 2;
  const Shape out{x.n, c_out, conv_out_dim(x.h, k, stride, pad), conv_out_dim(x.w, k, stride, pad)};
  if (out_shape) *out_shape = out;
  Cost c = conv(x.c, c_out, k, groups, out) + norm(out);
  if (act) c += elementwise(out);
  return c;
}

inline Shape with_c(Shape s, int c) {
  s.c = c;
  return s;
}
inline Shape half(Shape s) {
  s.h /= 2;
  s.w /= 2;
  return s;
}

inline Cost bottleneck(const Shape& x, int c_out, bool shortcut) {
  const Shape out = with_c(x, c_out);
  Cost c = conv_unit(x, c_out, 3, 1, 1, true) + conv_unit(out, c_out, 3, 1, 1, true);
  if (shortcut && x.c == c_out) c += elementwise(out);
  return c;
}

inline Cost dw_bottleneck(const Shape& x, int c_out, bool shortcut) {
  Cost c = conv_unit(x, x.c, 3, 1, x.c, true) + conv_unit(x, c_out, 1, 1, 1, true);
  if (shortcut) c += elementwise(with_c(x, c_out));
  return c;
}

inline Cost c2f(const Shape& x, int c_out, int n, bool shortcut) {
  const int hid = c_out / 2;
  Cost c = conv_unit(x, 2 * hid, 1, 1, 1, true);
  for (int i = 0; i < n; ++i) c += bottleneck(with_c(x, hid), hid, shortcut);
  c += conv_unit(with_c(x, (2 + n) * hid), c_out, 1, 1, 1, true);
  return c;
}

/// Octave conv plus per-part norm and activation. `x` is the high-resolution
/// shape (its channel field is ignored).
inline Cost octave_unit(const Shape& x, int cih, int cil, int coh, int col, int k, bool norm_act = true) {
  const Shape lo = half(x);
  Cost c;
  if (cih && coh) c += conv(cih, coh, k, 1, with_c(x, coh));
  if (cih && col) c += elementwise(with_c(x, cih)) + conv(cih, col, k, 1, with_c(lo, col));
  if (cil && coh) c += conv(cil, coh, k, 1, with_c(lo, coh));
  if (cil && col) c += conv(cil, col, k, 1, with_c(lo, col));
  if (cih && cil && coh) c += elementwise(with_c(x, coh));
  if (cih && cil && col) c += elementwise(with_c(lo, col));
  if (norm_act) {
    if (coh) c += norm(with_c(x, coh)) + elementwise(with_c(x, coh));
    if (col) c += norm(with_c(lo, col)) + elementwise(with_c(lo, col));
  }
  return c;
}

inline Cost fsb(const Shape& x, int c_out, int n, bool shortcut, double alpha, bool depthwise, int split_k) {
  const int hid = c_out / 2;
  const int cl = low_channels(alpha, 2 * hid);
  const int ch = 2 * hid - cl;
  Cost c = octave_unit(x, x.c, 0, ch, cl, split_k);
  const Shape lo = with_c(half(x), cl);
  for (int i = 0; i < n; ++i) c += depthwise ? dw_bottleneck(lo, cl, shortcut) : bottleneck(lo, cl, shortcut);
  c += octave_unit(x, ch, (1 + n) * cl, c_out, 0, split_k);
  return c;
}

inline Cost sppf(const Shape& x, int c_out, int k) {
  const int hid = x.c / 2;
  return conv_unit(x, hid, 1, 1, 1, true) + Cost{0, 3 * u(k) * u(k) * with_c(x, hid).numel()} +
         conv_unit(with_c(x, 4 * hid), c_out, 1, 1, 1, true);
}

inline Cost attention_core(const Shape& x, int heads) {
  const int c = x.c;
  if (heads == 0) heads = default_heads(c);
  const auto tokens = x.plane();
  Cost r = conv_unit(x, 3 * c, 1, 1, 1, false);
  r.flops += u(x.n) * (4 * tokens * tokens * u(c) + 3 * tokens * tokens * u(heads));
  r += conv_unit(x, c, 1, 1, 1, false) + elementwise(x);
  r += conv_unit(x, 2 * c, 1, 1, 1, true) + conv_unit(with_c(x, 2 * c), c, 1, 1, 1, false) + elementwise(x);
  return r;
}

inline Cost fssa(const Shape& x, double alpha, int heads, int split_k) {
  const int cl = low_channels(alpha, x.c);
  const int ch = x.c - cl;
  return octave_unit(x, x.c, 0, ch, cl, split_k) + attention_core(with_c(half(x), cl), heads) +
         octave_unit(x, ch, cl, x.c, 0, split_k);
}

inline Cost ds_down(const Shape& x, int c_out) {
  Shape mid;
  Cost c = conv_unit(x, x.c, 3, 2, x.c, true, &mid);
  return c + conv_unit(mid, c_out, 1, 1, 1, true);
}

inline Cost detect(const std::vector<Shape>& xs, int classes, int reg_max) {
  const int c2 = std::max({16, xs[0].c / 4, reg_max * 4});
  const int c3 = std::max(xs[0].c, std::min(classes, 100));
  Cost c;
  for (const auto& x : xs) {
    c += conv_unit(x, c2, 3, 1, 1, true) + conv_unit(with_c(x, c2), c2, 3, 1, 1, true) +
         conv(c2, 4 * reg_max, 1, 1, with_c(x, 4 * reg_max), true);
    c += conv_unit(x, c3, 3, 1, 1, true) + conv_unit(with_c(x, c3), c3, 3, 1, 1, true) +
         conv(c3, classes, 1, 1, with_c(x, classes), true);
  }
  c.params += u(reg_max);
  return c;
}

}  // namespace cost

/// Closed-form cost of one block for the given input shapes.
inline Cost block_cost(const BlockSpec& s, const std::vector<Shape>& in) {
  if (in.empty()) throw ShapeError(std::string(to_string(s.kind)) + ": no inputs");
  const Shape& x = in.front();
  switch (s.kind) {
    case BlockKind::ConvUnit: return cost::conv_unit(x, s.c_out, s.k, s.stride, 1, true);
    case BlockKind::Bottleneck: return cost::bottleneck(x, s.c_out, s.shortcut);
    case BlockKind::DWBottleneck: return cost::dw_bottleneck(x, s.c_out, s.shortcut);
    case BlockKind::C2f: return cost::c2f(x, s.c_out, s.n, s.shortcut);
    case BlockKind::FSB: return cost::fsb(x, s.c_out, s.n, s.shortcut, s.alpha, s.depthwise, s.split_k);
    case BlockKind::SPPF: return cost::sppf(x, s.c_out, s.pool_k);
    case BlockKind::FSSA: return cost::fssa(x, s.alpha, s.heads, s.split_k);
    case BlockKind::DSDown: return cost::ds_down(x, s.c_out);
    case BlockKind::Transformer: return cost::attention_core(x, s.heads);
    case BlockKind::Upsample:
    case BlockKind::Concat: return {};
    case BlockKind::Detect: return cost::detect(in, s.classes, s.reg_max);
  }
  throw ConfigError("count_costs: unknown layer kind");
}

struct CostRow {
  int id = 0;
  std::string kind;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::vector<Shape> out_shapes;
  std::optional<double> params_delta_pct;
  std::optional<double> flops_delta_pct;

  friend bool operator==(const CostRow&, const CostRow&) = default;
};

struct CostReport {
  std::string name;
  int resolution = 0;
  std::vector<CostRow> rows;
  std::uint64_t total_params = 0;
  std::uint64_t total_flops = 0;
  std::optional<std::string> baseline;
  std::optional<std::uint64_t> baseline_params;
  std::optional<std::uint64_t> baseline_flops;
  std::optional<double> params_delta_pct;
  std::optional<double> flops_delta_pct;

  [[nodiscard]] double mparams() const { return static_cast<double>(total_params) / 1e6; }
  [[nodiscard]] double gflops() const { return static_cast<double>(total_flops) / 1e9; }
  friend bool operator==(const CostReport&, const CostReport&) = default;
};

inline CostReport count_costs(const LayerGraph& g, int resolution) {
  check_resolution(g, resolution, resolution);
  const auto shapes = infer_shapes(g, Shape{1, g.in_channels, resolution, resolution});
  CostReport r;
  r.name = g.name;
  r.resolution = resolution;
  for (const auto& n : g.nodes) {
    std::vector<Shape> in;
    for (int src : n.inputs) {
      in.push_back(src == kImage ? Shape{1, g.in_channels, resolution, resolution}
                                 : shapes[static_cast<std::size_t>(src)].front());
    }
    const Cost c = block_cost(n.spec, in);
    r.rows.push_back({n.id, to_string(n.spec.kind), c.params, c.flops, shapes[static_cast<std::size_t>(n.id)], {}, {}});
    r.total_params += c.params;
    r.total_flops += c.flops;
  }
  return r;
}

inline CostReport count_costs(const LayerGraph& g) { return count_costs(g, g.resolution); }

/// (ours - base) / base * 100
inline double delta_pct(std::uint64_t ours, std::uint64_t base) {
  if (base == 0) return 0.0;
  return (static_cast<double>(ours) - static_cast<double>(base)) / static_cast<double>(base) * 100.0;
}

/// `ours` annotated with deltas against `base`: totals always, rows where the
/// row at the same index has the same kind.
inline CostReport compare(CostReport ours, const CostReport& base) {
  if (ours.resolution != base.resolution) {
    throw ConfigError("compare: resolutions differ (" + std::to_string(ours.resolution) + " vs " +
                      std::to_string(base.resolution) + ")");
  }
  ours.baseline = base.name;
  ours.baseline_params = base.total_params;
  ours.baseline_flops = base.total_flops;
  ours.params_delta_pct = delta_pct(ours.total_params, base.total_params);
  ours.flops_delta_pct = delta_pct(ours.total_flops, base.total_flops);
  for (std::size_t i = 0; i < ours.rows.size() && i < base.rows.size(); ++i) {
    auto& row = ours.rows[i];
    if (row.kind != base.rows[i].kind) continue;
    row.params_delta_pct = delta_pct(row.params, base.rows[i].params);
    row.flops_delta_pct = delta_pct(row.flops, base.rows[i].flops);
  }
  return ours;
}

// ---------------------------------------------------------------------------
// Canned comparisons

struct NamedGraph {
  std::string label;
  LayerGraph graph;
};

/// The four cumulative configurations at scale N: baseline, +FSB, +DS
/// downsampling, +FSSA.
inline std::vector<NamedGraph> ablation_graphs(const ScaleSpec& s = scale_n(), BuildOptions base = {},
                                               int resolution = 640) {
  base.use_fsb = base.use_dsdown = base.use_fssa = false;
  std::vector<NamedGraph> out;
  out.push_back({"baseline", build_graph(s, base, resolution, model_name(false, s))});
  base.use_fsb = true;
  out.push_back({"+FSB", build_graph(s, base, resolution, model_name(true, s) + "[fsb]")});
  base.use_dsdown = true;
  out.push_back({"+FSB+DSDown", build_graph(s, base, resolution, model_name(true, s) + "[fsb,dsdown]")});
  base.use_fssa = true;
  out.push_back({"+FSB+DSDown+FSSA", build_graph(s, base, resolution, model_name(true, s))});
  return out;
}

/// Full octave model with standard instead of depthwise bottlenecks, then
/// the default model.
inline std::vector<NamedGraph> bottleneck_graphs(const ScaleSpec& s = scale_n(), int resolution = 640) {
  BuildOptions o{true, true, true};
  o.depthwise = false;
  auto plain = build_graph(s, o, resolution, model_name(true, s) + "[std-bottleneck]");
  return {{"w/o DW", plain}, {"DW", build_octave_yolo(s, {true, true, true}, resolution)}};
}

/// Baseline, baseline + full-resolution transformer, baseline + FSSA.
inline std::vector<NamedGraph> attention_graphs(const ScaleSpec& s = scale_n(), int resolution = 640) {
  BuildOptions t;
  t.use_transformer = true;
  BuildOptions f;
  f.use_fssa = true;
  return {{"base", build_yolov8(s, resolution)},
          {"Trans.", build_graph(s, t, resolution, model_name(false, s) + "[transformer]")},
          {"FSSA", build_graph(s, f, resolution, model_name(false, s) + "[fssa]")}};
}

// ---------------------------------------------------------------------------
// Reports

enum class ReportFormat { json, csv, markdown };

inline ReportFormat parse_format(const std::string& s) {
  if (s == "json") return ReportFormat::json;
  if (s == "csv") return ReportFormat::csv;
  if (s == "markdown" || s == "md") return ReportFormat::markdown;
  throw ConfigError("unknown report format '" + s + "' (expected json, csv or markdown)");
}

inline constexpr int kReportSchema = 1;
inline constexpr const char* kCountingNote =
    "FLOPs count one multiply-accumulate as 2 and run through the detection head's final convolutions; box decoding "
    "and NMS are not counted.";

inline nlohmann::json shape_json(const Shape& s) { return {s.n, s.c, s.h, s.w}; }
inline Shape shape_from_json(const nlohmann::json& j) {
  return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()};
}

namespace detail {
template <class V>
void put_opt(nlohmann::json& j, const char* key, const std::optional<V>& v) {
  if (v) j[key] = *v;
}
template <class V>
void get_opt(const nlohmann::json& j, const char* key, std::optional<V>& v) {
  if (j.contains(key)) v = j.at(key).get<V>();
}
}  // namespace detail

inline nlohmann::json to_json(const CostReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& s : row.out_shapes) shapes.push_back(shape_json(s));
    nlohmann::json jr{{"id", row.id}, {"kind", row.kind}, {"params", row.params}, {"flops", row.flops},
                      {"out_shapes", shapes}};
    detail::put_opt(jr, "params_delta_pct", row.params_delta_pct);
    detail::put_opt(jr, "flops_delta_pct", row.flops_delta_pct);
    rows.push_back(std::move(jr));
  }
  nlohmann::json j{{"name", r.name},
                   {"resolution", r.resolution},
                   {"total_params", r.total_params},
                   {"total_flops", r.total_flops},
                   {"rows", rows}};
  detail::put_opt(j, "baseline", r.baseline);
  detail::put_opt(j, "baseline_params", r.baseline_params);
  detail::put_opt(j, "baseline_flops", r.baseline_flops);
  detail::put_opt(j, "params_delta_pct", r.params_delta_pct);
  detail::put_opt(j, "flops_delta_pct", r.flops_delta_pct);
  return j;
}

inline CostReport report_from_json(const nlohmann::json& j) {
  CostReport r;
  r.name = j.at("name").get<std::string>();
  r.resolution = j.at("resolution").get<int>();
  r.total_params = j.at("total_params").get<std::uint64_t>();
  r.total_flops = j.at("total_flops").get<std::uint64_t>();
  for (const auto& jr : j.at("rows")) {
    CostRow row;
    row.id = jr.at("id").get<int>();
    row.kind = jr.at("kind").get<std::string>();
    row.params = jr.at("params").get<std::uint64_t>();
    row.flops = jr.at("flops").get<std::uint64_t>();
    for (const auto& s : jr.at("out_shapes")) row.out_shapes.push_back(shape_from_json(s));
    detail::get_opt(jr, "params_delta_pct", row.params_delta_pct);
    detail::get_opt(jr, "flops_delta_pct", row.flops_delta_pct);
    r.rows.push_back(std::move(row));
  }
  detail::get_opt(j, "baseline", r.baseline);
  detail::get_opt(j, "baseline_params", r.baseline_params);
  detail::get_opt(j, "baseline_flops", r.baseline_flops);
  detail::get_opt(j, "params_delta_pct", r.params_delta_pct);
  detail::get_opt(j, "flops_delta_pct", r.flops_delta_pct);
  return r;
}

inline nlohmann::json reports_json(const std::vector<CostReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) arr.push_back(to_json(r));
  return {{"schema", kReportSchema}, {"note", kCountingNote}, {"reports", arr}};
}

inline std::vector<CostReport> reports_from_json(const nlohmann::json& j) {
  if (j.at("schema").get<int>() != kReportSchema) throw ConfigError("report: unsupported schema version");
  std::vector<CostReport> out;
  for (const auto& r : j.at("reports")) out.push_back(report_from_json(r));
  return out;
}

namespace detail {
inline std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}
inline std::string signed_pct(double v) { return (v >= 0 ? "+" : "") + fixed(v, 1) + "%"; }
inline std::string shapes_str(const std::vector<Shape>& ss) {
  std::string s;
  for (std::size_t i = 0; i < ss.size(); ++i) {
    if (i) s += ";";
    s += std::to_string(ss[i].n) + "x" + std::to_string(ss[i].c) + "x" + std::to_string(ss[i].h) + "x" +
         std::to_string(ss[i].w);
  }
  return s;
}
}  // namespace detail

/// One line per layer plus one "total" line per report.
inline std::string reports_csv(const std::vector<CostReport>& reports) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << "model,resolution,scope,id,kind,params,flops,out_shape,params_delta_pct,flops_delta_pct\n";
  auto opt = [](const std::optional<double>& v) { return v ? detail::fixed(*v, 4) : std::string(); };
  for (const auto& r : reports) {
    for (const auto& row : r.rows) {
      os << r.name << ',' << r.resolution << ",layer," << row.id << ',' << row.kind << ',' << row.params << ','
         << row.flops << ',' << detail::shapes_str(row.out_shapes) << ',' << opt(row.params_delta_pct) << ','
         << opt(row.flops_delta_pct) << '\n';
    }
    os << r.name << ',' << r.resolution << ",total,,," << r.total_params << ',' << r.total_flops << ",,"
       << opt(r.params_delta_pct) << ',' << opt(r.flops_delta_pct) << '\n';
  }
  return os.str();
}

/// Model-level table: #Param.(M) and FLOPs(G), each with its delta against
/// the report's baseline when one is attached.
inline std::string reports_markdown(const std::vector<CostReport>& reports) {
  std::ostringstream os;
  const int res = reports.empty() ? 0 : reports.front().resolution;
  os << "| Model | #Param.(M) | FLOPs(G) |\n|---|---:|---:|\n";
  for (const auto& r : reports) {
    os << "| " << r.name;
    if (r.resolution != res) os << " @" << r.resolution;
    os << " | " << detail::fixed(r.mparams(), 2);
    if (r.params_delta_pct) os << " (" << detail::signed_pct(*r.params_delta_pct) << ")";
    os << " | " << detail::fixed(r.gflops(), 2);
    if (r.flops_delta_pct) os << " (" << detail::signed_pct(*r.flops_delta_pct) << ")";
    os << " |\n";
  }
  os << "\nInput " << res << "x" << res << ". " << kCountingNote << "\n";
  return os.str();
}

inline std::string emit_report(const std::vector<CostReport>& reports, ReportFormat f) {
  switch (f) {
    case ReportFormat::json: return reports_json(reports).dump(2) + "\n";
    case ReportFormat::csv: return reports_csv(reports);
    case ReportFormat::markdown: return reports_markdown(reports);
  }
  throw ConfigError("unknown report format");
}

// ---------------------------------------------------------------------------
// Graph export

inline nlohmann::json spec_json(const BlockSpec& s) {
  nlohmann::json j{{"c_in", s.c_in}, {"c_out", s.c_out}};
  switch (s.kind) {
    case BlockKind::ConvUnit:
      j["k"] = s.k;
      j["stride"] = s.stride;
      break;
    case BlockKind::C2f:
    case BlockKind::Bottleneck:
    case BlockKind::DWBottleneck:
      j["n"] = s.n;
      j["shortcut"] = s.shortcut;
      break;
    case BlockKind::FSB:
      j["n"] = s.n;
      j["shortcut"] = s.shortcut;
      j["alpha"] = s.alpha;
      j["split_k"] = s.split_k;
      j["depthwise"] = s.depthwise;
      break;
    case BlockKind::FSSA:
      j["alpha"] = s.alpha;
      j["split_k"] = s.split_k;
      [[fallthrough]];
    case BlockKind::Transformer: j["heads"] = s.heads; break;
    case BlockKind::SPPF: j["pool_k"] = s.pool_k; break;
    case BlockKind::Concat: j["c_ins"] = s.c_ins; break;
    case BlockKind::Detect:
      j["c_ins"] = s.c_ins;
      j["classes"] = s.classes;
      j["reg_max"] = s.reg_max;
      break;
    case BlockKind::DSDown:
    case BlockKind::Upsample: break;
  }
  return j;
}

/// {id, kind, stage, spec, params, flops, inputs, out_shape} per node at the
/// graph's declared resolution. Input -1 is the image.
inline nlohmann::json graph_json(const LayerGraph& g) {
  const auto costs = count_costs(g);
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : g.nodes) {
    const auto& row = costs.rows[static_cast<std::size_t>(n.id)];
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& s : n.out_shapes) shapes.push_back(shape_json(s));
    nodes.push_back({{"id", n.id},
                     {"kind", to_string(n.spec.kind)},
                     {"stage", to_string(n.stage)},
                     {"spec", spec_json(n.spec)},
                     {"params", row.params},
                     {"flops", row.flops},
                     {"inputs", n.inputs},
                     {"out_shape", n.out_shapes.size() == 1 ? shapes[0] : shapes}});
  }
  const auto& o = g.options;
  return {{"schema", kReportSchema},
          {"name", g.name},
          {"resolution", g.resolution},
          {"scale", {{"name", g.scale.name}, {"depth", g.scale.depth}, {"width", g.scale.width}, {"ratio", g.scale.ratio}}},
          {"options",
           {{"fsb", o.use_fsb},
            {"dsdown", o.use_dsdown},
            {"fssa", o.use_fssa},
            {"transformer", o.use_transformer},
            {"backbone_only", o.backbone_only},
            {"alpha", o.alpha},
            {"split_k", o.split_k},
            {"depthwise", o.depthwise}}},
          {"total_params", costs.total_params},
          {"total_flops", costs.total_flops},
          {"nodes", nodes}};
}

}  // namespace octyolo
