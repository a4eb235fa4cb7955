// octyolo: build, analyze, compare, ablation, verify and bench entry point.
//
// Exit codes: 0 success, 1 usage, 2 verification failure, 3 internal error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "octyolo/bench.hpp"
#include "octyolo/verify.hpp"

using namespace octyolo;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitVerify = 2;
constexpr int kExitInternal = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GraphFlags {
  std::optional<bool> fsb, dsdown, fssa, transformer;
  bool backbone_only = false;
  double alpha = 0.5;
  bool strict = false;

  void add_to(CLI::App* app) {
    app->add_flag("--fsb,!--no-fsb", fsb, "Replace C2f with FSB (octave models default on)");
    app->add_flag("--dsdown,!--no-dsdown", dsdown, "Depthwise-separable downsampling");
    app->add_flag("--fssa,!--no-fssa", fssa, "FSSA after SPPF");
    app->add_flag("--transformer,!--no-transformer", transformer, "Full-resolution attention after SPPF");
    app->add_flag("--backbone-only", backbone_only, "Keep the neck on C2f");
    app->add_option("--alpha", alpha, "Low-frequency channel ratio")->check(CLI::Range(0.0, 1.0));
    app->add_flag("--strict", strict, "Reject resolutions that need rounding");
  }
};

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

/// Family defaults, then explicit flags. Non-default option sets get a
/// bracketed suffix in the graph name. `resolution` must already be valid.
LayerGraph make_graph(const std::string& model, const GraphFlags& f, int resolution) {
  const std::string name = lower(model);
  const auto dash = name.rfind('-');
  if (dash == std::string::npos) throw UsageError("unknown model '" + model + "'");
  const std::string family = name.substr(0, dash);
  if (family != "yolov8" && family != "octave-yolo") {
    throw UsageError("unknown model family '" + family + "' (expected yolov8 or octave-yolo)");
  }
  ScaleSpec sc;
  try {
    sc = scale_from_name(name.substr(dash + 1));
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const bool octave = family == "octave-yolo";
  BuildOptions o;
  o.use_fsb = f.fsb.value_or(octave);
  o.use_dsdown = f.dsdown.value_or(octave);
  o.use_fssa = f.fssa.value_or(octave);
  o.use_transformer = f.transformer.value_or(false);
  o.backbone_only = f.backbone_only;
  o.alpha = f.alpha;
  if (o.use_fssa && o.use_transformer) throw UsageError("--fssa and --transformer are mutually exclusive");

  std::string label = model_name(octave, sc);
  std::vector<std::string> tags;
  if (o.use_fsb != octave) tags.push_back(o.use_fsb ? "fsb" : "no-fsb");
  if (o.use_dsdown != octave) tags.push_back(o.use_dsdown ? "dsdown" : "no-dsdown");
  if (o.use_fssa != octave) tags.push_back(o.use_fssa ? "fssa" : "no-fssa");
  if (o.use_transformer) tags.push_back("transformer");
  if (o.backbone_only) tags.push_back("backbone-only");
  if (o.alpha != 0.5) tags.push_back("alpha=" + detail::fixed(o.alpha, 3));
  if (!tags.empty()) {
    label += "[";
    for (std::size_t i = 0; i < tags.size(); ++i) label += (i ? "," : "") + tags[i];
    label += "]";
  }
  return build_graph(sc, o, resolution, label);
}

/// Rounds up to a multiple of `divisor`, warning on stderr; throws in strict mode.
int round_resolution(int res, int divisor, bool strict) {
  if (res < 1) throw UsageError("--res must be positive");
  const int r = ((res + divisor - 1) / divisor) * divisor;
  if (r != res) {
    if (strict) {
      throw UsageError("--res " + std::to_string(res) + " is not a multiple of " + std::to_string(divisor));
    }
    std::cerr << "warning: resolution " << res << " rounded up to " << r << " (multiple of " << divisor << ")\n";
  }
  return r;
}

int divisor_for(const std::vector<std::string>& models, const GraphFlags& f) {
  int d = 32;
  for (const auto& m : models) d = std::max(d, required_divisor(make_graph(m, f, 640)));
  return d;
}

std::vector<std::string> expand_models(const std::vector<std::string>& in) {
  std::vector<std::string> out;
  for (const auto& m : in) {
    if (lower(m) == "all") {
      for (const auto& s : all_scales()) {
        out.push_back(model_name(false, s));
        out.push_back(model_name(true, s));
      }
    } else {
      out.push_back(m);
    }
  }
  return out;
}

ReportFormat format_of(const std::string& s) {
  try {
    return parse_format(s);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

void write_output(const std::string& text, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot open '" + path + "' for writing");
  os << text;
  if (!os) throw std::runtime_error("failed writing '" + path + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Octave-YOLO graph builder, cost analyzer and verifier"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (overrides OCTYOLO_THREADS; 1 = serial reference mode)")
      ->check(CLI::PositiveNumber);

  std::vector<std::string> models;
  std::string baseline = "yolov8-n";
  int res = 640;
  std::string format = "json";
  std::string out;
  std::uint64_t seed = 0;
  GraphFlags flags;

  auto* build = app.add_subcommand("build", "Build a model graph and export it as JSON");
  build->add_option("--model", models, "Model name, e.g. octave-yolo-n")->required()->expected(1);
  build->add_option("--res", res, "Input resolution");
  build->add_option("--out", out, "Output path (default stdout)");
  flags.add_to(build);

  auto* analyze = app.add_subcommand("analyze", "Per-layer parameter and FLOP counts");
  analyze->add_option("--model", models, "Model name(s), or 'all' for both families at every scale")
      ->required()
      ->expected(1, 20);
  analyze->add_option("--res", res, "Input resolution");
  analyze->add_option("--format", format, "json, csv or markdown");
  analyze->add_option("--out", out, "Output path (default stdout)");
  flags.add_to(analyze);

  auto* compare_cmd = app.add_subcommand("compare", "Counts for a model with deltas against a baseline");
  compare_cmd->add_option("--model", models, "Model name")->required()->expected(1);
  compare_cmd->add_option("--baseline", baseline, "Baseline model name (family defaults, flags not applied)");
  compare_cmd->add_option("--res", res, "Input resolution");
  compare_cmd->add_option("--format", format, "json, csv or markdown");
  compare_cmd->add_option("--out", out, "Output path (default stdout)");
  flags.add_to(compare_cmd);

  std::string table = "components";
  std::string scale = "n";
  auto* ablation = app.add_subcommand("ablation", "Cumulative component comparisons at one scale");
  ablation->add_option("--table", table, "components, bottleneck or attention")
      ->check(CLI::IsMember({"components", "bottleneck", "attention"}));
  ablation->add_option("--scale", scale, "n, s, m, l or x");
  ablation->add_option("--res", res, "Input resolution");
  ablation->add_option("--format", format, "json, csv or markdown");
  ablation->add_option("--out", out, "Output path (default stdout)");

  VerifyOptions vopt;
  auto* verify = app.add_subcommand("verify", "Run the self-check suites");
  verify->add_option("--seed", seed, "Seed for all random fixtures");
  verify->add_option("--tol", vopt.grad_tol, "Relative tolerance for gradient checks")->check(CLI::PositiveNumber);
  verify->add_option("--step", vopt.grad_step, "Finite-difference step")->check(CLI::PositiveNumber);
  verify->add_flag("--perturb-weights", vopt.perturb_weights, "Add noise to every block parameter");
  verify->add_option("--out", out, "Output path (default stdout)");

  std::vector<int> resolutions{320, 512, 640, 736, 1088};
  int repeats = kMinBenchRepeats;
  int warmup = 2;
  auto* bench = app.add_subcommand("bench", "Median forward latency per model and resolution");
  bench->add_option("--model", models, "Model name(s)")->expected(1, 20);
  bench->add_option("--res", resolutions, "Resolutions")->expected(1, 20);
  bench->add_option("--repeats", repeats, "Timed runs per point (>= 20)");
  bench->add_option("--warmup", warmup, "Untimed runs per point")->check(CLI::NonNegativeNumber);
  bench->add_option("--seed", seed, "Seed for weights and input");
  bench->add_option("--out", out, "Output path (default stdout)");
  flags.add_to(bench);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (threads > 0) set_num_threads(threads);

    if (build->parsed()) {
      const int r = round_resolution(res, divisor_for(models, flags), flags.strict);
      write_output(graph_json(make_graph(models.front(), flags, r)).dump(2) + "\n", out);
      return 0;
    }

    if (analyze->parsed()) {
      const auto f = format_of(format);
      models = expand_models(models);
      const int r = round_resolution(res, divisor_for(models, flags), flags.strict);
      std::vector<CostReport> reports;
      for (const auto& m : models) reports.push_back(count_costs(make_graph(m, flags, r)));
      // Octave rows carry deltas against the same-scale YOLOv8 row when present.
      for (auto& rep : reports) {
        if (rep.name.rfind("octave-yolo-", 0) != 0) continue;
        const std::string base = "yolov8-" + rep.name.substr(12, 1);
        for (const auto& b : reports)
          if (b.name == base) rep = compare(rep, b);
      }
      write_output(emit_report(reports, f), out);
      return 0;
    }

    if (compare_cmd->parsed()) {
      const auto f = format_of(format);
      const int r = round_resolution(res, divisor_for({models.front(), baseline}, flags), flags.strict);
      const auto base = count_costs(make_graph(baseline, GraphFlags{}, r));
      auto ours = compare(count_costs(make_graph(models.front(), flags, r)), base);
      write_output(emit_report({base, ours}, f), out);
      return 0;
    }

    if (ablation->parsed()) {
      const auto f = format_of(format);
      ScaleSpec sc;
      try {
        sc = scale_from_name(scale);
      } catch (const ConfigError& e) {
        throw UsageError(e.what());
      }
      const int r = round_resolution(res, 64, false);
      std::vector<NamedGraph> graphs = table == "components"   ? ablation_graphs(sc, {}, r)
                                       : table == "bottleneck" ? bottleneck_graphs(sc, r)
                                                               : attention_graphs(sc, r);
      std::vector<CostReport> reports;
      for (const auto& g : graphs) reports.push_back(count_costs(g.graph));
      for (std::size_t i = 1; i < reports.size(); ++i) reports[i] = compare(reports[i], reports.front());
      write_output(emit_report(reports, f), out);
      return 0;
    }

    if (verify->parsed()) {
      vopt.seed = seed;
      const auto rep = run_verify(vopt);
      write_output(to_json(rep).dump(2) + "\n", out);
      for (const auto& c : rep.checks) {
        if (!c.passed) std::cerr << "FAIL " << c.suite << "/" << c.name << ": " << c.max_error << " > " << c.tolerance << "\n";
      }
      std::cerr << "verify: " << rep.checks.size() - rep.failures() << "/" << rep.checks.size() << " checks passed\n";
      return rep.passed() ? 0 : kExitVerify;
    }

    if (bench->parsed()) {
      if (repeats < kMinBenchRepeats) throw UsageError("--repeats must be at least 20");
      if (models.empty()) models = {"yolov8-n", "octave-yolo-n"};
      const int d = divisor_for(models, flags);
      nlohmann::json results = nlohmann::json::array();
      for (int req : resolutions) {
        const int r = round_resolution(req, d, flags.strict);
        for (const auto& m : models) {
          Network<float> net(make_graph(m, flags, r), seed);
          auto j = to_json(bench_forward(net, r, repeats, warmup, seed));
          j["requested_resolution"] = req;
          results.push_back(std::move(j));
          std::cerr << net.graph().name << " @" << r << ": " << results.back()["median_ms"].get<double>() << " ms\n";
        }
      }
      write_output(nlohmann::json{{"schema", kReportSchema}, {"results", results}}.dump(2) + "\n", out);
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}
