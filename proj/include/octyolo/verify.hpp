#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "octyolo/analysis.hpp"

// Self-check suites behind `octyolo verify`: degenerate-alpha collapse, the
// compositional octave oracle, finite-difference gradients for every block,
// and shape propagation through the model zoo.

namespace octyolo {

struct VerifyOptions {
  std::uint64_t seed = 0;
  int degenerate_cases = 100;
  int composition_cases = 50;
  double degenerate_tol = 1e-12;
  double composition_tol = 1e-10;
  double grad_step = 1e-5;
  double grad_tol = 1e-4;
  bool perturb_weights = false;
};

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  [[nodiscard]] bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
  }
  [[nodiscard]] std::size_t failures() const {
    return static_cast<std::size_t>(
        std::count_if(checks.begin(), checks.end(), [](const CheckResult& c) { return !c.passed; }));
  }
};

namespace ref {

/// Direct nested-loop convolution, no lowering.
inline Tensor<double> conv(const Tensor<double>& x, const ConvParams<double>& p) {
  const int k = p.kernel(), s = p.stride, pad = p.padding;
  const int cin_g = p.weight.c(), cout_g = p.c_out() / p.groups;
  const int ho = (x.h() + 2 * pad - k) / s + 1, wo = (x.w() + 2 * pad - k) / s + 1;
  Tensor<double> y(Shape{x.n(), p.c_out(), ho, wo});
  for (int b = 0; b < x.n(); ++b)
    for (int co = 0; co < p.c_out(); ++co)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = p.bias ? (*p.bias)[static_cast<std::size_t>(co)] : 0.0;
          const int g = co / cout_g;
          for (int ci = 0; ci < cin_g; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * s - pad + ky, ix = ox * s - pad + kx;
                if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
                acc += p.weight(co, ci, ky, kx) * x(b, g * cin_g + ci, iy, ix);
              }
          y(b, co, oy, ox) = acc;
        }
  return y;
}

inline Tensor<double> pool(const Tensor<double>& x) {
  Tensor<double> y(Shape{x.n(), x.c(), x.h() / 2, x.w() / 2});
  for (int b = 0; b < x.n(); ++b)
    for (int c = 0; c < x.c(); ++c)
      for (int i = 0; i < y.h(); ++i)
        for (int j = 0; j < y.w(); ++j)
          y(b, c, i, j) = 0.25 * (x(b, c, 2 * i, 2 * j) + x(b, c, 2 * i + 1, 2 * j) + x(b, c, 2 * i, 2 * j + 1) +
                                  x(b, c, 2 * i + 1, 2 * j + 1));
  return y;
}

inline Tensor<double> up(const Tensor<double>& x) {
  Tensor<double> y(Shape{x.n(), x.c(), x.h() * 2, x.w() * 2});
  for (int b = 0; b < y.n(); ++b)
    for (int c = 0; c < y.c(); ++c)
      for (int i = 0; i < y.h(); ++i)
        for (int j = 0; j < y.w(); ++j) y(b, c, i, j) = x(b, c, i / 2, j / 2);
  return y;
}

inline Tensor<double> plus(Tensor<double> a, const Tensor<double>& b) {
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
  return a;
}

}  // namespace ref

namespace detail {

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline CheckResult verdict(std::string suite, std::string name, double err, double tol, std::string detail = {}) {
  return {std::move(suite), std::move(name), err <= tol, err, tol, std::move(detail)};
}

inline int pick(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

}  // namespace detail

/// octave_conv with alpha_in = alpha_out = 0 against a direct convolution.
inline CheckResult check_degenerate_alpha(const VerifyOptions& o) {
  Rng rng(o.seed);
  double worst = 0.0;
  for (int i = 0; i < o.degenerate_cases; ++i) {
    const int ci = detail::pick(rng, 1, 12), co = detail::pick(rng, 1, 12);
    const int k = 2 * detail::pick(rng, 0, 2) + 1;
    const int h = detail::pick(rng, 1, 12), w = detail::pick(rng, 1, 12);
    auto p = OctaveConvParams<double>::create(ci, co, 0.0, 0.0, k);
    p.init(rng);
    const auto x = Tensor<double>::uniform(Shape{detail::pick(rng, 1, 2), ci, h, w}, rng);
    const auto y = octave_conv(x, p);
    worst = std::max(worst, y.low ? INFINITY : detail::max_abs_diff(*y.high, ref::conv(x, *p.hh)));
  }
  return detail::verdict("octave", "degenerate_alpha", worst, o.degenerate_tol,
                         std::to_string(o.degenerate_cases) + " random configurations");
}

/// octave_conv at alpha 0.5 against pool / upsample / four direct convs.
inline CheckResult check_composition(const VerifyOptions& o) {
  Rng rng(o.seed + 1);
  double worst = 0.0;
  for (int i = 0; i < o.composition_cases; ++i) {
    const int ci = 2 * detail::pick(rng, 1, 6), co = 2 * detail::pick(rng, 1, 6);
    const int k = 2 * detail::pick(rng, 0, 2) + 1;
    const int h = 2 * detail::pick(rng, 2, 7), w = 2 * detail::pick(rng, 2, 7);
    const int n = detail::pick(rng, 1, 2);
    auto p = OctaveConvParams<double>::create(ci, co, 0.5, 0.5, k);
    p.init(rng);
    OctaveTensor<double> x{Tensor<double>::uniform(Shape{n, p.c_in_high, h, w}, rng),
                           Tensor<double>::uniform(Shape{n, p.c_in_low, h / 2, w / 2}, rng)};
    const auto y = octave_conv(x, p);
    const auto yh = ref::plus(ref::conv(*x.high, *p.hh), ref::up(ref::conv(*x.low, *p.lh)));
    const auto yl = ref::plus(ref::conv(ref::pool(*x.high), *p.hl), ref::conv(*x.low, *p.ll));
    worst = std::max({worst, detail::max_abs_diff(*y.high, yh), detail::max_abs_diff(*y.low, yl)});
  }
  return detail::verdict("octave", "composition", worst, o.composition_tol,
                         std::to_string(o.composition_cases) + " random configurations");
}

/// Finite differences for a bare biased conv, over input, weight and bias.
inline CheckResult check_conv_gradient(const VerifyOptions& o) {
  Rng rng(o.seed + 2);
  auto p = make_conv<double>(4, 6, 3, 1, 1, true);
  init_conv(p, rng);
  auto x = Tensor<double>::uniform(Shape{2, 4, 6, 6}, rng);
  const auto r = Tensor<double>::uniform(Shape{2, 6, 6, 6}, rng);
  auto analytic = [&] {
    auto xl = ag::leaf(x, "x");
    auto wl = ag::leaf(p.weight, "weight");
    auto bl = ag::leaf(Tensor<double>(Shape{1, 6, 1, 1}, *p.bias), "bias");
    auto root = ag::sum(ag::mul(ag::conv2d(xl, wl, bl, 1, 1, 1), ag::constant(r)));
    auto g = ag::backward(root);
    return std::vector<std::vector<double>>{g.at(xl.get()).vec(), g.at(wl.get()).vec(), g.at(bl.get()).vec()};
  };
  auto evaluate = [&] {
    const auto y = conv2d(x, p);
    double s = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * r[i];
    return s;
  };
  const auto rep = ag::gradient_check<double, double>(analytic, evaluate,
                                              {{"x", x.data()}, {"weight", p.weight.data()}, {"bias", *p.bias}},
                                              o.grad_step, o.grad_tol);
  return detail::verdict("autograd", "conv2d", rep.max_rel_error(), o.grad_tol);
}

/// Small block configurations used by the gradient suite.
inline std::vector<std::pair<BlockSpec, Shape>> gradient_cases() {
  auto spec = [](BlockKind k, int ci, int co) {
    BlockSpec s;
    s.kind = k;
    s.c_in = ci;
    s.c_out = co;
    return s;
  };
  BlockSpec conv = spec(BlockKind::ConvUnit, 3, 4);
  conv.k = 3;
  conv.stride = 2;
  BlockSpec bott = spec(BlockKind::Bottleneck, 4, 4);
  bott.shortcut = true;
  BlockSpec dw = spec(BlockKind::DWBottleneck, 4, 4);
  dw.shortcut = true;
  BlockSpec c2f = spec(BlockKind::C2f, 4, 6);
  c2f.n = 2;
  c2f.shortcut = true;
  BlockSpec fsb = spec(BlockKind::FSB, 4, 8);
  fsb.n = 2;
  fsb.shortcut = true;
  BlockSpec fssa = spec(BlockKind::FSSA, 8, 8);
  fssa.heads = 2;
  BlockSpec trans = spec(BlockKind::Transformer, 4, 4);
  trans.heads = 2;
  return {{conv, {2, 3, 6, 6}},     {bott, {2, 4, 6, 6}},  {dw, {2, 4, 6, 6}},
          {c2f, {2, 4, 6, 6}},      {fsb, {2, 4, 8, 8}},   {fssa, {2, 8, 8, 8}},
          {spec(BlockKind::DSDown, 4, 6), {2, 4, 6, 6}},   {spec(BlockKind::SPPF, 4, 6), {1, 4, 8, 8}},
          {trans, {2, 4, 4, 4}}};
}

/// Additive noise on every parameter, norms included.
template <std::floating_point T>
void perturb_params(BlockParams<T>& p, Rng& rng, double scale = 0.2) {
  std::uniform_real_distribution<double> d(-scale, scale);
  visit_block_params<T>(p, "", [&](const std::string&, std::span<T> v) {
    for (auto& e : v) e += static_cast<T>(d(rng));
  });
}

inline std::vector<CheckResult> check_block_gradient_suite(const VerifyOptions& o) {
  std::vector<CheckResult> out;
  Rng rng(o.seed + 3);
  for (const auto& [spec, shape] : gradient_cases()) {
    auto p = make_block<double>(spec);
    init_block(p, rng);
    if (o.perturb_weights) perturb_params(p, rng);
    const auto x = Tensor<double>::uniform(shape, rng);
    const auto rep = check_block_gradients(spec, p, x, o.grad_step, o.grad_tol, o.seed + 4);
    std::string worst;
    double w = -1;
    for (const auto& e : rep.entries)
      if (e.max_rel_error > w) {
        w = e.max_rel_error;
        worst = e.name;
      }
    out.push_back(detail::verdict("blocks", std::string("grad.") + to_string(spec.kind), rep.max_rel_error(),
                                  o.grad_tol, "worst tensor: " + worst));
  }
  return out;
}

/// Executed output shapes against static inference for the N models, plus
/// the Detect layout and divisor rules at 640 for every model.
inline std::vector<CheckResult> check_shape_suite(const VerifyOptions& o) {
  std::vector<CheckResult> out;
  for (const auto& name : model_names()) {
    const auto g = build_named(name);
    const auto& det = g.nodes.back().out_shapes;
    bool ok = det.size() == 3;
    for (std::size_t i = 0; ok && i < det.size(); ++i) {
      const int stride = 8 << i;
      ok = det[i] == Shape{1, g.nodes.back().spec.classes + 4 * g.nodes.back().spec.reg_max, 640 / stride, 640 / stride};
    }
    const bool octave = name.rfind("octave", 0) == 0;
    ok = ok && required_divisor(g) == (octave ? 64 : 32);
    out.push_back({"model_zoo", "detect_layout." + name, ok, ok ? 0.0 : 1.0, 0.0, {}});
  }
  for (const char* name : {"yolov8-n", "octave-yolo-n"}) {
    const int res = 128;
    Network<float> net(build_named(name, {true, true, true}, res), o.seed);
    Rng rng(o.seed + 5);
    const auto y = net.forward(Tensor<float>::uniform(Shape{1, 3, res, res}, rng));
    const auto want = infer_shapes(net.graph(), Shape{1, 3, res, res}).back();
    bool ok = y.size() == want.size();
    for (std::size_t i = 0; ok && i < y.size(); ++i) {
      ok = y[i].shape() == want[i];
      for (std::size_t j = 0; ok && j < y[i].numel(); ++j) ok = std::isfinite(y[i][j]);
    }
    out.push_back({"model_zoo", std::string("forward_shapes.") + name, ok, ok ? 0.0 : 1.0, 0.0, {}});
  }
  return out;
}

/// Closed-form counts against executed-op tallies and parameter buffers.
inline std::vector<CheckResult> check_cost_suite(const VerifyOptions& o) {
  std::vector<CheckResult> out;
  for (const char* name : {"yolov8-n", "octave-yolo-n"}) {
    const int res = 128;
    Network<float> net(build_named(name, {true, true, true}, res), o.seed);
    CountingOps<float> ops;
    Rng rng(o.seed + 6);
    net.forward(ops, Tensor<float>::uniform(Shape{1, 3, res, res}, rng));
    const auto rep = count_costs(net.graph(), res);
    const bool ok = rep.total_flops == ops.tally.total() && rep.total_params == net.param_count();
    out.push_back({"analysis", std::string("closed_form_vs_executed.") + name, ok, ok ? 0.0 : 1.0, 0.0,
                   "flops " + std::to_string(rep.total_flops) + " vs " + std::to_string(ops.tally.total()) +
                       ", params " + std::to_string(rep.total_params) + " vs " + std::to_string(net.param_count())});
  }
  return out;
}

inline VerifyReport run_verify(const VerifyOptions& o) {
  VerifyReport r;
  r.checks.push_back(check_degenerate_alpha(o));
  r.checks.push_back(check_composition(o));
  r.checks.push_back(check_conv_gradient(o));
  for (auto& c : check_block_gradient_suite(o)) r.checks.push_back(std::move(c));
  for (auto& c : check_shape_suite(o)) r.checks.push_back(std::move(c));
  for (auto& c : check_cost_suite(o)) r.checks.push_back(std::move(c));
  return r;
}

inline nlohmann::json to_json(const VerifyReport& r) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : r.checks) {
    checks.push_back({{"suite", c.suite},
                      {"name", c.name},
                      {"passed", c.passed},
                      {"max_error", c.max_error},
                      {"tolerance", c.tolerance},
                      {"detail", c.detail}});
  }
  return {{"schema", kReportSchema},
          {"verdict", r.passed() ? "pass" : "fail"},
          {"failures", r.failures()},
          {"checks", checks}};
}

}  // namespace octyolo
