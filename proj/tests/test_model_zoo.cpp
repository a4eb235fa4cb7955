#include <gtest/gtest.h>

#include <cmath>

#include "octyolo/analysis.hpp"
#include "octyolo/model_zoo.hpp"

using namespace octyolo;

namespace {

double mparams(const LayerGraph& g) { return count_costs(g).mparams(); }
double gflops(const LayerGraph& g) { return count_costs(g).gflops(); }

void expect_within(double got, double want, double rel, const std::string& what) {
  EXPECT_LE(std::abs(got - want) / want, rel) << what << ": got " << got << ", want " << want;
}

}  // namespace

TEST(ScaleSpec, Multipliers) {
  EXPECT_EQ(scale_n().width, 0.25);
  EXPECT_EQ(scale_m().depth, 2.0 / 3);
  EXPECT_EQ(scale_x().ratio, 1.0);
  EXPECT_EQ(scale_from_name("l"), scale_l());
  EXPECT_THROW(scale_from_name("q"), ConfigError);
  EXPECT_EQ(scaled_channels(scale_n(), 1024), 256);
  EXPECT_EQ(scaled_channels(scale_s(), 1024), 512);
  EXPECT_EQ(scaled_channels(scale_m(), 1024), 576);
  EXPECT_EQ(scaled_channels(scale_x(), 1024), 640);
  EXPECT_EQ(scaled_depth(scale_n(), 3), 1);
  EXPECT_EQ(scaled_depth(scale_m(), 6), 4);
}

TEST(Yolov8, NanoMatchesPublishedCounts) {
  const auto g = build_yolov8(scale_n());
  expect_within(mparams(g), 3.2, 0.05, "yolov8-n params");
  expect_within(gflops(g), 8.7, 0.05, "yolov8-n flops");
}

TEST(Yolov8, SmallMatchesPublishedCounts) {
  const auto g = build_yolov8(scale_s());
  expect_within(mparams(g), 11.2, 0.05, "yolov8-s params");
  expect_within(gflops(g), 28.6, 0.05, "yolov8-s flops");
}

TEST(Yolov8, BackboneStagesHalveResolution) {
  for (const auto& sc : all_scales()) {
    const auto g = build_yolov8(sc);
    int prev = g.resolution;
    for (const auto& n : g.nodes) {
      const bool down = n.spec.stride == 2 || n.spec.kind == BlockKind::DSDown;
      if (n.stage == Stage::Neck || n.stage == Stage::Head) break;
      const int h = n.out_shapes.front().h;
      EXPECT_EQ(h, down ? prev / 2 : prev) << sc.name << " node " << n.id;
      prev = h;
    }
    EXPECT_EQ(prev, g.resolution / 32);
  }
}

TEST(OctaveYolo, NanoWithinTolerance) {
  const auto g = build_octave_yolo(scale_n());
  expect_within(mparams(g), 1.8, 0.15, "octave-n params");
  expect_within(gflops(g), 5.3, 0.15, "octave-n flops");
}

TEST(OctaveYolo, AblationIntermediatesWithinTolerance) {
  const auto rows = ablation_graphs();
  ASSERT_EQ(rows.size(), 4u);
  expect_within(mparams(rows[1].graph), 2.1, 0.15, "+FSB params");
  expect_within(gflops(rows[1].graph), 6.1, 0.15, "+FSB flops");
  expect_within(mparams(rows[2].graph), 1.6, 0.15, "+FSB+DSDown params");
  expect_within(gflops(rows[2].graph), 5.1, 0.15, "+FSB+DSDown flops");
}

TEST(OctaveYolo, SwitchesReplaceTheRightBlocks) {
  BuildOptions o;
  o.use_fsb = true;
  const auto fsb = build_graph(scale_n(), o);
  int c2f = 0, fsbs = 0;
  for (const auto& n : fsb.nodes) {
    c2f += n.spec.kind == BlockKind::C2f;
    fsbs += n.spec.kind == BlockKind::FSB;
  }
  EXPECT_EQ(c2f, 0);
  EXPECT_EQ(fsbs, 8);

  o.backbone_only = true;
  const auto bb = build_graph(scale_n(), o);
  c2f = fsbs = 0;
  for (const auto& n : bb.nodes) {
    c2f += n.spec.kind == BlockKind::C2f;
    fsbs += n.spec.kind == BlockKind::FSB;
    if (n.spec.kind == BlockKind::FSB) {
      EXPECT_NE(n.stage, Stage::Neck);
    }
  }
  EXPECT_EQ(c2f, 4);
  EXPECT_EQ(fsbs, 4);

  const auto full = build_octave_yolo(scale_n());
  int fssa = 0, ds = 0, plain_s2 = 0;
  for (const auto& n : full.nodes) {
    fssa += n.spec.kind == BlockKind::FSSA;
    ds += n.spec.kind == BlockKind::DSDown;
    plain_s2 += n.spec.kind == BlockKind::ConvUnit && n.spec.stride == 2;
  }
  EXPECT_EQ(fssa, 1);
  EXPECT_EQ(ds, 6);
  EXPECT_EQ(plain_s2, 1);  // stem
  const auto& after_sppf = full.nodes[10];
  EXPECT_EQ(full.nodes[9].spec.kind, BlockKind::SPPF);
  EXPECT_EQ(after_sppf.spec.kind, BlockKind::FSSA);
  EXPECT_EQ(after_sppf.stage, Stage::P5);
}

TEST(Graph, BuildIsDeterministic) {
  for (const auto& name : model_names()) EXPECT_EQ(build_named(name), build_named(name)) << name;
}

TEST(Graph, InputsPrecedeConsumers) {
  for (const auto& name : model_names()) {
    const auto g = build_named(name);
    for (const auto& n : g.nodes)
      for (int src : n.inputs) EXPECT_TRUE(src == kImage || (src >= 0 && src < n.id)) << name << " node " << n.id;
    EXPECT_EQ(g.nodes.back().spec.kind, BlockKind::Detect);
  }
}

TEST(Graph, TopologyErrorsAreReported) {
  auto g = build_yolov8(scale_n(), 64);
  auto bad = g;
  bad.nodes[3].inputs = {5};
  EXPECT_THROW(infer_shapes(bad, Shape{1, 3, 64, 64}), ConfigError);
  bad = g;
  bad.nodes.pop_back();
  EXPECT_THROW(infer_shapes(bad, Shape{1, 3, 64, 64}), ConfigError);
  EXPECT_THROW(infer_shapes(g, Shape{1, 4, 64, 64}), ShapeError);
}

TEST(Graph, NamedBuildErrors) {
  EXPECT_THROW(build_named("yolov9-n"), ConfigError);
  EXPECT_THROW(build_named("yolov8"), ConfigError);
  EXPECT_THROW(build_named("octave-yolo-z"), ConfigError);
  BuildOptions both{false, false, true};
  both.use_transformer = true;
  EXPECT_THROW(build_graph(scale_n(), both), ConfigError);
  BuildOptions a;
  a.alpha = 1.5;
  EXPECT_THROW(build_graph(scale_n(), a), ConfigError);
}

TEST(Graph, ResolutionDivisor) {
  EXPECT_EQ(required_divisor(build_yolov8(scale_n())), 32);
  EXPECT_EQ(required_divisor(build_octave_yolo(scale_n())), 64);
  EXPECT_NO_THROW(build_yolov8(scale_n(), 736));
  try {
    build_octave_yolo(scale_n(), {true, true, true}, 736);
    FAIL() << "736 accepted for an octave graph";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("multiples of 64"), std::string::npos) << e.what();
  }
  try {
    build_yolov8(scale_n(), 650);
    FAIL() << "650 accepted";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("multiples of 32"), std::string::npos) << e.what();
  }
}

TEST(Forward, OctaveNanoStrides) {
  Network<float> net(build_octave_yolo(scale_n()));
  Rng rng(1);
  const auto y = net.forward(Tensor<float>::uniform(Shape{1, 3, 640, 640}, rng));
  ASSERT_EQ(y.size(), 3u);
  EXPECT_EQ(y[0].shape(), (Shape{1, 144, 80, 80}));
  EXPECT_EQ(y[1].shape(), (Shape{1, 144, 40, 40}));
  EXPECT_EQ(y[2].shape(), (Shape{1, 144, 20, 20}));
}

TEST(Forward, OctaveNanoAt1088) {
  Network<float> net(build_octave_yolo(scale_n(), {true, true, true}, 1088));
  Rng rng(2);
  const auto y = net.forward(Tensor<float>::uniform(Shape{1, 3, 1088, 1088}, rng));
  ASSERT_EQ(y.size(), 3u);
  EXPECT_EQ(y[0].shape(), (Shape{1, 144, 136, 136}));
  EXPECT_EQ(y[2].shape(), (Shape{1, 144, 34, 34}));
  for (const auto& t : y) EXPECT_TRUE(t.all_finite());
}

TEST(Forward, EveryVariantFiniteOnRandomInput) {
  for (const auto& name : model_names()) {
    Network<float> net(build_named(name, {true, true, true}, 128), 7);
    Rng rng(3);
    const auto y = net.forward(Tensor<float>::uniform(Shape{1, 3, 128, 128}, rng));
    ASSERT_EQ(y.size(), 3u) << name;
    for (const auto& t : y) EXPECT_TRUE(t.all_finite()) << name;
  }
}

TEST(Forward, Deterministic) {
  Network<float> a(build_octave_yolo(scale_n(), {true, true, true}, 128), 5);
  Network<float> b(build_octave_yolo(scale_n(), {true, true, true}, 128), 5);
  Rng rng(4);
  const auto x = Tensor<float>::uniform(Shape{1, 3, 128, 128}, rng);
  const auto ya = a.forward(x), yb = b.forward(x);
  for (std::size_t i = 0; i < ya.size(); ++i) EXPECT_EQ(ya[i].vec(), yb[i].vec());
}

TEST(Forward, RejectsBadResolution) {
  Network<float> net(build_yolov8(scale_n(), 64));
  Tensor<float> x(Shape{1, 3, 80, 80});
  try {
    net.forward(x);
    FAIL() << "80x80 accepted";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("multiples of 32"), std::string::npos);
  }
}

TEST(Forward, ParamCountMatchesAnalyzer) {
  for (const auto& name : model_names()) {
    Network<float> net(build_named(name, {true, true, true}, 128));
    EXPECT_EQ(net.param_count(), count_costs(net.graph()).total_params) << name;
  }
}

TEST(Costs, QuadraticInPixelCount) {
  for (const auto& name : model_names()) {
    const auto g = build_named(name);
    const double f640 = static_cast<double>(count_costs(g, 640).total_flops);
    for (int r : {320, 1280}) {
      const double want = (r / 640.0) * (r / 640.0);
      const double got = static_cast<double>(count_costs(g, r).total_flops) / f640;
      // Attention grows with tokens squared, so graphs with attention are
      // only close, not exact.
      EXPECT_NEAR(got / want, 1.0, 0.01 + (r == 1280 ? 0.02 : 0.0)) << name << " at " << r;
    }
  }
}

TEST(Costs, ConvOnlyRegionScalesExactlyByFour) {
  const auto g = build_yolov8(scale_n());
  const auto a = count_costs(g, 320), b = count_costs(g, 640);
  EXPECT_EQ(a.total_params, b.total_params);
  EXPECT_EQ(4 * a.total_flops, b.total_flops);
}
