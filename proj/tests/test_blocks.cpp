#include <gtest/gtest.h>

#include <numeric>

#include "octyolo/verify.hpp"

#include "oracles.hpp"

using namespace octyolo;

namespace {

BlockSpec spec(BlockKind k, int ci, int co) {
  BlockSpec s;
  s.kind = k;
  s.c_in = ci;
  s.c_out = co;
  return s;
}

template <class P>
std::size_t params_of(P& p) {
  return count_params<double>(p);
}

oracle::Conv to_oracle(const ConvParams<double>& p) {
  return {p.weight, p.bias.value_or(std::vector<double>{}), p.stride, p.padding, p.groups};
}

/// conv -> eval norm -> optional SiLU, from the oracle kernels.
Tensor<double> unit_oracle(const Tensor<double>& x, const ConvUnitParams<double>& p) {
  auto y = oracle::batchnorm_stats(oracle::conv(x, to_oracle(p.conv)), p.norm.gamma, p.norm.beta,
                                   p.norm.running_mean, p.norm.running_var, p.norm.eps);
  return p.act ? oracle::silu(y) : y;
}

void randomize_norm(NormParams<double>& n, std::mt19937_64& rng) {
  const Shape s{1, n.channels(), 1, 1};
  n.gamma = oracle::random(s, rng, 0.5, 1.5).vec();
  n.beta = oracle::random(s, rng).vec();
  n.running_mean = oracle::random(s, rng).vec();
  n.running_var = oracle::random(s, rng, 0.5, 2).vec();
}

}  // namespace

TEST(ConvUnit, IdentityWeightsGiveSilu) {
  auto p = ConvUnitParams<double>::create(3, 3, 1);
  for (int c = 0; c < 3; ++c) p.conv.weight(c, c, 0, 0) = 1.0;
  p.norm.eps = 1e-300;
  std::mt19937_64 rng(1);
  const auto x = oracle::random(Shape{1, 3, 4, 4}, rng);
  EagerOps<double> ops;
  EXPECT_LE(oracle::max_diff(conv_unit(ops, x, p), oracle::silu(x)), 1e-15);
}

TEST(ConvUnit, StrideTwoHalvesAndMatchesOracle) {
  std::mt19937_64 rng(2);
  auto p = ConvUnitParams<double>::create(3, 8, 3, 2);
  Rng r(3);
  p.init(r);
  randomize_norm(p.norm, rng);
  const auto x = oracle::random(Shape{1, 3, 64, 64}, rng);
  EagerOps<double> ops;
  const auto y = conv_unit(ops, x, p);
  EXPECT_EQ(y.shape(), (Shape{1, 8, 32, 32}));
  EXPECT_LE(oracle::max_diff(y, unit_oracle(x, p)), 1e-12);
}

TEST(DWBottleneck, ZeroWeightsWithShortcutReturnInput) {
  // Zero convs give norm(0) = beta = 0 and silu(0) = 0, so only x remains.
  auto p = BottleneckParams<double>::dw(16, 16, true);
  std::mt19937_64 rng(4);
  const auto x = oracle::random(Shape{2, 16, 6, 6}, rng);
  EagerOps<double> ops;
  const auto y = bottleneck(ops, x, p);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_LE(oracle::max_diff(y, x), 0.0);
}

TEST(DWBottleneck, ParameterCountsAtSixtyFour) {
  auto dw = BottleneckParams<double>::dw(64, 64, true);
  EXPECT_EQ(params_of(dw), 64u * 9 + 64 * 64 + 4 * 64);  // 4928
  EXPECT_EQ(params_of(dw), 4928u);
  EXPECT_EQ(block_cost(spec(BlockKind::DWBottleneck, 64, 64), {Shape{1, 64, 8, 8}}).params, 4928u);
  auto plain = make_conv<double>(64, 64, 3);
  EXPECT_EQ(plain.param_count(), 36864u);
  EXPECT_EQ(cost::conv(64, 64, 3, 1, Shape{1, 64, 8, 8}).params, 36864u);
  EXPECT_THROW(BottleneckParams<double>::dw(8, 16, true), ConfigError);
}

TEST(C2f, ShapeAndHandCountedParams) {
  auto p = C2fParams<double>::create(64, 64, 1, true);
  // cv1 64->64 (1x1) + BN, two 3x3 32->32 + BN, cv2 96->64 + BN.
  const std::size_t want = (64 * 64 + 128) + 2 * (32 * 32 * 9 + 64) + (96 * 64 + 128);
  EXPECT_EQ(params_of(p), want);
  EXPECT_EQ(block_cost(spec(BlockKind::C2f, 64, 64), {Shape{1, 64, 8, 8}}).params, want);
  EagerOps<double> ops;
  auto q = C2fParams<double>::create(8, 12, 2, false);
  EXPECT_EQ(c2f(ops, Tensor<double>(Shape{2, 8, 6, 6}), q).shape(), (Shape{2, 12, 6, 6}));
}

TEST(FSB, ShapeAndCheaperThanC2f) {
  EagerOps<double> ops;
  auto p = FSBParams<double>::create(8, 16, 2, true);
  EXPECT_EQ(fsb(ops, Tensor<double>(Shape{1, 8, 8, 8}), p).shape(), (Shape{1, 16, 8, 8}));
  for (int c : {16, 32, 64, 128})
    for (int n : {1, 2, 3})
      for (int hw : {8, 20, 40}) {
        const Shape x{1, c, hw, hw};
        auto s = spec(BlockKind::FSB, c, c);
        s.n = n;
        auto t = spec(BlockKind::C2f, c, c);
        t.n = n;
        EXPECT_LT(block_cost(s, {x}).flops, block_cost(t, {x}).flops) << c << " " << n << " " << hw;
      }
}

TEST(FSB, RejectsEmptyLowBranchAndOddDims) {
  EXPECT_THROW(FSBParams<double>::create(8, 8, 1, true, 0.0), ConfigError);
  EagerOps<double> ops;
  auto p = FSBParams<double>::create(8, 8, 1, true);
  EXPECT_THROW(fsb(ops, Tensor<double>(Shape{1, 8, 7, 8}), p), ShapeError);
}

// With standard bottlenecks and alpha 0.5 the FSB inner chain is C2f's chain
// at quarter pixel count; everything else is split and merge.
TEST(FSB, StandardBottleneckChainIsQuarterOfC2f) {
  const int c = 32, n = 2, hw = 16;
  auto f = FSBParams<double>::create(c, c, n, true, 0.5, false);
  auto g = C2fParams<double>::create(c, c, n, true);
  const Tensor<double> x(Shape{1, c, hw, hw}, 0.1);

  CountingOps<double> fo, go, so, mo, c1, c2;
  fsb(fo, x, f);
  c2f(go, x, g);
  const auto split = octave_unit(so, Octave<Tensor<double>>{x, std::nullopt}, f.split);
  auto lows = std::vector<Tensor<double>>(static_cast<std::size_t>(1 + n), *split.low);
  octave_unit(mo, Octave<Tensor<double>>{split.high, concat_channels<double>(lows)}, f.merge);
  conv_unit(c1, x, g.cv1);
  conv_unit(c2, Tensor<double>(Shape{1, (2 + n) * g.hidden, hw, hw}), g.cv2);

  const auto fsb_chain = fo.tally.total() - so.tally.total() - mo.tally.total();
  const auto c2f_chain = go.tally.total() - c1.tally.total() - c2.tally.total();
  EXPECT_EQ(4 * fsb_chain, c2f_chain);

  std::size_t chain_f = 0, chain_g = 0;
  for (auto& b : f.m) chain_f += params_of(b);
  for (auto& b : g.m) chain_g += params_of(b);
  EXPECT_EQ(chain_f, chain_g);
  EXPECT_EQ(params_of(f), chain_f + params_of(f.split) + params_of(f.merge));
}

TEST(FSSA, ShapeAndSoftmaxRows) {
  EagerOps<double> ops;
  auto p = FSSAParams<double>::create(32, 0.5, 2);
  Rng rng(5);
  p.split.init(rng);
  p.core.init(rng);
  p.merge.init(rng);
  const auto x = Tensor<double>::uniform(Shape{1, 32, 8, 8}, rng);
  EXPECT_EQ(fssa(ops, x, p).shape(), x.shape());

  std::vector<Matrix<double>> probs;
  (void)attention(Tensor<double>::uniform(Shape{2, 3 * 16, 4, 4}, rng), 2, &probs);
  ASSERT_EQ(probs.size(), 4u);
  for (const auto& a : probs)
    for (int i = 0; i < a.rows; ++i) {
      double s = 0;
      for (int j = 0; j < a.cols; ++j) s += a(i, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(FSSA, AttentionMatchesDefinitionAndIsPermutationEquivariant) {
  std::mt19937_64 rng(6);
  const int c = 8, heads = 2, h = 3, w = 4, t = h * w;
  const auto qkv = oracle::random(Shape{1, 3 * c, h, w}, rng);
  const auto y = attention(qkv, heads);
  EXPECT_LE(oracle::max_diff(y, oracle::attention(qkv, heads)), 1e-13);

  std::vector<int> perm(static_cast<std::size_t>(t));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto permute = [&](const Tensor<double>& x) {
    Tensor<double> out(x.shape());
    for (int ch = 0; ch < x.c(); ++ch)
      for (int i = 0; i < t; ++i) out.plane(0, ch)[i] = x.plane(0, ch)[perm[static_cast<std::size_t>(i)]];
    return out;
  };
  EXPECT_LE(oracle::max_diff(attention(permute(qkv), heads), permute(y)), 1e-13);
}

TEST(FSSA, RejectsZeroAlphaAndDefaultsHeads) {
  EXPECT_THROW(FSSAParams<double>::create(16, 0.0), ConfigError);
  EXPECT_EQ(default_heads(32), 1);
  EXPECT_EQ(default_heads(128), 2);
  EXPECT_EQ(FSSAParams<double>::create(256).core.heads, 2);
}

TEST(DSDown, ShapeAndParameterRatio) {
  EagerOps<double> ops;
  auto p = DSDownParams<double>::create(64, 128);
  EXPECT_EQ(ds_down(ops, Tensor<double>(Shape{1, 64, 32, 32}), p).shape(), (Shape{1, 128, 16, 16}));
  const std::size_t convs = 64 * 9 + 64 * 128;
  EXPECT_EQ(params_of(p), convs + 2 * 64 + 2 * 128);
  EXPECT_EQ(block_cost(spec(BlockKind::DSDown, 64, 128), {Shape{1, 64, 32, 32}}).params, convs + 2 * 64 + 2 * 128);
  EXPECT_NEAR(static_cast<double>(convs) / (64.0 * 128 * 9), 0.1189, 1e-4);
}

TEST(SPPF, ShapeConstantAndOracle) {
  EagerOps<double> ops;
  Rng r(7);
  std::mt19937_64 rng(8);
  auto p = SPPFParams<double>::create(8, 6);
  p.init(r);
  randomize_norm(p.cv1.norm, rng);
  randomize_norm(p.cv2.norm, rng);

  const auto k = Tensor<double>::full(Shape{1, 8, 10, 10}, 0.75);
  const auto yk = sppf(ops, k, p);
  EXPECT_EQ(yk.shape(), (Shape{1, 6, 10, 10}));
  for (int c = 0; c < 6; ++c)
    for (int i = 0; i < 100; ++i) EXPECT_NEAR(yk.plane(0, c)[i], yk.plane(0, c)[0], 1e-12);

  const auto x = oracle::random(Shape{2, 8, 9, 7}, rng);
  const auto a = unit_oracle(x, p.cv1);
  const auto b = oracle::maxpool(a, 5, 1, 2);
  const auto c = oracle::maxpool(b, 5, 1, 2);
  const auto d = oracle::maxpool(c, 5, 1, 2);
  Tensor<double> cat(Shape{2, 16, 9, 7});
  for (int n = 0; n < 2; ++n)
    for (int ch = 0; ch < 4; ++ch)
      for (int i = 0; i < 63; ++i) {
        cat.plane(n, ch)[i] = a.plane(n, ch)[i];
        cat.plane(n, 4 + ch)[i] = b.plane(n, ch)[i];
        cat.plane(n, 8 + ch)[i] = c.plane(n, ch)[i];
        cat.plane(n, 12 + ch)[i] = d.plane(n, ch)[i];
      }
  EXPECT_LE(oracle::max_diff(sppf(ops, x, p), unit_oracle(cat, p.cv2)), 1e-12);
}

TEST(Detect, OutputLayout) {
  auto s = spec(BlockKind::Detect, 0, 0);
  s.c_ins = {16, 32, 64};
  auto p = make_block<float>(s);
  Rng rng(9);
  init_block(p, rng);
  EagerOps<float> ops;
  const auto ys = block_forward(ops, s, p,
                                {Tensor<float>(Shape{1, 16, 8, 8}), Tensor<float>(Shape{1, 32, 4, 4}),
                                 Tensor<float>(Shape{1, 64, 2, 2})});
  ASSERT_EQ(ys.size(), 3u);
  EXPECT_EQ(ys[0].shape(), (Shape{1, 144, 8, 8}));
  EXPECT_EQ(ys[2].shape(), (Shape{1, 144, 2, 2}));
}

TEST(AllBlocks, BatchPreservedFiniteAndCostsMatchExecution) {
  Rng rng(10);
  for (auto [s, shape] : gradient_cases()) {
    auto p = make_block<double>(s);
    init_block(p, rng);
    const auto x = Tensor<double>::uniform(shape, rng, -5.0, 5.0);
    CountingOps<double> ops;
    const auto y = block_forward(ops, s, p, {x}).front();
    EXPECT_EQ(y.n(), x.n()) << to_string(s.kind);
    EXPECT_TRUE(y.all_finite()) << to_string(s.kind);
    const auto c = block_cost(s, {shape});
    EXPECT_EQ(c.flops, ops.tally.total()) << to_string(s.kind);
    EXPECT_EQ(c.params, count_params<double>(p)) << to_string(s.kind);
  }
}

TEST(AllBlocks, GradientsPassFiniteDifferences) {
  Rng rng(11);
  for (auto [s, shape] : gradient_cases()) {
    auto p = make_block<double>(s);
    init_block(p, rng);
    const auto rep = check_block_gradients(s, p, Tensor<double>::uniform(shape, rng), 1e-5, 1e-4);
    EXPECT_TRUE(rep.passed()) << to_string(s.kind) << " " << rep.to_json().dump();
  }
}

TEST(BlockKinds, NamesRoundTrip) {
  for (auto k : {BlockKind::ConvUnit, BlockKind::C2f, BlockKind::FSB, BlockKind::FSSA, BlockKind::SPPF,
                 BlockKind::DSDown, BlockKind::Transformer, BlockKind::Detect, BlockKind::Concat})
    EXPECT_EQ(block_kind_from_string(to_string(k)), k);
  EXPECT_THROW(block_kind_from_string("Nope"), ConfigError);
}
