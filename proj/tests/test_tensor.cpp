#include <gtest/gtest.h>

#include <filesystem>

#include "octyolo/init.hpp"
#include "octyolo/kernels.hpp"
#include "octyolo/serialize.hpp"
#include "oracles.hpp"

using namespace octyolo;

namespace {

std::mt19937_64 rng_for(std::uint64_t s) { return std::mt19937_64(s); }

oracle::Conv to_oracle(const ConvParams<double>& p) {
  return {p.weight, p.bias.value_or(std::vector<double>{}), p.stride, p.padding, p.groups};
}

ConvParams<double> random_conv(std::mt19937_64& rng, int ci, int co, int k, int stride, int groups, bool bias) {
  auto p = make_conv<double>(ci, co, k, stride, groups, bias);
  p.weight = oracle::random(p.weight.shape(), rng);
  if (bias) p.bias = oracle::random(Shape{1, co, 1, 1}, rng).vec();
  return p;
}

}  // namespace

TEST(Shape, RejectsNonPositiveDims) {
  EXPECT_THROW(Tensor<double>(Shape{1, 0, 2, 2}), ShapeError);
  EXPECT_THROW(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>(3)), ShapeError);
  Tensor<double> t(Shape{2, 3, 4, 5});
  EXPECT_EQ(t.numel(), 120u);
}

TEST(Conv2d, OneByOneUnitKernelIsIdentity) {
  auto rng = rng_for(1);
  const auto x = oracle::random(Shape{2, 1, 5, 7}, rng);
  auto p = make_conv<double>(1, 1, 1);
  p.weight[0] = 1.0;
  EXPECT_EQ(conv2d(x, p), x);
}

TEST(Conv2d, ZeroWeightsGiveZeros) {
  auto rng = rng_for(2);
  const auto x = oracle::random(Shape{1, 3, 6, 6}, rng);
  const auto y = conv2d(x, make_conv<double>(3, 5, 3));
  for (double v : y.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesSevenLoopOracle) {
  auto rng = rng_for(3);
  const auto x = oracle::random(Shape{1, 2, 5, 5}, rng);
  auto p = random_conv(rng, 2, 4, 3, 1, 1, false);
  EXPECT_LE(oracle::max_diff(conv2d(x, p), oracle::conv(x, to_oracle(p))), 1e-12);
}

TEST(Conv2d, MatchesOracleAcrossStridesGroupsAndBias) {
  auto rng = rng_for(4);
  struct Case {
    int ci, co, k, stride, groups, h, w;
    bool bias;
  };
  const std::vector<Case> cases{{3, 6, 3, 2, 1, 7, 9, true},  {4, 4, 3, 1, 4, 6, 5, false}, {4, 4, 3, 2, 4, 8, 8, true},
                                {6, 4, 1, 1, 2, 5, 5, true},  {2, 3, 5, 1, 1, 9, 6, false}, {8, 8, 1, 2, 1, 6, 6, false},
                                {6, 9, 3, 1, 3, 4, 4, true}};
  for (const auto& c : cases) {
    const auto x = oracle::random(Shape{2, c.ci, c.h, c.w}, rng);
    auto p = random_conv(rng, c.ci, c.co, c.k, c.stride, c.groups, c.bias);
    EXPECT_LE(oracle::max_diff(conv2d(x, p), oracle::conv(x, to_oracle(p))), 1e-12)
        << "ci=" << c.ci << " co=" << c.co << " k=" << c.k << " s=" << c.stride << " g=" << c.groups;
  }
}

TEST(Conv2d, OutputDimsFollowFloorRule) {
  for (int h : {5, 6, 7, 8})
    for (int s : {1, 2})
      for (int k : {1, 3}) {
        const auto y = conv2d(Tensor<double>(Shape{1, 1, h, h}), make_conv<double>(1, 1, k, s));
        EXPECT_EQ(y.h(), (h + 2 * (k / 2) - k) / s + 1);
      }
}

TEST(Conv2d, ChannelDecompositionIsLinear) {
  auto rng = rng_for(5);
  const auto x = oracle::random(Shape{1, 3, 6, 6}, rng);
  auto p = random_conv(rng, 3, 2, 3, 1, 1, false);
  Tensor<double> total(Shape{1, 2, 6, 6});
  for (int c = 0; c < 3; ++c) {
    Tensor<double> xc(Shape{1, 1, 6, 6});
    std::copy(x.plane(0, c), x.plane(0, c) + 36, xc.raw());
    auto pc = make_conv<double>(1, 2, 3);
    for (int o = 0; o < 2; ++o)
      for (int i = 0; i < 9; ++i) pc.weight[o * 9 + i] = p.weight[(o * 3 + c) * 9 + i];
    total = oracle::add(total, conv2d(xc, pc));
  }
  EXPECT_LE(oracle::max_diff(total, conv2d(x, p)), 1e-10);
}

TEST(Conv2d, IsLinearInInput) {
  auto rng = rng_for(6);
  const auto x = oracle::random(Shape{2, 3, 5, 5}, rng);
  const auto y = oracle::random(Shape{2, 3, 5, 5}, rng);
  auto p = random_conv(rng, 3, 4, 3, 1, 1, false);
  const double a = 0.7, b = -1.3;
  Tensor<double> mix(x.shape());
  for (std::size_t i = 0; i < mix.numel(); ++i) mix[i] = a * x[i] + b * y[i];
  const auto lhs = conv2d(mix, p);
  const auto cx = conv2d(x, p), cy = conv2d(y, p);
  Tensor<double> rhs(lhs.shape());
  for (std::size_t i = 0; i < rhs.numel(); ++i) rhs[i] = a * cx[i] + b * cy[i];
  EXPECT_LE(oracle::max_diff(lhs, rhs), 1e-10);
}

TEST(Conv2d, RejectsBadConfigurations) {
  Tensor<double> x(Shape{1, 4, 5, 5});
  auto p = make_conv<double>(3, 2, 3);
  EXPECT_THROW(conv2d(x, p), ShapeError);
  EXPECT_THROW(make_conv<double>(4, 3, 3, 1, 2), ConfigError);
  auto q = make_conv<double>(4, 2, 3);
  q.stride = 0;
  EXPECT_THROW(conv2d(x, q), ConfigError);
}

TEST(Conv2d, IsDeterministicAcrossThreadCounts) {
  auto rng = rng_for(7);
  const auto x = oracle::random(Shape{2, 8, 12, 12}, rng);
  auto p = random_conv(rng, 8, 16, 3, 1, 1, true);
  set_num_threads(1);
  const auto a = conv2d(x, p);
  const auto b = conv2d(x, p);
  set_num_threads(3);
  const auto c = conv2d(x, p);
  set_num_threads(1);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}

TEST(AvgPool, ConstantStaysConstant) {
  const auto y = avg_pool2x2(Tensor<double>::full(Shape{1, 2, 4, 6}, 3.25));
  EXPECT_EQ(y.shape(), (Shape{1, 2, 2, 3}));
  for (double v : y.vec()) EXPECT_EQ(v, 3.25);
}

TEST(AvgPool, TwoByTwoMean) {
  const auto y = avg_pool2x2(Tensor<double>(Shape{1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(y.numel(), 1u);
  EXPECT_EQ(y[0], 2.5);
}

TEST(AvgPool, MatchesWindowOracleAndPreservesMean) {
  auto rng = rng_for(8);
  const auto x = oracle::random(Shape{2, 3, 8, 8}, rng);
  const auto y = avg_pool2x2(x);
  EXPECT_LE(oracle::max_diff(y, oracle::avg_pool(x)), 1e-12);
  EXPECT_NEAR(mean(y), mean(x), 1e-12);
  EXPECT_THROW(avg_pool2x2(Tensor<double>(Shape{1, 1, 3, 4})), ShapeError);
}

TEST(Upsample, RepeatsEachPixel) {
  const auto y = upsample_nearest2x(Tensor<double>::scalar(7));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.vec()) EXPECT_EQ(v, 7.0);
  auto rng = rng_for(9);
  const auto x = oracle::random(Shape{1, 2, 3, 3}, rng);
  EXPECT_EQ(upsample_nearest2x(x), oracle::upsample(x));
  EXPECT_EQ(avg_pool2x2(upsample_nearest2x(x)), x);
}

TEST(MaxPool, MatchesOracle) {
  auto rng = rng_for(10);
  const auto x = oracle::random(Shape{2, 3, 9, 7}, rng);
  EXPECT_EQ(maxpool2d(x, 5, 1, 2), oracle::maxpool(x, 5, 1, 2));
  EXPECT_EQ(maxpool2d(x, 3, 2, 1), oracle::maxpool(x, 3, 2, 1));
}

TEST(BatchNorm, TrainModeStandardizes) {
  auto rng = rng_for(11);
  const auto x = oracle::random(Shape{4, 3, 5, 5}, rng, -3, 5);
  auto p = NormParams<double>::identity(3);
  p.mode = NormMode::train;
  p.eps = 1e-12;
  const auto y = batchnorm(x, p);
  for (int c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 25; ++i) m += y.plane(b, c)[i];
    m /= 100;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 25; ++i) v += (y.plane(b, c)[i] - m) * (y.plane(b, c)[i] - m);
    v /= 100;
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
  EXPECT_NE(p.running_mean[0], 0.0);
}

TEST(BatchNorm, EvalIdentityStatsPassThrough) {
  auto rng = rng_for(12);
  const auto x = oracle::random(Shape{2, 3, 4, 4}, rng);
  auto p = NormParams<double>::identity(3);
  p.eps = 1e-15;
  EXPECT_LE(oracle::max_diff(batchnorm(x, p), x), 1e-12);
}

TEST(BatchNorm, MatchesFormulaOracle) {
  auto rng = rng_for(13);
  const auto x = oracle::random(Shape{2, 4, 3, 5}, rng);
  auto p = NormParams<double>::identity(4);
  p.gamma = oracle::random(Shape{1, 4, 1, 1}, rng).vec();
  p.beta = oracle::random(Shape{1, 4, 1, 1}, rng).vec();
  p.running_mean = oracle::random(Shape{1, 4, 1, 1}, rng).vec();
  p.running_var = oracle::random(Shape{1, 4, 1, 1}, rng, 0.1, 2).vec();
  EXPECT_LE(oracle::max_diff(batchnorm(x, p), oracle::batchnorm_stats(x, p.gamma, p.beta, p.running_mean,
                                                                        p.running_var, p.eps)),
            1e-12);
  p.mode = NormMode::train;
  EXPECT_LE(oracle::max_diff(batchnorm(x, p), oracle::batchnorm_batch(x, p.gamma, p.beta, p.eps)), 1e-12);
}

TEST(Silu, KnownValuesAndOracle) {
  const auto z = silu(Tensor<double>(Shape{1, 1, 1, 3}, {0.0, 40.0, -40.0}));
  EXPECT_EQ(z[0], 0.0);
  EXPECT_NEAR(z[1], 40.0, 1e-12);
  EXPECT_NEAR(z[2], 0.0, 1e-12);
  auto rng = rng_for(14);
  const auto x = oracle::random(Shape{2, 3, 4, 4}, rng, -6, 6);
  EXPECT_LE(oracle::max_diff(silu(x), oracle::silu(x)), 1e-15);
}

TEST(Matrix, SoftmaxOfConstantRowIsUniform) {
  Matrix<double> m(1, 4, 2.0);
  const auto s = softmax_rows(m);
  for (double v : s.data) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Matrix, MatmulMatchesTripleLoop) {
  auto rng = rng_for(15);
  Matrix<double> a(3, 4), b(4, 2);
  a.data = oracle::random(Shape{1, 1, 3, 4}, rng).vec();
  b.data = oracle::random(Shape{1, 1, 4, 2}, rng).vec();
  const auto c = matmul(a, b);
  const auto want = oracle::matmul(a.data, b.data, 3, 4, 2);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(c.data[i], want[i], 1e-13);
}

TEST(Channels, SplitInvertsConcat) {
  auto rng = rng_for(16);
  const auto a = oracle::random(Shape{2, 3, 4, 4}, rng);
  const auto b = oracle::random(Shape{2, 5, 4, 4}, rng);
  const auto parts = split_channels<double>(concat_channels<double>({a, b}), {3, 5});
  ASSERT_EQ(parts.size(), 2u);
  EXPECT_EQ(parts[0], a);
  EXPECT_EQ(parts[1], b);
  EXPECT_THROW(split_channels<double>(a, {1, 1}), ShapeError);
  EXPECT_THROW(concat_channels<double>({a, Tensor<double>(Shape{2, 1, 3, 4})}), ShapeError);
}

TEST(Add, RequiresEqualShapes) {
  EXPECT_THROW(add(Tensor<double>(Shape{1, 1, 2, 2}), Tensor<double>(Shape{1, 2, 2, 2})), ShapeError);
}

TEST(Kernels, FiniteInFiniteOut) {
  auto rng = rng_for(17);
  const auto x = oracle::random(Shape{1, 4, 8, 8}, rng, -50, 50);
  auto p = random_conv(rng, 4, 4, 3, 1, 1, true);
  auto n = NormParams<double>::identity(4);
  n.mode = NormMode::train;
  for (const auto& y : {conv2d(x, p), silu(x), avg_pool2x2(x), batchnorm(x, n), maxpool2d(x, 5, 1, 2)})
    EXPECT_TRUE(y.all_finite());
}

TEST(Serialize, RoundTripsBothDtypes) {
  auto rng = rng_for(18);
  const auto dir = std::filesystem::temp_directory_path() / "octyolo_test_serialize";
  std::filesystem::create_directories(dir);
  const auto x = oracle::random(Shape{2, 3, 4, 5}, rng);
  write_tensor(dir / "d", x);
  EXPECT_EQ(read_tensor<double>(dir / "d"), x);
  const auto xf = x.cast<float>();
  write_tensor(dir / "f", xf);
  EXPECT_EQ(read_tensor<float>(dir / "f"), xf);
  EXPECT_THROW(read_tensor<float>(dir / "d"), Error);
  std::filesystem::remove_all(dir);
}
