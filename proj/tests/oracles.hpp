#pragma once

// Brute-force references used by the unit tests. Nothing here calls the
// library kernels.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "octyolo/tensor.hpp"

namespace oracle {

using octyolo::Shape;
using octyolo::Tensor;

struct Conv {
  Tensor<double> weight;  // (c_out, c_in / groups, k, k)
  std::vector<double> bias;
  int stride = 1, pad = 0, groups = 1;
};

/// Seven nested loops (batch, out channel, out row, out col, in channel,
/// kernel row, kernel col). `macs` counts multiply-accumulates executed,
/// including the ones that hit zero padding.
inline Tensor<double> conv(const Tensor<double>& x, const Conv& p, std::uint64_t* macs = nullptr) {
  const int co = p.weight.n(), cig = p.weight.c(), k = p.weight.h();
  const int ho = (x.h() + 2 * p.pad - k) / p.stride + 1;
  const int wo = (x.w() + 2 * p.pad - k) / p.stride + 1;
  const int cog = co / p.groups;
  Tensor<double> y(Shape{x.n(), co, ho, wo});
  std::uint64_t count = 0;
  for (int b = 0; b < x.n(); ++b)
    for (int o = 0; o < co; ++o)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double acc = p.bias.empty() ? 0.0 : p.bias[static_cast<std::size_t>(o)];
          for (int c = 0; c < cig; ++c)
            for (int u = 0; u < k; ++u)
              for (int v = 0; v < k; ++v) {
                ++count;
                const int yy = i * p.stride - p.pad + u, xx = j * p.stride - p.pad + v;
                if (yy < 0 || yy >= x.h() || xx < 0 || xx >= x.w()) continue;
                acc += p.weight(o, c, u, v) * x(b, (o / cog) * cig + c, yy, xx);
              }
          y(b, o, i, j) = acc;
        }
  if (macs) *macs = count;
  return y;
}

inline Tensor<double> avg_pool(const Tensor<double>& x) {
  Tensor<double> y(Shape{x.n(), x.c(), x.h() / 2, x.w() / 2});
  for (int b = 0; b < y.n(); ++b)
    for (int c = 0; c < y.c(); ++c)
      for (int i = 0; i < y.h(); ++i)
        for (int j = 0; j < y.w(); ++j) {
          double s = 0;
          for (int u = 0; u < 2; ++u)
            for (int v = 0; v < 2; ++v) s += x(b, c, 2 * i + u, 2 * j + v);
          y(b, c, i, j) = s / 4;
        }
  return y;
}

inline Tensor<double> upsample(const Tensor<double>& x) {
  Tensor<double> y(Shape{x.n(), x.c(), 2 * x.h(), 2 * x.w()});
  for (int b = 0; b < y.n(); ++b)
    for (int c = 0; c < y.c(); ++c)
      for (int i = 0; i < y.h(); ++i)
        for (int j = 0; j < y.w(); ++j) y(b, c, i, j) = x(b, c, i / 2, j / 2);
  return y;
}

/// Max over the window, ignoring positions in the padding.
inline Tensor<double> maxpool(const Tensor<double>& x, int k, int stride, int pad) {
  const int ho = (x.h() + 2 * pad - k) / stride + 1, wo = (x.w() + 2 * pad - k) / stride + 1;
  Tensor<double> y(Shape{x.n(), x.c(), ho, wo});
  for (int b = 0; b < y.n(); ++b)
    for (int c = 0; c < y.c(); ++c)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double m = -INFINITY;
          for (int u = 0; u < k; ++u)
            for (int v = 0; v < k; ++v) {
              const int yy = i * stride - pad + u, xx = j * stride - pad + v;
              if (yy >= 0 && yy < x.h() && xx >= 0 && xx < x.w()) m = std::max(m, x(b, c, yy, xx));
            }
          y(b, c, i, j) = m;
        }
  return y;
}

inline double silu(double v) { return v / (1.0 + std::exp(-v)); }

inline Tensor<double> silu(Tensor<double> x) {
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = silu(x[i]);
  return x;
}

inline Tensor<double> add(Tensor<double> a, const Tensor<double>& b) {
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
  return a;
}

/// Per-channel normalization with biased batch statistics.
inline Tensor<double> batchnorm_batch(const Tensor<double>& x, const std::vector<double>& g,
                                      const std::vector<double>& beta, double eps) {
  Tensor<double> y(x.shape());
  const double cnt = static_cast<double>(x.n()) * x.h() * x.w();
  for (int c = 0; c < x.c(); ++c) {
    double m = 0, v = 0;
    for (int b = 0; b < x.n(); ++b)
      for (int i = 0; i < x.h(); ++i)
        for (int j = 0; j < x.w(); ++j) m += x(b, c, i, j);
    m /= cnt;
    for (int b = 0; b < x.n(); ++b)
      for (int i = 0; i < x.h(); ++i)
        for (int j = 0; j < x.w(); ++j) v += (x(b, c, i, j) - m) * (x(b, c, i, j) - m);
    v /= cnt;
    for (int b = 0; b < x.n(); ++b)
      for (int i = 0; i < x.h(); ++i)
        for (int j = 0; j < x.w(); ++j) y(b, c, i, j) = g[c] * (x(b, c, i, j) - m) / std::sqrt(v + eps) + beta[c];
  }
  return y;
}

inline Tensor<double> batchnorm_stats(const Tensor<double>& x, const std::vector<double>& g,
                                      const std::vector<double>& beta, const std::vector<double>& mean,
                                      const std::vector<double>& var, double eps) {
  Tensor<double> y(x.shape());
  for (int b = 0; b < x.n(); ++b)
    for (int c = 0; c < x.c(); ++c)
      for (int i = 0; i < x.h(); ++i)
        for (int j = 0; j < x.w(); ++j)
          y(b, c, i, j) = g[c] * (x(b, c, i, j) - mean[c]) / std::sqrt(var[c] + eps) + beta[c];
  return y;
}

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int t = 0; t < k; ++t) c[i * n + j] += a[i * k + t] * b[t * n + j];
  return c;
}

/// Multi-head attention straight from the definition. qkv holds q, k, v
/// stacked on channels; tokens are spatial positions.
inline Tensor<double> attention(const Tensor<double>& qkv, int heads) {
  const int c = qkv.c() / 3, d = c / heads, t = qkv.h() * qkv.w();
  Tensor<double> out(Shape{qkv.n(), c, qkv.h(), qkv.w()});
  auto at = [&](int b, int ch, int tok) { return qkv[((static_cast<std::size_t>(b) * qkv.c() + ch) * t) + tok]; };
  for (int b = 0; b < qkv.n(); ++b)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < t; ++i) {
        std::vector<double> s(static_cast<std::size_t>(t));
        double mx = -INFINITY;
        for (int j = 0; j < t; ++j) {
          double dot = 0;
          for (int e = 0; e < d; ++e) dot += at(b, h * d + e, i) * at(b, c + h * d + e, j);
          s[j] = dot / std::sqrt(static_cast<double>(d));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& v : s) z += (v = std::exp(v - mx));
        for (int e = 0; e < d; ++e) {
          double acc = 0;
          for (int j = 0; j < t; ++j) acc += s[j] / z * at(b, 2 * c + h * d + e, j);
          out[((static_cast<std::size_t>(b) * c + h * d + e) * t) + i] = acc;
        }
      }
  return out;
}

inline Tensor<double> random(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
  return t;
}

inline double max_diff(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace oracle
