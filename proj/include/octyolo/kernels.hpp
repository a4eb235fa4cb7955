#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "octyolo/gemm.hpp"
#include "octyolo/tensor.hpp"

namespace octyolo {

/// Convolution weights and geometry. weight is (c_out, c_in / groups, k, k).
template <std::floating_point T>
struct ConvParams {
  Tensor<T> weight;
  std::optional<std::vector<T>> bias;
  int stride = 1;
  int padding = 0;
  int groups = 1;

  [[nodiscard]] int c_out() const { return weight.n(); }
  [[nodiscard]] int c_in() const { return weight.c() * groups; }
  [[nodiscard]] int kernel() const { return weight.h(); }
  [[nodiscard]] bool depthwise() const { return groups > 1 && groups == c_in() && groups == c_out(); }
  [[nodiscard]] std::size_t param_count() const { return weight.numel() + (bias ? bias->size() : 0); }
};

/// h_out = floor((h + 2p - k) / s) + 1
inline int conv_out_dim(int in, int k, int stride, int padding) { return (in + 2 * padding - k) / stride + 1; }

enum class NormMode { train, eval };

template <std::floating_point T>
struct NormParams {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T eps = T(1e-3);
  T momentum = T(0.03);
  NormMode mode = NormMode::eval;

  static NormParams identity(int c) {
    NormParams p;
    p.gamma.assign(static_cast<std::size_t>(c), T{1});
    p.beta.assign(static_cast<std::size_t>(c), T{0});
    p.running_mean.assign(static_cast<std::size_t>(c), T{0});
    p.running_var.assign(static_cast<std::size_t>(c), T{1});
    return p;
  }

  [[nodiscard]] int channels() const { return static_cast<int>(gamma.size()); }
  [[nodiscard]] std::size_t param_count() const { return gamma.size() + beta.size(); }

  void validate() const {
    const auto c = gamma.size();
    if (beta.size() != c || running_mean.size() != c || running_var.size() != c) {
      throw ConfigError("norm params: vectors must all have length " + std::to_string(c));
    }
    if (!(eps > T{0})) throw ConfigError("norm params: eps must be positive");
    if (!(momentum > T{0} && momentum < T{1})) throw ConfigError("norm params: momentum must be in (0,1)");
    for (T v : running_var)
      if (v < T{0}) throw ConfigError("norm params: running_var must be >= 0");
  }
};

namespace detail {

template <std::floating_point T>
void check_conv(const Shape& x, const ConvParams<T>& p) {
  const Shape& ws = p.weight.shape();
  if (p.stride < 1) throw ConfigError("conv2d: stride must be positive, got " + std::to_string(p.stride));
  if (p.padding < 0) throw ConfigError("conv2d: padding must be non-negative, got " + std::to_string(p.padding));
  if (p.groups < 1) throw ConfigError("conv2d: groups must be positive, got " + std::to_string(p.groups));
  if (ws.h != ws.w) throw ShapeError("conv2d: kernel must be square, got " + ws.str());
  if (ws.n % p.groups != 0) {
    throw ConfigError("conv2d: groups=" + std::to_string(p.groups) + " does not divide c_out=" + std::to_string(ws.n));
  }
  if (x.c % p.groups != 0) {
    throw ConfigError("conv2d: groups=" + std::to_string(p.groups) + " does not divide c_in=" + std::to_string(x.c));
  }
  if (x.c != ws.c * p.groups) {
    throw ShapeError("conv2d: input channels " + std::to_string(x.c) + " != weight c_in/groups " +
                     std::to_string(ws.c) + " * groups " + std::to_string(p.groups) + " (input " + x.str() +
                     ", weight " + ws.str() + ")");
  }
  if (ws.h > x.h + 2 * p.padding || ws.w > x.w + 2 * p.padding) {
    throw ShapeError("conv2d: kernel " + std::to_string(ws.h) + " larger than padded input " + x.str() +
                     " with padding " + std::to_string(p.padding));
  }
  if (p.bias && p.bias->size() != static_cast<std::size_t>(ws.n)) {
    throw ShapeError("conv2d: bias length " + std::to_string(p.bias->size()) + " != c_out " + std::to_string(ws.n));
  }
}

// Lowers one group of one image into a (cin_g * k * k) x (ho * wo) matrix.
template <std::floating_point T>
void im2col(const T* x, int cin_g, int h, int w, int k, int stride, int pad, int ho, int wo, T* col) {
  const std::size_t hw = static_cast<std::size_t>(ho) * wo;
  for (int ci = 0; ci < cin_g; ++ci) {
    const T* xp = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* drow = dst + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(drow, drow + wo, T{0});
            continue;
          }
          const T* srow = xp + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            drow[ox] = (ix >= 0 && ix < w) ? srow[ix] : T{0};
          }
        }
      }
    }
  }
}

template <std::floating_point T>
void depthwise_plane(const T* in, int h, int w, const T* wk, int k, int stride, int pad, int ho, int wo, T* out) {
  std::fill(out, out + static_cast<std::size_t>(ho) * wo, T{0});
  for (int ky = 0; ky < k; ++ky) {
    for (int kx = 0; kx < k; ++kx) {
      const T wv = wk[ky * k + kx];
      // valid output columns: 0 <= ox*stride - pad + kx < w
      const int ox_lo = std::max(0, (pad - kx + stride - 1) / stride);
      const int last = w - 1 + pad - kx;
      const int ox_hi = last < 0 ? 0 : std::min(wo, last / stride + 1);
      for (int oy = 0; oy < ho; ++oy) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        const T* srow = in + static_cast<std::size_t>(iy) * w;
        T* drow = out + static_cast<std::size_t>(oy) * wo;
        if (stride == 1) {
          const T* s = srow - pad + kx;
          for (int ox = ox_lo; ox < ox_hi; ++ox) drow[ox] += wv * s[ox];
        } else {
          for (int ox = ox_lo; ox < ox_hi; ++ox) drow[ox] += wv * srow[ox * stride - pad + kx];
        }
      }
    }
  }
}

}  // namespace detail

/// Direct cross-correlation with zero padding. Grouped convolutions lower each
/// group through im2col and a GEMM; depthwise convolutions run a direct loop.
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  detail::check_conv(x.shape(), p);
  const int k = p.kernel();
  const int ho = conv_out_dim(x.h(), k, p.stride, p.padding);
  const int wo = conv_out_dim(x.w(), k, p.stride, p.padding);
  const int cout = p.c_out();
  Tensor<T> y(Shape{x.n(), cout, ho, wo});
  const std::size_t hw = static_cast<std::size_t>(ho) * wo;

  if (p.depthwise()) {
    parallel_for(static_cast<std::size_t>(x.n()) * cout, [&](std::size_t b0, std::size_t b1) {
      for (std::size_t idx = b0; idx < b1; ++idx) {
        const int b = static_cast<int>(idx / cout);
        const int ch = static_cast<int>(idx % cout);
        detail::depthwise_plane(x.plane(b, ch), x.h(), x.w(), p.weight.plane(ch, 0), k, p.stride, p.padding, ho, wo,
                                y.plane(b, ch));
      }
    });
  } else {
    const int cin_g = p.weight.c();
    const int cout_g = cout / p.groups;
    const std::size_t kdim = static_cast<std::size_t>(cin_g) * k * k;
    const bool pointwise = k == 1 && p.stride == 1 && p.padding == 0;
    std::vector<T> col(pointwise ? 0 : kdim * hw);
    for (int b = 0; b < x.n(); ++b) {
      for (int g = 0; g < p.groups; ++g) {
        const T* xin = x.plane(b, g * cin_g);
        const T* bmat = xin;
        if (!pointwise) {
          detail::im2col(xin, cin_g, x.h(), x.w(), k, p.stride, p.padding, ho, wo, col.data());
          bmat = col.data();
        }
        gemm<T>(static_cast<std::size_t>(cout_g), hw, kdim, p.weight.plane(g * cout_g, 0), bmat,
                y.plane(b, g * cout_g));
      }
    }
  }

  if (p.bias) {
    for (int b = 0; b < x.n(); ++b)
      for (int ch = 0; ch < cout; ++ch) {
        const T bv = (*p.bias)[static_cast<std::size_t>(ch)];
        T* yp = y.plane(b, ch);
        for (std::size_t i = 0; i < hw; ++i) yp[i] += bv;
      }
  }
  return y;
}

template <std::floating_point T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
  if (x.h() % 2 != 0 || x.w() % 2 != 0) {
    throw ShapeError("avg_pool2x2: spatial dims must be even, got h=" + std::to_string(x.h()) +
                     " w=" + std::to_string(x.w()));
  }
  const int ho = x.h() / 2;
  const int wo = x.w() / 2;
  Tensor<T> y(Shape{x.n(), x.c(), ho, wo});
  for (int b = 0; b < x.n(); ++b)
    for (int ch = 0; ch < x.c(); ++ch) {
      const T* s = x.plane(b, ch);
      T* d = y.plane(b, ch);
      for (int oy = 0; oy < ho; ++oy) {
        const T* r0 = s + static_cast<std::size_t>(2 * oy) * x.w();
        const T* r1 = r0 + x.w();
        for (int ox = 0; ox < wo; ++ox) {
          d[oy * wo + ox] = (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * T(0.25);
        }
      }
    }
  return y;
}

template <std::floating_point T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  const int ho = x.h() * 2;
  const int wo = x.w() * 2;
  Tensor<T> y(Shape{x.n(), x.c(), ho, wo});
  for (int b = 0; b < x.n(); ++b)
    for (int ch = 0; ch < x.c(); ++ch) {
      const T* s = x.plane(b, ch);
      T* d = y.plane(b, ch);
      for (int oy = 0; oy < ho; ++oy) {
        const T* srow = s + static_cast<std::size_t>(oy / 2) * x.w();
        T* drow = d + static_cast<std::size_t>(oy) * wo;
        for (int ox = 0; ox < wo; ++ox) drow[ox] = srow[ox / 2];
      }
    }
  return y;
}

/// Max pooling with implicit -inf padding.
template <std::floating_point T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride, int pad) {
  if (k < 1 || stride < 1 || pad < 0 || 2 * pad > k) throw ConfigError("maxpool2d: invalid geometry");
  const int ho = conv_out_dim(x.h(), k, stride, pad);
  const int wo = conv_out_dim(x.w(), k, stride, pad);
  if (ho < 1 || wo < 1) throw ShapeError("maxpool2d: window larger than input " + x.shape().str());
  Tensor<T> y(Shape{x.n(), x.c(), ho, wo});
  for (int b = 0; b < x.n(); ++b)
    for (int ch = 0; ch < x.c(); ++ch) {
      const T* s = x.plane(b, ch);
      T* d = y.plane(b, ch);
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          T m = -std::numeric_limits<T>::infinity();
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= x.h()) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= x.w()) continue;
              m = std::max(m, s[iy * x.w() + ix]);
            }
          }
          d[oy * wo + ox] = m;
        }
    }
  return y;
}

/// Per-channel batch mean and biased variance over (n, h, w).
template <std::floating_point T>
void channel_stats(const Tensor<T>& x, std::vector<T>& mean, std::vector<T>& var) {
  const std::size_t c = static_cast<std::size_t>(x.c());
  const std::size_t hw = x.shape().plane();
  const T count = static_cast<T>(static_cast<std::size_t>(x.n()) * hw);
  mean.assign(c, T{0});
  var.assign(c, T{0});
  for (int ch = 0; ch < x.c(); ++ch) {
    T s{0};
    for (int b = 0; b < x.n(); ++b) {
      const T* p = x.plane(b, ch);
      for (std::size_t i = 0; i < hw; ++i) s += p[i];
    }
    const T m = s / count;
    T v{0};
    for (int b = 0; b < x.n(); ++b) {
      const T* p = x.plane(b, ch);
      for (std::size_t i = 0; i < hw; ++i) v += (p[i] - m) * (p[i] - m);
    }
    mean[ch] = m;
    var[ch] = v / count;
  }
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta with explicit statistics.
template <std::floating_point T>
Tensor<T> batchnorm_apply(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                          std::span<const T> mean, std::span<const T> var, T eps) {
  if (gamma.size() != static_cast<std::size_t>(x.c())) {
    throw ShapeError("batchnorm: input channels " + std::to_string(x.c()) + " != params channels " +
                     std::to_string(gamma.size()));
  }
  Tensor<T> y(x.shape());
  const std::size_t hw = x.shape().plane();
  for (int ch = 0; ch < x.c(); ++ch) {
    const T scale = gamma[ch] / std::sqrt(var[ch] + eps);
    const T shift = beta[ch] - mean[ch] * scale;
    for (int b = 0; b < x.n(); ++b) {
      const T* s = x.plane(b, ch);
      T* d = y.plane(b, ch);
      for (std::size_t i = 0; i < hw; ++i) d[i] = s[i] * scale + shift;
    }
  }
  return y;
}

/// Train mode normalizes with batch statistics and folds them into the running
/// estimates (unbiased variance, as PyTorch does); eval mode uses the running
/// estimates and leaves p untouched.
template <std::floating_point T>
Tensor<T> batchnorm(const Tensor<T>& x, NormParams<T>& p) {
  p.validate();
  if (p.channels() != x.c()) {
    throw ShapeError("batchnorm: input channels " + std::to_string(x.c()) + " != params channels " +
                     std::to_string(p.channels()));
  }
  if (p.mode == NormMode::eval) return batchnorm_apply<T>(x, p.gamma, p.beta, p.running_mean, p.running_var, p.eps);
  std::vector<T> m, v;
  channel_stats(x, m, v);
  const double count = static_cast<double>(x.n()) * static_cast<double>(x.shape().plane());
  const T unbias = count > 1 ? static_cast<T>(count / (count - 1)) : T{1};
  for (std::size_t ch = 0; ch < m.size(); ++ch) {
    p.running_mean[ch] = (T{1} - p.momentum) * p.running_mean[ch] + p.momentum * m[ch];
    p.running_var[ch] = (T{1} - p.momentum) * p.running_var[ch] + p.momentum * v[ch] * unbias;
  }
  return batchnorm_apply<T>(x, p.gamma, p.beta, m, v, p.eps);
}

template <std::floating_point T>
T sigmoid(T v) {
  return T{1} / (T{1} + std::exp(-v));
}

template <std::floating_point T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] * sigmoid(x[i]);
  return y;
}

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shapes " + a.shape().str() + " and " + b.shape().str());
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) y[i] = a[i] + b[i];
  return y;
}

template <std::floating_point T>
Tensor<T> concat_channels(std::span<const Tensor<T>> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = xs.front().shape();
  int c = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw ShapeError("concat_channels: " + s.str() + " not conformable with " + s0.str());
    }
    c += s.c;
  }
  Tensor<T> y(Shape{s0.n, c, s0.h, s0.w});
  const std::size_t hw = s0.plane();
  for (int b = 0; b < s0.n; ++b) {
    int off = 0;
    for (const auto& t : xs) {
      std::copy_n(t.plane(b, 0), static_cast<std::size_t>(t.c()) * hw, y.plane(b, off));
      off += t.c();
    }
  }
  return y;
}

template <std::floating_point T>
Tensor<T> concat_channels(std::initializer_list<Tensor<T>> xs) {
  return concat_channels<T>(std::span<const Tensor<T>>(xs.begin(), xs.size()));
}

template <std::floating_point T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::span<const int> sizes) {
  int total = 0;
  for (int s : sizes) {
    if (s < 1) throw ShapeError("split_channels: sizes must be >= 1");
    total += s;
  }
  if (total != x.c()) {
    throw ShapeError("split_channels: sizes sum to " + std::to_string(total) + " but input has " +
                     std::to_string(x.c()) + " channels");
  }
  std::vector<Tensor<T>> out;
  out.reserve(sizes.size());
  const std::size_t hw = x.shape().plane();
  int off = 0;
  for (int s : sizes) {
    Tensor<T> t(Shape{x.n(), s, x.h(), x.w()});
    for (int b = 0; b < x.n(); ++b) std::copy_n(x.plane(b, off), static_cast<std::size_t>(s) * hw, t.plane(b, 0));
    out.push_back(std::move(t));
    off += s;
  }
  return out;
}

template <std::floating_point T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::initializer_list<int> sizes) {
  return split_channels(x, std::span<const int>(sizes.begin(), sizes.size()));
}

template <std::floating_point T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: " + std::to_string(a.rows) + "x" + std::to_string(a.cols) + " by " +
                     std::to_string(b.rows) + "x" + std::to_string(b.cols));
  }
  Matrix<T> c(a.rows, b.cols);
  gemm<T>(static_cast<std::size_t>(a.rows), static_cast<std::size_t>(b.cols), static_cast<std::size_t>(a.cols),
          a.data.data(), b.data.data(), c.data.data());
  return c;
}

template <std::floating_point T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols, a.rows);
  for (int r = 0; r < a.rows; ++r)
    for (int c = 0; c < a.cols; ++c) t(c, r) = a(r, c);
  return t;
}

template <std::floating_point T>
Matrix<T> softmax_rows(const Matrix<T>& a) {
  Matrix<T> s(a.rows, a.cols);
  for (int r = 0; r < a.rows; ++r) {
    T m = a(r, 0);
    for (int c = 1; c < a.cols; ++c) m = std::max(m, a(r, c));
    T z{0};
    for (int c = 0; c < a.cols; ++c) {
      s(r, c) = std::exp(a(r, c) - m);
      z += s(r, c);
    }
    for (int c = 0; c < a.cols; ++c) s(r, c) /= z;
  }
  return s;
}

}  // namespace octyolo
