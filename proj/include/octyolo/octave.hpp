#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>

#include "octyolo/init.hpp"
#include "octyolo/ops.hpp"

namespace octyolo {

/// A high-frequency map and a low-frequency map at half resolution. Either part
/// may be absent when its channel count is zero.
template <class V>
struct Octave {
  std::optional<V> high;
  std::optional<V> low;
};

template <std::floating_point T>
using OctaveTensor = Octave<Tensor<T>>;

/// round(alpha * c), the channel count of the low-frequency part.
inline int low_channels(double alpha, int c) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0,1], got " + std::to_string(alpha));
  return static_cast<int>(std::lround(alpha * c));
}

template <std::floating_point T>
int channels(const OctaveTensor<T>& x) {
  return (x.high ? x.high->c() : 0) + (x.low ? x.low->c() : 0);
}

/// Fraction of channels carried by the low part.
template <std::floating_point T>
double alpha(const OctaveTensor<T>& x) {
  return static_cast<double>(x.low ? x.low->c() : 0) / channels(x);
}

inline void check_octave_shapes(const Shape& high, const Shape& low) {
  if (high.h % 2 != 0 || high.w % 2 != 0) {
    throw ShapeError("octave: high-frequency dims must be even, got h=" + std::to_string(high.h) +
                     " w=" + std::to_string(high.w));
  }
  if (low.n != high.n || low.h * 2 != high.h || low.w * 2 != high.w) {
    throw ShapeError("octave: low part " + low.str() + " must be half the spatial size of high part " + high.str());
  }
}

template <std::floating_point T>
void validate(const OctaveTensor<T>& x) {
  if (!x.high && !x.low) throw ShapeError("octave tensor has neither part");
  if (x.high && x.low) check_octave_shapes(x.high->shape(), x.low->shape());
}

/// Four-path octave convolution weights. A path exists iff both its input and
/// output channel counts are nonzero. Stride is 1 and padding k / 2.
template <std::floating_point T>
struct OctaveConvParams {
  int c_in_high = 0, c_in_low = 0, c_out_high = 0, c_out_low = 0;
  int kernel = 1;
  std::optional<ConvParams<T>> hh, hl, lh, ll;

  static OctaveConvParams create(int c_in, int c_out, double alpha_in, double alpha_out, int k) {
    const int cil = low_channels(alpha_in, c_in);
    const int col = low_channels(alpha_out, c_out);
    return from_channels(c_in - cil, cil, c_out - col, col, k);
  }

  static OctaveConvParams from_channels(int cih, int cil, int coh, int col, int k) {
    if (cih < 0 || cil < 0 || coh < 0 || col < 0 || cih + cil < 1 || coh + col < 1) {
      throw ConfigError("octave conv: invalid channel partition");
    }
    if (k < 1 || k % 2 == 0) throw ConfigError("octave conv: kernel must be odd, got " + std::to_string(k));
    OctaveConvParams p;
    p.c_in_high = cih;
    p.c_in_low = cil;
    p.c_out_high = coh;
    p.c_out_low = col;
    p.kernel = k;
    if (cih && coh) p.hh = make_conv<T>(cih, coh, k);
    if (cih && col) p.hl = make_conv<T>(cih, col, k);
    if (cil && coh) p.lh = make_conv<T>(cil, coh, k);
    if (cil && col) p.ll = make_conv<T>(cil, col, k);
    return p;
  }

  [[nodiscard]] int c_in() const { return c_in_high + c_in_low; }
  [[nodiscard]] int c_out() const { return c_out_high + c_out_low; }
  [[nodiscard]] double alpha_in() const { return static_cast<double>(c_in_low) / c_in(); }
  [[nodiscard]] double alpha_out() const { return static_cast<double>(c_out_low) / c_out(); }

  template <class Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    if (hh) visit_conv(*hh, prefix + "hh.", fn);
    if (hl) visit_conv(*hl, prefix + "hl.", fn);
    if (lh) visit_conv(*lh, prefix + "lh.", fn);
    if (ll) visit_conv(*ll, prefix + "ll.", fn);
  }
  void init(Rng& rng) {
    for (auto* p : {&hh, &hl, &lh, &ll})
      if (*p) init_conv(**p, rng);
  }
};

namespace detail {
template <class V>
V sum_paths(auto& ops, std::optional<V> a, std::optional<V> b) {
  if (a && b) return ops.add(*a, *b);
  return a ? std::move(*a) : std::move(*b);
}
}  // namespace detail

/// Y_high = conv_hh(X_high) + up(conv_lh(X_low)),
/// Y_low  = conv_hl(pool(X_high)) + conv_ll(X_low).
template <class Ops, std::floating_point T>
Octave<typename Ops::Value> octave_conv(Ops& ops, const Octave<typename Ops::Value>& x, const OctaveConvParams<T>& p) {
  using V = typename Ops::Value;
  const int got_h = x.high ? Ops::shape(*x.high).c : 0;
  const int got_l = x.low ? Ops::shape(*x.low).c : 0;
  if (got_h != p.c_in_high || got_l != p.c_in_low) {
    throw ShapeError("octave conv: input channels (high=" + std::to_string(got_h) + ", low=" + std::to_string(got_l) +
                     ") do not match the alpha partition (high=" + std::to_string(p.c_in_high) +
                     ", low=" + std::to_string(p.c_in_low) + ")");
  }
  const bool crosses = p.hl || p.lh || p.ll;
  if (x.high && crosses) {
    const Shape s = Ops::shape(*x.high);
    if (s.h % 2 != 0 || s.w % 2 != 0) {
      throw ShapeError("octave conv: high-frequency dims must be even, got h=" + std::to_string(s.h) +
                       " w=" + std::to_string(s.w));
    }
  }
  if (x.high && x.low) check_octave_shapes(Ops::shape(*x.high), Ops::shape(*x.low));

  Octave<V> y;
  if (p.c_out_high) {
    std::optional<V> a, b;
    if (p.hh) a = ops.conv(*x.high, *p.hh);
    if (p.lh) b = ops.upsample(ops.conv(*x.low, *p.lh));
    y.high = detail::sum_paths<V>(ops, std::move(a), std::move(b));
  }
  if (p.c_out_low) {
    std::optional<V> a, b;
    if (p.hl) a = ops.conv(ops.avg_pool(*x.high), *p.hl);
    if (p.ll) b = ops.conv(*x.low, *p.ll);
    y.low = detail::sum_paths<V>(ops, std::move(a), std::move(b));
  }
  return y;
}

template <std::floating_point T>
OctaveTensor<T> octave_conv(const OctaveTensor<T>& x, const OctaveConvParams<T>& p) {
  EagerOps<T> ops;
  return octave_conv(ops, x, p);
}

/// Plain-tensor form for alpha_in = 0 inputs; the result is whatever the
/// output partition produces.
template <std::floating_point T>
OctaveTensor<T> octave_conv(const Tensor<T>& x, const OctaveConvParams<T>& p) {
  return octave_conv(OctaveTensor<T>{x, std::nullopt}, p);
}

/// Octave conv followed by a norm (and optionally SiLU) on each output part,
/// applied after the two paths are summed.
template <std::floating_point T>
struct OctaveUnitParams {
  OctaveConvParams<T> conv;
  std::optional<NormParams<T>> norm_high, norm_low;
  bool act = true;

  static OctaveUnitParams create(OctaveConvParams<T> conv, bool norm = true, bool act = true) {
    OctaveUnitParams u;
    u.conv = std::move(conv);
    if (norm && u.conv.c_out_high) u.norm_high = NormParams<T>::identity(u.conv.c_out_high);
    if (norm && u.conv.c_out_low) u.norm_low = NormParams<T>::identity(u.conv.c_out_low);
    u.act = act;
    return u;
  }

  template <class Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    conv.visit_params(prefix, fn);
    if (norm_high) visit_norm(*norm_high, prefix + "bn_h.", fn);
    if (norm_low) visit_norm(*norm_low, prefix + "bn_l.", fn);
  }
  void init(Rng& rng) { conv.init(rng); }
};

template <class Ops, std::floating_point T>
Octave<typename Ops::Value> octave_unit(Ops& ops, const Octave<typename Ops::Value>& x, OctaveUnitParams<T>& p) {
  auto y = octave_conv(ops, x, p.conv);
  auto finish = [&](auto& part, auto& norm) {
    if (!part) return;
    if (norm) part = ops.norm(*part, *norm);
    if (p.act) part = ops.silu(*part);
  };
  finish(y.high, p.norm_high);
  finish(y.low, p.norm_low);
  return y;
}

/// Split convolution parameters: alpha_in = 0, alpha_out = alpha.
template <std::floating_point T>
OctaveConvParams<T> make_split(int c_in, int c_out, double alpha, int k = 1) {
  return OctaveConvParams<T>::create(c_in, c_out, 0.0, alpha, k);
}

/// Merge convolution parameters from an explicit (high, low) input partition.
template <std::floating_point T>
OctaveConvParams<T> make_merge(int c_in_high, int c_in_low, int c_out, int k = 1) {
  return OctaveConvParams<T>::from_channels(c_in_high, c_in_low, c_out, 0, k);
}

/// Splits a plain tensor into high and low parts.
template <std::floating_point T>
OctaveTensor<T> cfp_split(const Tensor<T>& x, const OctaveConvParams<T>& p) {
  if (p.c_in_low != 0) throw ConfigError("cfp_split: parameters must have alpha_in = 0");
  return octave_conv(x, p);
}

/// Fuses both parts back into one tensor at the high part's resolution.
template <std::floating_point T>
Tensor<T> cfp_merge(const OctaveTensor<T>& x, const OctaveConvParams<T>& p) {
  if (p.c_out_low != 0) throw ConfigError("cfp_merge: parameters must have alpha_out = 0");
  validate(x);
  return *octave_conv(x, p).high;
}

}  // namespace octyolo
