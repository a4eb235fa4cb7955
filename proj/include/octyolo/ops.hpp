#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "octyolo/attention.hpp"
#include "octyolo/autograd.hpp"
#include "octyolo/kernels.hpp"

// Execution backends for the block forward functions. Every block is written
// once against this small vocabulary and can then run eagerly, on the
// autograd tape, or eagerly while tallying FLOPs.

namespace octyolo {

/// How EagerOps treats batch norms. `params` honours NormParams::mode (and so
/// updates running statistics in train mode); `batch_stats` normalizes with
/// batch statistics and never touches the parameters.
enum class NormPolicy { params, batch_stats };

template <std::floating_point T>
struct EagerOps {
  using Scalar = T;
  using Value = Tensor<T>;

  NormPolicy norm_policy = NormPolicy::params;

  static Shape shape(const Value& v) { return v.shape(); }
  Value conv(const Value& x, const ConvParams<T>& p) { return conv2d(x, p); }
  Value norm(const Value& x, NormParams<T>& p) {
    if (norm_policy == NormPolicy::params) return batchnorm(x, p);
    std::vector<T> m, v;
    channel_stats(x, m, v);
    return batchnorm_apply<T>(x, p.gamma, p.beta, m, v, p.eps);
  }
  Value silu(const Value& x) { return octyolo::silu(x); }
  Value add(const Value& a, const Value& b) { return octyolo::add(a, b); }
  Value concat(const std::vector<Value>& xs) { return concat_channels<T>(xs); }
  std::vector<Value> split(const Value& x, const std::vector<int>& sizes) { return split_channels<T>(x, sizes); }
  Value avg_pool(const Value& x) { return avg_pool2x2(x); }
  Value upsample(const Value& x) { return upsample_nearest2x(x); }
  Value maxpool(const Value& x, int k, int stride, int pad) { return maxpool2d(x, k, stride, pad); }
  Value attention(const Value& qkv, int heads) { return octyolo::attention(qkv, heads); }
};

/// FLOP tally per primitive: conv 2*k*k*(c_in/groups)*c_out per output
/// element, norm 4 and silu/add 1 per element, average pooling 1 per input
/// element, max pooling k*k per output element, attention 4*tokens^2*d per
/// head for the two products plus 3 per score for the softmax. Upsample,
/// concat and split move data only.
struct FlopTally {
  std::uint64_t conv = 0;
  std::uint64_t norm = 0;
  std::uint64_t act = 0;
  std::uint64_t add = 0;
  std::uint64_t pool = 0;
  std::uint64_t attention = 0;

  [[nodiscard]] std::uint64_t total() const { return conv + norm + act + add + pool + attention; }
};

inline std::uint64_t conv_flops(const Shape& out, int k, int cin_per_group) {
  return 2ULL * static_cast<std::uint64_t>(k) * k * static_cast<std::uint64_t>(cin_per_group) * out.numel();
}

inline std::uint64_t attention_flops(int batch, int channels, int heads, int tokens) {
  const auto t2 = static_cast<std::uint64_t>(tokens) * static_cast<std::uint64_t>(tokens);
  return static_cast<std::uint64_t>(batch) * (4ULL * t2 * static_cast<std::uint64_t>(channels) +
                                               3ULL * t2 * static_cast<std::uint64_t>(heads));
}

/// Runs eagerly and counts every executed primitive; the measured side of
/// the analyzer cross-checks.
template <std::floating_point T>
struct CountingOps : EagerOps<T> {
  using Base = EagerOps<T>;
  using typename Base::Value;
  FlopTally tally;

  Value conv(const Value& x, const ConvParams<T>& p) {
    auto y = Base::conv(x, p);
    tally.conv += conv_flops(y.shape(), p.kernel(), p.weight.c());
    return y;
  }
  Value norm(const Value& x, NormParams<T>& p) {
    tally.norm += 4 * x.numel();
    return Base::norm(x, p);
  }
  Value silu(const Value& x) {
    tally.act += x.numel();
    return Base::silu(x);
  }
  Value add(const Value& a, const Value& b) {
    tally.add += a.numel();
    return Base::add(a, b);
  }
  Value avg_pool(const Value& x) {
    tally.pool += x.numel();
    return Base::avg_pool(x);
  }
  Value maxpool(const Value& x, int k, int stride, int pad) {
    auto y = Base::maxpool(x, k, stride, pad);
    tally.pool += static_cast<std::uint64_t>(k) * k * y.numel();
    return y;
  }
  Value attention(const Value& qkv, int heads) {
    tally.attention += attention_flops(qkv.n(), qkv.c() / 3, heads, qkv.h() * qkv.w());
    return Base::attention(qkv, heads);
  }
};

/// Records the forward pass on the autograd tape. Parameters are lifted to
/// leaves the first time they are seen, keyed by their storage address, so a
/// block's gradients can be read back per parameter buffer.
template <std::floating_point T>
struct TapeOps {
  using Scalar = T;
  using Value = ag::NodePtr<T>;

  std::unordered_map<const T*, Value> leaves;

  Value param(std::span<const T> data, Shape s, const std::string& name) {
    auto it = leaves.find(data.data());
    if (it != leaves.end()) return it->second;
    auto node = ag::leaf(Tensor<T>(s, std::vector<T>(data.begin(), data.end())), name);
    leaves.emplace(data.data(), node);
    return node;
  }

  /// Gradient of the last backward pass for a parameter buffer; zeros when the
  /// buffer never entered the graph.
  std::vector<T> grad(std::span<const T> data, const ag::GradientMap<T>& grads) const {
    auto it = leaves.find(data.data());
    if (it == leaves.end()) return std::vector<T>(data.size(), T{0});
    auto g = grads.find(it->second.get());
    if (g == grads.end()) return std::vector<T>(data.size(), T{0});
    return g->second.vec();
  }

  static Shape shape(const Value& v) { return v->value.shape(); }

  Value conv(const Value& x, const ConvParams<T>& p) {
    auto w = param(p.weight.data(), p.weight.shape(), "weight");
    Value b;
    if (p.bias) b = param(*p.bias, Shape{1, p.c_out(), 1, 1}, "bias");
    return ag::conv2d(x, w, b, p.stride, p.padding, p.groups);
  }
  Value norm(const Value& x, NormParams<T>& p) {
    const Shape s{1, p.channels(), 1, 1};
    return ag::batchnorm_train(x, param(p.gamma, s, "gamma"), param(p.beta, s, "beta"), p.eps);
  }
  Value silu(const Value& x) { return ag::silu(x); }
  Value add(const Value& a, const Value& b) { return ag::add(a, b); }
  Value concat(const std::vector<Value>& xs) { return ag::concat_channels(xs); }
  std::vector<Value> split(const Value& x, const std::vector<int>& sizes) { return ag::split_channels<T>(x, sizes); }
  Value avg_pool(const Value& x) { return ag::avg_pool2x2(x); }
  Value upsample(const Value& x) { return ag::upsample_nearest2x(x); }
  Value maxpool(const Value& x, int k, int stride, int pad) { return ag::maxpool2d(x, k, stride, pad); }
  Value attention(const Value& qkv, int heads) { return ag::attention(qkv, heads); }
};

}  // namespace octyolo
