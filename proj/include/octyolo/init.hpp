#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>

#include "octyolo/kernels.hpp"

namespace octyolo {

using Rng = std::mt19937_64;

/// Kaiming-uniform over the fan-in, bound sqrt(6 / fan_in). Bias, when
/// present, gets the PyTorch default bound 1 / sqrt(fan_in).
template <std::floating_point T>
void init_conv(ConvParams<T>& p, Rng& rng) {
  const int fan_in = p.weight.c() * p.kernel() * p.kernel();
  const double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : p.weight.data()) v = static_cast<T>(dist(rng));
  if (p.bias) {
    std::uniform_real_distribution<double> bdist(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
    for (auto& v : *p.bias) v = static_cast<T>(bdist(rng));
  }
}

template <std::floating_point T>
void init_norm(NormParams<T>& p) {
  const int c = p.channels();
  const auto mode = p.mode;
  p = NormParams<T>::identity(c);
  p.mode = mode;
}

/// Zero-initialized conv parameters with "same" padding k / 2.
template <std::floating_point T>
ConvParams<T> make_conv(int c_in, int c_out, int k, int stride = 1, int groups = 1, bool bias = false) {
  if (c_in < 1 || c_out < 1 || k < 1 || stride < 1 || groups < 1) {
    throw ConfigError("conv: channels, kernel, stride and groups must be >= 1 (c_in=" + std::to_string(c_in) +
                      " c_out=" + std::to_string(c_out) + " k=" + std::to_string(k) + ")");
  }
  if (c_in % groups != 0 || c_out % groups != 0) {
    throw ConfigError("conv: groups=" + std::to_string(groups) + " must divide c_in=" + std::to_string(c_in) +
                      " and c_out=" + std::to_string(c_out));
  }
  ConvParams<T> p{Tensor<T>(Shape{c_out, c_in / groups, k, k}), std::nullopt, stride, k / 2, groups};
  if (bias) p.bias = std::vector<T>(static_cast<std::size_t>(c_out), T{0});
  return p;
}

template <std::floating_point T, class Fn>
void visit_conv(ConvParams<T>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + "weight", p.weight.data());
  if (p.bias) fn(prefix + "bias", std::span<T>(*p.bias));
}

template <std::floating_point T, class Fn>
void visit_norm(NormParams<T>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + "gamma", std::span<T>(p.gamma));
  fn(prefix + "beta", std::span<T>(p.beta));
}

}  // namespace octyolo
