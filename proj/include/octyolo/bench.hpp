#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "octyolo/analysis.hpp"

namespace octyolo {

struct BenchResult {
  std::string graph;
  int resolution = 0;
  int repeats = 0;
  int warmup = 0;
  int threads = 1;
  double median_ms = 0;
  double mad_ms = 0;  // median absolute deviation
  double min_ms = 0;
  double max_ms = 0;
  std::uint64_t flops = 0;

  [[nodiscard]] bool serial() const { return threads == 1; }
  [[nodiscard]] double gflops_per_s() const { return static_cast<double>(flops) / (median_ms * 1e-3) / 1e9; }
};

inline constexpr int kMinBenchRepeats = 20;

inline double median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("median of empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Times `repeats` eager forward passes of a random 1x3xRxR input after
/// `warmup` untimed passes. Uses whatever thread count is current.
template <std::floating_point T>
BenchResult bench_forward(Network<T>& net, int resolution, int repeats = kMinBenchRepeats, int warmup = 2,
                          std::uint64_t seed = 0) {
  if (repeats < kMinBenchRepeats) {
    throw ConfigError("bench: repeats must be at least " + std::to_string(kMinBenchRepeats));
  }
  if (warmup < 0) throw ConfigError("bench: warmup must be non-negative");
  const auto& g = net.graph();
  check_resolution(g, resolution, resolution);
  Rng rng(seed);
  const auto x = Tensor<T>::uniform(Shape{1, g.in_channels, resolution, resolution}, rng);

  for (int i = 0; i < warmup; ++i) (void)net.forward(x);
  std::vector<double> ms;
  ms.reserve(static_cast<std::size_t>(repeats));
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    auto y = net.forward(x);
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }

  BenchResult r;
  r.graph = g.name;
  r.resolution = resolution;
  r.repeats = repeats;
  r.warmup = warmup;
  r.threads = num_threads();
  r.median_ms = median(ms);
  std::vector<double> dev;
  for (double v : ms) dev.push_back(std::abs(v - r.median_ms));
  r.mad_ms = median(dev);
  r.min_ms = *std::min_element(ms.begin(), ms.end());
  r.max_ms = *std::max_element(ms.begin(), ms.end());
  r.flops = count_costs(g, resolution).total_flops;
  return r;
}

inline nlohmann::json to_json(const BenchResult& r) {
  return {{"graph", r.graph},
          {"resolution", r.resolution},
          {"repeats", r.repeats},
          {"warmup", r.warmup},
          {"threads", r.threads},
          {"mode", r.serial() ? "serial" : "parallel"},
          {"median_ms", r.median_ms},
          {"mad_ms", r.mad_ms},
          {"min_ms", r.min_ms},
          {"max_ms", r.max_ms},
          {"flops", r.flops},
          {"gflops_per_s", r.gflops_per_s()}};
}

}  // namespace octyolo
