#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace octyolo {

namespace detail {
inline std::atomic<int>& thread_setting() {
  static std::atomic<int> threads{[] {
    if (const char* env = std::getenv("OCTYOLO_THREADS")) {
      const int v = std::atoi(env);
      return v > 0 ? v : 1;
    }
    return 1;
  }()};
  return threads;
}
}  // namespace detail

/// Number of worker threads used by the data-parallel kernels. 1 is the serial
/// reference mode. Initialized from OCTYOLO_THREADS.
inline int num_threads() { return detail::thread_setting().load(); }
inline void set_num_threads(int n) { detail::thread_setting().store(std::max(1, n)); }
inline bool serial_mode() { return num_threads() == 1; }

/// Runs fn(begin, end) over [0, count) split into contiguous chunks. Each index
/// is processed by exactly one worker, so per-element results do not depend on
/// the thread count.
template <class Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::min<int>(num_threads(), static_cast<int>(std::max<std::size_t>(count, 1))));
  if (workers <= 1) {
    fn(std::size_t{0}, count);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t t = 0; t < workers; ++t) {
    const std::size_t b = t * chunk;
    const std::size_t e = std::min(count, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& th : pool) th.join();
}

namespace detail {

// Register tile: MR rows of C by NR columns, accumulated across a K block.
template <class T, int MR, int NR>
inline void gemm_tile(std::size_t kb, const T* __restrict a, std::size_t lda, const T* __restrict b, std::size_t ldb,
                      T* __restrict c, std::size_t ldc) {
  T acc[MR][NR];
  for (int r = 0; r < MR; ++r)
    for (int j = 0; j < NR; ++j) acc[r][j] = c[r * ldc + j];
  for (std::size_t k = 0; k < kb; ++k) {
    const T* brow = b + k * ldb;
    for (int r = 0; r < MR; ++r) {
      const T av = a[r * lda + k];
      for (int j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (int r = 0; r < MR; ++r)
    for (int j = 0; j < NR; ++j) c[r * ldc + j] = acc[r][j];
}

template <class T>
inline void gemm_edge(std::size_t mr, std::size_t nr, std::size_t kb, const T* a, std::size_t lda, const T* b,
                      std::size_t ldb, T* c, std::size_t ldc) {
  for (std::size_t r = 0; r < mr; ++r) {
    for (std::size_t k = 0; k < kb; ++k) {
      const T av = a[r * lda + k];
      const T* brow = b + k * ldb;
      T* crow = c + r * ldc;
      for (std::size_t j = 0; j < nr; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

/// C[M x N] = A[M x K] * B[K x N], all row-major and contiguous. Summation order
/// for each output element is fixed, so results are bit-reproducible.
template <class T>
void gemm(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  constexpr int MR = 4;
  constexpr int NR = 64 / sizeof(T) * 2;  // two cache lines of columns
  constexpr std::size_t KB = 128;
  constexpr std::size_t NC = 512;  // B panel of KB x NC stays cache resident across row blocks
  std::fill(C, C + M * N, T{0});
  const std::size_t row_blocks = (M + MR - 1) / MR;
  parallel_for(row_blocks, [&](std::size_t rb0, std::size_t rb1) {
    for (std::size_t k0 = 0; k0 < K; k0 += KB) {
      const std::size_t kb = std::min(KB, K - k0);
      for (std::size_t j0 = 0; j0 < N; j0 += NC) {
        const std::size_t j1 = std::min(N, j0 + NC);
        for (std::size_t rb = rb0; rb < rb1; ++rb) {
          const std::size_t i = rb * MR;
          const std::size_t mr = std::min<std::size_t>(MR, M - i);
          const T* a = A + i * K + k0;
          const T* b = B + k0 * N;
          T* c = C + i * N;
          std::size_t j = j0;
          if (mr == MR) {
            for (; j + NR <= j1; j += NR) detail::gemm_tile<T, MR, NR>(kb, a, K, b + j, N, c + j, N);
          }
          if (j < j1) detail::gemm_edge(mr, j1 - j, kb, a, K, b + j, N, c + j, N);
        }
      }
    }
  });
}

}  // namespace octyolo
