#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "octyolo/kernels.hpp"

namespace octyolo {

// Multi-head scaled dot-product attention over the spatial token grid.
//
// qkv is (n, 3C, h, w): channels [0, C) are queries, [C, 2C) keys, [2C, 3C)
// values. Head i owns channels [i*d, (i+1)*d) of each group with d = C/heads.
// The h*w positions are the tokens. No positional terms are added, so the op
// is equivariant under any permutation of token positions.

struct AttentionGeometry {
  int channels = 0;  // C
  int heads = 1;
  int head_dim = 0;
  int tokens = 0;
};

template <std::floating_point T>
AttentionGeometry attention_geometry(const Shape& qkv, int heads) {
  if (heads < 1) throw ConfigError("attention: heads must be >= 1");
  if (qkv.c % 3 != 0) throw ShapeError("attention: qkv channels " + std::to_string(qkv.c) + " not divisible by 3");
  const int c = qkv.c / 3;
  if (c % heads != 0) {
    throw ConfigError("attention: heads=" + std::to_string(heads) + " does not divide channels=" + std::to_string(c));
  }
  return {c, heads, c / heads, qkv.h * qkv.w};
}

namespace detail {
// Copies channels [c0, c0 + d) of image b into a (tokens x d) matrix.
template <std::floating_point T>
Matrix<T> gather_tokens(const Tensor<T>& t, int b, int c0, int d) {
  const int tokens = t.h() * t.w();
  Matrix<T> m(tokens, d);
  for (int j = 0; j < d; ++j) {
    const T* p = t.plane(b, c0 + j);
    for (int s = 0; s < tokens; ++s) m(s, j) = p[s];
  }
  return m;
}

template <std::floating_point T>
void scatter_tokens(const Matrix<T>& m, Tensor<T>& t, int b, int c0) {
  for (int j = 0; j < m.cols; ++j) {
    T* p = t.plane(b, c0 + j);
    for (int s = 0; s < m.rows; ++s) p[s] = m(s, j);
  }
}
}  // namespace detail

/// Returns (n, C, h, w). When probs is non-null it receives the softmax matrix
/// of every (image, head) pair in that order.
template <std::floating_point T>
Tensor<T> attention(const Tensor<T>& qkv, int heads, std::vector<Matrix<T>>* probs = nullptr) {
  const auto g = attention_geometry<T>(qkv.shape(), heads);
  const T scale = T{1} / std::sqrt(static_cast<T>(g.head_dim));
  Tensor<T> out(Shape{qkv.n(), g.channels, qkv.h(), qkv.w()});
  if (probs) probs->clear();
  for (int b = 0; b < qkv.n(); ++b) {
    for (int hd = 0; hd < heads; ++hd) {
      const int off = hd * g.head_dim;
      const auto q = detail::gather_tokens(qkv, b, off, g.head_dim);
      const auto k = detail::gather_tokens(qkv, b, g.channels + off, g.head_dim);
      const auto v = detail::gather_tokens(qkv, b, 2 * g.channels + off, g.head_dim);
      auto s = matmul(q, transpose(k));
      for (auto& e : s.data) e *= scale;
      auto a = softmax_rows(s);
      detail::scatter_tokens(matmul(a, v), out, b, off);
      if (probs) probs->push_back(std::move(a));
    }
  }
  return out;
}

/// Gradient of attention() with respect to qkv.
template <std::floating_point T>
Tensor<T> attention_backward(const Tensor<T>& qkv, int heads, const Tensor<T>& grad_out) {
  const auto g = attention_geometry<T>(qkv.shape(), heads);
  const T scale = T{1} / std::sqrt(static_cast<T>(g.head_dim));
  Tensor<T> gqkv(qkv.shape());
  for (int b = 0; b < qkv.n(); ++b) {
    for (int hd = 0; hd < heads; ++hd) {
      const int off = hd * g.head_dim;
      const auto q = detail::gather_tokens(qkv, b, off, g.head_dim);
      const auto k = detail::gather_tokens(qkv, b, g.channels + off, g.head_dim);
      const auto v = detail::gather_tokens(qkv, b, 2 * g.channels + off, g.head_dim);
      auto s = matmul(q, transpose(k));
      for (auto& e : s.data) e *= scale;
      const auto a = softmax_rows(s);
      const auto go = detail::gather_tokens(grad_out, b, off, g.head_dim);

      const auto gv = matmul(transpose(a), go);
      const auto ga = matmul(go, transpose(v));
      Matrix<T> gs(a.rows, a.cols);
      for (int r = 0; r < a.rows; ++r) {
        T dot{0};
        for (int c = 0; c < a.cols; ++c) dot += ga(r, c) * a(r, c);
        for (int c = 0; c < a.cols; ++c) gs(r, c) = a(r, c) * (ga(r, c) - dot) * scale;
      }
      const auto gq = matmul(gs, k);
      const auto gk = matmul(transpose(gs), q);
      detail::scatter_tokens(gq, gqkv, b, off);
      detail::scatter_tokens(gk, gqkv, b, g.channels + off);
      detail::scatter_tokens(gv, gqkv, b, 2 * g.channels + off);
    }
  }
  return gqkv;
}

}  // namespace octyolo
