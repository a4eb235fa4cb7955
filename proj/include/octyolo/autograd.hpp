#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "octyolo/attention.hpp"
#include "octyolo/kernels.hpp"

// Minimal reverse-mode differentiation over the tensor kernels. It exists to
// machine-check the block implementations against finite differences, so it
// favours plain loops over speed.

namespace octyolo::ag {

template <std::floating_point T>
struct Node;

template <std::floating_point T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Maps the gradient of a node's value to one gradient per parent.
template <std::floating_point T>
using BackwardRule = std::function<std::vector<Tensor<T>>(const Tensor<T>& grad_out)>;

template <std::floating_point T>
struct Node {
  Tensor<T> value;
  std::vector<NodePtr<T>> parents;
  BackwardRule<T> backward;
  std::optional<Tensor<T>> grad;
  bool requires_grad = false;
  std::string name;
};

template <std::floating_point T>
using GradientMap = std::unordered_map<const Node<T>*, Tensor<T>>;

template <std::floating_point T>
NodePtr<T> leaf(Tensor<T> value, std::string name = {}) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->name = std::move(name);
  return n;
}

template <std::floating_point T>
NodePtr<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <std::floating_point T>
NodePtr<T> make_node(Tensor<T> value, std::vector<NodePtr<T>> parents, BackwardRule<T> rule) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->parents = std::move(parents);
  n->backward = std::move(rule);
  return n;
}

namespace detail {

template <std::floating_point T>
void accumulate(Node<T>& n, const Tensor<T>& g) {
  if (g.shape() != n.value.shape()) {
    throw ShapeError("backward: gradient shape " + g.shape().str() + " != value shape " + n.value.shape().str());
  }
  if (!n.grad) {
    n.grad = g;
    return;
  }
  auto& acc = *n.grad;
  for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
}

// Post-order DFS; a node met again while still on the stack closes a cycle.
template <std::floating_point T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  enum class Mark { open, done };
  std::unordered_map<Node<T>*, Mark> marks;
  std::vector<Node<T>*> order;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  marks[root] = Mark::open;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      auto it = marks.find(p);
      if (it == marks.end()) {
        marks[p] = Mark::open;
        stack.emplace_back(p, 0);
      } else if (it->second == Mark::open) {
        throw Error("backward: cycle detected in computation graph");
      }
    } else {
      marks[node] = Mark::done;
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar root. Gradients accumulate additively over
/// fan-out; every reachable leaf that requires grad receives dRoot/dLeaf.
template <std::floating_point T>
GradientMap<T> backward(const NodePtr<T>& root) {
  if (root->value.shape() != Shape{1, 1, 1, 1}) {
    throw ShapeError("backward: root must be a scalar (1,1,1,1), got " + root->value.shape().str());
  }
  auto order = detail::topo_order(root.get());
  for (auto* n : order) n->grad.reset();
  root->grad = Tensor<T>::scalar(T{1});
  GradientMap<T> leaves;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->grad || !n->requires_grad) continue;
    if (n->parents.empty()) {
      leaves.emplace(n, *n->grad);
      continue;
    }
    auto grads = n->backward(*n->grad);
    if (grads.size() != n->parents.size()) throw Error("backward: rule returned wrong number of gradients");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (n->parents[i]->requires_grad) detail::accumulate(*n->parents[i], grads[i]);
    }
  }
  return leaves;
}

// ---------------------------------------------------------------------------
// Differentiable ops

template <std::floating_point T>
NodePtr<T> add(const NodePtr<T>& a, const NodePtr<T>& b) {
  return make_node<T>(octyolo::add(a->value, b->value), {a, b},
                      [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g, g}; });
}

/// Elementwise product.
template <std::floating_point T>
NodePtr<T> mul(const NodePtr<T>& a, const NodePtr<T>& b) {
  if (a->value.shape() != b->value.shape()) {
    throw ShapeError("mul: shapes " + a->value.shape().str() + " and " + b->value.shape().str());
  }
  Tensor<T> y(a->value.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a->value[i] * b->value[i];
  return make_node<T>(std::move(y), {a, b}, [av = a->value, bv = b->value](const Tensor<T>& g) {
    Tensor<T> ga(g.shape()), gb(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) {
      ga[i] = g[i] * bv[i];
      gb[i] = g[i] * av[i];
    }
    return std::vector<Tensor<T>>{ga, gb};
  });
}

template <std::floating_point T>
NodePtr<T> sum(const NodePtr<T>& x) {
  return make_node<T>(Tensor<T>::scalar(octyolo::sum(x->value)), {x}, [s = x->value.shape()](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{Tensor<T>(s, g[0])};
  });
}

template <std::floating_point T>
NodePtr<T> silu(const NodePtr<T>& x) {
  return make_node<T>(octyolo::silu(x->value), {x}, [xv = x->value](const Tensor<T>& g) {
    Tensor<T> gx(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T s = sigmoid(xv[i]);
      gx[i] = g[i] * s * (T{1} + xv[i] * (T{1} - s));
    }
    return std::vector<Tensor<T>>{gx};
  });
}

template <std::floating_point T>
NodePtr<T> avg_pool2x2(const NodePtr<T>& x) {
  return make_node<T>(octyolo::avg_pool2x2(x->value), {x}, [s = x->value.shape()](const Tensor<T>& g) {
    Tensor<T> gx(s);
    for (int b = 0; b < s.n; ++b)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < s.h; ++y)
          for (int xx = 0; xx < s.w; ++xx) gx(b, c, y, xx) = T(0.25) * g(b, c, y / 2, xx / 2);
    return std::vector<Tensor<T>>{gx};
  });
}

template <std::floating_point T>
NodePtr<T> upsample_nearest2x(const NodePtr<T>& x) {
  return make_node<T>(octyolo::upsample_nearest2x(x->value), {x}, [s = x->value.shape()](const Tensor<T>& g) {
    Tensor<T> gx(s);
    for (int b = 0; b < s.n; ++b)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < g.h(); ++y)
          for (int xx = 0; xx < g.w(); ++xx) gx(b, c, y / 2, xx / 2) += g(b, c, y, xx);
    return std::vector<Tensor<T>>{gx};
  });
}

template <std::floating_point T>
NodePtr<T> maxpool2d(const NodePtr<T>& x, int k, int stride, int pad) {
  auto y = octyolo::maxpool2d(x->value, k, stride, pad);
  return make_node<T>(std::move(y), {x}, [xv = x->value, k, stride, pad](const Tensor<T>& g) {
    Tensor<T> gx(xv.shape());
    for (int b = 0; b < g.n(); ++b)
      for (int c = 0; c < g.c(); ++c)
        for (int oy = 0; oy < g.h(); ++oy)
          for (int ox = 0; ox < g.w(); ++ox) {
            int by = -1, bx = -1;
            T best = -std::numeric_limits<T>::infinity();
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= xv.h()) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= xv.w()) continue;
                if (xv(b, c, iy, ix) > best) {
                  best = xv(b, c, iy, ix);
                  by = iy;
                  bx = ix;
                }
              }
            }
            gx(b, c, by, bx) += g(b, c, oy, ox);
          }
    return std::vector<Tensor<T>>{gx};
  });
}

/// weight is (c_out, c_in/groups, k, k); bias, when present, is (1, c_out, 1, 1).
template <std::floating_point T>
NodePtr<T> conv2d(const NodePtr<T>& x, const NodePtr<T>& weight, const NodePtr<T>& bias, int stride, int padding,
                  int groups) {
  ConvParams<T> p{weight->value, std::nullopt, stride, padding, groups};
  if (bias) p.bias = bias->value.vec();
  auto y = octyolo::conv2d(x->value, p);
  std::vector<NodePtr<T>> parents{x, weight};
  if (bias) parents.push_back(bias);
  const bool has_bias = static_cast<bool>(bias);
  return make_node<T>(std::move(y), std::move(parents),
                      [xv = x->value, wv = weight->value, stride, padding, groups, has_bias](const Tensor<T>& g) {
                        Tensor<T> gx(xv.shape()), gw(wv.shape());
                        const int k = wv.h();
                        const int cin_g = wv.c();
                        const int cout_g = wv.n() / groups;
                        for (int b = 0; b < g.n(); ++b)
                          for (int co = 0; co < g.c(); ++co) {
                            const int grp = co / cout_g;
                            for (int cg = 0; cg < cin_g; ++cg) {
                              const int ci = grp * cin_g + cg;
                              for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx) {
                                  const T w = wv(co, cg, ky, kx);
                                  T acc{0};
                                  for (int oy = 0; oy < g.h(); ++oy) {
                                    const int iy = oy * stride - padding + ky;
                                    if (iy < 0 || iy >= xv.h()) continue;
                                    for (int ox = 0; ox < g.w(); ++ox) {
                                      const int ix = ox * stride - padding + kx;
                                      if (ix < 0 || ix >= xv.w()) continue;
                                      const T go = g(b, co, oy, ox);
                                      gx(b, ci, iy, ix) += w * go;
                                      acc += xv(b, ci, iy, ix) * go;
                                    }
                                  }
                                  gw(co, cg, ky, kx) += acc;
                                }
                            }
                          }
                        std::vector<Tensor<T>> out{std::move(gx), std::move(gw)};
                        if (has_bias) {
                          Tensor<T> gb(Shape{1, g.c(), 1, 1});
                          for (int b = 0; b < g.n(); ++b)
                            for (int co = 0; co < g.c(); ++co)
                              for (int i = 0; i < g.h() * g.w(); ++i) gb[co] += g.plane(b, co)[i];
                          out.push_back(std::move(gb));
                        }
                        return out;
                      });
}

/// Batch-statistics normalization (train mode). gamma and beta are (1, c, 1, 1).
template <std::floating_point T>
NodePtr<T> batchnorm_train(const NodePtr<T>& x, const NodePtr<T>& gamma, const NodePtr<T>& beta, T eps) {
  std::vector<T> mean, var;
  channel_stats(x->value, mean, var);
  auto y = batchnorm_apply<T>(x->value, gamma->value.data(), beta->value.data(), mean, var, eps);
  return make_node<T>(std::move(y), {x, gamma, beta},
                      [xv = x->value, gv = gamma->value, mean, var, eps](const Tensor<T>& g) {
                        const Shape s = xv.shape();
                        const std::size_t hw = s.plane();
                        const T count = static_cast<T>(static_cast<std::size_t>(s.n) * hw);
                        Tensor<T> gx(s), gg(Shape{1, s.c, 1, 1}), gb(Shape{1, s.c, 1, 1});
                        for (int c = 0; c < s.c; ++c) {
                          const T inv = T{1} / std::sqrt(var[c] + eps);
                          T sum_g{0}, sum_gx{0};
                          for (int b = 0; b < s.n; ++b)
                            for (std::size_t i = 0; i < hw; ++i) {
                              const T xhat = (xv.plane(b, c)[i] - mean[c]) * inv;
                              sum_g += g.plane(b, c)[i];
                              sum_gx += g.plane(b, c)[i] * xhat;
                            }
                          gg[c] = sum_gx;
                          gb[c] = sum_g;
                          for (int b = 0; b < s.n; ++b)
                            for (std::size_t i = 0; i < hw; ++i) {
                              const T xhat = (xv.plane(b, c)[i] - mean[c]) * inv;
                              gx.plane(b, c)[i] =
                                  gv[c] * inv * (g.plane(b, c)[i] - sum_g / count - xhat * sum_gx / count);
                            }
                        }
                        return std::vector<Tensor<T>>{gx, gg, gb};
                      });
}

/// Running-statistics normalization (eval mode); the statistics are constants.
template <std::floating_point T>
NodePtr<T> batchnorm_eval(const NodePtr<T>& x, const NodePtr<T>& gamma, const NodePtr<T>& beta,
                          std::vector<T> mean, std::vector<T> var, T eps) {
  auto y = batchnorm_apply<T>(x->value, gamma->value.data(), beta->value.data(), mean, var, eps);
  return make_node<T>(std::move(y), {x, gamma, beta}, [xv = x->value, gv = gamma->value, mean, var, eps](const Tensor<T>& g) {
    const Shape s = xv.shape();
    Tensor<T> gx(s), gg(Shape{1, s.c, 1, 1}), gb(Shape{1, s.c, 1, 1});
    for (int c = 0; c < s.c; ++c) {
      const T inv = T{1} / std::sqrt(var[c] + eps);
      for (int b = 0; b < s.n; ++b)
        for (std::size_t i = 0; i < s.plane(); ++i) {
          const T go = g.plane(b, c)[i];
          gx.plane(b, c)[i] = go * gv[c] * inv;
          gg[c] += go * (xv.plane(b, c)[i] - mean[c]) * inv;
          gb[c] += go;
        }
    }
    return std::vector<Tensor<T>>{gx, gg, gb};
  });
}

template <std::floating_point T>
NodePtr<T> concat_channels(const std::vector<NodePtr<T>>& xs) {
  std::vector<Tensor<T>> vals;
  vals.reserve(xs.size());
  for (const auto& x : xs) vals.push_back(x->value);
  std::vector<int> sizes;
  for (const auto& v : vals) sizes.push_back(v.c());
  auto y = octyolo::concat_channels<T>(vals);
  return make_node<T>(std::move(y), xs,
                      [sizes](const Tensor<T>& g) { return octyolo::split_channels<T>(g, sizes); });
}

/// Each returned piece is its own node; gradients flow back into the matching
/// channel range of x.
template <std::floating_point T>
std::vector<NodePtr<T>> split_channels(const NodePtr<T>& x, std::span<const int> sizes) {
  auto parts = octyolo::split_channels<T>(x->value, sizes);
  std::vector<NodePtr<T>> out;
  int off = 0;
  for (auto& part : parts) {
    const int c = part.c();
    out.push_back(make_node<T>(std::move(part), {x}, [s = x->value.shape(), off](const Tensor<T>& g) {
      Tensor<T> gx(s);
      for (int b = 0; b < s.n; ++b) std::copy_n(g.plane(b, 0), static_cast<std::size_t>(g.c()) * s.plane(), gx.plane(b, off));
      return std::vector<Tensor<T>>{gx};
    }));
    off += c;
  }
  return out;
}

/// Matrix product on (1, 1, rows, cols) tensors.
template <std::floating_point T>
NodePtr<T> matmul(const NodePtr<T>& a, const NodePtr<T>& b) {
  auto to_m = [](const Tensor<T>& t) {
    Matrix<T> m(t.h(), t.w());
    m.data = t.vec();
    return m;
  };
  auto to_t = [](const Matrix<T>& m) { return Tensor<T>(Shape{1, 1, m.rows, m.cols}, m.data); };
  if (a->value.n() != 1 || a->value.c() != 1 || b->value.n() != 1 || b->value.c() != 1) {
    throw ShapeError("matmul: operands must be (1,1,r,c) matrices");
  }
  const auto am = to_m(a->value);
  const auto bm = to_m(b->value);
  return make_node<T>(to_t(octyolo::matmul(am, bm)), {a, b}, [am, bm, to_m, to_t](const Tensor<T>& g) {
    const auto gm = to_m(g);
    return std::vector<Tensor<T>>{to_t(octyolo::matmul(gm, transpose(bm))), to_t(octyolo::matmul(transpose(am), gm))};
  });
}

/// Row softmax on a (1, 1, rows, cols) tensor.
template <std::floating_point T>
NodePtr<T> softmax_rows(const NodePtr<T>& a) {
  Matrix<T> m(a->value.h(), a->value.w());
  m.data = a->value.vec();
  auto s = octyolo::softmax_rows(m);
  Tensor<T> y(a->value.shape(), s.data);
  return make_node<T>(y, {a}, [y](const Tensor<T>& g) {
    Tensor<T> gx(y.shape());
    for (int r = 0; r < y.h(); ++r) {
      T dot{0};
      for (int c = 0; c < y.w(); ++c) dot += g(0, 0, r, c) * y(0, 0, r, c);
      for (int c = 0; c < y.w(); ++c) gx(0, 0, r, c) = y(0, 0, r, c) * (g(0, 0, r, c) - dot);
    }
    return std::vector<Tensor<T>>{gx};
  });
}

template <std::floating_point T>
NodePtr<T> attention(const NodePtr<T>& qkv, int heads) {
  return make_node<T>(octyolo::attention(qkv->value, heads), {qkv}, [qv = qkv->value, heads](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{attention_backward(qv, heads, g)};
  });
}

// ---------------------------------------------------------------------------
// Finite-difference checking

/// |a - f| / max(|a|, |f|, floor)
template <std::floating_point T>
T relative_error(T analytic, T numeric, T floor = T(1e-8)) {
  const T denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Coordinates whose gradient is this small relative to the largest one in
/// the check are compared against that scale instead of their own, since
/// their difference quotient is mostly forward-pass rounding.
inline constexpr double kGradFloorFraction = 1e-6;

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double step = 0.0;
  double tolerance = 0.0;

  [[nodiscard]] double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  [[nodiscard]] bool passed() const { return max_rel_error() <= tolerance; }

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& e : entries) {
      params.push_back({{"name", e.name}, {"max_rel_error", e.max_rel_error}, {"coordinates", e.coordinates}});
    }
    return {{"step", step},
            {"tolerance", tolerance},
            {"max_rel_error", max_rel_error()},
            {"verdict", passed() ? "pass" : "fail"},
            {"parameters", params}};
  }
};

/// A differentiable input of a checked function: its storage is perturbed in
/// place for the numeric side and restored afterwards.
template <std::floating_point T>
struct CheckedInput {
  std::string name;
  std::span<T> data;
};

/// Compares analytic gradients against central differences
/// (f(x + h e) - f(x - h e)) / 2h for every coordinate of every input.
/// `analytic` runs the tape once and returns one gradient per input (same
/// length as the input's data); `evaluate` recomputes the scalar from the
/// current contents of the inputs. F is the precision the scalar and the
/// difference quotient are carried in; it may be wider than T.
template <std::floating_point T, std::floating_point F = T>
GradCheckReport gradient_check(const std::function<std::vector<std::vector<T>>()>& analytic,
                               const std::function<F()>& evaluate, std::vector<CheckedInput<T>> inputs, T h, T tol) {
  if (!(h > T{0})) throw ConfigError("gradient_check: step must be positive");
  GradCheckReport report;
  report.step = static_cast<double>(h);
  report.tolerance = static_cast<double>(tol);
  const auto grads = analytic();
  if (grads.size() != inputs.size()) throw Error("gradient_check: analytic returned wrong number of gradients");
  F scale = 0;
  for (const auto& g : grads)
    for (T v : g) scale = std::max(scale, static_cast<F>(std::abs(v)));
  const F floor = std::max(F(1e-8), static_cast<F>(kGradFloorFraction) * scale);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    if (grads[k].size() != in.data.size()) throw ShapeError("gradient_check: gradient length mismatch for " + in.name);
    GradCheckEntry entry{in.name, 0.0, in.data.size()};
    for (std::size_t i = 0; i < in.data.size(); ++i) {
      const T saved = in.data[i];
      const T up = saved + h;
      const T down = saved - h;
      in.data[i] = up;
      const F fp = evaluate();
      in.data[i] = down;
      const F fm = evaluate();
      in.data[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw Error("gradient_check: non-finite function value while perturbing " + in.name);
      }
      // up - down is the step actually taken after rounding, nominally 2h.
      const F numeric = (fp - fm) / (static_cast<F>(up) - static_cast<F>(down));
      entry.max_rel_error =
          std::max(entry.max_rel_error, static_cast<double>(relative_error<F>(static_cast<F>(grads[k][i]), numeric, floor)));
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

/// Single-input form: f builds the scalar graph from a node holding x.
template <std::floating_point T>
GradCheckReport finite_diff_check(const std::function<NodePtr<T>(const NodePtr<T>&)>& f, Tensor<T> x, T h, T tol) {
  auto analytic = [&] {
    auto xl = leaf(x, "x");
    auto root = f(xl);
    auto grads = backward(root);
    auto it = grads.find(xl.get());
    std::vector<T> g = it == grads.end() ? std::vector<T>(x.numel(), T{0}) : it->second.vec();
    return std::vector<std::vector<T>>{g};
  };
  auto evaluate = [&] {
    const T v = f(constant(x))->value[0];
    if (!std::isfinite(v)) throw Error("finite_diff_check: non-finite function value");
    return v;
  };
  return gradient_check<T, T>(analytic, evaluate, {{"x", x.data()}}, h, tol);
}

}  // namespace octyolo::ag
