#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace octyolo {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when tensor shapes are not conformable. The message names the dims.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class DType { f32, f64 };

inline const char* to_string(DType d) { return d == DType::f32 ? "f32" : "f64"; }

template <std::floating_point T>
constexpr DType dtype_of() {
  static_assert(std::same_as<T, float> || std::same_as<T, double>, "only f32/f64 tensors");
  return std::same_as<T, float> ? DType::f32 : DType::f64;
}

/// (batch, channels, rows, cols). All dims are >= 1.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  [[nodiscard]] std::size_t numel() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
  [[nodiscard]] bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }

  friend bool operator==(const Shape&, const Shape&) = default;

  [[nodiscard]] std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) +
           ")";
  }
};

/// Dense NCHW tensor with contiguous storage.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : shape_{}, data_(1, T{0}) {}

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(check(shape)), data_(shape.numel(), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(check(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_.str());
    }
  }

  static Tensor zeros(Shape s) { return Tensor(s, T{0}); }
  static Tensor full(Shape s, T v) { return Tensor(s, v); }
  static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  template <class Rng>
  static Tensor uniform(Shape s, Rng& rng, T lo = T{-1}, T hi = T{1}) {
    Tensor t(s);
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& v : t.data_) v = static_cast<T>(dist(rng));
    return t;
  }

  template <class Rng>
  static Tensor normal(Shape s, Rng& rng, T mean = T{0}, T stddev = T{1}) {
    Tensor t(s);
    std::normal_distribution<double> dist(static_cast<double>(mean), static_cast<double>(stddev));
    for (auto& v : t.data_) v = static_cast<T>(dist(rng));
    return t;
  }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] int n() const { return shape_.n; }
  [[nodiscard]] int c() const { return shape_.c; }
  [[nodiscard]] int h() const { return shape_.h; }
  [[nodiscard]] int w() const { return shape_.w; }
  [[nodiscard]] std::size_t numel() const { return data_.size(); }

  [[nodiscard]] std::span<T> data() { return data_; }
  [[nodiscard]] std::span<const T> data() const { return data_; }
  [[nodiscard]] T* raw() { return data_.data(); }
  [[nodiscard]] const T* raw() const { return data_.data(); }
  [[nodiscard]] const std::vector<T>& vec() const { return data_; }

  [[nodiscard]] std::size_t offset(int b, int ch, int y, int x) const {
    return ((static_cast<std::size_t>(b) * shape_.c + ch) * shape_.h + y) * shape_.w + x;
  }
  T& operator()(int b, int ch, int y, int x) { return data_[offset(b, ch, y, x)]; }
  T operator()(int b, int ch, int y, int x) const { return data_[offset(b, ch, y, x)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  /// Pointer to the (b, ch) spatial plane.
  T* plane(int b, int ch) { return data_.data() + offset(b, ch, 0, 0); }
  const T* plane(int b, int ch) const { return data_.data() + offset(b, ch, 0, 0); }

  [[nodiscard]] Tensor reshaped(Shape s) const {
    if (s.numel() != numel()) throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(s, data_);
  }

  template <std::floating_point U>
  [[nodiscard]] Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  static Shape check(Shape s) {
    if (!s.valid()) throw ShapeError("tensor dims must be >= 1, got " + s.str());
    return s;
  }

  Shape shape_;
  std::vector<T> data_;
};

template <std::floating_point T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("compare " + a.shape().str() + " vs " + b.shape().str());
  T m{0};
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <std::floating_point T>
T sum(const Tensor<T>& x) {
  T s{0};
  for (T v : x.data()) s += v;
  return s;
}

template <std::floating_point T>
T mean(const Tensor<T>& x) {
  return sum(x) / static_cast<T>(x.numel());
}

/// Row-major 2-D matrix used by the attention kernels.
template <std::floating_point T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c, T fill = T{0}) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {
    if (r < 1 || c < 1) throw ShapeError("matrix dims must be >= 1, got " + std::to_string(r) + "x" + std::to_string(c));
  }

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  T operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

}  // namespace octyolo
