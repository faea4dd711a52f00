#pragma once

// Dense float32 kernels shared by the runtime, the oracle and pruning.
//
// All reductions run in plain index order with a float accumulator, so the
// same inputs always give bitwise-identical outputs regardless of build
// flags that do not enable fast-math.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "skipformer/error.hpp"

namespace skipformer {

using Vector = std::vector<float>;

// Row-major float matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<float> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != rows * cols) {
      throw ShapeError("matrix data length " + std::to_string(data.size()) + " != " + std::to_string(rows) + "x" +
                       std::to_string(cols));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
  }

  float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  Matrix transposed() const {
    Matrix t(cols, rows);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  bool operator==(const Matrix&) const = default;
};

enum class ActivationKind { ReLU, GELU };

inline const char* to_string(ActivationKind kind) { return kind == ActivationKind::ReLU ? "relu" : "gelu"; }

namespace detail {

inline std::string shape_str(std::size_t r, std::size_t c) { return std::to_string(r) + "x" + std::to_string(c); }

inline void check_finite(std::span<const float> values, const char* kernel) {
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(kernel) + ": non-finite value");
  }
}

}  // namespace detail

// result[i][j] = sum_k a[i][k] * b[k][j], k ascending.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: " + detail::shape_str(a.rows, a.cols) + " x " + detail::shape_str(b.rows, b.cols));
  }
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      float acc = 0.0f;
      for (std::size_t k = 0; k < a.cols; ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  detail::check_finite(out.data, "matmul");
  return out;
}

// Row vector times matrix; same accumulation order as matmul on a 1-row input.
inline Vector vec_mat(std::span<const float> x, const Matrix& w) {
  if (x.size() != w.rows) {
    throw ShapeError("vec_mat: 1x" + std::to_string(x.size()) + " x " + detail::shape_str(w.rows, w.cols));
  }
  Vector out(w.cols);
  for (std::size_t j = 0; j < w.cols; ++j) {
    float acc = 0.0f;
    for (std::size_t k = 0; k < x.size(); ++k) acc += x[k] * w(k, j);
    out[j] = acc;
  }
  detail::check_finite(out, "vec_mat");
  return out;
}

// Population variance; eps may be zero when the caller knows var > 0.
inline Vector layer_norm(std::span<const float> x, std::span<const float> gamma, std::span<const float> beta,
                         float eps) {
  if (x.size() != gamma.size() || x.size() != beta.size()) {
    throw ShapeError("layer_norm: dims " + std::to_string(x.size()) + "/" + std::to_string(gamma.size()) + "/" +
                     std::to_string(beta.size()));
  }
  if (x.empty()) throw ShapeError("layer_norm: empty input");
  const float n = static_cast<float>(x.size());
  float sum = 0.0f;
  for (float v : x) sum += v;
  const float mean = sum / n;
  float sq = 0.0f;
  for (float v : x) sq += (v - mean) * (v - mean);
  const float inv_std = 1.0f / std::sqrt(sq / n + eps);
  Vector y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gamma[i] * ((x[i] - mean) * inv_std) + beta[i];
  detail::check_finite(y, "layer_norm");
  return y;
}

inline Vector softmax(std::span<const float> x) {
  if (x.empty()) throw ShapeError("softmax: empty input");
  detail::check_finite(x, "softmax");
  const float mx = *std::max_element(x.begin(), x.end());
  Vector y(x.size());
  float sum = 0.0f;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  for (float& v : y) v /= sum;
  return y;
}

inline float activate(float x, ActivationKind kind) {
  if (kind == ActivationKind::ReLU) return x > 0.0f ? x : 0.0f;
  constexpr float kSqrt2OverPi = 0.7978845608028654f;
  return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + 0.044715f * x * x * x)));
}

inline Vector activation(std::span<const float> x, ActivationKind kind) {
  Vector y(x.size());
  std::transform(x.begin(), x.end(), y.begin(), [kind](float v) { return activate(v, kind); });
  detail::check_finite(y, "activation");
  return y;
}

// Elementwise a + b.
inline Vector add(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("add: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline Vector sub(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("sub: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

inline float max_abs_diff(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: length mismatch");
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Lowest index wins ties.
inline std::size_t argmax(std::span<const float> x) {
  if (x.empty()) throw ShapeError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (x[i] > x[best]) best = i;
  return best;
}

}  // namespace skipformer
