// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// Dense linear algebra, activations, loss, Adam and a seedable PRNG.
//
// Storage is whatever scalar the caller picks (float for models, double for
// gradient oracles); every reduction accumulates in double and walks its
// operands in a fixed sequential order so results are bit-stable across runs.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "conflictlens/errors.hpp"

namespace conflictlens {

// ---------------------------------------------------------------------------
// Mat

template <class T>
struct BasicMat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  BasicMat() = default;
  BasicMat(std::size_t r, std::size_t c, T fill = T(0))
      : rows(r), cols(c), data(r * c, fill) {}
  BasicMat(std::size_t r, std::size_t c, std::vector<T> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) {
      throw DimensionError("Mat data length " + std::to_string(data.size()) +
                           " does not match " + std::to_string(r) + "x" +
                           std::to_string(c));
    }
  }

  static BasicMat identity(std::size_t n) {
    BasicMat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(),
                       [](T x) { return std::isfinite(x); });
  }

  template <class U>
  BasicMat<U> cast() const {
    BasicMat<U> out(rows, cols);
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  friend bool operator==(const BasicMat&, const BasicMat&) = default;
};

using Mat = BasicMat<float>;

inline std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

// Row-major product. Each output row is produced independently: the k loop is
// outermost within a row, so the j loop vectorizes without reassociation and
// row i of the result depends only on row i of `a`.
template <class T>
void matmul_row(std::span<const T> a_row, const BasicMat<T>& b,
                std::span<T> out, std::vector<double>& acc) {
  acc.assign(b.cols, 0.0);
  const std::size_t n = b.cols;
  for (std::size_t k = 0; k < b.rows; ++k) {
    const double aik = static_cast<double>(a_row[k]);
    const T* brow = b.data.data() + k * n;
    double* accp = acc.data();
    for (std::size_t j = 0; j < n; ++j)
      accp[j] += aik * static_cast<double>(brow[j]);
  }
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<T>(acc[j]);
}

template <class T>
BasicMat<T> matmul(const BasicMat<T>& a, const BasicMat<T>& b) {
  if (a.cols != b.rows) {
    throw DimensionError("matmul: " + shape_str(a.rows, a.cols) + " x " +
                         shape_str(b.rows, b.cols));
  }
  BasicMat<T> c(a.rows, b.cols);
  std::vector<double> acc;
  for (std::size_t i = 0; i < a.rows; ++i) matmul_row(a.row(i), b, c.row(i), acc);
  return c;
}

// a^T * b without materializing the transpose; used for weight gradients.
template <class T>
BasicMat<T> matmul_tn(const BasicMat<T>& a, const BasicMat<T>& b) {
  if (a.rows != b.rows) {
    throw DimensionError("matmul_tn: " + shape_str(a.rows, a.cols) + "^T x " +
                         shape_str(b.rows, b.cols));
  }
  BasicMat<T> c(a.cols, b.cols);
  std::vector<double> acc(a.cols * b.cols, 0.0);
  for (std::size_t r = 0; r < a.rows; ++r) {
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double ari = static_cast<double>(a(r, i));
      if (ari == 0.0) continue;
      double* accp = acc.data() + i * b.cols;
      const T* brow = b.data.data() + r * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j)
        accp[j] += ari * static_cast<double>(brow[j]);
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) c.data[i] = static_cast<T>(acc[i]);
  return c;
}

// a * b^T; used to push gradients back through a weight matrix.
template <class T>
BasicMat<T> matmul_nt(const BasicMat<T>& a, const BasicMat<T>& b) {
  if (a.cols != b.cols) {
    throw DimensionError("matmul_nt: " + shape_str(a.rows, a.cols) + " x " +
                         shape_str(b.rows, b.cols) + "^T");
  }
  BasicMat<T> c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const T* arow = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const T* brow = b.data.data() + j * b.cols;
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k)
        s += static_cast<double>(arow[k]) * static_cast<double>(brow[k]);
      c(i, j) = static_cast<T>(s);
    }
  }
  return c;
}

template <class T>
void add_inplace(BasicMat<T>& a, const BasicMat<T>& b) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw DimensionError("add: " + shape_str(a.rows, a.cols) + " + " +
                         shape_str(b.rows, b.cols));
  }
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

template <class T>
double dot(std::span<const T> a, std::span<const T> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

// ---------------------------------------------------------------------------
// Activations and loss

template <class T>
std::vector<T> softmax(std::span<const T> v, double temperature = 1.0) {
  std::vector<T> out(v.size());
  if (v.empty()) return out;
  const double mx = static_cast<double>(*std::max_element(v.begin(), v.end()));
  std::vector<double> e(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    e[i] = std::exp((static_cast<double>(v[i]) - mx) / temperature);
    sum += e[i];
  }
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(e[i] / sum);
  return out;
}

template <class T>
std::vector<T> softmax(const std::vector<T>& v, double temperature = 1.0) {
  return softmax(std::span<const T>(v), temperature);
}

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// Exact (erf) GELU.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

template <class T>
struct LossAndGrad {
  double loss = 0.0;
  BasicMat<T> grad;
};

// Mean negative log-likelihood of `labels` under row-wise softmax(logits),
// with gradient (softmax - onehot) / batch.
template <class T>
LossAndGrad<T> cross_entropy(const BasicMat<T>& logits,
                             std::span<const std::size_t> labels) {
  if (labels.size() != logits.rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(logits.rows) + " rows");
  }
  LossAndGrad<T> out{0.0, BasicMat<T>(logits.rows, logits.cols)};
  const double inv_b = logits.rows ? 1.0 / static_cast<double>(logits.rows) : 0.0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const std::size_t y = labels[r];
    if (y >= logits.cols) {
      throw IndexError("cross_entropy: label " + std::to_string(y) +
                       " out of range for " + std::to_string(logits.cols) +
                       " classes");
    }
    auto row = logits.row(r);
    const double mx = static_cast<double>(*std::max_element(row.begin(), row.end()));
    double sum = 0.0;
    for (T x : row) sum += std::exp(static_cast<double>(x) - mx);
    const double log_z = mx + std::log(sum);
    out.loss += (log_z - static_cast<double>(row[y])) * inv_b;
    for (std::size_t c = 0; c < logits.cols; ++c) {
      double p = std::exp(static_cast<double>(row[c]) - log_z);
      if (c == y) p -= 1.0;
      out.grad(r, c) = static_cast<T>(p * inv_b);
    }
  }
  return out;
}

template <class T>
LossAndGrad<T> cross_entropy(const BasicMat<T>& logits,
                             const std::vector<std::size_t>& labels) {
  return cross_entropy(logits, std::span<const std::size_t>(labels));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::size_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  explicit AdamState(std::size_t n, double learning_rate = 1e-3)
      : m(n, 0.0), v(n, 0.0), lr(learning_rate) {}
};

template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state) {
  if (params.size() != grads.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) +
                         " params vs " + std::to_string(grads.size()) + " grads");
  }
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: moment arrays do not match parameters");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] = static_cast<T>(static_cast<double>(params[i]) -
                               state.lr * mhat / (std::sqrt(vhat) + state.eps));
  }
}

template <class T>
void adam_step(BasicMat<T>& params, const BasicMat<T>& grads, AdamState& state) {
  if (params.rows != grads.rows || params.cols != grads.cols) {
    throw DimensionError("adam_step: " + shape_str(params.rows, params.cols) +
                         " params vs " + shape_str(grads.rows, grads.cols) +
                         " grads");
  }
  adam_step(std::span<T>(params.data), std::span<const T>(grads.data), state);
}

// ---------------------------------------------------------------------------
// Finite differences

inline std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& f,
    std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// |a - b| / max(|a|, |b|, floor). The floor keeps gradients that are zero up
// to rounding from producing spurious large ratios.
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// ---------------------------------------------------------------------------
// Rng: xoshiro256** seeded through splitmix64.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  std::uint64_t seed() const { return seed_; }

  // Independent stream derived from this generator's seed and a name, e.g.
  // Rng(root).substream("kmeans"). Does not advance this generator.
  Rng substream(std::string_view name) const {
    std::uint64_t mix = seed_ ^ fnv1a64(name);
    return Rng(splitmix64(mix));
  }
  Rng substream(std::string_view name, std::uint64_t index) const {
    std::uint64_t mix = seed_ ^ fnv1a64(name) ^ (index * 0xD1B54A32D192ED03ULL);
    return Rng(splitmix64(mix));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), unbiased (rejection sampling).
  std::size_t uniform_int(std::size_t n) {
    if (n <= 1) return 0;
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  // Standard normal via Box-Muller (one value per call, no caching so the
  // stream position is a pure function of the number of calls).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = uniform_int(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    shuffle(p.begin(), p.end());
    return p;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t seed_;
  std::uint64_t s_[4];
};

}  // namespace conflictlens
