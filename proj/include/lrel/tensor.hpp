#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "lrel/dual.hpp"

namespace lrel {

// Unqualified math helpers so templated kernels resolve for both double and
// Dual<N> (the Dual overloads live in dual.hpp and are found via ADL).
inline double sqrt(double x) { return std::sqrt(x); }
inline double exp(double x) { return std::exp(x); }
inline double erf(double x) { return std::erf(x); }

using Vec = std::vector<double>;

// Dense row-major matrix. Weight matrices are stored input-major, i.e.
// y = x^T W with W(in, out), which keeps the inner accumulation loop
// contiguous for both the double and dual instantiations.
struct Mat {
  int rows = 0;
  int cols = 0;
  Vec a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
  double* row(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return a.data() + static_cast<std::size_t>(r) * cols; }
  std::size_t size() const { return a.size(); }
  bool empty() const { return a.empty(); }
};

// y = x^T W for W(k x m). y is overwritten. Accumulation over the input index
// runs ascending for every output element regardless of scalar type, so the
// serial, OpenMP, and dual paths all round identically.
template <class T>
inline void matvec(const double* w, int k, int m, const T* x, T* y) {
  for (int j = 0; j < m; ++j) y[j] = T(0.0);
  for (int i = 0; i < k; ++i) {
    const T xi = x[i];
    const double* wrow = w + static_cast<std::size_t>(i) * m;
    for (int j = 0; j < m; ++j) y[j] += xi * wrow[j];
  }
}

template <class T>
inline T dot(const T* a, const T* b, int n) {
  T acc(0.0);
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
inline T dot_mixed(const T* a, const double* b, int n) {
  T acc(0.0);
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (const double x : v) s += x * x;
  return std::sqrt(s);
}

inline bool all_finite(std::span<const double> v) {
  for (const double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// Pre-norm LayerNorm with learned gain/offset; eps inside the sqrt.
constexpr double kLayerNormEps = 1e-5;

template <class T>
inline void layer_norm(const T* x, int d, const double* gain, const double* offset, T* y) {
  T mean(0.0);
  for (int i = 0; i < d; ++i) mean += x[i];
  mean = mean / static_cast<double>(d);
  T var(0.0);
  for (int i = 0; i < d; ++i) {
    const T c = x[i] - mean;
    var += c * c;
  }
  var = var / static_cast<double>(d);
  const T inv = T(1.0) / sqrt(var + kLayerNormEps);
  for (int i = 0; i < d; ++i) y[i] = (x[i] - mean) * inv * gain[i] + offset[i];
}

// Exact erf-form GELU; smooth so Taylor remainders decay quadratically.
template <class T>
inline T gelu(const T& x) {
  const double kInvSqrt2 = 0.7071067811865475244;
  return 0.5 * x * (erf(x * kInvSqrt2) + 1.0);
}

// In-place softmax over n entries with max subtraction. The max scan keeps
// the first maximum, matching argmax tie-breaking downstream.
template <class T>
inline void softmax_inplace(T* x, int n) {
  T m = x[0];
  for (int i = 1; i < n; ++i)
    if (x[i] > m) m = x[i];
  T sum(0.0);
  for (int i = 0; i < n; ++i) {
    x[i] = exp(x[i] - m);
    sum += x[i];
  }
  const T inv = T(1.0) / sum;
  for (int i = 0; i < n; ++i) x[i] = x[i] * inv;
}

// Index of the maximum value; ties break toward the smallest index.
inline int argmax_smallest(std::span<const double> v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace lrel
