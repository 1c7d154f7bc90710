#pragma once

#include <array>
#include <cmath>
#include <cstddef>

namespace lrel {

// Forward-mode dual number carrying N tangent lanes alongside one value.
// Each lane evolves through exactly the same expression as a width-1 dual
// would, so lane k of a batched pass is bit-identical to a single-tangent
// pass seeded with the same direction.
template <int N>
struct Dual {
  double v = 0.0;
  std::array<double, N> t{};

  Dual() = default;
  Dual(double value) : v(value) { t.fill(0.0); }  // NOLINT: implicit by design
  Dual(double value, const std::array<double, N>& tangent) : v(value), t(tangent) {}

  Dual& operator+=(const Dual& o) {
    v += o.v;
    for (int i = 0; i < N; ++i) t[i] += o.t[i];
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    v -= o.v;
    for (int i = 0; i < N; ++i) t[i] -= o.t[i];
    return *this;
  }
  Dual& operator*=(double s) {
    v *= s;
    for (int i = 0; i < N; ++i) t[i] *= s;
    return *this;
  }
};

template <int N>
inline Dual<N> operator+(Dual<N> a, const Dual<N>& b) { return a += b; }

template <int N>
inline Dual<N> operator-(Dual<N> a, const Dual<N>& b) { return a -= b; }

template <int N>
inline Dual<N> operator-(const Dual<N>& a) {
  Dual<N> r;
  r.v = -a.v;
  for (int i = 0; i < N; ++i) r.t[i] = -a.t[i];
  return r;
}

template <int N>
inline Dual<N> operator*(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r;
  r.v = a.v * b.v;
  for (int i = 0; i < N; ++i) r.t[i] = a.v * b.t[i] + a.t[i] * b.v;
  return r;
}

template <int N>
inline Dual<N> operator*(const Dual<N>& a, double s) {
  Dual<N> r;
  r.v = a.v * s;
  for (int i = 0; i < N; ++i) r.t[i] = a.t[i] * s;
  return r;
}

template <int N>
inline Dual<N> operator*(double s, const Dual<N>& a) { return a * s; }

template <int N>
inline Dual<N> operator+(const Dual<N>& a, double s) {
  Dual<N> r = a;
  r.v += s;
  return r;
}

template <int N>
inline Dual<N> operator+(double s, const Dual<N>& a) { return a + s; }

template <int N>
inline Dual<N> operator-(const Dual<N>& a, double s) {
  Dual<N> r = a;
  r.v -= s;
  return r;
}

// Value lanes use true division so they round exactly like the plain double
// instantiation of the same kernel; only the tangents use the reciprocal.
template <int N>
inline Dual<N> operator/(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r;
  r.v = a.v / b.v;
  const double inv = 1.0 / b.v;
  for (int i = 0; i < N; ++i) r.t[i] = (a.t[i] - r.v * b.t[i]) * inv;
  return r;
}

template <int N>
inline Dual<N> operator/(const Dual<N>& a, double s) {
  Dual<N> r;
  r.v = a.v / s;
  for (int i = 0; i < N; ++i) r.t[i] = a.t[i] / s;
  return r;
}

template <int N>
inline bool operator<(const Dual<N>& a, const Dual<N>& b) { return a.v < b.v; }
template <int N>
inline bool operator>(const Dual<N>& a, const Dual<N>& b) { return a.v > b.v; }

template <int N>
inline Dual<N> exp(const Dual<N>& a) {
  Dual<N> r;
  const double e = std::exp(a.v);
  r.v = e;
  for (int i = 0; i < N; ++i) r.t[i] = e * a.t[i];
  return r;
}

template <int N>
inline Dual<N> sqrt(const Dual<N>& a) {
  Dual<N> r;
  const double s = std::sqrt(a.v);
  r.v = s;
  const double g = 0.5 / s;
  for (int i = 0; i < N; ++i) r.t[i] = g * a.t[i];
  return r;
}

template <int N>
inline Dual<N> erf(const Dual<N>& a) {
  Dual<N> r;
  r.v = std::erf(a.v);
  // d/dx erf(x) = 2/sqrt(pi) * exp(-x^2)
  const double g = 1.1283791670955126 * std::exp(-a.v * a.v);
  for (int i = 0; i < N; ++i) r.t[i] = g * a.t[i];
  return r;
}

// Scalar shims so templated kernels work for plain double too.
inline double value_of(double x) { return x; }
template <int N>
inline double value_of(const Dual<N>& x) { return x.v; }

inline bool is_finite(double x) { return std::isfinite(x); }
template <int N>
inline bool is_finite(const Dual<N>& x) {
  if (!std::isfinite(x.v)) return false;
  for (int i = 0; i < N; ++i)
    if (!std::isfinite(x.t[i])) return false;
  return true;
}

}  // namespace lrel
