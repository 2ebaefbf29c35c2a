#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace gopt {

/// Dual number a + b*eps with eps^2 = 0. One infinitesimal component: each
/// forward pass produces a single Jacobian column, so no per-input vector
/// storage is ever allocated.
template <typename T>
struct Dual {
  T value = T(0);
  T deriv = T(0);

  Dual() = default;
  Dual(T v) : value(v) {}
  Dual(T v, T d) : value(v), deriv(d) {}
};

template <typename T>
inline Dual<T> operator+(Dual<T> a, Dual<T> b) { return {a.value + b.value, a.deriv + b.deriv}; }
template <typename T>
inline Dual<T> operator-(Dual<T> a, Dual<T> b) { return {a.value - b.value, a.deriv - b.deriv}; }
template <typename T>
inline Dual<T> operator*(Dual<T> a, Dual<T> b) {
  return {a.value * b.value, a.value * b.deriv + a.deriv * b.value};
}
template <typename T>
inline Dual<T> operator/(Dual<T> a, Dual<T> b) {
  const T inv = T(1) / b.value;
  return {a.value * inv, (a.deriv - a.value * inv * b.deriv) * inv};
}

template <typename T>
inline Dual<T> operator-(Dual<T> a) { return {-a.value, -a.deriv}; }
template <typename T>
inline Dual<T> operator+(Dual<T> a) { return a; }

template <typename T> inline Dual<T> operator+(Dual<T> a, T b) { return {a.value + b, a.deriv}; }
template <typename T> inline Dual<T> operator+(T a, Dual<T> b) { return {a + b.value, b.deriv}; }
template <typename T> inline Dual<T> operator-(Dual<T> a, T b) { return {a.value - b, a.deriv}; }
template <typename T> inline Dual<T> operator-(T a, Dual<T> b) { return {a - b.value, -b.deriv}; }
template <typename T> inline Dual<T> operator*(Dual<T> a, T b) { return {a.value * b, a.deriv * b}; }
template <typename T> inline Dual<T> operator*(T a, Dual<T> b) { return {a * b.value, a * b.deriv}; }
template <typename T> inline Dual<T> operator/(Dual<T> a, T b) { return {a.value / b, a.deriv / b}; }
template <typename T>
inline Dual<T> operator/(T a, Dual<T> b) { return Dual<T>(a) / b; }

template <typename T> inline Dual<T>& operator+=(Dual<T>& a, Dual<T> b) { a = a + b; return a; }
template <typename T> inline Dual<T>& operator-=(Dual<T>& a, Dual<T> b) { a = a - b; return a; }
template <typename T> inline Dual<T>& operator*=(Dual<T>& a, Dual<T> b) { a = a * b; return a; }
template <typename T> inline Dual<T>& operator/=(Dual<T>& a, Dual<T> b) { a = a / b; return a; }

template <typename T> inline bool operator<(Dual<T> a, Dual<T> b) { return a.value < b.value; }
template <typename T> inline bool operator>(Dual<T> a, Dual<T> b) { return a.value > b.value; }
template <typename T> inline bool operator<=(Dual<T> a, Dual<T> b) { return a.value <= b.value; }
template <typename T> inline bool operator>=(Dual<T> a, Dual<T> b) { return a.value >= b.value; }

using std::abs;
using std::atan2;
using std::cos;
using std::exp;
using std::log;
using std::max;
using std::min;
using std::sin;
using std::sqrt;

template <typename T>
inline Dual<T> sqrt(Dual<T> a) {
  const T s = std::sqrt(a.value);
  return {s, a.deriv / (T(2) * s)};
}
template <typename T>
inline Dual<T> sin(Dual<T> a) { return {std::sin(a.value), std::cos(a.value) * a.deriv}; }
template <typename T>
inline Dual<T> cos(Dual<T> a) { return {std::cos(a.value), -std::sin(a.value) * a.deriv}; }
template <typename T>
inline Dual<T> exp(Dual<T> a) {
  const T e = std::exp(a.value);
  return {e, e * a.deriv};
}
template <typename T>
inline Dual<T> log(Dual<T> a) { return {std::log(a.value), a.deriv / a.value}; }
template <typename T>
inline Dual<T> atan2(Dual<T> y, Dual<T> x) {
  const T den = x.value * x.value + y.value * y.value;
  return {std::atan2(y.value, x.value), (x.value * y.deriv - y.value * x.deriv) / den};
}
// abs at 0 and min/max at ties take the left/first branch.
template <typename T>
inline Dual<T> abs(Dual<T> a) { return a.value < T(0) ? Dual<T>{-a.value, -a.deriv} : a; }
template <typename T>
inline Dual<T> min(Dual<T> a, Dual<T> b) { return a.value <= b.value ? a : b; }
template <typename T>
inline Dual<T> max(Dual<T> a, Dual<T> b) { return a.value >= b.value ? a : b; }

/// Value extraction that works for both plain scalars and duals, used by
/// residual implementations that branch on magnitudes.
template <typename T>
inline T value_of(T x) { return x; }
template <typename T>
inline T value_of(const Dual<T>& x) { return x.value; }

/// One forward dual pass of f at x with the seed on x[seed_index]: fills
/// f(x) and the matching column d f / d x[seed_index].
/// f has signature void(std::span<const Dual<FP>>, std::span<Dual<FP>>).
template <typename FP, typename F>
void dual_eval(F&& f, std::span<const FP> x, std::size_t seed_index,
               std::span<FP> value_out, std::span<FP> deriv_out) {
  std::vector<Dual<FP>> in(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) in[i] = Dual<FP>(x[i], i == seed_index ? FP(1) : FP(0));
  std::vector<Dual<FP>> out(value_out.size());
  f(std::span<const Dual<FP>>(in), std::span<Dual<FP>>(out));
  for (std::size_t i = 0; i < out.size(); ++i) {
    value_out[i] = out[i].value;
    deriv_out[i] = out[i].deriv;
  }
}

}  // namespace gopt
