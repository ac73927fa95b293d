#pragma once

#include <cmath>

namespace fidam {

// First-order dual number. Running the reverse-mode tape with Dual scalars
// (forward-over-reverse) yields exact Hessian-vector products: the value part
// of each leaf adjoint is the gradient, the tangent part is H @ seed.
struct Dual {
  double v = 0.0;  // primal value
  double t = 0.0;  // tangent

  Dual() = default;
  Dual(double value) : v(value) {}
  Dual(double value, double tangent) : v(value), t(tangent) {}

  Dual& operator+=(const Dual& o) { v += o.v; t += o.t; return *this; }
  Dual& operator-=(const Dual& o) { v -= o.v; t -= o.t; return *this; }
  Dual& operator*=(const Dual& o) { t = t * o.v + v * o.t; v *= o.v; return *this; }
};

inline Dual operator+(Dual a, const Dual& b) { return a += b; }
inline Dual operator-(Dual a, const Dual& b) { return a -= b; }
inline Dual operator*(Dual a, const Dual& b) { return a *= b; }
inline Dual operator-(const Dual& a) { return {-a.v, -a.t}; }
inline Dual operator/(const Dual& a, const Dual& b) {
  double inv = 1.0 / b.v;
  return {a.v * inv, (a.t - a.v * b.t * inv) * inv};
}

inline bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
inline bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }

inline Dual exp(const Dual& a) {
  double e = std::exp(a.v);
  return {e, e * a.t};
}
inline Dual log(const Dual& a) { return {std::log(a.v), a.t / a.v}; }
inline Dual tanh(const Dual& a) {
  double th = std::tanh(a.v);
  return {th, (1.0 - th * th) * a.t};
}
inline Dual sqrt(const Dual& a) {
  double r = std::sqrt(a.v);
  return {r, 0.5 * a.t / r};
}

inline double value_of(const Dual& d) { return d.v; }

}  // namespace fidam
