#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <fmt/format.h>

#include "spingas/units.hpp"

namespace spingas {

// A value that is an integer multiple of 1/2, stored as twice its value.
class HalfInt {
 public:
  constexpr HalfInt() = default;
  static constexpr HalfInt from_twice(int twice) { HalfInt h; h.twice_ = twice; return h; }
  static HalfInt from_double(double v) {
    const double t = 2.0 * v;
    const double r = std::round(t);
    if (!std::isfinite(v) || std::abs(t - r) > 1e-9)
      throw std::invalid_argument(fmt::format("{} is not a half-integer", v));
    return from_twice(static_cast<int>(r));
  }
  constexpr int twice() const { return twice_; }
  constexpr double value() const { return 0.5 * twice_; }
  constexpr bool is_integer() const { return twice_ % 2 == 0; }
  friend constexpr HalfInt operator+(HalfInt a, HalfInt b) { return from_twice(a.twice_ + b.twice_); }
  friend constexpr HalfInt operator-(HalfInt a, HalfInt b) { return from_twice(a.twice_ - b.twice_); }
  friend constexpr HalfInt operator-(HalfInt a) { return from_twice(-a.twice_); }
  friend constexpr auto operator<=>(HalfInt, HalfInt) = default;
  std::string str() const {
    return twice_ % 2 == 0 ? std::to_string(twice_ / 2) : std::to_string(twice_) + "/2";
  }

 private:
  int twice_ = 0;
};

inline constexpr HalfInt half(int twice) { return HalfInt::from_twice(twice); }

// Atomic constants. Frequencies are internal s^-1, g factors in s^-1 per gauss.
struct AtomSpec {
  HalfInt nuclear_spin = half(7);
  HalfInt electron_spin = half(1);
  double A_ground = two_pi * 2.3e9;
  double A_excited = two_pi * 290e6;
  double g_ground = two_pi * 2.8e6;
  double g_excited = two_pi * 0.9e6;

  static AtomSpec cesium(FreqConvention c = FreqConvention::ordinary) {
    AtomSpec s;
    s.A_ground = quoted_hz(2.3e9, c);
    s.A_excited = quoted_hz(290e6, c);
    s.g_ground = quoted_hz(2.8e6, c);
    s.g_excited = quoted_hz(0.9e6, c);
    return s;
  }
};

enum class Level { ground, excited };

struct BasisState {
  HalfInt F;
  HalfInt m;
  bool operator==(const BasisState&) const = default;
};

// Ordered ascending F, then ascending m_F.
struct CoupledBasis {
  Level level = Level::ground;
  HalfInt I, S;
  std::vector<BasisState> states;

  int dimension() const { return static_cast<int>(states.size()); }
  int index_of(HalfInt F, HalfInt m) const {
    for (std::size_t k = 0; k < states.size(); ++k)
      if (states[k].F == F && states[k].m == m) return static_cast<int>(k);
    return -1;
  }
  std::vector<HalfInt> f_values() const {
    std::vector<HalfInt> out;
    for (const auto& s : states)
      if (out.empty() || out.back() != s.F) out.push_back(s.F);
    return out;
  }
  // Indices belonging to manifold F, in basis order.
  std::vector<int> manifold(HalfInt F) const {
    std::vector<int> out;
    for (int k = 0; k < dimension(); ++k)
      if (states[k].F == F) out.push_back(k);
    return out;
  }
};

inline void check_spin(HalfInt j, const char* what) {
  if (j.twice() < 0) throw std::invalid_argument(fmt::format("{} must be non-negative", what));
}

inline CoupledBasis build_basis(HalfInt I, HalfInt S, Level level) {
  check_spin(I, "nuclear spin");
  check_spin(S, "electron spin");
  CoupledBasis b;
  b.level = level;
  b.I = I;
  b.S = S;
  const int lo = std::abs(I.twice() - S.twice());
  const int hi = I.twice() + S.twice();
  for (int tF = lo; tF <= hi; tF += 2)
    for (int tm = -tF; tm <= tF; tm += 2) b.states.push_back({half(tF), half(tm)});
  return b;
}

inline CoupledBasis build_basis(const AtomSpec& spec, Level level) {
  return build_basis(spec.nuclear_spin, spec.electron_spin, level);
}

// ---------------------------------------------------------------------------
// Clebsch-Gordan coefficients

using Rational = boost::multiprecision::cpp_rational;
using BigInt = boost::multiprecision::cpp_int;

namespace detail {
inline BigInt factorial(int n) {
  BigInt r = 1;
  for (int k = 2; k <= n; ++k) r *= k;
  return r;
}
inline bool valid_projection(HalfInt j, HalfInt m) {
  return j.twice() >= 0 && std::abs(m.twice()) <= j.twice() && (j.twice() - m.twice()) % 2 == 0;
}
}  // namespace detail

// Signed square of a Condon-Shortley coefficient: sign(C) * C^2, exactly.
inline Rational clebsch_gordan_signed_sq(HalfInt j1, HalfInt m1, HalfInt j2, HalfInt m2,
                                         HalfInt J, HalfInt M) {
  using detail::factorial;
  if (!detail::valid_projection(j1, m1) || !detail::valid_projection(j2, m2) ||
      !detail::valid_projection(J, M))
    return 0;
  if (M != m1 + m2) return 0;
  const int a = j1.twice(), b = j2.twice(), c = J.twice();
  if (c < std::abs(a - b) || c > a + b || (a + b + c) % 2 != 0) return 0;
  // All of these are integers once the triangle and parity checks pass.
  const int t1 = (c + a - b) / 2;  // J + j1 - j2
  const int t2 = (c - a + b) / 2;  // J - j1 + j2
  const int t3 = (a + b - c) / 2;  // j1 + j2 - J
  const int t4 = (a + b + c) / 2 + 1;
  const int jm1 = (a - m1.twice()) / 2, jp1 = (a + m1.twice()) / 2;
  const int jm2 = (b - m2.twice()) / 2, jp2 = (b + m2.twice()) / 2;
  const int Jm = (c - M.twice()) / 2, Jp = (c + M.twice()) / 2;

  Rational pref = Rational(BigInt(c + 1) * factorial(t1) * factorial(t2) * factorial(t3),
                           factorial(t4));
  pref *= Rational(factorial(Jp) * factorial(Jm) * factorial(jm1) * factorial(jp1) *
                   factorial(jm2) * factorial(jp2));

  // Racah sum.
  const int k_lo = std::max({0, -((c - b + m1.twice()) / 2), -((c - a - m2.twice()) / 2)});
  const int k_hi = std::min({t3, jm1, jp2});
  Rational sum = 0;
  for (int k = k_lo; k <= k_hi; ++k) {
    const int d5 = (c - b + m1.twice()) / 2 + k;
    const int d6 = (c - a - m2.twice()) / 2 + k;
    BigInt den = factorial(k) * factorial(t3 - k) * factorial(jm1 - k) * factorial(jp2 - k) *
                 factorial(d5) * factorial(d6);
    Rational term(1, den);
    sum += (k % 2 == 0) ? term : Rational(-term);
  }
  Rational sq = pref * sum * sum;
  return sum < 0 ? Rational(-sq) : sq;
}

inline double clebsch_gordan(HalfInt j1, HalfInt m1, HalfInt j2, HalfInt m2, HalfInt J, HalfInt M) {
  const Rational s = clebsch_gordan_signed_sq(j1, m1, j2, m2, J, M);
  const double v = std::sqrt(std::abs(s.convert_to<double>()));
  return s < 0 ? -v : v;
}

// Floating route through log-gamma; independent of the rational code above and
// usable for spins where exact factorials would be wasteful.
inline double clebsch_gordan_float(double j1, double m1, double j2, double m2, double J, double M) {
  auto lf = [](double n) { return std::lgamma(n + 1.0); };
  if (std::abs(m1 + m2 - M) > 1e-9) return 0.0;
  if (J < std::abs(j1 - j2) - 1e-9 || J > j1 + j2 + 1e-9) return 0.0;
  if (std::abs(m1) > j1 + 1e-9 || std::abs(m2) > j2 + 1e-9 || std::abs(M) > J + 1e-9) return 0.0;
  const double lpref = 0.5 * (std::log(2 * J + 1) + lf(J + j1 - j2) + lf(J - j1 + j2) +
                              lf(j1 + j2 - J) - lf(j1 + j2 + J + 1) + lf(J + M) + lf(J - M) +
                              lf(j1 - m1) + lf(j1 + m1) + lf(j2 - m2) + lf(j2 + m2));
  const int k_lo = static_cast<int>(std::lround(std::max({0.0, j2 - J - m1, j1 + m2 - J})));
  const int k_hi = static_cast<int>(std::lround(std::min({j1 + j2 - J, j1 - m1, j2 + m2})));
  double sum = 0.0;
  for (int k = k_lo; k <= k_hi; ++k) {
    const double l = lf(k) + lf(j1 + j2 - J - k) + lf(j1 - m1 - k) + lf(j2 + m2 - k) +
                     lf(J - j2 + m1 + k) + lf(J - j1 - m2 + k);
    sum += ((k % 2) ? -1.0 : 1.0) * std::exp(lpref - l);
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Operators

struct VectorOperator {
  CMat x, y, z;
  const CMat& operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  CMat& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  CMat squared() const { return x * x + y * y + z * z; }
};

struct SpinOperators {
  VectorOperator S, I, F;
  RMat U;  // uncoupled (m_I outer, m_S inner) -> coupled columns
};

// Standard spin-j matrices in ascending-m order.
inline VectorOperator spin_matrices(HalfInt j) {
  const int d = j.twice() + 1;
  VectorOperator v{CMat::Zero(d, d), CMat::Zero(d, d), CMat::Zero(d, d)};
  CMat jp = CMat::Zero(d, d);
  for (int k = 0; k < d; ++k) {
    const double m = -j.value() + k;
    v.z(k, k) = m;
    if (k + 1 < d) jp(k + 1, k) = std::sqrt(j.value() * (j.value() + 1) - m * (m + 1));
  }
  v.x = 0.5 * (jp + jp.adjoint());
  v.y = cd(0, -0.5) * (jp - jp.adjoint());
  return v;
}

inline RMat coupling_matrix(const CoupledBasis& b) {
  const int dI = b.I.twice() + 1, dS = b.S.twice() + 1;
  RMat U = RMat::Zero(dI * dS, b.dimension());
  for (int col = 0; col < b.dimension(); ++col) {
    const auto& st = b.states[col];
    for (int a = 0; a < dI; ++a)
      for (int c = 0; c < dS; ++c) {
        const HalfInt mI = half(-b.I.twice() + 2 * a), mS = half(-b.S.twice() + 2 * c);
        U(a * dS + c, col) = clebsch_gordan(b.I, mI, b.S, mS, st.F, st.m);
      }
  }
  return U;
}

inline SpinOperators angular_momentum_operators(const CoupledBasis& b) {
  const int dI = b.I.twice() + 1, dS = b.S.twice() + 1;
  const auto Iu = spin_matrices(b.I);
  const auto Su = spin_matrices(b.S);
  const CMat eI = CMat::Identity(dI, dI), eS = CMat::Identity(dS, dS);
  auto kron = [](const CMat& A, const CMat& B) {
    CMat K(A.rows() * B.rows(), A.cols() * B.cols());
    for (int i = 0; i < A.rows(); ++i)
      for (int j = 0; j < A.cols(); ++j) K.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
    return K;
  };
  SpinOperators ops;
  ops.U = coupling_matrix(b);
  const CMat U = ops.U.cast<cd>();
  for (int i = 0; i < 3; ++i) {
    ops.I[i] = U.adjoint() * kron(Iu[i], eS) * U;
    ops.S[i] = U.adjoint() * kron(eI, Su[i]) * U;
    ops.F[i] = ops.I[i] + ops.S[i];
  }
  return ops;
}

inline CMat dot(const VectorOperator& a, const VectorOperator& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}

inline CMat hermitize(const CMat& m) { return 0.5 * (m + m.adjoint()); }

inline CMat hyperfine_hamiltonian(double A, const SpinOperators& ops) {
  return hermitize(A * dot(ops.I, ops.S));
}

inline CMat zeeman_hamiltonian(double g, double B_z, const SpinOperators& ops) {
  return hermitize(g * B_z * ops.S.z);
}

// Diagonal hyperfine energy of manifold F from the interval rule.
inline double lande_energy(double A, HalfInt I, HalfInt S, HalfInt F) {
  const double f = F.value(), i = I.value(), s = S.value();
  return 0.5 * A * (f * (f + 1) - i * (i + 1) - s * (s + 1));
}

// Electric-dipole operator for an S=1/2 -> J'=1/2 (D1) line. Rows index the
// excited basis, columns the ground basis; the electronic part is proportional
// to the Pauli matrices, normalised so that sum_i D_i D_i^dag = 3/2 on the
// excited manifold (reduced amplitude D = 1).
inline VectorOperator dipole_operator(const CoupledBasis& g, const CoupledBasis& e) {
  if (g.I != e.I || g.S != e.S || g.S != half(1))
    throw std::invalid_argument("dipole_operator: only the S=1/2 -> J'=1/2 line is modelled");
  const auto og = angular_momentum_operators(g);
  const CMat Ue = coupling_matrix(e).cast<cd>();
  const CMat Ug = og.U.cast<cd>();
  const auto Su = spin_matrices(g.S);
  const int dI = g.I.twice() + 1;
  VectorOperator D;
  for (int i = 0; i < 3; ++i) {
    CMat K = CMat::Zero(dI * 2, dI * 2);
    for (int a = 0; a < dI; ++a) K.block(a * 2, a * 2, 2, 2) = std::sqrt(2.0) * Su[i];
    D[i] = Ue.adjoint() * K * Ug;
  }
  return D;
}

// Spherical component q of a Cartesian vector operator.
inline CMat spherical_component(const VectorOperator& v, int q) {
  const double r = 1.0 / std::sqrt(2.0);
  switch (q) {
    case +1: return -r * (v.x + cd(0, 1) * v.y);
    case -1: return r * (v.x - cd(0, 1) * v.y);
    case 0: return v.z;
    default: throw std::invalid_argument("q must be -1, 0 or +1");
  }
}

inline CMat commutator(const CMat& a, const CMat& b) { return a * b - b * a; }

// ---------------------------------------------------------------------------
// Debug export

inline void write_operator_csv(std::ostream& os, const CMat& m) {
  os << "row,col,re,im\n";
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j)
      os << fmt::format("{},{},{:.17g},{:.17g}\n", i, j, m(i, j).real(), m(i, j).imag());
}

inline std::string basis_manifest(const CoupledBasis& b) {
  std::string out = fmt::format("{{\"level\": \"{}\", \"dimension\": {}, \"states\": [",
                                b.level == Level::ground ? "ground" : "excited", b.dimension());
  for (int k = 0; k < b.dimension(); ++k)
    out += fmt::format("{}{{\"index\": {}, \"F\": \"{}\", \"m_F\": \"{}\"}}", k ? ", " : "", k,
                       b.states[k].F.str(), b.states[k].m.str());
  return out + "]}";
}

}  // namespace spingas
