#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "spingas/errors.hpp"
#include "spingas/gauss_hermite.hpp"
#include "spingas/spin_algebra.hpp"
#include "spingas/units.hpp"

namespace spingas {

struct OpticalField {
  double amplitude_sq = 0.0;  // E0^2, model units
  Eigen::Vector3cd polarization{1.0, 0.0, 0.0};
  double detuning = 0.0;  // from the reference transition, s^-1
  HalfInt ref_Fg = half(6);
  HalfInt ref_Fe = half(8);

  static OpticalField x_linear(double amp_sq, double detuning) {
    OpticalField f;
    f.amplitude_sq = amp_sq;
    f.detuning = detuning;
    return f;
  }
  static OpticalField sigma(int helicity, double amp_sq, double detuning) {
    OpticalField f;
    f.amplitude_sq = amp_sq;
    f.detuning = detuning;
    const double r = 1.0 / std::sqrt(2.0);
    if (helicity > 0)
      f.polarization = Eigen::Vector3cd(-r, cd(0, -r), 0.0);
    else
      f.polarization = Eigen::Vector3cd(r, cd(0, -r), 0.0);
    return f;
  }
  void validate() const {
    if (!(amplitude_sq >= 0.0)) throw std::invalid_argument("field amplitude_sq must be >= 0");
    if (std::abs(polarization.norm() - 1.0) > 1e-12)
      throw std::invalid_argument("polarization vector must have unit norm");
  }
};

struct CollisionParams {
  double gamma_c = two_pi * 1.86e9;
  double gamma_q = two_pi * 265e6;
  double gamma_p = two_pi * 219e6;
  double q_slowdown = 4.57;
  double sigma_ex_v = 7e-10;  // cm^3/s

  static CollisionParams paper(FreqConvention c = FreqConvention::ordinary) {
    CollisionParams p;
    p.gamma_c = quoted_hz(1.86e9, c);
    p.gamma_q = quoted_hz(265e6, c);
    p.gamma_p = quoted_hz(219e6, c);
    return p;
  }
  void validate() const {
    if (gamma_c < 0 || gamma_q < 0 || gamma_p < 0 || sigma_ex_v < 0)
      throw std::invalid_argument("collision rates must be >= 0");
    if (!(q_slowdown > 1.0)) throw std::invalid_argument("q_slowdown must exceed 1");
  }
};

struct DopplerSpec {
  double width = doppler_width(87.0);
  int order = 40;
  void validate() const {
    if (width < 0) throw std::invalid_argument("Doppler width must be >= 0");
    if (order < 1) throw std::invalid_argument("quadrature order must be >= 1");
  }
};

// Immutable operator set for one atom at one bias field.
struct AtomModel {
  AtomSpec spec;
  double B_z = 0.0;
  CoupledBasis g, e;
  SpinOperators og, oe;
  VectorOperator D;  // excited x ground
  CMat Hg, He;

  static AtomModel build(const AtomSpec& spec, double B_z) {
    AtomModel m;
    m.spec = spec;
    m.B_z = B_z;
    m.g = build_basis(spec, Level::ground);
    m.e = build_basis(spec, Level::excited);
    m.og = angular_momentum_operators(m.g);
    m.oe = angular_momentum_operators(m.e);
    m.D = dipole_operator(m.g, m.e);
    m.Hg = hyperfine_hamiltonian(spec.A_ground, m.og) + zeeman_hamiltonian(spec.g_ground, B_z, m.og);
    m.He = hyperfine_hamiltonian(spec.A_excited, m.oe) + zeeman_hamiltonian(spec.g_excited, B_z, m.oe);
    return m;
  }
  int dg() const { return g.dimension(); }
  int de() const { return e.dimension(); }
  // Zero-field frequency of the F_g -> F_e line relative to the centroid.
  double line_frequency(HalfInt Fg, HalfInt Fe) const {
    return lande_energy(spec.A_excited, spec.nuclear_spin, spec.electron_spin, Fe) -
           lande_energy(spec.A_ground, spec.nuclear_spin, spec.electron_spin, Fg);
  }
  CMat ground_projector(HalfInt F) const {
    CMat P = CMat::Zero(dg(), dg());
    for (int k : g.manifold(F)) P(k, k) = 1.0;
    return P;
  }
};

// E0 (e.D) restricted to the reference ground manifold.
inline CMat coupling_operator(const OpticalField& f, const AtomModel& m, bool restrict_to_reference = true) {
  f.validate();
  CMat eD = f.polarization(0) * m.D.x + f.polarization(1) * m.D.y + f.polarization(2) * m.D.z;
  if (restrict_to_reference) eD = eD * m.ground_projector(f.ref_Fg);
  return std::sqrt(f.amplitude_sq) * eD;
}

// Doppler-averaged  <E^-1 P>_v  with  E X = He X - X Hg + (kv - Delta - i gamma_c) X,
// where He, Hg are measured from the reference line frequency omega_ref.
inline CMat coherence_fraction(const CMat& P, const CMat& Hg, const CMat& He, double omega_ref,
                               double detuning, double gamma_c, const DopplerSpec& dop) {
  dop.validate();
  Eigen::SelfAdjointEigenSolver<CMat> sg(Hg), se(He);
  const CMat& Ug = sg.eigenvectors();
  const CMat& Ue = se.eigenvectors();
  const RVec& eg = sg.eigenvalues();
  const RVec& ee = se.eigenvalues();
  const CMat Xt = Ue.adjoint() * P * Ug;

  const int order = dop.width == 0.0 ? 1 : dop.order;
  const auto gh = gauss_hermite(order);
  const double norm = 1.0 / std::sqrt(std::numbers::pi);

  CMat wt = CMat::Zero(P.rows(), P.cols());
  for (int a = 0; a < P.rows(); ++a)
    for (int b = 0; b < P.cols(); ++b) {
      if (Xt(a, b) == cd(0.0)) continue;
      const double base = ee(a) - eg(b) - omega_ref - detuning;
      cd acc = 0.0;
      for (int i = 0; i < order; ++i) {
        const cd den(base + dop.width * gh.nodes[i], -gamma_c);
        if (std::abs(den) < 1e-300)
          throw NumericalError("coherence_fraction: singular resonance denominator (gamma_c = 0 on resonance)");
        acc += gh.weights[i] * norm / den;
      }
      wt(a, b) = Xt(a, b) * acc;
    }
  return Ue * wt * Ug.adjoint();
}

inline CMat coherence_fraction(const OpticalField& f, const AtomModel& m, const CollisionParams& coll,
                               const DopplerSpec& dop, bool restrict_to_reference = true) {
  const CMat P = coupling_operator(f, m, restrict_to_reference);
  return coherence_fraction(P, m.Hg, m.He, m.line_frequency(f.ref_Fg, f.ref_Fe), f.detuning, coll.gamma_c, dop);
}

// ---------------------------------------------------------------------------
// Column-major vectorisation: vec(A X B) = (B^T kron A) vec(X).

inline CMat kron(const CMat& A, const CMat& B) {
  CMat K(A.rows() * B.rows(), A.cols() * B.cols());
  for (int i = 0; i < A.rows(); ++i)
    for (int j = 0; j < A.cols(); ++j) K.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return K;
}

inline Eigen::VectorXcd vec(const CMat& X) { return Eigen::Map<const Eigen::VectorXcd>(X.data(), X.size()); }

inline CMat unvec(const Eigen::VectorXcd& v, int rows) {
  return Eigen::Map<const CMat>(v.data(), rows, v.size() / rows);
}

// Superoperators acting on vec(rho): left and right multiplication.
inline CMat left_mul(const CMat& A, int n) { return kron(CMat::Identity(n, n), A); }
inline CMat right_mul(const CMat& B, int n) { return kron(B.transpose(), CMat::Identity(n, n)); }
inline CMat sandwich(const CMat& A, const CMat& B) { return kron(B.transpose(), A); }  // X -> A X B

// Excited-level relaxation plus coherent evolution and pump back-action:
// L_e(X) = -i[He, X] - i(K X - X K^dag) - gamma_q X - gamma_p (3/4 X - S X S).
inline CMat excited_liouvillian(const CMat& He, const CMat& K, const VectorOperator& Se,
                                const CollisionParams& coll) {
  const int n = static_cast<int>(He.rows());
  const cd I(0, 1);
  CMat L = -I * (left_mul(He, n) - right_mul(He, n));
  L += -I * (left_mul(K, n) - right_mul(K.adjoint(), n));
  CMat SS = sandwich(Se.x, Se.x) + sandwich(Se.y, Se.y) + sandwich(Se.z, Se.z);
  L += -coll.gamma_q * CMat::Identity(n * n, n * n) - coll.gamma_p * (0.75 * CMat::Identity(n * n, n * n) - SS);
  return L;
}

// Source feeding the excited level: i(P rho_g w^dag - w rho_g P^dag).
inline CMat excited_source_super(const CMat& P, const CMat& w) {
  const cd I(0, 1);
  return I * (sandwich(P, w.adjoint()) - sandwich(w, P.adjoint()));
}

inline CMat excited_quasi_steady(const CMat& rho_g, const CMat& P, const CMat& w, const CMat& He,
                                 const VectorOperator& Se, const CollisionParams& coll) {
  if (w.norm() == 0.0) return CMat::Zero(He.rows(), He.cols());
  const CMat L = excited_liouvillian(He, P * w.adjoint(), Se, coll);
  const cd I(0, 1);
  const CMat src = I * (P * rho_g * w.adjoint() - w * rho_g * P.adjoint());
  const Eigen::VectorXcd b = -vec(src);
  Eigen::PartialPivLU<CMat> lu(L);
  const Eigen::VectorXcd x = lu.solve(b);
  const double res = (L * x - b).norm() / std::max(b.norm(), 1e-300);
  if (!std::isfinite(res) || res > 1e-8)
    throw NumericalError(fmt::format("excited_quasi_steady: linear solve residual {:.3e}", res));
  return hermitize(unvec(x, static_cast<int>(He.rows())));
}

inline CMat repopulation(const CMat& rho_e, const VectorOperator& D, double gamma_q) {
  CMat out = CMat::Zero(D.x.cols(), D.x.cols());
  for (int i = 0; i < 3; ++i) out += D[i].adjoint() * rho_e * D[i];
  return (2.0 * gamma_q / 3.0) * out;
}

// Linear map rho_g -> d rho_g/dt for one optical field, with the excited level
// eliminated. Also keeps the excited map for diagnostics.
struct OpticalChannel {
  CMat P, w;
  CMat excited_map;   // vec(rho_e) = excited_map * vec(rho_g)
  CMat ground_super;  // d vec(rho_g)/dt
  double solve_residual = 0.0;

  CMat excited_state(const CMat& rho_g) const {
    return hermitize(unvec(excited_map * vec(rho_g), static_cast<int>(P.rows())));
  }
  CMat apply(const CMat& rho_g) const {
    return unvec(ground_super * vec(rho_g), static_cast<int>(rho_g.rows()));
  }
  // Unpolarised absorption rate, 2 Tr(R rho0).
  double absorption_rate() const {
    const int n = static_cast<int>(P.cols());
    const CMat G = P.adjoint() * w;
    const CMat R = cd(0, -0.5) * (G - G.adjoint());
    return 2.0 * R.trace().real() / n;
  }
};

inline OpticalChannel build_channel(const CMat& P, const CMat& w, const AtomModel& m,
                                    const CollisionParams& coll, bool light_shift = false) {
  const int ng = m.dg();
  const cd I(0, 1);
  OpticalChannel ch;
  ch.P = P;
  ch.w = w;
  const CMat Le = excited_liouvillian(m.He, P * w.adjoint(), m.oe.S, coll);
  const CMat src = excited_source_super(P, w);
  Eigen::PartialPivLU<CMat> lu(Le);
  ch.excited_map = -lu.solve(src);
  const double sn = src.norm();
  ch.solve_residual = sn > 0 ? (Le * ch.excited_map + src).norm() / sn : 0.0;
  if (!std::isfinite(ch.solve_residual) || ch.solve_residual > 1e-8)
    throw NumericalError(fmt::format("excited-level solve residual {:.3e}", ch.solve_residual));

  const CMat G = P.adjoint() * w;
  CMat dep;
  if (light_shift) {
    dep = I * (left_mul(G, ng) - right_mul(G.adjoint(), ng));
  } else {
    const CMat R = cd(0, -0.5) * (G - G.adjoint());
    dep = -(left_mul(R, ng) + right_mul(R, ng));
  }
  CMat stim = -I * (sandwich(P.adjoint(), w) - sandwich(w.adjoint(), P));
  CMat repop = CMat::Zero(ng * ng, m.de() * m.de());
  for (int i = 0; i < 3; ++i) repop += sandwich(m.D[i].adjoint(), m.D[i]);
  repop *= 2.0 * coll.gamma_q / 3.0;
  ch.ground_super = dep + (stim + repop) * ch.excited_map;
  return ch;
}

inline OpticalChannel build_channel(const OpticalField& f, const AtomModel& m, const CollisionParams& coll,
                                    const DopplerSpec& dop, bool light_shift = false,
                                    bool restrict_to_reference = true) {
  const CMat P = coupling_operator(f, m, restrict_to_reference);
  const CMat w = coherence_fraction(P, m.Hg, m.He, m.line_frequency(f.ref_Fg, f.ref_Fe), f.detuning,
                                    coll.gamma_c, dop);
  return build_channel(P, w, m, coll, light_shift);
}

// ---------------------------------------------------------------------------
// Table 2: x-polarised absorption from |F_g=3, m> toward larger / smaller m.

struct TransitionRow {
  int abs_m = 0;
  Rational p_up_exact, p_down_exact;
  double p_up = 0.0, p_down = 0.0;  // from the dipole matrices
};

inline std::vector<TransitionRow> transition_probability_table(const AtomModel& m, const OpticalField& pump) {
  const HalfInt Fg = pump.ref_Fg, Fe = pump.ref_Fe, one = half(2);
  // Exact route: Wigner-Eckart, so only the CG factors matter.
  std::vector<TransitionRow> rows;
  OpticalField unit = pump;
  unit.amplitude_sq = 1.0;
  const CMat P = coupling_operator(unit, m);
  for (int tm = Fg.is_integer() ? 0 : 1; tm <= Fg.twice(); tm += 2) {
    TransitionRow r;
    r.abs_m = tm / 2;
    const HalfInt mg = half(tm);
    const Rational up = clebsch_gordan_signed_sq(Fg, mg, one, half(2), Fe, mg + half(2));
    const Rational dn = clebsch_gordan_signed_sq(Fg, mg, one, half(-2), Fe, mg - half(2));
    const Rational su = up < 0 ? Rational(-up) : up, sd = dn < 0 ? Rational(-dn) : dn;
    r.p_up_exact = su / (su + sd);
    r.p_down_exact = sd / (su + sd);
    // Matrix route: squared elements of E0 e.D within the reference lines.
    const int col = m.g.index_of(Fg, mg);
    double wu = 0.0, wd = 0.0;
    for (int row = 0; row < m.de(); ++row) {
      if (m.e.states[row].F != Fe) continue;
      const double s = std::norm(P(row, col));
      if (m.e.states[row].m > mg) wu += s;
      else if (m.e.states[row].m < mg) wd += s;
    }
    r.p_up = wu / (wu + wd);
    r.p_down = wd / (wu + wd);
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Absorption cross-section of an unpolarised vapour at the pump frequency.

struct CrossSectionSpec {
  double lorentz_hwhm = two_pi * 137e6;
  double natural_fwhm = two_pi * phys::cs_d1_natural_hz;
  double wavelength_cm = phys::cs_d1_wavelength * 100.0;
};

// sigma = (lambda^2 / 4 pi) Gamma_nat sum_{F,F'} p_F S_FF' <gamma / ((delta - kv)^2 + gamma^2)>_v
inline double absorption_cross_section(const AtomModel& m, const OpticalField& f, const CrossSectionSpec& xs,
                                       const DopplerSpec& dop) {
  const auto Fs = m.g.f_values();
  const auto Fes = m.e.f_values();
  const double omega_L = m.line_frequency(f.ref_Fg, f.ref_Fe) + f.detuning;
  const int order = dop.width == 0.0 ? 1 : dop.order;
  const auto gh = gauss_hermite(order);
  const double n = m.dg();
  double total = 0.0;
  for (HalfInt Fg : Fs) {
    const double pop = (Fg.twice() + 1) / n;
    for (HalfInt Fe : Fes) {
      // Fraction of one sublevel's total strength that goes to F' (m-independent).
      const int col = m.g.index_of(Fg, Fg);
      double S = 0.0;
      for (int row = 0; row < m.de(); ++row)
        if (m.e.states[row].F == Fe)
          for (int i = 0; i < 3; ++i) S += std::norm(m.D[i](row, col));
      S /= 1.5;  // sum_i D_i^dag D_i = 3/2 on each ground sublevel
      const double delta = omega_L - m.line_frequency(Fg, Fe);
      double v = 0.0;
      for (int i = 0; i < order; ++i) {
        const double d = delta - dop.width * gh.nodes[i];
        v += gh.weights[i] / std::sqrt(std::numbers::pi) * xs.lorentz_hwhm / (d * d + xs.lorentz_hwhm * xs.lorentz_hwhm);
      }
      total += pop * S * v;
    }
  }
  return xs.wavelength_cm * xs.wavelength_cm / (4.0 * std::numbers::pi) * xs.natural_fwhm * total;
}

}  // namespace spingas
