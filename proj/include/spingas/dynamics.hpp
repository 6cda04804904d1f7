#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "spingas/errors.hpp"
#include "spingas/optical.hpp"
#include "spingas/spin_algebra.hpp"

namespace spingas {

enum class ProjectionMode { none, hyperfine_only, hyperfine_zeeman };
enum class GammaForm { lindblad, uniform };
enum class JConvention { measured, verbatim };
enum class BiasModel { none, stretched, optical };

inline const char* to_string(ProjectionMode m) {
  switch (m) {
    case ProjectionMode::none: return "none";
    case ProjectionMode::hyperfine_only: return "hyperfine-only";
    default: return "hyperfine+zeeman";
  }
}

// Unpolarised absorption rate / I. Fixed so that the J = 3.7 Gamma critical
// point of the default model sits at I0 = 1.6 Gamma (see tests/test_calibration).
inline constexpr double default_kappa = 16.9714;

inline double gamma_of_temperature(double gamma0, double temperature_c) {
  return gamma0 + 0.35 * (temperature_c - 75.0);
}

struct SimParams {
  AtomSpec atom = AtomSpec::cesium();
  CollisionParams coll = CollisionParams::paper();
  DopplerSpec doppler;
  double pump_detuning = two_pi * 700e6;   // from F_g=3 -> F_e=4
  double bias_detuning = two_pi * 1200e6;  // from F_g=3 -> F_e=4
  double I = 0.0;      // pumping rate, s^-1
  double H = 0.0;      // bias rate, s^-1; sign selects helicity
  BiasModel bias_model = BiasModel::stretched;
  double Gamma = 58.0;
  GammaForm gamma_form = GammaForm::lindblad;
  double J = 0.0;      // spin-exchange rate on the chosen axis, s^-1
  JConvention j_convention = JConvention::measured;
  double B_z = 1.0;    // gauss
  ProjectionMode projection = ProjectionMode::hyperfine_zeeman;
  double eps = 1e-4;
  bool light_shift = false;
  // Include ground/excited Zeeman shifts in the optical resonance denominators.
  // They are MHz against a 1.86 GHz line and break the m -> -m symmetry of the
  // x-polarised pump (a spurious bias), so they are off unless asked for.
  bool optical_zeeman = false;
  double kappa = default_kappa;

  // Rate multiplying the bracket of the exchange term.
  double exchange_rate() const {
    const double q = coll.q_slowdown;
    return j_convention == JConvention::measured ? q * q * J : q * J;
  }
  void validate() const {
    if (!(Gamma > 0)) throw std::invalid_argument("Gamma must be > 0");
    if (!(J >= 0)) throw std::invalid_argument("J must be >= 0");
    if (!(I >= 0)) throw std::invalid_argument("I must be >= 0");
    if (std::abs(eps) > 0.01) throw std::invalid_argument("|seed polarization| must be <= 0.01");
    if (!(kappa > 0)) throw std::invalid_argument("kappa must be > 0");
    coll.validate();
    doppler.validate();
  }
};

// ---------------------------------------------------------------------------
// Density matrix and invariants

struct InvariantReport {
  double trace_error = 0.0;
  double hermiticity = 0.0;
  double min_eigenvalue = 0.0;
  bool ok(double tr_tol = 1e-9, double h_tol = 1e-10, double eig_tol = -1e-9) const {
    return trace_error <= tr_tol && hermiticity <= h_tol && min_eigenvalue >= eig_tol;
  }
};

struct DensityMatrix {
  CMat matrix;

  static DensityMatrix unpolarized(int n) { return {CMat::Identity(n, n) / double(n)}; }
  InvariantReport invariants() const {
    InvariantReport r;
    r.trace_error = std::abs(matrix.trace() - cd(1.0));
    r.hermiticity = (matrix - matrix.adjoint()).cwiseAbs().maxCoeff();
    Eigen::SelfAdjointEigenSolver<CMat> es(hermitize(matrix), Eigen::EigenvaluesOnly);
    r.min_eigenvalue = es.eigenvalues().minCoeff();
    return r;
  }
};

// rho0 = (1 + c F_z)/d with M_z = Tr(rho F_z)/F_max = eps.
inline CMat seeded_state(const SpinOperators& ops, double eps) {
  const int d = static_cast<int>(ops.F.z.rows());
  const double fmax = ops.F.z.real().diagonal().maxCoeff();
  const double trfz2 = (ops.F.z * ops.F.z).trace().real();
  const double c = eps * fmax * d / trfz2;
  return (CMat::Identity(d, d) + c * ops.F.z) / double(d);
}

inline double magnetization(const CMat& rho, const SpinOperators& ops) {
  const double fmax = ops.F.z.real().diagonal().maxCoeff();
  return (rho * ops.F.z).trace().real() / fmax;
}

// ---------------------------------------------------------------------------
// Individual channels of the ground-level equation

// -qJ[3/4 rho - S rho S - M.(rho S + S rho - 2i S x rho S)],  M = Tr(rho S).
inline CMat spin_exchange_term(const CMat& rho, const VectorOperator& S, double qJ) {
  if (qJ == 0.0) return CMat::Zero(rho.rows(), rho.cols());
  const cd I(0, 1);
  CMat SrS = CMat::Zero(rho.rows(), rho.cols());
  for (int i = 0; i < 3; ++i) SrS += S[i] * rho * S[i];
  CMat vecpart = CMat::Zero(rho.rows(), rho.cols());
  for (int i = 0; i < 3; ++i) {
    const double Mi = (rho * S[i]).trace().real();
    if (Mi == 0.0) continue;
    const int j = (i + 1) % 3, k = (i + 2) % 3;
    const CMat cross = S[j] * rho * S[k] - S[k] * rho * S[j];
    vecpart += Mi * (rho * S[i] + S[i] * rho - 2.0 * I * cross);
  }
  return -qJ * (0.75 * rho - SrS - vecpart);
}

inline CMat gamma_term(const CMat& rho, const VectorOperator& F, double Gamma, GammaForm form) {
  const int n = static_cast<int>(rho.rows());
  if (form == GammaForm::uniform) return -Gamma * (rho - rho.trace() * CMat::Identity(n, n) / double(n));
  const CMat F2 = F.squared();
  CMat FrF = CMat::Zero(n, n);
  for (int i = 0; i < 3; ++i) FrF += F[i] * rho * F[i];
  return -Gamma * (0.5 * (F2 * rho + rho * F2) - FrF);
}

// Zeroes the coherences removed by the chosen approximation.
inline CMat project_coherences(const CMat& rho, const CoupledBasis& b, ProjectionMode mode) {
  if (mode == ProjectionMode::none) return rho;
  CMat out = rho;
  for (int i = 0; i < b.dimension(); ++i)
    for (int j = 0; j < b.dimension(); ++j) {
      if (i == j) continue;
      const bool same_F = b.states[i].F == b.states[j].F;
      if (!same_F || mode == ProjectionMode::hyperfine_zeeman) out(i, j) = 0.0;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Full ground-level model

class GroundModel {
 public:
  explicit GroundModel(const SimParams& p) : params_(p) {
    p.validate();
    atom_ = AtomModel::build(p.atom, p.B_z);
    // Hyperfine part from the interval rule (exactly diagonal), Zeeman from S_z.
    const int n = atom_.dg();
    H_ = zeeman_hamiltonian(p.atom.g_ground, p.B_z, atom_.og);
    for (int k = 0; k < n; ++k)
      H_(k, k) += lande_energy(p.atom.A_ground, p.atom.nuclear_spin, p.atom.electron_spin, atom_.g.states[k].F);

    const AtomModel optical_atom = p.optical_zeeman ? atom_ : AtomModel::build(p.atom, 0.0);
    if (p.I > 0) {
      // Absorption is linear in E0^2, so the unit-field rate fixes the amplitude;
      // the channel itself is built at the actual amplitude.
      const OpticalField unit = OpticalField::x_linear(1.0, p.pump_detuning);
      const CMat P1 = coupling_operator(unit, optical_atom);
      const CMat w1 = coherence_fraction(unit, optical_atom, p.coll, p.doppler);
      OpticalChannel probe;
      probe.P = P1;
      probe.w = w1;
      abs_rate_per_amp_ = probe.absorption_rate();
      const double amp = std::sqrt(p.kappa * p.I / abs_rate_per_amp_);
      pump_ = build_channel(amp * P1, amp * w1, optical_atom, p.coll, p.light_shift);
    }
    if (p.H != 0.0 && p.bias_model == BiasModel::optical) {
      const int hel = p.H > 0 ? +1 : -1;
      OpticalField unit = OpticalField::sigma(hel, 1.0, p.bias_detuning);
      const auto ch1 = build_channel(unit, optical_atom, p.coll, p.doppler, p.light_shift);
      const CMat rho0 = CMat::Identity(n, n) / double(n);
      const double h1 = std::abs(magnetization(ch1.apply(rho0), atom_.og));
      OpticalField f = unit;
      f.amplitude_sq = std::abs(p.H) / h1;
      bias_ = build_channel(f, optical_atom, p.coll, p.doppler, p.light_shift);
    }
    if (p.H != 0.0 && p.bias_model == BiasModel::stretched) {
      const HalfInt Fmax = atom_.g.states.back().F;
      stretched_index_ = atom_.g.index_of(Fmax, p.H > 0 ? Fmax : -Fmax);
    }
  }

  const SimParams& params() const { return params_; }
  const AtomModel& atom() const { return atom_; }
  const CMat& hamiltonian() const { return H_; }
  const std::optional<OpticalChannel>& pump() const { return pump_; }
  const std::optional<OpticalChannel>& bias() const { return bias_; }
  double absorption_rate_per_amplitude() const { return abs_rate_per_amp_; }

  // Everything except spin exchange; linear in rho.
  CMat linear_rhs(const CMat& rho) const {
    const cd I(0, 1);
    CMat d = -I * (H_ * rho - rho * H_);
    d += gamma_term(rho, atom_.og.F, params_.Gamma, params_.gamma_form);
    if (pump_) d += pump_->apply(rho);
    if (bias_) d += bias_->apply(rho);
    if (stretched_index_ >= 0) {
      const double h = std::abs(params_.H);
      d -= h * rho;
      d(stretched_index_, stretched_index_) += h * rho.trace();
    }
    return d;
  }

  CMat rhs(const CMat& rho) const {
    return linear_rhs(rho) + spin_exchange_term(rho, atom_.og.S, params_.exchange_rate());
  }

 private:
  SimParams params_;
  AtomModel atom_;
  CMat H_;
  std::optional<OpticalChannel> pump_, bias_;
  double abs_rate_per_amp_ = 0.0;
  int stretched_index_ = -1;
};

inline CMat ground_rhs(const CMat& rho, const GroundModel& m) { return m.rhs(rho); }

// ---------------------------------------------------------------------------
// Real parametrisation of the projected state and the reduced flow
//   dy/dt = L y + qJ (A y + sum_i (s_i . y) X_i y)

class ReducedModel {
 public:
  struct Coord {
    int i, j;
    enum Kind { diag, re, im } kind;
  };

  ReducedModel(const GroundModel& gm, ProjectionMode mode) : mode_(mode), basis_(gm.atom().g) {
    const auto& b = basis_;
    const int d = b.dimension();
    for (int k = 0; k < d; ++k) coords_.push_back({k, k, Coord::diag});
    if (mode != ProjectionMode::hyperfine_zeeman)
      for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
          if (mode == ProjectionMode::hyperfine_only && b.states[i].F != b.states[j].F) continue;
          coords_.push_back({i, j, Coord::re});
          coords_.push_back({i, j, Coord::im});
        }
    const int n = size();
    const auto& S = gm.atom().og.S;
    qJ_ = gm.params().exchange_rate();
    Gamma_ = gm.params().Gamma;
    L_.resize(n, n);
    A_.resize(n, n);
    for (int c = 0; c < 3; ++c) {
      X_[c].resize(n, n);
      s_[c].resize(n);
    }
    for (int k = 0; k < n; ++k) {
      const CMat E = basis_matrix(k);
      L_.col(k) = compress(gm.linear_rhs(E));
      CMat SES = CMat::Zero(d, d);
      for (int c = 0; c < 3; ++c) SES += S[c] * E * S[c];
      A_.col(k) = compress(-(0.75 * E - SES));
      for (int c = 0; c < 3; ++c) {
        const int c1 = (c + 1) % 3, c2 = (c + 2) % 3;
        const CMat cross = S[c1] * E * S[c2] - S[c2] * E * S[c1];
        X_[c].col(k) = compress(E * S[c] + S[c] * E - cd(0, 2) * cross);
        s_[c](k) = (E * S[c]).trace().real();
      }
    }
    for (int c = 0; c < 3; ++c) active_[c] = s_[c].lpNorm<Eigen::Infinity>() > 0;
    for (int k = 0; k < n; ++k)
      if (coords_[k].kind == Coord::re) rotation_ = std::max(rotation_, std::abs(L_(k + 1, k)));
    const double fmax = gm.atom().og.F.z.real().diagonal().maxCoeff();
    fz_.resize(n);
    tr_.resize(n);
    for (int k = 0; k < n; ++k) {
      const CMat E = basis_matrix(k);
      fz_(k) = (E * gm.atom().og.F.z).trace().real() / fmax;
      tr_(k) = E.trace().real();
    }
  }

  int size() const { return static_cast<int>(coords_.size()); }
  ProjectionMode mode() const { return mode_; }
  const CoupledBasis& basis() const { return basis_; }
  double qJ() const { return qJ_; }
  double Gamma() const { return Gamma_; }
  // Fastest free rotation among the kept coherences, s^-1.
  double max_rotation() const { return rotation_; }
  const RMat& L() const { return L_; }
  const RMat& A() const { return A_; }
  const RVec& fz() const { return fz_; }
  const RVec& trace_functional() const { return tr_; }
  const std::array<RMat, 3>& X() const { return X_; }
  const std::array<RVec, 3>& s() const { return s_; }
  const std::vector<Coord>& coords() const { return coords_; }

  CMat basis_matrix(int k) const {
    const int d = basis_.dimension();
    CMat E = CMat::Zero(d, d);
    const auto& c = coords_[k];
    switch (c.kind) {
      case Coord::diag: E(c.i, c.i) = 1.0; break;
      case Coord::re: E(c.i, c.j) = 1.0; E(c.j, c.i) = 1.0; break;
      case Coord::im: E(c.i, c.j) = cd(0, 1); E(c.j, c.i) = cd(0, -1); break;
    }
    return E;
  }

  CMat embed(const RVec& y) const {
    const int d = basis_.dimension();
    CMat rho = CMat::Zero(d, d);
    for (int k = 0; k < size(); ++k) {
      const auto& c = coords_[k];
      switch (c.kind) {
        case Coord::diag: rho(c.i, c.i) += y(k); break;
        case Coord::re: rho(c.i, c.j) += y(k); rho(c.j, c.i) += y(k); break;
        case Coord::im: rho(c.i, c.j) += cd(0, y(k)); rho(c.j, c.i) -= cd(0, y(k)); break;
      }
    }
    return rho;
  }

  // Coordinates of the projected Hermitian part of X.
  RVec compress(const CMat& X) const {
    RVec y(size());
    for (int k = 0; k < size(); ++k) {
      const auto& c = coords_[k];
      const cd h = 0.5 * (X(c.i, c.j) + std::conj(X(c.j, c.i)));
      y(k) = c.kind == Coord::im ? h.imag() : h.real();
    }
    return y;
  }

  double M(const RVec& y) const { return fz_.dot(y); }

  RVec rhs(const RVec& y) const {
    RVec out = L_ * y;
    if (qJ_ != 0.0) {
      RVec ex = A_ * y;
      for (int c = 0; c < 3; ++c)
        if (active_[c]) {
          const double m = s_[c].dot(y);
          if (m != 0.0) ex.noalias() += m * (X_[c] * y);
        }
      out += qJ_ * ex;
    }
    return out;
  }

  RMat jacobian(const RVec& y) const {
    RMat Jm = L_;
    if (qJ_ != 0.0) {
      RMat ex = A_;
      for (int c = 0; c < 3; ++c)
        if (active_[c]) {
          ex += s_[c].dot(y) * X_[c];
          ex += (X_[c] * y) * s_[c].transpose();
        }
      Jm += qJ_ * ex;
    }
    return Jm;
  }

  InvariantReport invariants(const RVec& y) const {
    InvariantReport r;
    r.trace_error = std::abs(tr_.dot(y) - 1.0);
    if (mode_ == ProjectionMode::hyperfine_zeeman) {
      r.hermiticity = 0.0;
      r.min_eigenvalue = y.minCoeff();
      return r;
    }
    const CMat rho = embed(y);
    r.hermiticity = (rho - rho.adjoint()).cwiseAbs().maxCoeff();
    if (mode_ == ProjectionMode::hyperfine_only) {
      double mn = std::numeric_limits<double>::infinity();
      for (HalfInt F : basis_.f_values()) {
        const auto idx = basis_.manifold(F);
        const int n = static_cast<int>(idx.size());
        const CMat blk = rho.block(idx.front(), idx.front(), n, n);
        Eigen::SelfAdjointEigenSolver<CMat> es(blk, Eigen::EigenvaluesOnly);
        mn = std::min(mn, es.eigenvalues().minCoeff());
      }
      r.min_eigenvalue = mn;
    } else {
      Eigen::SelfAdjointEigenSolver<CMat> es(rho, Eigen::EigenvaluesOnly);
      r.min_eigenvalue = es.eigenvalues().minCoeff();
    }
    return r;
  }

 private:
  ProjectionMode mode_;
  CoupledBasis basis_;
  std::vector<Coord> coords_;
  double qJ_ = 0.0, Gamma_ = 1.0, rotation_ = 0.0;
  RMat L_, A_;
  std::array<RMat, 3> X_;
  std::array<RVec, 3> s_;
  std::array<bool, 3> active_{};
  RVec fz_, tr_;
};

// ---------------------------------------------------------------------------
// Dormand-Prince 5(4)

struct Tolerances {
  double rtol = 1e-8;
  double atol = 1e-10;
  double h_initial = 0.0;  // 0 = automatic
  double h_min = 1e-14;    // relative to t_end
  long max_steps = 20'000'000;
};

// automatic: Rosenbrock when the fastest coherence rotation plus the exchange
// rate exceeds stiff_ratio * Gamma (Zeeman coherences at gauss-scale fields,
// or high density), else DOPRI5.
enum class Stepper { automatic, dopri5, rosenbrock };

inline const char* to_string(Stepper s) {
  switch (s) {
    case Stepper::dopri5: return "dopri5";
    case Stepper::rosenbrock: return "rosenbrock";
    default: return "auto";
  }
}

struct TrajectoryOptions {
  Tolerances tol;
  Stepper stepper = Stepper::automatic;
  double stiff_ratio = 300.0;
  bool check_invariants = true;
  int invariant_stride = 1;  // check every n-th accepted step
  double trace_tol = 1e-9, herm_tol = 1e-10, eig_tol = -1e-9;
  // Steady-state detection (disabled when window <= 0).
  double steady_window = 0.0;   // s
  double steady_rel = 1e-6;     // |dM/dt| < steady_rel Gamma |M| + steady_abs Gamma
  double steady_abs = 1e-9;
  double steady_state_tol = 1e-6;  // ||dy/dt||_inf < tol Gamma
  bool stop_at_steady = true;
  std::size_t record_stride = 1;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<double> magnetization;
  std::vector<double> dMdt;
  RVec final_y;
  CMat final_state;
  bool steady = false;
  double t_steady = std::numeric_limits<double>::quiet_NaN();
  long steps = 0, rejected = 0;
  InvariantReport worst;
};

using RhsFn = std::function<RVec(double, const RVec&)>;

namespace detail {
struct Dopri {
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                          e6 = 22.0 / 525, e7 = -1.0 / 40;
};
}  // namespace detail

// Generic integrator on a real vector. `observe(t, y, f)` runs after every
// accepted step and returns false to stop.
inline void dopri5(const RhsFn& f, double t0, RVec y, double t_end, const Tolerances& tol,
                   const std::function<bool(double, const RVec&, const RVec&)>& observe, long* steps_out = nullptr,
                   long* rejected_out = nullptr) {
  using D = detail::Dopri;
  if (!(t_end > t0)) throw std::invalid_argument("integrate: t_end must exceed t0");
  auto err_norm = [&](const RVec& e, const RVec& y0, const RVec& y1) {
    double s = 0.0;
    for (int i = 0; i < e.size(); ++i) {
      const double sc = tol.atol + tol.rtol * std::max(std::abs(y0(i)), std::abs(y1(i)));
      s += (e(i) / sc) * (e(i) / sc);
    }
    return std::sqrt(s / std::max<Eigen::Index>(1, e.size()));
  };
  RVec k1 = f(t0, y);
  double h = tol.h_initial;
  if (h <= 0.0) {
    RVec sc = (tol.atol + tol.rtol * y.array().abs()).matrix();
    const double d0 = (y.array() / sc.array()).matrix().norm() / std::sqrt(double(y.size()));
    const double d1 = (k1.array() / sc.array()).matrix().norm() / std::sqrt(double(y.size()));
    h = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 * (t_end - t0) : 0.01 * d0 / d1;
    h = std::min(h, t_end - t0);
  }
  const double h_min = tol.h_min * (t_end - t0);
  double t = t0;
  long steps = 0, rejected = 0;
  RVec k2, k3, k4, k5, k6, k7, y1, ytmp;
  while (t < t_end) {
    if (steps + rejected > tol.max_steps) throw NumericalError("integrate: step budget exhausted");
    if (t + h > t_end) h = t_end - t;
    ytmp = y + h * D::a21 * k1;
    k2 = f(t + D::c2 * h, ytmp);
    ytmp = y + h * (D::a31 * k1 + D::a32 * k2);
    k3 = f(t + D::c3 * h, ytmp);
    ytmp = y + h * (D::a41 * k1 + D::a42 * k2 + D::a43 * k3);
    k4 = f(t + D::c4 * h, ytmp);
    ytmp = y + h * (D::a51 * k1 + D::a52 * k2 + D::a53 * k3 + D::a54 * k4);
    k5 = f(t + D::c5 * h, ytmp);
    ytmp = y + h * (D::a61 * k1 + D::a62 * k2 + D::a63 * k3 + D::a64 * k4 + D::a65 * k5);
    k6 = f(t + h, ytmp);
    y1 = y + h * (D::b1 * k1 + D::b3 * k3 + D::b4 * k4 + D::b5 * k5 + D::b6 * k6);
    k7 = f(t + h, y1);
    const RVec e = h * (D::e1 * k1 + D::e3 * k3 + D::e4 * k4 + D::e5 * k5 + D::e6 * k6 + D::e7 * k7);
    const double err = err_norm(e, y, y1);
    if (!std::isfinite(err)) {
      h *= 0.1;
      ++rejected;
      if (h < h_min) throw NumericalError("integrate: non-finite state");
      continue;
    }
    if (err <= 1.0) {
      t += h;
      y.swap(y1);
      k1.swap(k7);
      ++steps;
      if (!observe(t, y, k1)) break;
      const double fac = err == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0);
      h *= fac;
    } else {
      h *= std::max(0.2, 0.9 * std::pow(err, -0.2));
      ++rejected;
    }
    if (h < h_min && t < t_end)
      throw NumericalError(fmt::format("integrate: step size underflow at t = {:.6g} (h = {:.3g})", t, h));
  }
  if (steps_out) *steps_out = steps;
  if (rejected_out) *rejected_out = rejected;
}

// Linearly implicit 4(3) Rosenbrock pair (Shampine 1982 parameters) for
// autonomous systems, one LU per step. Used when kept Zeeman coherences make
// the flow too stiff for explicit stepping.
namespace detail {
struct Ros4 {
  static constexpr double gam = 0.5, a21 = 2.0, a31 = 48.0 / 25, a32 = 6.0 / 25;
  static constexpr double c21 = -8.0, c31 = 372.0 / 25, c32 = 12.0 / 5;
  static constexpr double c41 = -112.0 / 125, c42 = -54.0 / 125, c43 = -2.0 / 5;
  static constexpr double b1 = 19.0 / 9, b2 = 0.5, b3 = 25.0 / 108, b4 = 125.0 / 108;
  static constexpr double e1 = 17.0 / 54, e2 = 7.0 / 36, e4 = 125.0 / 108;
};
}  // namespace detail

using JacFn = std::function<RMat(const RVec&)>;

inline void rosenbrock4(const std::function<RVec(const RVec&)>& f, const JacFn& jac, double t0, RVec y,
                        double t_end, const Tolerances& tol,
                        const std::function<bool(double, const RVec&, const RVec&)>& observe,
                        long* steps_out = nullptr, long* rejected_out = nullptr) {
  using R = detail::Ros4;
  if (!(t_end > t0)) throw std::invalid_argument("integrate: t_end must exceed t0");
  const Eigen::Index n = y.size();
  auto err_norm = [&](const RVec& e, const RVec& y0, const RVec& y1) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sc = tol.atol + tol.rtol * std::max(std::abs(y0(i)), std::abs(y1(i)));
      s += (e(i) / sc) * (e(i) / sc);
    }
    return std::sqrt(s / std::max<Eigen::Index>(1, n));
  };
  RVec f0 = f(y);
  double h = tol.h_initial > 0 ? tol.h_initial : 1e-6 * (t_end - t0);
  const double h_min = tol.h_min * (t_end - t0);
  double t = t0;
  long steps = 0, rejected = 0;
  RMat Jm = jac(y);
  bool jac_fresh = true;
  while (t < t_end) {
    if (steps + rejected > tol.max_steps) throw NumericalError("integrate: step budget exhausted");
    if (t + h > t_end) h = t_end - t;
    if (!jac_fresh) Jm = jac(y);
    jac_fresh = true;
    const Eigen::PartialPivLU<RMat> lu(RMat(RMat::Identity(n, n) / (R::gam * h) - Jm));
    const RVec g1 = lu.solve(f0);
    RVec fy = f(y + R::a21 * g1);
    const RVec g2 = lu.solve(RVec(fy + R::c21 * g1 / h));
    fy = f(y + R::a31 * g1 + R::a32 * g2);
    const RVec g3 = lu.solve(RVec(fy + (R::c31 * g1 + R::c32 * g2) / h));
    const RVec g4 = lu.solve(RVec(fy + (R::c41 * g1 + R::c42 * g2 + R::c43 * g3) / h));
    RVec y1 = y + R::b1 * g1 + R::b2 * g2 + R::b3 * g3 + R::b4 * g4;
    const double err = err_norm(RVec(R::e1 * g1 + R::e2 * g2 + R::e4 * g4), y, y1);
    if (!std::isfinite(err)) {
      h *= 0.1;
      ++rejected;
      if (h < h_min) throw NumericalError("integrate: non-finite state");
      continue;
    }
    if (err <= 1.0) {
      t += h;
      y.swap(y1);
      f0 = f(y);
      jac_fresh = false;
      ++steps;
      if (!observe(t, y, f0)) break;
      h *= err == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err, -0.25), 0.2, 5.0);
    } else {
      h *= std::max(0.2, 0.9 * std::pow(err, -0.25));
      ++rejected;
    }
    if (h < h_min && t < t_end)
      throw NumericalError(fmt::format("integrate: step size underflow at t = {:.6g} (h = {:.3g})", t, h));
  }
  if (steps_out) *steps_out = steps;
  if (rejected_out) *rejected_out = rejected;
}

inline bool uses_rosenbrock(const ReducedModel& m, const TrajectoryOptions& opt) {
  if (opt.stepper != Stepper::automatic) return opt.stepper == Stepper::rosenbrock;
  return m.max_rotation() + m.qJ() > opt.stiff_ratio * m.Gamma();
}

inline Trajectory integrate(const ReducedModel& m, const RVec& y0, double t_end, const TrajectoryOptions& opt) {
  Trajectory tr;
  tr.worst.min_eigenvalue = std::numeric_limits<double>::infinity();
  const double G = m.Gamma();
  auto f = [&m](double, const RVec& y) { return m.rhs(y); };
  auto record = [&](double t, const RVec& y, const RVec& dy) {
    tr.times.push_back(t);
    tr.magnetization.push_back(m.M(y));
    tr.dMdt.push_back(m.fz().dot(dy));
  };
  auto check = [&](double t, const RVec& y) {
    const auto r = m.invariants(y);
    tr.worst.trace_error = std::max(tr.worst.trace_error, r.trace_error);
    tr.worst.hermiticity = std::max(tr.worst.hermiticity, r.hermiticity);
    tr.worst.min_eigenvalue = std::min(tr.worst.min_eigenvalue, r.min_eigenvalue);
    if (!r.ok(opt.trace_tol, opt.herm_tol, opt.eig_tol))
      throw NumericalError(fmt::format(
          "invariant violation at t = {:.6g}: trace error {:.3e}, hermiticity {:.3e}, min eigenvalue {:.3e}", t,
          r.trace_error, r.hermiticity, r.min_eigenvalue));
  };
  record(0.0, y0, m.rhs(y0));
  if (opt.check_invariants) check(0.0, y0);

  double quiet_since = -1.0;
  long n_acc = 0;
  RVec y_last = y0;
  auto observe = [&](double t, const RVec& y, const RVec& dy) {
    ++n_acc;
    const bool keep = opt.record_stride <= 1 || n_acc % static_cast<long>(opt.record_stride) == 0;
    if (keep) record(t, y, dy);
    if (opt.check_invariants && n_acc % std::max(1, opt.invariant_stride) == 0) check(t, y);
    y_last = y;
    if (opt.steady_window > 0.0) {
      const double M = m.M(y), dM = m.fz().dot(dy);
      const bool quiet = std::abs(dM) < opt.steady_rel * G * std::abs(M) + opt.steady_abs * G &&
                         dy.lpNorm<Eigen::Infinity>() < opt.steady_state_tol * G;
      if (!quiet) {
        quiet_since = -1.0;
      } else if (quiet_since < 0.0) {
        quiet_since = t;
      } else if (t - quiet_since >= opt.steady_window) {
        if (!tr.steady) tr.t_steady = t;
        tr.steady = true;
        if (opt.stop_at_steady) {
          if (!keep) record(t, y, dy);
          return false;
        }
      }
    }
    return true;
  };
  if (uses_rosenbrock(m, opt))
    rosenbrock4([&m](const RVec& y) { return m.rhs(y); }, [&m](const RVec& y) { return m.jacobian(y); }, 0.0, y0,
                t_end, opt.tol, observe, &tr.steps, &tr.rejected);
  else
    dopri5(f, 0.0, y0, t_end, opt.tol, observe, &tr.steps, &tr.rejected);
  if (opt.record_stride > 1 && tr.times.back() < t_end && !tr.steady) record(t_end, y_last, m.rhs(y_last));
  tr.final_y = y_last;
  tr.final_state = m.embed(y_last);
  return tr;
}

// First time the trajectory reaches `level` (approached from below in the
// direction `sign`), using cubic Hermite interpolation between samples.
inline double first_crossing(const std::vector<double>& t, const std::vector<double>& M,
                             const std::vector<double>& dM, double level, double sign) {
  for (std::size_t k = 1; k < t.size(); ++k) {
    const double a = sign * M[k - 1] - level, b = sign * M[k] - level;
    if (a < 0 && b >= 0) {
      const double h = t[k] - t[k - 1];
      auto p = [&](double s) {
        const double s2 = s * s, s3 = s2 * s;
        return (2 * s3 - 3 * s2 + 1) * M[k - 1] + (s3 - 2 * s2 + s) * h * dM[k - 1] + (-2 * s3 + 3 * s2) * M[k] +
               (s3 - s2) * h * dM[k];
      };
      double lo = 0.0, hi = 1.0;
      for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (sign * p(mid) - level < 0) lo = mid;
        else hi = mid;
      }
      return t[k - 1] + 0.5 * (lo + hi) * h;
    }
  }
  return std::numeric_limits<double>::quiet_NaN();
}

inline constexpr double response_fraction = 1.0 - 0.36787944117144233;  // 1 - 1/e

// ---------------------------------------------------------------------------
// Steady state and response time

struct SteadyOptions {
  double t_max_T1 = 20000.0;  // in units of T1; the slowest near-critical cells settle after ~1e4 T1
  double window_T1 = 5.0;
  TrajectoryOptions traj;
  SteadyOptions() {
    traj.invariant_stride = 50;
    traj.record_stride = 1;
  }
};

struct SteadyResult {
  double M_ss = 0.0;
  CMat rho_ss;
  RVec y_ss;
  double t_converge = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  Trajectory trajectory;
};

inline RVec seeded_coordinates(const ReducedModel& rm, const GroundModel& gm, double eps) {
  return rm.compress(seeded_state(gm.atom().og, eps));
}

inline SteadyResult steady_state(const GroundModel& gm, const ReducedModel& rm, double eps,
                                 const SteadyOptions& so = {}) {
  const double G = gm.params().Gamma;
  TrajectoryOptions opt = so.traj;
  opt.steady_window = so.window_T1 / G;
  SteadyResult r;
  r.trajectory = integrate(rm, seeded_coordinates(rm, gm, eps), so.t_max_T1 / G, opt);
  r.converged = r.trajectory.steady;
  r.t_converge = r.trajectory.t_steady;
  r.y_ss = r.trajectory.final_y;
  r.rho_ss = r.trajectory.final_state;
  r.M_ss = rm.M(r.y_ss);
  return r;
}

inline SteadyResult steady_state(const SimParams& p, double eps, const SteadyOptions& so = {}) {
  GroundModel gm(p);
  ReducedModel rm(gm, p.projection);
  return steady_state(gm, rm, eps, so);
}

struct ResponseResult {
  double tau = std::numeric_limits<double>::quiet_NaN();
  bool floored = false;
  double M_ss = 0.0;
  bool converged = false;
};

// tau from a finished steady-state run. `floor_abs` is the |M| below which the
// response counts as absent and tau = T1.
inline ResponseResult response_time(const SteadyResult& s, double Gamma, double floor_abs) {
  ResponseResult r;
  r.M_ss = s.M_ss;
  r.converged = s.converged;
  if (!s.converged)
    throw ConvergenceError(fmt::format("response_time: no steady state within {:.4g} s (M = {:.4g})",
                                       s.trajectory.times.back(), s.M_ss));
  if (std::abs(s.M_ss) < floor_abs) {
    r.tau = 1.0 / Gamma;
    r.floored = true;
    return r;
  }
  const auto& tr = s.trajectory;
  const double sign = s.M_ss > 0 ? 1.0 : -1.0;
  r.tau = first_crossing(tr.times, tr.magnetization, tr.dMdt, response_fraction * std::abs(s.M_ss), sign);
  if (std::isnan(r.tau)) r.tau = 0.0;  // started beyond the threshold
  return r;
}

inline ResponseResult response_time(const SimParams& p, double eps, double floor_ref = 1.0,
                                    const SteadyOptions& so = {}) {
  const auto s = steady_state(p, eps, so);
  return response_time(s, p.Gamma, 1e-3 * floor_ref);
}

// ---------------------------------------------------------------------------
// Linear stability of the symmetric (M = 0) fixed point, population model.

struct SymmetricPoint {
  RVec y;
  double growth_rate = 0.0;  // largest real part on the m -> -m odd subspace, s^-1
};

inline SymmetricPoint symmetric_fixed_point(const ReducedModel& rm) {
  if (rm.mode() != ProjectionMode::hyperfine_zeeman)
    throw std::invalid_argument("symmetric_fixed_point: population model only");
  const int n = rm.size();
  // M = 0 removes the vector part of the exchange term, leaving a linear problem.
  RMat K(n + 1, n);
  K.topRows(n) = rm.L() + rm.qJ() * rm.A();
  K.row(n) = rm.trace_functional().transpose();
  RVec b = RVec::Zero(n + 1);
  b(n) = 1.0;
  SymmetricPoint sp;
  sp.y = K.colPivHouseholderQr().solve(b);
  const double res = (K * sp.y - b).norm();
  if (!(res < 1e-8)) throw NumericalError(fmt::format("symmetric fixed point residual {:.3e}", res));

  // Odd combinations (|F,m> - |F,-m>)/sqrt2, m > 0.
  const auto& b_ = rm.basis();
  std::vector<RVec> odd;
  for (int k = 0; k < n; ++k) {
    const auto& st = b_.states[k];
    if (st.m.twice() <= 0) continue;
    RVec v = RVec::Zero(n);
    v(k) = 1.0 / std::sqrt(2.0);
    v(b_.index_of(st.F, -st.m)) = -1.0 / std::sqrt(2.0);
    odd.push_back(v);
  }
  RMat Q(n, static_cast<Eigen::Index>(odd.size()));
  for (std::size_t k = 0; k < odd.size(); ++k) Q.col(static_cast<Eigen::Index>(k)) = odd[k];
  const RMat Jr = Q.transpose() * rm.jacobian(sp.y) * Q;
  Eigen::EigenSolver<RMat> es(Jr, false);
  sp.growth_rate = es.eigenvalues().real().maxCoeff();
  return sp;
}

enum class CriticalAxis { I, J };

struct CriticalPoint {
  double value = std::numeric_limits<double>::quiet_NaN();  // s^-1
  int iterations = 0;
};

inline double growth_rate(SimParams p) {
  p.projection = ProjectionMode::hyperfine_zeeman;
  p.H = 0.0;
  GroundModel gm(p);
  ReducedModel rm(gm, ProjectionMode::hyperfine_zeeman);
  return symmetric_fixed_point(rm).growth_rate;
}

// Root of the odd-mode growth rate along one axis inside [lo, hi] (s^-1).
inline CriticalPoint find_critical(SimParams p, CriticalAxis axis, double lo, double hi, double rel_tol = 1e-7) {
  auto g = [&](double x) {
    (axis == CriticalAxis::I ? p.I : p.J) = x;
    return growth_rate(p);
  };
  double glo = g(lo), ghi = g(hi);
  if (glo * ghi > 0)
    throw ConvergenceError(fmt::format("find_critical: no sign change of the growth rate in [{:.4g}, {:.4g}]", lo, hi));
  CriticalPoint cp;
  // Illinois-modified regula falsi.
  int side = 0;
  for (int it = 0; it < 200; ++it) {
    cp.iterations = it + 1;
    const double x = (lo * ghi - hi * glo) / (ghi - glo);
    const double gx = g(x);
    if (gx == 0.0 || (hi - lo) < rel_tol * std::abs(x)) {
      cp.value = x;
      return cp;
    }
    if ((gx > 0) == (ghi > 0)) {
      hi = x;
      ghi = gx;
      if (side == -1) glo *= 0.5;
      side = -1;
    } else {
      lo = x;
      glo = gx;
      if (side == +1) ghi *= 0.5;
      side = +1;
    }
    if (std::abs(hi - lo) < rel_tol * std::abs(x)) {
      cp.value = 0.5 * (lo + hi);
      return cp;
    }
  }
  cp.value = 0.5 * (lo + hi);
  return cp;
}

}  // namespace spingas
