#pragma once

// Randomised invariant checks on the full 16x16 ground density matrix.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "spingas/dynamics.hpp"

namespace spingas {

struct InvariantSuiteReport {
  int sets = 0;
  double trace_drift = 0;
  double hermiticity = 0;
  double min_eigenvalue = std::numeric_limits<double>::infinity();
  double exchange_fz = 0;     // max |Tr(F_z X)| over exchange outputs, X at the simulated rate
  double zero_seed_M = 0;     // max |M(t)| with eps = 0, H = 0
  double sign_equivariance = 0;      // max |M(+eps) + M(-eps)|
  double sign_equivariance_rel = 0;  // same, relative to |M(+eps)|
  std::vector<std::string> failures;

  bool ok() const {
    return trace_drift < 1e-9 && hermiticity < 1e-10 && min_eigenvalue >= -1e-9 && exchange_fz < 1e-10 &&
           zero_seed_M < 1e-9 && sign_equivariance < 1e-6 && failures.empty();
  }
};

inline RVec realify(const CMat& m) {
  RVec y(2 * m.size());
  for (Eigen::Index k = 0; k < m.size(); ++k) {
    y(2 * k) = m.data()[k].real();
    y(2 * k + 1) = m.data()[k].imag();
  }
  return y;
}

inline CMat complexify(const RVec& y, int n) {
  CMat m(n, n);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = cd(y(2 * k), y(2 * k + 1));
  return m;
}

inline SimParams random_params(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  SimParams p;
  const double G = p.Gamma;
  p.I = 6.0 * G * U(rng);
  p.J = 6.0 * G * U(rng);
  p.H = (U(rng) < 0.3 ? 0.0 : 4.0 * (U(rng) - 0.5)) * G;
  p.eps = 0.02 * (U(rng) - 0.5);
  const double r = U(rng);
  p.projection = r < 0.2 ? ProjectionMode::none : (r < 0.6 ? ProjectionMode::hyperfine_only : ProjectionMode::hyperfine_zeeman);
  p.gamma_form = U(rng) < 0.8 ? GammaForm::lindblad : GammaForm::uniform;
  p.B_z = 0.1 + 1.9 * U(rng);
  return p;
}

inline CMat random_density(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> N;
  CMat A(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = cd(N(rng), N(rng));
  CMat rho = A * A.adjoint();
  return rho / rho.trace();
}

inline InvariantSuiteReport run_invariant_suite(int sets, std::uint64_t seed = 20240611, int steps = 100) {
  InvariantSuiteReport rep;
  std::mt19937_64 rng(seed);
  for (int s = 0; s < sets; ++s) {
    const SimParams p = random_params(rng);
    try {
      const GroundModel gm(p);
      const auto& ops = gm.atom().og;
      const auto& basis = gm.atom().g;
      const int n = gm.atom().dg();
      const double G = p.Gamma;

      // Full-matrix flow with the projection applied to the rate.
      auto f = [&](double, const RVec& y) {
        return realify(project_coherences(gm.rhs(complexify(y, n)), basis, p.projection));
      };
      Tolerances tol;
      long count = 0;
      auto check = [&](double, const RVec& y, const RVec&) {
        const CMat rho = complexify(y, n);
        rep.trace_drift = std::max(rep.trace_drift, std::abs(rho.trace() - cd(1.0)));
        rep.hermiticity = std::max(rep.hermiticity, (rho - rho.adjoint()).cwiseAbs().maxCoeff());
        Eigen::SelfAdjointEigenSolver<CMat> es(0.5 * (rho + rho.adjoint()), Eigen::EigenvaluesOnly);
        rep.min_eigenvalue = std::min(rep.min_eigenvalue, es.eigenvalues().minCoeff());
        return ++count < steps;
      };
      dopri5(f, 0.0, realify(seeded_state(ops, p.eps)), 50.0 / G, tol, check);

      // Exchange conserves total F_z for any state.
      const CMat rho = random_density(rng, n);
      const CMat X = spin_exchange_term(rho, ops.S, p.exchange_rate());
      rep.exchange_fz = std::max(rep.exchange_fz, std::abs((ops.F.z * X).trace()));

      // Symmetry checks on the production (reduced) model. When Zeeman
      // coherences are kept, Larmor precession plus the dispersive part of the
      // pump converts alignment into orientation (odd in B), so the m -> -m
      // symmetry only holds at B = 0 there.
      SimParams q = p;
      q.H = 0.0;
      if (q.projection != ProjectionMode::hyperfine_zeeman) q.B_z = 0.0;
      const GroundModel gq(q);
      const ReducedModel rm(gq, q.projection);
      auto run = [&](double eps) {
        std::vector<double> Ms;
        long k = 0;
        RVec y = seeded_coordinates(rm, gq, eps);
        dopri5([&](double, const RVec& v) { return rm.rhs(v); }, 0.0, y, 2.0 / G, tol,
               [&](double, const RVec& v, const RVec&) {
                 Ms.push_back(rm.M(v));
                 return ++k < steps;
               });
        return Ms;
      };
      for (double m : run(0.0)) rep.zero_seed_M = std::max(rep.zero_seed_M, std::abs(m));
      const double e = std::abs(p.eps) > 1e-6 ? std::abs(p.eps) : 1e-4;
      const auto up = run(e), dn = run(-e);
      for (std::size_t k = 0; k < std::min(up.size(), dn.size()); ++k) {
        const double d = std::abs(up[k] + dn[k]);
        rep.sign_equivariance = std::max(rep.sign_equivariance, d);
        rep.sign_equivariance_rel = std::max(rep.sign_equivariance_rel, d / std::max(std::abs(up[k]), 1e-300));
      }
    } catch (const std::exception& ex) {
      rep.failures.push_back(fmt::format("set {}: {}", s, ex.what()));
    }
    ++rep.sets;
  }
  return rep;
}

}  // namespace spingas
