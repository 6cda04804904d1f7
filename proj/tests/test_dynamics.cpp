#include <gtest/gtest.h>

#include <random>

#include "spingas/dynamics.hpp"
#include "spingas/selftest.hpp"

using namespace spingas;

namespace {

SimParams quiet_params() {
  SimParams p;
  p.B_z = 0.5;
  return p;
}

RVec random_coords(std::mt19937_64& rng, const ReducedModel& rm, const GroundModel& gm) {
  return rm.compress(random_density(rng, gm.atom().dg()));
}

}  // namespace

TEST(Seed, MagnetizationAndTrace) {
  const auto b = build_basis(half(7), half(1), Level::ground);
  const auto ops = angular_momentum_operators(b);
  for (double eps : {0.0, 1e-4, -0.01}) {
    const CMat rho = seeded_state(ops, eps);
    EXPECT_NEAR(magnetization(rho, ops), eps, 1e-15);
    EXPECT_NEAR(rho.trace().real(), 1.0, 1e-15);
  }
}

// Property: exchange conserves trace and total F_z for every state, every axis.
TEST(Exchange, ConservesTraceAndFz) {
  const auto b = build_basis(half(7), half(1), Level::ground);
  const auto ops = angular_momentum_operators(b);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const CMat rho = random_density(rng, 16);
    const CMat X = spin_exchange_term(rho, ops.S, 100.0);
    const double s = std::max(1.0, X.cwiseAbs().maxCoeff());
    EXPECT_LT(std::abs(X.trace()), 1e-12 * s);
    for (int i = 0; i < 3; ++i) EXPECT_LT(std::abs((ops.F[i] * X).trace()), 1e-11 * s);
    EXPECT_LT((X - X.adjoint()).cwiseAbs().maxCoeff(), 1e-12 * s);
  }
}

TEST(Relaxation, TracePreservingBothForms) {
  const auto b = build_basis(half(7), half(1), Level::ground);
  const auto ops = angular_momentum_operators(b);
  std::mt19937_64 rng(3);
  for (auto form : {GammaForm::lindblad, GammaForm::uniform}) {
    const CMat rho = random_density(rng, 16);
    const CMat d = gamma_term(rho, ops.F, 58.0, form);
    EXPECT_LT(std::abs(d.trace()), 1e-12);
    // Unpolarised state is stationary.
    EXPECT_LT(gamma_term(CMat::Identity(16, 16) / 16.0, ops.F, 58.0, form).cwiseAbs().maxCoeff(), 1e-13);
  }
}

TEST(Relaxation, DarkDecayIsExponentialAtGamma) {
  SimParams p = quiet_params();
  p.eps = 0.01;
  for (auto mode : {ProjectionMode::hyperfine_zeeman, ProjectionMode::hyperfine_only}) {
    GroundModel gm(p);
    ReducedModel rm(gm, mode);
    TrajectoryOptions opt;
    const auto tr = integrate(rm, seeded_coordinates(rm, gm, p.eps), 3.0 / p.Gamma, opt);
    for (std::size_t k = 0; k < tr.times.size(); k += 7)
      EXPECT_NEAR(tr.magnetization[k] / (p.eps * std::exp(-p.Gamma * tr.times[k])), 1.0, 2e-5);
  }
}

TEST(Bias, StretchedPumpingLaw) {
  for (double h : {0.3, 1.0, 3.0}) {
    SimParams p = quiet_params();
    p.H = h * p.Gamma;
    p.eps = 0.0;
    const auto s = steady_state(p, 0.0);
    ASSERT_TRUE(s.converged);
    EXPECT_NEAR(s.M_ss, h / (h + 1.0), 1e-6) << "H = " << h;
  }
}

TEST(Projection, Definition) {
  const auto b = build_basis(half(7), half(1), Level::ground);
  std::mt19937_64 rng(5);
  const CMat rho = random_density(rng, 16);
  EXPECT_EQ(project_coherences(rho, b, ProjectionMode::none), rho);
  const CMat hz = project_coherences(rho, b, ProjectionMode::hyperfine_zeeman);
  const CMat ho = project_coherences(rho, b, ProjectionMode::hyperfine_only);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      if (i == j) {
        EXPECT_EQ(hz(i, i), rho(i, i));
        EXPECT_EQ(ho(i, i), rho(i, i));
        continue;
      }
      EXPECT_EQ(hz(i, j), cd(0.0));
      EXPECT_EQ(ho(i, j), b.states[i].F == b.states[j].F ? rho(i, j) : cd(0.0));
    }
}

class ReducedFlow : public ::testing::TestWithParam<ProjectionMode> {};

TEST_P(ReducedFlow, MatchesProjectedFullRhs) {
  SimParams p = quiet_params();
  p.I = 2.5 * p.Gamma;
  p.J = 1.7 * p.Gamma;
  p.H = 0.2 * p.Gamma;
  GroundModel gm(p);
  ReducedModel rm(gm, GetParam());
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    const RVec y = random_coords(rng, rm, gm);
    const CMat rho = rm.embed(y);
    const RVec ref = rm.compress(project_coherences(gm.rhs(rho), rm.basis(), GetParam()));
    const RVec got = rm.rhs(y);
    EXPECT_LT((got - ref).lpNorm<Eigen::Infinity>(), 1e-10 * std::max(1.0, ref.lpNorm<Eigen::Infinity>()));
  }
}

TEST_P(ReducedFlow, JacobianMatchesFiniteDifference) {
  SimParams p = quiet_params();
  p.I = 1.5 * p.Gamma;
  p.J = 3.0 * p.Gamma;
  GroundModel gm(p);
  ReducedModel rm(gm, GetParam());
  std::mt19937_64 rng(23);
  const RVec y = random_coords(rng, rm, gm);
  const RMat Jm = rm.jacobian(y);
  const double h = 1e-6;
  for (int k = 0; k < rm.size(); k += std::max(1, rm.size() / 20)) {
    RVec yp = y, ym = y;
    yp(k) += h;
    ym(k) -= h;
    const RVec col = (rm.rhs(yp) - rm.rhs(ym)) / (2 * h);
    EXPECT_LT((Jm.col(k) - col).lpNorm<Eigen::Infinity>(), 1e-5 * std::max(1.0, col.lpNorm<Eigen::Infinity>()));
  }
}

TEST_P(ReducedFlow, EmbedCompressRoundTrip) {
  SimParams p = quiet_params();
  GroundModel gm(p);
  ReducedModel rm(gm, GetParam());
  std::mt19937_64 rng(29);
  const RVec y = random_coords(rng, rm, gm);
  EXPECT_LT((rm.compress(rm.embed(y)) - y).norm(), 1e-14);
  EXPECT_NEAR(rm.trace_functional().dot(y), 1.0, 1e-13);
}

INSTANTIATE_TEST_SUITE_P(Modes, ReducedFlow,
                         ::testing::Values(ProjectionMode::hyperfine_zeeman, ProjectionMode::hyperfine_only,
                                           ProjectionMode::none),
                         [](const auto& info) {
                           std::string s = to_string(info.param);
                           for (auto& ch : s)
                             if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
                           return s;
                         });

TEST(Integrator, ExponentialAgainstClosedForm) {
  Tolerances tol;
  double last_t = 0, last_y = 1;
  dopri5([](double, const RVec& y) { return RVec(-2.0 * y); }, 0.0, RVec::Constant(1, 1.0), 3.0, tol,
         [&](double t, const RVec& y, const RVec&) {
           EXPECT_NEAR(y(0), std::exp(-2 * t), 1e-8);
           last_t = t;
           last_y = y(0);
           return true;
         });
  EXPECT_DOUBLE_EQ(last_t, 3.0);
  EXPECT_NEAR(last_y, std::exp(-6.0), 1e-10);
}

TEST(ResponseTime, FirstCrossingOnSaturatingExponential) {
  const double G = 58.0, tau = 0.37 / G;
  std::vector<double> t, M, dM;
  for (int k = 0; k <= 40; ++k) {
    const double tk = k * 0.1 / G;
    t.push_back(tk);
    M.push_back(0.6 * (1 - std::exp(-tk / tau)));
    dM.push_back(0.6 / tau * std::exp(-tk / tau));
  }
  const double tc = first_crossing(t, M, dM, response_fraction * 0.6, +1.0);
  EXPECT_NEAR(tc / tau, 1.0, 5e-3);
  // Negative branch by symmetry.
  for (auto& m : M) m = -m;
  for (auto& d : dM) d = -d;
  EXPECT_NEAR(first_crossing(t, M, dM, response_fraction * 0.6, -1.0) / tau, 1.0, 5e-3);
}

TEST(ResponseTime, FloorReturnsT1) {
  SimParams p = quiet_params();
  p.I = 3.0 * p.Gamma;
  const auto s = steady_state(p, 1e-4);
  ASSERT_TRUE(s.converged);
  const auto r = response_time(s, p.Gamma, 1e-3);
  EXPECT_TRUE(r.floored);
  EXPECT_DOUBLE_EQ(r.tau, 1.0 / p.Gamma);
}

TEST(ResponseTime, PumpingLawTime) {
  // Pure bias: M(t) = M_ss (1 - exp(-(H + Gamma) t)) so tau = 1/(H + Gamma).
  SimParams p = quiet_params();
  p.H = p.Gamma;
  p.eps = 0.0;
  const auto s = steady_state(p, 0.0);
  const auto r = response_time(s, p.Gamma, 1e-6);
  EXPECT_NEAR(r.tau * 2.0 * p.Gamma, 1.0, 5e-3);
}

TEST(Params, Validation) {
  SimParams p;
  p.Gamma = -1;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = SimParams{};
  p.eps = 0.05;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = SimParams{};
  p.J = 1.0;
  EXPECT_DOUBLE_EQ(p.exchange_rate(), 4.57 * 4.57);
  p.j_convention = JConvention::verbatim;
  EXPECT_DOUBLE_EQ(p.exchange_rate(), 4.57);
}

TEST(Integrator, RosenbrockAgreesWithDopriAtLowField) {
  SimParams p;
  p.B_z = 1e-3;
  p.projection = ProjectionMode::hyperfine_only;
  p.J = 3.0 * p.Gamma;
  p.I = 2.5 * p.Gamma;
  GroundModel gm(p);
  ReducedModel rm(gm, p.projection);
  const RVec y0 = seeded_coordinates(rm, gm, 1e-4);
  TrajectoryOptions a, b;
  a.stepper = Stepper::dopri5;
  b.stepper = Stepper::rosenbrock;
  for (double T : {5.0, 20.0}) {
    const auto ta = integrate(rm, y0, T / p.Gamma, a);
    const auto tb = integrate(rm, y0, T / p.Gamma, b);
    EXPECT_NEAR(rm.M(ta.final_y), rm.M(tb.final_y), 1e-7 * std::max(1e-3, std::abs(rm.M(ta.final_y)))) << T;
    EXPECT_LT(tb.steps, ta.steps);
  }
}

TEST(Integrator, AutomaticSelection) {
  SimParams p;  // 1 G
  GroundModel gm(p);
  const TrajectoryOptions opt;
  EXPECT_FALSE(uses_rosenbrock(ReducedModel(gm, ProjectionMode::hyperfine_zeeman), opt));
  const ReducedModel ho(gm, ProjectionMode::hyperfine_only);
  EXPECT_GT(ho.max_rotation(), 1e4 * p.Gamma);
  EXPECT_TRUE(uses_rosenbrock(ho, opt));
  p.B_z = 1e-4;
  EXPECT_FALSE(uses_rosenbrock(ReducedModel(GroundModel(p), ProjectionMode::hyperfine_only), opt));
  // Exchange-dominated (high density) points are stiff too.
  p.J = 40.0 * p.Gamma;
  EXPECT_TRUE(uses_rosenbrock(ReducedModel(GroundModel(p), ProjectionMode::hyperfine_zeeman), opt));
  p.J = 6.0 * p.Gamma;
  EXPECT_FALSE(uses_rosenbrock(ReducedModel(GroundModel(p), ProjectionMode::hyperfine_zeeman), opt));
}

TEST(Integrator, StiffHighDensityPointConverges) {
  SimParams p;
  p.J = 42.0 * p.Gamma;
  p.I = 0.77 * p.Gamma;
  const auto s = steady_state(p, 1e-4);
  EXPECT_TRUE(s.converged);
  EXPECT_LT(std::abs(s.M_ss), 1e-9);
  EXPECT_LT(s.trajectory.steps, 100000);
}
