#include <gtest/gtest.h>

#include "spingas/dynamics.hpp"
#include "spingas/sweep.hpp"

using namespace spingas;

// The absorption calibration puts the J = 3.7 Gamma boundary at I0 = 1.6 Gamma.
TEST(Calibration, BoundaryAtReferencePoint) {
  SimParams p;
  p.J = 3.7 * p.Gamma;
  const auto cp = find_critical(p, CriticalAxis::I, 1.0 * p.Gamma, 2.5 * p.Gamma, 1e-9);
  EXPECT_NEAR(cp.value / p.Gamma, 1.6, 1e-4);
}

TEST(Calibration, GrowthRateSignAcrossBoundary) {
  SimParams p;
  p.J = 3.7 * p.Gamma;
  p.I = 1.2 * p.Gamma;
  EXPECT_LT(growth_rate(p), 0.0);
  p.I = 2.2 * p.Gamma;
  EXPECT_GT(growth_rate(p), 0.0);
  // Without exchange there is no ordering at any pump strength.
  p.J = 0.0;
  EXPECT_LT(growth_rate(p), 0.0);
}

TEST(Calibration, NoBracketIsReported) {
  SimParams p;
  p.J = 3.7 * p.Gamma;
  EXPECT_THROW(find_critical(p, CriticalAxis::I, 0.1 * p.Gamma, 0.5 * p.Gamma), ConvergenceError);
}

TEST(Calibration, SteadyStateOrdersAboveBoundary) {
  SimParams p;
  p.J = 3.7 * p.Gamma;
  p.I = 2.4 * p.Gamma;
  const auto up = steady_state(p, 1e-4);
  const auto dn = steady_state(p, -1e-4);
  ASSERT_TRUE(up.converged && dn.converged);
  EXPECT_GT(up.M_ss, 0.05);
  EXPECT_NEAR(up.M_ss, -dn.M_ss, 1e-6);
  p.I = 1.2 * p.Gamma;
  EXPECT_LT(std::abs(steady_state(p, 1e-4).M_ss), 1e-6);
}
