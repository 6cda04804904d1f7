#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "spingas/gauss_hermite.hpp"

using spingas::gauss_hermite;

// integral x^(2k) exp(-x^2) dx = Gamma(k + 1/2)
TEST(GaussHermite, EvenMomentsExactUpToDegree) {
  for (int order : {1, 2, 5, 10, 20, 40, 80}) {
    const auto gh = gauss_hermite(order);
    ASSERT_EQ(gh.nodes.size(), static_cast<std::size_t>(order));
    for (int k = 0; 2 * k <= std::min(2 * order - 1, 60); ++k) {
      double s = 0.0;
      for (int i = 0; i < order; ++i) s += gh.weights[i] * std::pow(gh.nodes[i], 2 * k);
      const double ref = std::tgamma(k + 0.5);
      EXPECT_NEAR(s / ref, 1.0, 1e-11) << "order " << order << " moment " << 2 * k;
    }
  }
}

TEST(GaussHermite, OddMomentsVanishAndNodesSymmetric) {
  for (int order : {3, 8, 41}) {
    const auto gh = gauss_hermite(order);
    for (int i = 0; i < order; ++i) {
      EXPECT_GT(gh.weights[i], 0.0);
      EXPECT_DOUBLE_EQ(gh.nodes[i], -gh.nodes[order - 1 - i]);
      if (i > 0) EXPECT_LT(gh.nodes[i - 1], gh.nodes[i]);
    }
    for (int k : {1, 3, 5}) {
      double s = 0.0;
      for (int i = 0; i < order; ++i) s += gh.weights[i] * std::pow(gh.nodes[i], k);
      EXPECT_NEAR(s, 0.0, 1e-13);
    }
  }
}

TEST(GaussHermite, GaussianExpectationOfSmoothFunction) {
  // integral cos(x) exp(-x^2) dx = sqrt(pi) exp(-1/4)
  const auto gh = gauss_hermite(30);
  double s = 0.0;
  for (std::size_t i = 0; i < gh.nodes.size(); ++i) s += gh.weights[i] * std::cos(gh.nodes[i]);
  EXPECT_NEAR(s, std::sqrt(M_PI) * std::exp(-0.25), 1e-14);
}

TEST(GaussHermite, RejectsNonPositiveOrder) { EXPECT_THROW(gauss_hermite(0), std::invalid_argument); }
