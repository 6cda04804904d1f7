#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <Eigen/Eigenvalues>

namespace spingas {

// Nodes and weights for  integral exp(-x^2) f(x) dx  ~  sum w_i f(x_i).
struct GaussHermite {
  std::vector<double> nodes;
  std::vector<double> weights;
};

// Golub-Welsch on the symmetric Jacobi matrix, then one Newton polish per node
// using the orthonormal recurrence (the eigen-solver alone loses ~1e-13 on the
// outer nodes at order 80).
inline GaussHermite gauss_hermite(int order) {
  if (order < 1) throw std::invalid_argument("gauss_hermite: order must be >= 1");
  GaussHermite gh;
  if (order == 1) {
    gh.nodes = {0.0};
    gh.weights = {std::sqrt(std::numbers::pi)};
    return gh;
  }
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(order, order);
  for (int k = 1; k < order; ++k) T(k, k - 1) = T(k - 1, k) = std::sqrt(0.5 * k);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(T);

  // Orthonormal Hermite values p_n(x) and p_n'(x).
  auto eval = [order](double x, double& p, double& dp, double& pm1) {
    double p0 = std::pow(std::numbers::pi, -0.25), p1 = 0.0;
    for (int k = 1; k <= order; ++k) {
      const double pk = x * std::sqrt(2.0 / k) * p0 - std::sqrt((k - 1.0) / k) * p1;
      p1 = p0;
      p0 = pk;
    }
    p = p0;
    pm1 = p1;
    dp = std::sqrt(2.0 * order) * p1;
  };

  gh.nodes.resize(order);
  gh.weights.resize(order);
  for (int i = 0; i < order; ++i) {
    double x = es.eigenvalues()(i), p, dp, pm1;
    for (int it = 0; it < 3; ++it) {
      eval(x, p, dp, pm1);
      if (dp == 0.0) break;
      x -= p / dp;
    }
    eval(x, p, dp, pm1);
    gh.nodes[i] = x;
    gh.weights[i] = 1.0 / (order * pm1 * pm1);
  }
  // Symmetrise so odd moments vanish to rounding.
  for (int i = 0; i < order / 2; ++i) {
    const int j = order - 1 - i;
    const double x = 0.5 * (gh.nodes[j] - gh.nodes[i]);
    const double w = 0.5 * (gh.weights[i] + gh.weights[j]);
    gh.nodes[i] = -x;
    gh.nodes[j] = x;
    gh.weights[i] = gh.weights[j] = w;
  }
  if (order % 2) gh.nodes[order / 2] = 0.0;
  return gh;
}

}  // namespace spingas
