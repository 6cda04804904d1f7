#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "spingas/dynamics.hpp"

namespace spingas {

enum class FitForm { beta, gamma, znu, delta };
enum class WeightScheme { uniform, inverse_cube };

inline const char* to_string(FitForm f) {
  switch (f) {
    case FitForm::beta: return "beta";
    case FitForm::gamma: return "gamma";
    case FitForm::znu: return "znu";
    default: return "delta";
  }
}
inline const char* to_string(WeightScheme w) { return w == WeightScheme::uniform ? "uniform" : "(Gamma/X)^3"; }

struct FitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FitSpec {
  FitForm form = FitForm::beta;
  WeightScheme weights = WeightScheme::uniform;
  int exclude = 0;                // points dropped around the maximum
  std::vector<double> x0_grid;    // stage-1 candidates; empty = automatic
  int grid_size = 41;

  static FitSpec for_form(FitForm f) {
    FitSpec s;
    s.form = f;
    if (f == FitForm::gamma || f == FitForm::znu) {
      s.weights = WeightScheme::inverse_cube;
      s.exclude = 2;
    }
    return s;
  }
};

struct FitResult {
  FitForm form = FitForm::beta;
  double exponent = std::numeric_limits<double>::quiet_NaN();
  double X0 = std::numeric_limits<double>::quiet_NaN();
  double amplitude = std::numeric_limits<double>::quiet_NaN();
  double se_exponent = 0, se_X0 = 0, se_amplitude = 0;
  double residual_norm = 0;  // sqrt(sum w r^2)
  double chi2_red = 0;
  int points_used = 0, points_excluded = 0;
  WeightScheme weights = WeightScheme::uniform;
  std::vector<std::string> stages;
  std::vector<bool> used;
  // delta only: model comparison against analytic response a H + b H^2
  double aic_power = 0, aic_analytic = 0;
  bool analytic_preferred = false;
};

// ---------------------------------------------------------------------------
// Model forms; parameters are (amplitude, X0, exponent).

using Params3 = Eigen::Vector3d;

inline bool form_defined(FitForm f, double x, double X0) {
  switch (f) {
    case FitForm::gamma: return x < X0;
    case FitForm::znu: return x > X0;
    default: return true;
  }
}

inline double form_value(FitForm f, double x, const Params3& p) {
  const double A = p(0), X0 = p(1), e = p(2);
  switch (f) {
    case FitForm::beta: {
      if (x <= X0) return 0.0;
      return A * std::pow(1.0 - X0 / x, e);
    }
    case FitForm::gamma: return A * std::pow(X0 / x - 1.0, -e);
    case FitForm::znu: return A * std::pow(1.0 - X0 / x, -e);
    case FitForm::delta: return A * std::pow(x, 1.0 / e);
  }
  return 0.0;
}

inline Eigen::RowVector3d form_gradient(FitForm f, double x, const Params3& p) {
  const double A = p(0), X0 = p(1), e = p(2);
  Eigen::RowVector3d g = Eigen::RowVector3d::Zero();
  switch (f) {
    case FitForm::beta: {
      if (x <= X0) return g;
      const double u = 1.0 - X0 / x, ue = std::pow(u, e);
      g << ue, -A * e * ue / u / x, A * ue * std::log(u);
      break;
    }
    case FitForm::gamma: {
      const double u = X0 / x - 1.0, ue = std::pow(u, -e);
      g << ue, -A * e * ue / u / x, -A * ue * std::log(u);
      break;
    }
    case FitForm::znu: {
      const double u = 1.0 - X0 / x, ue = std::pow(u, -e);
      g << ue, A * e * ue / u / x, -A * ue * std::log(u);
      break;
    }
    case FitForm::delta: {
      const double v = std::pow(x, 1.0 / e);
      g << v, 0.0, -A * v * std::log(x) / (e * e);
      break;
    }
  }
  return g;
}

inline std::vector<double> fit_weights(const std::vector<double>& x, WeightScheme w) {
  std::vector<double> out(x.size(), 1.0);
  if (w == WeightScheme::inverse_cube)
    for (std::size_t k = 0; k < x.size(); ++k) out[k] = 1.0 / (x[k] * x[k] * x[k]);
  return out;
}

// Sum of w_i r_i^2, term by term.
inline double weighted_cost(FitForm f, const std::vector<double>& x, const std::vector<double>& y,
                            const std::vector<double>& w, const Params3& p) {
  double s = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (!form_defined(f, x[k], p(1))) return std::numeric_limits<double>::infinity();
    const double r = y[k] - form_value(f, x[k], p);
    s += w[k] * r * r;
  }
  return s;
}

// Indices to drop: the maximum of y and its nearest neighbours in x.
inline std::vector<bool> exclusion_mask(const std::vector<double>& x, const std::vector<double>& y, int count) {
  std::vector<bool> used(x.size(), true);
  if (count <= 0 || x.empty()) return used;
  const std::size_t imax = static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(x[a] - x[imax]) < std::abs(x[b] - x[imax]);
  });
  for (int k = 0; k < count && k < static_cast<int>(idx.size()); ++k) used[idx[k]] = false;
  return used;
}

// ---------------------------------------------------------------------------
// Optimisers

struct LMResult {
  Params3 p;
  double cost = 0;
  bool converged = false;
  int iterations = 0;
  bool ill_conditioned = false;
};

// Levenberg-Marquardt with Marquardt diagonal scaling over the parameters
// flagged in `free`. Infeasible trial points (outside the form's domain or
// violating `feasible`) are rejected like uphill steps.
inline LMResult levenberg_marquardt(FitForm f, const std::vector<double>& x, const std::vector<double>& y,
                                    const std::vector<double>& w, Params3 p, std::array<bool, 3> free,
                                    const std::function<bool(const Params3&)>& feasible, int max_iter = 500) {
  std::vector<int> idx;
  for (int k = 0; k < 3; ++k)
    if (free[k]) idx.push_back(k);
  const int m = static_cast<int>(idx.size());
  LMResult out;
  out.p = p;
  double cost = weighted_cost(f, x, y, w, p);
  if (!std::isfinite(cost) || !feasible(p)) {
    out.cost = std::numeric_limits<double>::infinity();
    return out;
  }
  double lambda = 1e-3;
  const int n = static_cast<int>(x.size());
  for (int it = 0; it < max_iter; ++it) {
    out.iterations = it + 1;
    Eigen::MatrixXd Jm(n, m);
    Eigen::VectorXd r(n);
    for (int k = 0; k < n; ++k) {
      const double sw = std::sqrt(w[k]);
      r(k) = sw * (y[k] - form_value(f, x[k], p));
      const auto g = form_gradient(f, x[k], p);
      for (int j = 0; j < m; ++j) Jm(k, j) = sw * g(idx[j]);
    }
    const Eigen::MatrixXd JtJ = Jm.transpose() * Jm;
    const Eigen::VectorXd Jtr = Jm.transpose() * r;
    if (Jtr.lpNorm<Eigen::Infinity>() <= 1e-300 || cost == 0.0) {
      out.converged = true;
      break;
    }
    bool accepted = false;
    for (int tries = 0; tries < 60; ++tries) {
      Eigen::MatrixXd Aug = JtJ;
      for (int j = 0; j < m; ++j) Aug(j, j) += lambda * std::max(JtJ(j, j), 1e-300);
      const Eigen::VectorXd step = Aug.ldlt().solve(Jtr);
      if (!step.allFinite()) {
        lambda *= 10;
        continue;
      }
      Params3 trial = p;
      for (int j = 0; j < m; ++j) trial(idx[j]) += step(j);
      const double tc = feasible(trial) ? weighted_cost(f, x, y, w, trial) : std::numeric_limits<double>::infinity();
      if (std::isfinite(tc) && tc <= cost) {
        double rel_step = 0.0;
        for (int j = 0; j < m; ++j)
          rel_step = std::max(rel_step, std::abs(step(j)) / std::max(std::abs(p(idx[j])), 1e-300));
        const double dc = cost - tc;
        p = trial;
        cost = tc;
        lambda = std::max(lambda / 10, 1e-12);
        accepted = true;
        if (rel_step < 1e-14 || dc <= 1e-16 * std::max(cost, 1e-300)) out.converged = true;
        break;
      }
      lambda *= 10;
      if (lambda > 1e16) break;
    }
    if (!accepted) {
      out.converged = true;  // no downhill step exists at machine precision
      break;
    }
    if (out.converged) break;
  }
  // Conditioning of the final normal matrix.
  Eigen::MatrixXd Jm(n, m);
  for (int k = 0; k < n; ++k) {
    const auto g = form_gradient(f, x[k], p);
    for (int j = 0; j < m; ++j) Jm(k, j) = std::sqrt(w[k]) * g(idx[j]);
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Jm);
  const auto sv = svd.singularValues();
  out.ill_conditioned = sv.size() == 0 || sv(sv.size() - 1) <= 1e-12 * sv(0);
  out.p = p;
  out.cost = cost;
  return out;
}

// Derivative-free fallback.
inline Params3 nelder_mead(const std::function<double(const Params3&)>& fn, Params3 start,
                           std::array<bool, 3> free, int max_iter = 4000) {
  std::vector<int> idx;
  for (int k = 0; k < 3; ++k)
    if (free[k]) idx.push_back(k);
  const int m = static_cast<int>(idx.size());
  std::vector<Params3> S(m + 1, start);
  for (int j = 0; j < m; ++j) S[j + 1](idx[j]) += (start(idx[j]) != 0 ? 0.05 * start(idx[j]) : 0.05);
  std::vector<double> F(m + 1);
  for (int j = 0; j <= m; ++j) F[j] = fn(S[j]);
  for (int it = 0; it < max_iter; ++it) {
    std::vector<int> ord(m + 1);
    std::iota(ord.begin(), ord.end(), 0);
    std::sort(ord.begin(), ord.end(), [&](int a, int b) { return F[a] < F[b]; });
    std::vector<Params3> S2;
    std::vector<double> F2;
    for (int o : ord) {
      S2.push_back(S[o]);
      F2.push_back(F[o]);
    }
    S = S2;
    F = F2;
    if (std::abs(F[m] - F[0]) <= 1e-15 * (std::abs(F[0]) + 1e-300)) break;
    Params3 c = Params3::Zero();
    for (int j = 0; j < m; ++j) c += S[j];
    c /= m;
    const Params3 xr = c + (c - S[m]);
    const double fr = fn(xr);
    if (fr < F[0]) {
      const Params3 xe = c + 2.0 * (c - S[m]);
      const double fe = fn(xe);
      if (fe < fr) { S[m] = xe; F[m] = fe; } else { S[m] = xr; F[m] = fr; }
    } else if (fr < F[m - 1]) {
      S[m] = xr;
      F[m] = fr;
    } else {
      const Params3 xc = c + 0.5 * (S[m] - c);
      const double fc = fn(xc);
      if (fc < F[m]) {
        S[m] = xc;
        F[m] = fc;
      } else {
        for (int j = 1; j <= m; ++j) {
          S[j] = S[0] + 0.5 * (S[j] - S[0]);
          F[j] = fn(S[j]);
        }
      }
    }
  }
  return S[std::min_element(F.begin(), F.end()) - F.begin()];
}

// ---------------------------------------------------------------------------
// Three-step fit

namespace detail {

// Log-log regression of y against u for fixed X0; returns (A, exponent).
inline std::pair<double, double> loglog_guess(FitForm f, const std::vector<double>& x, const std::vector<double>& y,
                                              double X0) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    double u;
    switch (f) {
      case FitForm::beta:
      case FitForm::znu: u = 1.0 - X0 / x[k]; break;
      case FitForm::gamma: u = X0 / x[k] - 1.0; break;
      default: u = x[k];
    }
    if (!(u > 0) || !(y[k] > 0)) continue;
    const double lx = std::log(u), ly = std::log(y[k]);
    sx += lx; sy += ly; sxx += lx * lx; sxy += lx * ly;
    ++n;
  }
  if (n < 2) return {1.0, 1.0};
  const double den = n * sxx - sx * sx;
  const double slope = den != 0 ? (n * sxy - sx * sy) / den : 1.0;
  const double icpt = (sy - slope * sx) / n;
  const double e = f == FitForm::beta ? slope : -slope;
  return {std::exp(icpt), std::isfinite(e) && e > 0 ? e : 1.0};
}

inline std::vector<double> auto_x0_grid(FitForm f, const std::vector<double>& x, const std::vector<double>& y,
                                        int n) {
  const double xmin = *std::min_element(x.begin(), x.end());
  const double xmax = *std::max_element(x.begin(), x.end());
  double lo, hi;
  if (f == FitForm::gamma) {
    // One-sided: the critical value lies beyond the largest abscissa.
    lo = xmax * (1.0 + 1e-4);
    hi = xmax * 1.5;
  } else if (f == FitForm::znu) {
    lo = xmin * 0.5;
    hi = xmin * (1.0 - 1e-4);
  } else {
    const double ymax = *std::max_element(y.begin(), y.end());
    const double zero = 1e-3 * ymax;
    double last_zero = std::numeric_limits<double>::quiet_NaN(), first_nz = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::size_t> ord(x.size());
    std::iota(ord.begin(), ord.end(), 0);
    std::sort(ord.begin(), ord.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    for (std::size_t k : ord) {
      if (y[k] <= zero) last_zero = x[k];
      else if (std::isnan(first_nz)) first_nz = x[k];
    }
    if (std::isnan(first_nz)) first_nz = xmax;
    if (std::isnan(last_zero) || last_zero > first_nz) last_zero = 0.5 * first_nz;
    lo = 0.8 * last_zero;
    hi = std::min(1.2 * first_nz, first_nz * (1.0 - 1e-6) + 0.0);
    hi = std::max(hi, lo * 1.0001);
  }
  std::vector<double> g(n);
  for (int k = 0; k < n; ++k) g[k] = lo + (hi - lo) * (n == 1 ? 0.5 : double(k) / (n - 1));
  return g;
}

}  // namespace detail

inline FitResult finalize_fit(FitForm f, const std::vector<double>& x, const std::vector<double>& y,
                              const std::vector<double>& w, const Params3& p, FitResult r) {
  const int n = static_cast<int>(x.size());
  const double cost = weighted_cost(f, x, y, w, p);
  r.amplitude = p(0);
  r.X0 = p(1);
  r.exponent = p(2);
  r.residual_norm = std::sqrt(cost);
  const int dof = std::max(1, n - 3);
  r.chi2_red = cost / dof;
  Eigen::MatrixXd Jm(n, 3);
  for (int k = 0; k < n; ++k) Jm.row(k) = std::sqrt(w[k]) * form_gradient(f, x[k], p);
  const Eigen::Matrix3d JtJ = Jm.transpose() * Jm;
  Eigen::FullPivLU<Eigen::Matrix3d> lu(JtJ);
  if (lu.isInvertible()) {
    const Eigen::Matrix3d cov = lu.inverse() * r.chi2_red;
    r.se_amplitude = std::sqrt(std::max(0.0, cov(0, 0)));
    r.se_X0 = std::sqrt(std::max(0.0, cov(1, 1)));
    r.se_exponent = std::sqrt(std::max(0.0, cov(2, 2)));
  } else {
    r.se_amplitude = r.se_X0 = r.se_exponent = std::numeric_limits<double>::infinity();
  }
  return r;
}

inline FitResult three_step_fit(const std::vector<double>& x_all, const std::vector<double>& y_all,
                                const FitSpec& spec) {
  if (x_all.size() != y_all.size()) throw std::invalid_argument("fit: x and y sizes differ");
  if (spec.form == FitForm::delta) throw std::invalid_argument("three_step_fit: use fit_delta for the delta form");
  FitResult res;
  res.form = spec.form;
  res.weights = spec.weights;
  const double ymax_all = y_all.empty() ? 0.0 : *std::max_element(y_all.begin(), y_all.end());
  if (!(ymax_all > 0)) throw FitError("no transition detected (series is identically zero)");

  res.used = exclusion_mask(x_all, y_all, spec.exclude);
  std::vector<double> x, y;
  for (std::size_t k = 0; k < x_all.size(); ++k)
    if (res.used[k]) {
      x.push_back(x_all[k]);
      y.push_back(y_all[k]);
    }
  res.points_used = static_cast<int>(x.size());
  res.points_excluded = static_cast<int>(x_all.size() - x.size());
  if (x.size() < 4) throw FitError(fmt::format("fit needs at least 4 points after exclusion, have {}", x.size()));
  const auto w = fit_weights(x, spec.weights);
  const FitForm f = spec.form;
  const double xmin = *std::min_element(x.begin(), x.end());
  const double xmax = *std::max_element(x.begin(), x.end());
  auto feasible = [&](const Params3& p) {
    if (!(p(2) > 0) || !(p(1) > 0) || !std::isfinite(p(0))) return false;
    if (f == FitForm::gamma && !(p(1) > xmax)) return false;
    if (f == FitForm::znu && !(p(1) < xmin)) return false;
    return true;
  };

  // Stage 1: X0 fixed on a grid, amplitude and exponent free.
  const auto grid = spec.x0_grid.empty() ? detail::auto_x0_grid(f, x, y, spec.grid_size) : spec.x0_grid;
  Params3 best;
  double best_cost = std::numeric_limits<double>::infinity();
  for (double X0 : grid) {
    const auto [A, e] = detail::loglog_guess(f, x, y, X0);
    Params3 p(A, X0, e);
    if (!feasible(p)) continue;
    const auto lm = levenberg_marquardt(f, x, y, w, p, {true, false, true}, feasible);
    if (lm.cost < best_cost) {
      best_cost = lm.cost;
      best = lm.p;
    }
  }
  if (!std::isfinite(best_cost)) throw FitError("stage 1: no feasible critical-value candidate");
  res.stages.push_back(fmt::format("stage1 X0={:.8g} exponent={:.6g} cost={:.4e}", best(1), best(2), best_cost));

  // Stage 2: exponent fixed, amplitude and X0 free.
  auto lm2 = levenberg_marquardt(f, x, y, w, best, {true, true, false}, feasible);
  if (lm2.cost <= best_cost) best = lm2.p;
  res.stages.push_back(fmt::format("stage2 X0={:.8g} exponent={:.6g} cost={:.4e}", best(1), best(2), lm2.cost));

  // Stage 3: all free.
  auto lm3 = levenberg_marquardt(f, x, y, w, best, {true, true, true}, feasible);
  Params3 final_p = lm3.p;
  if (lm3.ill_conditioned || !lm3.converged) {
    auto cost_fn = [&](const Params3& p) {
      return feasible(p) ? weighted_cost(f, x, y, w, p) : std::numeric_limits<double>::infinity();
    };
    const Params3 nm = nelder_mead(cost_fn, final_p, {true, true, true});
    auto polish = levenberg_marquardt(f, x, y, w, nm, {true, true, true}, feasible);
    if (polish.cost < lm3.cost) final_p = polish.p;
    res.stages.push_back("stage3 fallback: simplex");
  }
  res.stages.push_back(fmt::format("stage3 X0={:.10g} exponent={:.8g} cost={:.4e}", final_p(1), final_p(2),
                                   weighted_cost(f, x, y, w, final_p)));
  return finalize_fit(f, x, y, w, final_p, res);
}

inline FitResult fit_beta(const std::vector<double>& x, const std::vector<double>& M, FitSpec spec = FitSpec::for_form(FitForm::beta)) {
  spec.form = FitForm::beta;
  return three_step_fit(x, M, spec);
}

inline FitResult fit_gamma(const std::vector<double>& x, const std::vector<double>& chi,
                           FitSpec spec = FitSpec::for_form(FitForm::gamma)) {
  spec.form = FitForm::gamma;
  return three_step_fit(x, chi, spec);
}

inline FitResult fit_znu(const std::vector<double>& x, const std::vector<double>& tau,
                         FitSpec spec = FitSpec::for_form(FitForm::znu), double floor_value = 0.0) {
  spec.form = FitForm::znu;
  if (floor_value > 0 &&
      std::all_of(tau.begin(), tau.end(), [&](double t) { return std::abs(t - floor_value) <= 1e-9 * floor_value; }))
    throw FitError("no divergence detected (every tau is at the T1 floor)");
  return three_step_fit(x, tau, spec);
}

// Log-log regression M = A (H/Gamma)^(1/delta), plus comparison with the
// analytic response M = a h + b h^2 by AIC on linear residuals.
inline FitResult fit_delta(const std::vector<double>& h, const std::vector<double>& M) {
  if (h.size() != M.size() || h.size() < 3) throw FitError("fit_delta needs at least 3 points");
  for (std::size_t k = 0; k < h.size(); ++k)
    if (!(h[k] > 0) || !(M[k] > 0)) throw FitError("fit_delta: H and M must be positive");
  const int n = static_cast<int>(h.size());
  Eigen::MatrixXd X(n, 2);
  Eigen::VectorXd Y(n);
  for (int k = 0; k < n; ++k) {
    X(k, 0) = 1.0;
    X(k, 1) = std::log(h[k]);
    Y(k) = std::log(M[k]);
  }
  const Eigen::Vector2d c = X.colPivHouseholderQr().solve(Y);
  const Eigen::VectorXd r = Y - X * c;
  const double s2 = n > 2 ? r.squaredNorm() / (n - 2) : 0.0;
  const Eigen::Matrix2d cov = (X.transpose() * X).inverse() * s2;
  FitResult res;
  res.form = FitForm::delta;
  res.points_used = n;
  const double slope = c(1);
  res.exponent = 1.0 / slope;
  res.amplitude = std::exp(c(0));
  res.X0 = 0.0;
  res.se_exponent = std::sqrt(std::max(0.0, cov(1, 1))) / (slope * slope);
  res.se_amplitude = res.amplitude * std::sqrt(std::max(0.0, cov(0, 0)));
  res.residual_norm = r.norm();
  res.chi2_red = s2;
  res.used.assign(n, true);

  double rss_pow = 0.0;
  for (int k = 0; k < n; ++k) {
    const double d = M[k] - res.amplitude * std::pow(h[k], slope);
    rss_pow += d * d;
  }
  Eigen::MatrixXd Q(n, 2);
  Eigen::VectorXd Mv(n);
  for (int k = 0; k < n; ++k) {
    Q(k, 0) = h[k];
    Q(k, 1) = h[k] * h[k];
    Mv(k) = M[k];
  }
  const Eigen::Vector2d q = Q.colPivHouseholderQr().solve(Mv);
  const double rss_an = (Mv - Q * q).squaredNorm();
  const double tiny = 1e-300;
  res.aic_power = n * std::log(std::max(rss_pow, tiny) / n) + 2 * 2;
  res.aic_analytic = n * std::log(std::max(rss_an, tiny) / n) + 2 * 2;
  res.analytic_preferred = res.aic_analytic < res.aic_power;
  res.stages.push_back(fmt::format("loglog slope={:.8g} +- {:.3g}", slope, std::sqrt(std::max(0.0, cov(1, 1)))));
  return res;
}

// Weighted residual of the best constant, for comparison with a divergent fit.
inline double constant_fit_residual(const std::vector<double>& x, const std::vector<double>& y, WeightScheme ws) {
  const auto w = fit_weights(x, ws);
  double sw = 0, swy = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sw += w[k];
    swy += w[k] * y[k];
  }
  const double c = swy / sw;
  double s = 0;
  for (std::size_t k = 0; k < x.size(); ++k) s += w[k] * (y[k] - c) * (y[k] - c);
  return std::sqrt(s);
}

struct ExclusionSensitivity {
  std::vector<int> counts;
  std::vector<double> exponents;
};

inline ExclusionSensitivity exclusion_sensitivity(const std::vector<double>& x, const std::vector<double>& y,
                                                  FitSpec spec, std::vector<int> counts = {0, 2}) {
  ExclusionSensitivity s;
  s.counts = counts;
  for (int c : counts) {
    spec.exclude = c;
    s.exponents.push_back(three_step_fit(x, y, spec).exponent);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Susceptibility  chi = dM/dH at H = 0  (seconds).

struct SusceptibilityResult {
  double chi = 0;          // central difference at dH
  double chi_half = 0;     // same at dH/2
  double richardson = 0;   // (4 chi_half - chi)/3
  double rel_change = 0;   // |chi - chi_half| / |chi_half|
  bool ordered_flag = false;
  double spontaneous_M = 0;
};

inline SusceptibilityResult susceptibility(const SimParams& base, double dH, double eps = 1e-4,
                                           const SteadyOptions& so = {}, bool richardson = true) {
  if (!(dH > 0)) throw std::invalid_argument("susceptibility: dH must be > 0");
  SusceptibilityResult out;
  auto M_at = [&](double H) {
    SimParams p = base;
    p.H = H;
    double acc = 0.0;
    for (double s : {+1.0, -1.0}) {
      const auto r = steady_state(p, s * eps, so);
      if (!r.converged) throw ConvergenceError(fmt::format("susceptibility: no steady state at H = {:.4g}", H));
      acc += r.M_ss;
    }
    return 0.5 * acc;
  };
  {
    SimParams p = base;
    p.H = 0.0;
    const auto r = steady_state(p, eps, so);
    out.spontaneous_M = r.M_ss;
    out.ordered_flag = std::abs(r.M_ss) > 1e-3;
  }
  out.chi = (M_at(dH) - M_at(-dH)) / (2 * dH);
  if (richardson) {
    out.chi_half = (M_at(0.5 * dH) - M_at(-0.5 * dH)) / dH;
    out.richardson = (4 * out.chi_half - out.chi) / 3;
    out.rel_change = std::abs(out.chi - out.chi_half) / std::abs(out.chi_half);
  } else {
    out.chi_half = out.richardson = out.chi;
  }
  return out;
}

}  // namespace spingas
