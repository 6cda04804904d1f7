#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "spingas/dynamics.hpp"
#include "spingas/errors.hpp"
#include "spingas/io.hpp"

namespace spingas {

enum class AttenuationMode { off, point, path_averaged };

inline const char* to_string(AttenuationMode m) {
  switch (m) {
    case AttenuationMode::off: return "off";
    case AttenuationMode::point: return "point";
    default: return "path-averaged";
  }
}

// Cross-section of the unpolarised vapour at the default pump detuning.
inline double default_sigma_e(const SimParams& p = {}) {
  const auto m = AtomModel::build(p.atom, 0.0);
  return absorption_cross_section(m, OpticalField::x_linear(1.0, p.pump_detuning), CrossSectionSpec{}, p.doppler);
}

struct ConditionsMap {
  double sigma_ex_v = 7e-10;         // cm^3/s
  double s_calib = 220.0;            // s^-1 per (mW/cm^2)
  double beam_area = std::numbers::pi;  // cm^2, E0^2 = power / area
  double sigma_e = 3.2815e-13;       // cm^2
  double cell_length = 1.5;          // cm
  AttenuationMode attenuation = AttenuationMode::path_averaged;
  JConvention j_convention = JConvention::measured;
  double q_slowdown = 4.57;

  void validate() const {
    if (!(sigma_ex_v > 0 && s_calib > 0 && beam_area > 0 && sigma_e > 0 && cell_length > 0))
      throw std::invalid_argument("conditions map constants must be > 0");
  }
  double od(double n) const { return n * sigma_e * cell_length; }
  double attenuation_factor(double n) const {
    const double x = od(n);
    switch (attenuation) {
      case AttenuationMode::off: return 1.0;
      case AttenuationMode::point: return std::exp(-x);
      default: return x < 1e-8 ? 1.0 - 0.5 * x : -std::expm1(-x) / x;
    }
  }
  double J_of(double n) const {
    const double j = n * sigma_ex_v;
    return j_convention == JConvention::measured ? j / q_slowdown : j;
  }
  double n_of(double J) const {
    return j_convention == JConvention::measured ? J * q_slowdown / sigma_ex_v : J / sigma_ex_v;
  }
  double incident_I(double power_mw) const { return s_calib * power_mw / beam_area; }
  double power_of(double incident) const { return incident * beam_area / s_calib; }
  // (J, I) in s^-1.
  std::pair<double, double> map(double n, double power_mw) const {
    if (n < 0 || power_mw < 0) throw std::invalid_argument("map_conditions: n and power must be >= 0");
    return {J_of(n), incident_I(power_mw) * attenuation_factor(n)};
  }
};

inline std::pair<double, double> map_conditions(double n, double power_mw, const ConditionsMap& c) {
  return c.map(n, power_mw);
}

// Rectangular grid. With rate axes, x = J/Gamma and y = incident I/Gamma (the
// attenuation at the implied density still applies); with physical axes,
// x = density (cm^-3) and y = power (mW).
struct SweepGrid {
  enum class Axes { rates, physical } axes = Axes::rates;
  std::vector<double> x, y;

  void validate() const {
    if (x.empty() || y.empty()) throw std::invalid_argument("sweep grid must be non-empty");
    auto inc = [](const std::vector<double>& v) {
      for (std::size_t k = 1; k < v.size(); ++k)
        if (!(v[k] > v[k - 1])) return false;
      return true;
    };
    if (!inc(x) || !inc(y)) throw std::invalid_argument("sweep grid axes must be strictly increasing");
  }
  static std::vector<double> linspace(double a, double b, int n) {
    std::vector<double> v(n);
    for (int k = 0; k < n; ++k) v[k] = n == 1 ? a : a + (b - a) * k / (n - 1);
    return v;
  }
  static std::vector<double> logspace(double a, double b, int n) {
    auto v = linspace(std::log(a), std::log(b), n);
    for (auto& e : v) e = std::exp(e);
    return v;
  }
};

struct SweepRecord {
  double n = 0, phi = 0, J_over_Gamma = 0, I_over_Gamma = 0;
  double M_signed = 0, M_abs = 0, tau_s = 0;
  bool converged = false;
  double eps = 0;
  bool floored = false;
  std::string error;
};

struct SweepResult {
  SweepGrid grid;
  std::vector<SweepRecord> records;  // x index outer, y index inner
  double Gamma = 58.0;
  std::string version = tool_version;
  std::string config_hash;
  std::vector<std::string> notes;

  const SweepRecord& at(std::size_t ix, std::size_t iy) const { return records[ix * grid.y.size() + iy]; }
  SweepRecord& at(std::size_t ix, std::size_t iy) { return records[ix * grid.y.size() + iy]; }
};

struct SweepOptions {
  int workers = 1;
  double eps = 1e-4;
  SteadyOptions steady;
  double floor_fraction = 1e-3;
};

inline int default_workers() {
  if (const char* env = std::getenv("SPINGAS_WORKERS")) {
    const int w = std::atoi(env);
    if (w > 0) return w;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc ? static_cast<int>(hc) : 1;
}

// Runs fn(k) for k in [0, count) on `workers` threads. Output slots are owned
// by index, so results do not depend on scheduling.
inline void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max(1, std::min<int>(workers, static_cast<int>(count)));
  if (workers == 1) {
    for (std::size_t k = 0; k < count; ++k) fn(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t k = next++; k < count; k = next++) fn(k);
    });
  for (auto& t : pool) t.join();
}

struct PointOutcome {
  double M = std::numeric_limits<double>::quiet_NaN();
  double tau_raw = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  std::string error;
};

// Steady state plus unfloored response time at one parameter point.
inline PointOutcome simulate_point(const SimParams& p, double eps, const SteadyOptions& so) {
  PointOutcome out;
  try {
    const auto s = steady_state(p, eps, so);
    out.M = s.M_ss;
    out.converged = s.converged;
    if (s.converged) {
      const double sign = s.M_ss >= 0 ? 1.0 : -1.0;
      const auto& tr = s.trajectory;
      out.tau_raw = first_crossing(tr.times, tr.magnetization, tr.dMdt, response_fraction * std::abs(s.M_ss), sign);
      if (std::isnan(out.tau_raw)) out.tau_raw = 0.0;
    } else {
      out.error = "no steady state within t_max";
    }
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

// Applies the tau = T1 rule relative to the largest |M| in the set. The
// absolute floor catches sets that are disordered everywhere, where the
// largest |M| is itself numerical noise.
inline constexpr double absolute_M_floor = 1e-6;

inline void apply_response_floor(std::vector<SweepRecord>& recs, double Gamma, double fraction) {
  double mmax = 0.0;
  for (const auto& r : recs)
    if (std::isfinite(r.M_abs)) mmax = std::max(mmax, r.M_abs);
  const double floor_abs = std::max(fraction * mmax, absolute_M_floor);
  for (auto& r : recs)
    if (r.converged && std::isfinite(r.M_abs) && r.M_abs < floor_abs) {
      r.tau_s = 1.0 / Gamma;
      r.floored = true;
    }
}

inline SweepResult run_sweep(const SweepGrid& grid, const SimParams& tmpl, const ConditionsMap& cmap,
                             const SweepOptions& opt) {
  grid.validate();
  cmap.validate();
  tmpl.validate();
  SweepResult res;
  res.grid = grid;
  res.Gamma = tmpl.Gamma;
  const std::size_t nx = grid.x.size(), ny = grid.y.size();
  res.records.resize(nx * ny);
  const double G = tmpl.Gamma;
  ConditionsMap cm = cmap;
  cm.j_convention = tmpl.j_convention;
  cm.q_slowdown = tmpl.coll.q_slowdown;
  for (std::size_t ix = 0; ix < nx; ++ix)
    for (std::size_t iy = 0; iy < ny; ++iy) {
      auto& r = res.at(ix, iy);
      r.eps = opt.eps;
      if (grid.axes == SweepGrid::Axes::rates) {
        r.J_over_Gamma = grid.x[ix];
        r.n = cm.n_of(grid.x[ix] * G);
        r.phi = cm.power_of(grid.y[iy] * G);
        r.I_over_Gamma = grid.y[iy] * cm.attenuation_factor(r.n);
      } else {
        r.n = grid.x[ix];
        r.phi = grid.y[iy];
        const auto [J, I] = cm.map(r.n, r.phi);
        r.J_over_Gamma = J / G;
        r.I_over_Gamma = I / G;
      }
    }
  parallel_for(res.records.size(), opt.workers, [&](std::size_t k) {
    auto& r = res.records[k];
    SimParams p = tmpl;
    p.J = r.J_over_Gamma * G;
    p.I = r.I_over_Gamma * G;
    const auto o = simulate_point(p, opt.eps, opt.steady);
    r.M_signed = o.M;
    r.M_abs = std::abs(o.M);
    r.tau_s = o.tau_raw;
    r.converged = o.converged;
    r.error = o.error;
  });
  apply_response_floor(res.records, G, opt.floor_fraction);
  return res;
}

// ---------------------------------------------------------------------------
// 1-D cuts

enum class ContourAxis { fixed_J, fixed_I };

struct SeriesPoint {
  double x = 0;    // control variable / Gamma
  double M = 0;
  double tau = 0;  // s
  bool converged = false;
};

// Nearest grid line (no interpolation); the returned control variable is the
// other rate axis in units of Gamma.
inline std::vector<SeriesPoint> extract_contour(const SweepResult& r, ContourAxis axis, double value) {
  const auto& g = r.grid;
  if (g.axes != SweepGrid::Axes::rates) throw std::invalid_argument("extract_contour needs a rate-axis sweep");
  const auto& line = axis == ContourAxis::fixed_J ? g.x : g.y;
  const double span = line.back() - line.front();
  const double slack = line.size() > 1 ? 0.5 * span / (line.size() - 1) : 0.0;
  if (value < line.front() - slack || value > line.back() + slack)
    throw std::out_of_range(fmt::format("contour value {} outside grid [{}, {}]", value, line.front(), line.back()));
  std::size_t best = 0;
  for (std::size_t k = 1; k < line.size(); ++k)
    if (std::abs(line[k] - value) < std::abs(line[best] - value)) best = k;
  std::vector<SeriesPoint> out;
  if (axis == ContourAxis::fixed_J) {
    for (std::size_t iy = 0; iy < g.y.size(); ++iy) {
      const auto& rec = r.at(best, iy);
      out.push_back({rec.I_over_Gamma, rec.M_abs, rec.tau_s, rec.converged});
    }
  } else {
    for (std::size_t ix = 0; ix < g.x.size(); ++ix) {
      const auto& rec = r.at(ix, best);
      out.push_back({rec.J_over_Gamma, rec.M_abs, rec.tau_s, rec.converged});
    }
  }
  return out;
}

// Direct simulation along a refined cut (rates in units of Gamma, no attenuation).
inline std::vector<SeriesPoint> run_contour(const SimParams& tmpl, ContourAxis axis, double fixed,
                                            const std::vector<double>& controls, const SweepOptions& opt) {
  std::vector<SweepRecord> recs(controls.size());
  const double G = tmpl.Gamma;
  parallel_for(controls.size(), opt.workers, [&](std::size_t k) {
    SimParams p = tmpl;
    if (axis == ContourAxis::fixed_J) {
      p.J = fixed * G;
      p.I = controls[k] * G;
    } else {
      p.I = fixed * G;
      p.J = controls[k] * G;
    }
    const auto o = simulate_point(p, opt.eps, opt.steady);
    recs[k].M_signed = o.M;
    recs[k].M_abs = std::abs(o.M);
    recs[k].tau_s = o.tau_raw;
    recs[k].converged = o.converged;
  });
  apply_response_floor(recs, G, opt.floor_fraction);
  std::vector<SeriesPoint> out;
  for (std::size_t k = 0; k < controls.size(); ++k)
    out.push_back({controls[k], recs[k].M_abs, recs[k].tau_s, recs[k].converged});
  return out;
}

// Connected components (4-neighbour) of cells with |M| above `threshold`.
inline int ordered_components(const SweepResult& r, double threshold, std::size_t* largest = nullptr) {
  const std::size_t nx = r.grid.x.size(), ny = r.grid.y.size();
  std::vector<int> label(nx * ny, -1);
  int comps = 0;
  std::size_t big = 0;
  for (std::size_t s = 0; s < nx * ny; ++s) {
    if (label[s] >= 0 || !(r.records[s].M_abs > threshold)) continue;
    std::size_t size = 0;
    std::vector<std::size_t> stack{s};
    label[s] = comps;
    while (!stack.empty()) {
      const std::size_t c = stack.back();
      stack.pop_back();
      ++size;
      const std::size_t ix = c / ny, iy = c % ny;
      const long nb[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
      for (const auto& d : nb) {
        const long jx = static_cast<long>(ix) + d[0], jy = static_cast<long>(iy) + d[1];
        if (jx < 0 || jy < 0 || jx >= static_cast<long>(nx) || jy >= static_cast<long>(ny)) continue;
        const std::size_t o = static_cast<std::size_t>(jx) * ny + static_cast<std::size_t>(jy);
        if (label[o] < 0 && r.records[o].M_abs > threshold) {
          label[o] = comps;
          stack.push_back(o);
        }
      }
    }
    big = std::max(big, size);
    ++comps;
  }
  if (largest) *largest = big;
  return comps;
}

// ---------------------------------------------------------------------------
// Persistence. Schema 1: n,phi,J_over_Gamma,I_over_Gamma,M_signed,M_abs,tau_s,converged
// Schema 2 appends eps.

inline constexpr int sweep_schema_version = 2;

inline std::string sweep_csv(const SweepResult& r) {
  std::ostringstream os;
  os << fmt::format("# spingas-sweep schema={} version={} config_hash={} axes={} nx={} ny={} gamma={}\n",
                    sweep_schema_version, r.version, r.config_hash.empty() ? "-" : r.config_hash,
                    r.grid.axes == SweepGrid::Axes::rates ? "rates" : "physical", r.grid.x.size(), r.grid.y.size(),
                    fmt_double(r.Gamma));
  os << "# x=";
  for (std::size_t k = 0; k < r.grid.x.size(); ++k) os << (k ? ";" : "") << fmt_double(r.grid.x[k]);
  os << "\n# y=";
  for (std::size_t k = 0; k < r.grid.y.size(); ++k) os << (k ? ";" : "") << fmt_double(r.grid.y[k]);
  os << "\nn,phi,J_over_Gamma,I_over_Gamma,M_signed,M_abs,tau_s,converged,eps\n";
  for (const auto& c : r.records)
    os << fmt::format("{},{},{},{},{},{},{},{},{}\n", fmt_double(c.n), fmt_double(c.phi), fmt_double(c.J_over_Gamma),
                      fmt_double(c.I_over_Gamma), fmt_double(c.M_signed), fmt_double(c.M_abs), fmt_double(c.tau_s),
                      c.converged ? 1 : 0, fmt_double(c.eps));
  return os.str();
}

inline void persist(const SweepResult& r, const std::filesystem::path& path) { write_atomic(path, sweep_csv(r)); }

inline SweepResult parse_sweep_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("# spingas-sweep", 0) != 0)
    throw SchemaError("not a spingas sweep file (missing header line)");
  SweepResult r;
  int schema = -1;
  std::size_t nx = 0, ny = 0;
  for (const auto& tok : split(trim(line.substr(2)), ' ')) {
    const auto kv = split(tok, '=');
    if (kv.size() != 2) continue;
    try {
      if (kv[0] == "schema") schema = std::stoi(kv[1]);
      else if (kv[0] == "version") r.version = kv[1];
      else if (kv[0] == "config_hash") r.config_hash = kv[1] == "-" ? "" : kv[1];
      else if (kv[0] == "axes") r.grid.axes = kv[1] == "physical" ? SweepGrid::Axes::physical : SweepGrid::Axes::rates;
      else if (kv[0] == "nx") nx = std::stoul(kv[1]);
      else if (kv[0] == "ny") ny = std::stoul(kv[1]);
      else if (kv[0] == "gamma") r.Gamma = parse_double(kv[1]);
    } catch (const SchemaError&) {
      throw;
    } catch (const std::exception&) {
      throw SchemaError(fmt::format("malformed header field '{}'", tok));
    }
  }
  if (schema != 1 && schema != 2)
    throw SchemaError(fmt::format("unsupported sweep schema version {} (this build reads 1 and 2)", schema));
  auto read_axis = [&](const char* key, std::vector<double>& v) {
    if (!std::getline(is, line) || line.rfind(fmt::format("# {}=", key), 0) != 0)
      throw SchemaError(fmt::format("missing axis line '{}'", key));
    for (const auto& t : split(line.substr(4), ';')) v.push_back(parse_double(t));
  };
  read_axis("x", r.grid.x);
  read_axis("y", r.grid.y);
  if (r.grid.x.size() != nx || r.grid.y.size() != ny) throw SchemaError("axis lengths disagree with header");
  const std::size_t ncol = schema == 1 ? 8 : 9;
  if (!std::getline(is, line)) throw SchemaError("missing column header");
  if (split(trim(line), ',').size() != ncol) throw SchemaError("column header does not match schema");
  std::size_t lineno = 4;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split(trim(line), ',');
    if (f.size() != ncol) throw SchemaError(fmt::format("line {}: expected {} fields, got {}", lineno, ncol, f.size()));
    SweepRecord c;
    try {
      c.n = parse_double(f[0]);
      c.phi = parse_double(f[1]);
      c.J_over_Gamma = parse_double(f[2]);
      c.I_over_Gamma = parse_double(f[3]);
      c.M_signed = parse_double(f[4]);
      c.M_abs = parse_double(f[5]);
      c.tau_s = parse_double(f[6]);
      c.converged = parse_double(f[7]) != 0.0;
      c.eps = schema == 1 ? std::numeric_limits<double>::quiet_NaN() : parse_double(f[8]);
    } catch (const SchemaError& e) {
      throw SchemaError(fmt::format("line {}: {}", lineno, e.what()));
    }
    r.records.push_back(c);
  }
  if (r.records.size() != nx * ny)
    throw SchemaError(fmt::format("expected {} records, found {}", nx * ny, r.records.size()));
  if (schema == 1) r.notes.push_back("migrated from sweep schema 1: seed eps not recorded (set to NaN)");
  return r;
}

inline SweepResult load(const std::filesystem::path& path) { return parse_sweep_csv(read_file(path)); }

// Matrix-format table (one block per y row) for heat maps.
inline std::string gnuplot_matrix(const SweepResult& r, const std::string& field) {
  std::ostringstream os;
  os << "# " << field << " rows: y, columns: x\n";
  for (std::size_t iy = 0; iy < r.grid.y.size(); ++iy) {
    for (std::size_t ix = 0; ix < r.grid.x.size(); ++ix) {
      const auto& c = r.at(ix, iy);
      const double v = field == "tau" ? c.tau_s * r.Gamma : (field == "M_signed" ? c.M_signed : c.M_abs);
      os << (ix ? " " : "") << fmt_double(v);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace spingas
