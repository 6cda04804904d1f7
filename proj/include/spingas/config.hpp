#pragma once

// YAML run configuration. Every physical quantity carries a unit suffix
// ("58 /s", "700 MHz", "1 G"); rates may also be given in units of Gamma.

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include "spingas/critfit.hpp"
#include "spingas/errors.hpp"
#include "spingas/io.hpp"
#include "spingas/sweep.hpp"

namespace spingas {

struct AxisSpec {
  enum class Spacing { linear, log, list } spacing = Spacing::linear;
  double from = 0, to = 0;
  int n = 0;
  std::vector<double> values;  // used when spacing == list

  std::vector<double> resolve() const {
    switch (spacing) {
      case Spacing::linear: return SweepGrid::linspace(from, to, n);
      case Spacing::log: return SweepGrid::logspace(from, to, n);
      default: return values;
    }
  }
  std::string canonical() const {
    if (spacing == Spacing::list) {
      std::string s = "list";
      for (double v : values) s += ":" + fmt_double(v);
      return s;
    }
    return fmt::format("{}:{}:{}:{}", spacing == Spacing::linear ? "linear" : "log", fmt_double(from), fmt_double(to), n);
  }
};

struct FieldState {
  std::string value;  // canonical, internal units
  bool user_set = false;
  int line = -1;      // 1-based source line, -1 for defaults and --set
};

struct RunConfig {
  FreqConvention convention = FreqConvention::ordinary;
  SimParams sim;
  ConditionsMap cond;
  bool sigma_e_auto = false;
  double doppler_temperature_c = 87.0;
  double gamma_reference = 58.0;
  enum class GammaLaw { constant, temperature } gamma_law = GammaLaw::constant;
  double cell_temperature_c = 87.0;

  // numerics
  double eps = 1e-4;
  int workers = 0;  // 0 = environment / hardware default
  SteadyOptions steady;
  double floor_fraction = 1e-3;

  // tasks
  double simulate_t_end_T1 = 50.0;
  SweepGrid::Axes sweep_axes = SweepGrid::Axes::rates;
  AxisSpec sweep_x{AxisSpec::Spacing::linear, 0.5, 6.0, 30, {}};
  AxisSpec sweep_y{AxisSpec::Spacing::linear, 0.5, 6.0, 30, {}};
  ContourAxis contour_axis = ContourAxis::fixed_J;
  double contour_fixed = 3.7;  // units of Gamma
  AxisSpec contour_controls{AxisSpec::Spacing::log, 1.605, 2.4, 12, {}};
  double susc_dH = 1e-3;       // units of Gamma
  bool susc_richardson = true;
  AxisSpec susc_controls{AxisSpec::Spacing::list, 0, 0, 0, {}};
  FitForm fit_form = FitForm::beta;
  int fit_exclude = -1;        // -1: form default
  std::string fit_weights = "default";

  std::map<std::string, FieldState> fields;  // schema order is kept in `order`
  std::vector<std::string> order;

  SweepGrid grid() const {
    SweepGrid g;
    g.axes = sweep_axes;
    g.x = sweep_x.resolve();
    g.y = sweep_y.resolve();
    return g;
  }
  SweepOptions sweep_options() const {
    SweepOptions o;
    o.workers = workers > 0 ? workers : default_workers();
    o.eps = eps;
    o.steady = steady;
    o.floor_fraction = floor_fraction;
    return o;
  }
  FitSpec fit_spec() const {
    FitSpec s = FitSpec::for_form(fit_form);
    if (fit_exclude >= 0) s.exclude = fit_exclude;
    if (fit_weights == "uniform") s.weights = WeightScheme::uniform;
    else if (fit_weights == "inverse_cube") s.weights = WeightScheme::inverse_cube;
    return s;
  }

  // Canonical text of every field; workers never changes results so it is
  // left out of the hash.
  std::string canonical_text() const {
    std::string s;
    for (const auto& k : order)
      if (k != "numerics.workers") s += k + "=" + fields.at(k).value + "\n";
    return s;
  }
  std::string hash() const { return hex64(fnv1a64(canonical_text())); }
};

namespace config_detail {

enum class Dim {
  none, frequency, freq_per_field, rate, field, length, area, volume_rate, density, calib, temperature, time, power
};

struct Ctx {
  RunConfig& cfg;
  std::string path;
  int line;
};

[[noreturn]] inline void fail(const Ctx& c, const std::string& what) {
  if (c.line > 0) throw ConfigError(fmt::format("line {}: {}: {}", c.line, c.path, what));
  throw ConfigError(fmt::format("{}: {}", c.path, what));
}

inline double parse_number(const Ctx& c, const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) fail(c, fmt::format("'{}' is not a number", s));
    if (!std::isfinite(v)) fail(c, "value must be finite");
    return v;
  } catch (const std::logic_error&) {
    fail(c, fmt::format("'{}' is not a number", s));
  }
}

// Converts "value unit" to internal units for `dim`.
inline double quantity(const Ctx& c, const std::string& text, Dim dim) {
  const std::string t = trim(text);
  const auto sp = t.find_first_of(" \t");
  const std::string num = sp == std::string::npos ? t : t.substr(0, sp);
  const std::string unit = sp == std::string::npos ? std::string{} : trim(t.substr(sp));
  const double v = parse_number(c, num);
  if (dim == Dim::none) {
    if (!unit.empty()) fail(c, fmt::format("dimensionless value takes no unit (got '{}')", unit));
    return v;
  }
  if (unit.empty()) fail(c, "unit tag missing");
  const auto conv = c.cfg.convention;
  auto bad = [&]() -> double { fail(c, fmt::format("unit '{}' not valid here", unit)); };
  switch (dim) {
    case Dim::frequency:
      if (unit == "Hz") return quoted_hz(v, conv);
      if (unit == "kHz") return quoted_hz(v * 1e3, conv);
      if (unit == "MHz") return quoted_hz(v * 1e6, conv);
      if (unit == "GHz") return quoted_hz(v * 1e9, conv);
      if (unit == "rad/s" || unit == "/s") return v;
      return bad();
    case Dim::freq_per_field:
      if (unit == "Hz/G") return quoted_hz(v, conv);
      if (unit == "kHz/G") return quoted_hz(v * 1e3, conv);
      if (unit == "MHz/G") return quoted_hz(v * 1e6, conv);
      return bad();
    case Dim::rate:
      if (unit == "/s") return v;
      if (unit == "Gamma") return v * c.cfg.sim.Gamma;
      return bad();
    case Dim::field:
      if (unit == "G") return v;
      if (unit == "mG") return v * 1e-3;
      if (unit == "uT") return v * 1e-2;
      if (unit == "T") return v * 1e4;
      return bad();
    case Dim::length:
      if (unit == "cm") return v;
      if (unit == "mm") return v * 0.1;
      if (unit == "m") return v * 100.0;
      return bad();
    case Dim::area:
      if (unit == "cm2") return v;
      if (unit == "mm2") return v * 0.01;
      if (unit == "m2") return v * 1e4;
      return bad();
    case Dim::volume_rate:
      if (unit == "cm3/s") return v;
      if (unit == "m3/s") return v * 1e6;
      return bad();
    case Dim::density:
      if (unit == "/cm3") return v;
      if (unit == "/m3") return v * 1e-6;
      return bad();
    case Dim::calib:
      if (unit == "/s/(mW/cm2)") return v;
      return bad();
    case Dim::temperature:
      if (unit == "C") return v;
      if (unit == "K") return v - 273.15;
      return bad();
    case Dim::time:
      if (unit == "T1") return v;
      if (unit == "s") return v * c.cfg.sim.Gamma;
      if (unit == "ms") return v * 1e-3 * c.cfg.sim.Gamma;
      return bad();
    case Dim::power:
      if (unit == "mW") return v;
      if (unit == "W") return v * 1e3;
      return bad();
    default: return bad();
  }
}

inline std::string scalar(const Ctx& c, const YAML::Node& n) {
  if (!n.IsScalar()) fail(c, "expected a scalar value");
  return n.as<std::string>();
}

struct Field {
  std::string path;
  std::function<void(const Ctx&, const YAML::Node&)> set;
  std::function<std::string(const RunConfig&)> show;
  bool compound = false;  // node may be a map/sequence
};

template <class T>
T choose(const Ctx& c, const std::string& s, std::initializer_list<std::pair<const char*, T>> opts) {
  std::string names;
  for (const auto& [k, v] : opts) {
    if (s == k) return v;
    names += (names.empty() ? "" : ", ") + std::string(k);
  }
  fail(c, fmt::format("'{}' is not one of {{{}}}", s, names));
}

inline bool boolean(const Ctx& c, const std::string& s) {
  if (s == "true" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "no" || s == "off") return false;
  fail(c, fmt::format("'{}' is not a boolean", s));
}

inline int integer(const Ctx& c, const std::string& s) {
  const double v = parse_number(c, s);
  if (v != std::floor(v) || std::abs(v) > 1e9) fail(c, fmt::format("'{}' is not an integer", s));
  return static_cast<int>(v);
}

// Axis node: {from, to, n, spacing} or {values: [...]} with unit-tagged entries.
// `scale` divides the converted value (Gamma for rate axes).
inline AxisSpec axis(const Ctx& c, const YAML::Node& n, Dim dim, double scale) {
  if (!n.IsMap()) fail(c, "axis must be a map with from/to/n[/spacing] or values");
  AxisSpec a;
  std::set<std::string> allowed{"from", "to", "n", "spacing", "values"};
  for (const auto& kv : n) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key))
      fail(Ctx{c.cfg, c.path + "." + key, kv.first.Mark().line + 1}, "unknown key");
  }
  if (n["values"]) {
    const auto v = n["values"];
    if (!v.IsSequence() || v.size() == 0) fail(c, "values must be a non-empty list");
    a.spacing = AxisSpec::Spacing::list;
    for (const auto& e : v)
      a.values.push_back(quantity(Ctx{c.cfg, c.path + ".values", e.Mark().line + 1}, e.as<std::string>(), dim) / scale);
    for (std::size_t k = 1; k < a.values.size(); ++k)
      if (!(a.values[k] > a.values[k - 1])) fail(c, "values must be strictly increasing");
    return a;
  }
  for (const char* req : {"from", "to", "n"})
    if (!n[req]) fail(c, fmt::format("missing '{}'", req));
  auto sub = [&](const char* k) { return Ctx{c.cfg, c.path + "." + k, n[k].Mark().line + 1}; };
  a.from = quantity(sub("from"), n["from"].as<std::string>(), dim) / scale;
  a.to = quantity(sub("to"), n["to"].as<std::string>(), dim) / scale;
  a.n = integer(sub("n"), n["n"].as<std::string>());
  if (a.n < 1) fail(sub("n"), "must be >= 1");
  if (a.n > 1 && !(a.to > a.from)) fail(c, "'to' must exceed 'from'");
  if (n["spacing"])
    a.spacing = choose<AxisSpec::Spacing>(sub("spacing"), n["spacing"].as<std::string>(),
                                          {{"linear", AxisSpec::Spacing::linear}, {"log", AxisSpec::Spacing::log}});
  if (a.spacing == AxisSpec::Spacing::log && !(a.from > 0)) fail(c, "log spacing needs from > 0");
  return a;
}

inline void require(const Ctx& c, bool ok, const char* what) {
  if (!ok) fail(c, what);
}

inline std::vector<Field> schema() {
  using R = RunConfig;
  std::vector<Field> f;
  auto num = [](double v) { return fmt_double(v); };
  auto add = [&](std::string path, std::function<void(const Ctx&, const YAML::Node&)> set,
                 std::function<std::string(const R&)> show, bool compound = false) {
    f.push_back(Field{std::move(path), std::move(set), std::move(show), compound});
  };
  // A plain physical scalar bound to a double member.
  auto qty = [&](std::string path, Dim d, std::function<double&(R&)> ref, std::function<bool(double)> ok = {},
                 const char* msg = "out of range") {
    add(
        path,
        [=](const Ctx& c, const YAML::Node& n) {
          const double v = quantity(c, scalar(c, n), d);
          if (ok && !ok(v)) fail(c, msg);
          ref(c.cfg) = v;
        },
        [=](const R& r) { return fmt_double(ref(const_cast<R&>(r))); });
  };

  add("atom.frequency_convention",
      [](const Ctx& c, const YAML::Node& n) {
        c.cfg.convention = choose<FreqConvention>(
            c, scalar(c, n), {{"ordinary", FreqConvention::ordinary}, {"angular", FreqConvention::angular}});
        // Re-derive convention-dependent defaults before any override is read.
        c.cfg.sim.atom = AtomSpec::cesium(c.cfg.convention);
        const double sx = c.cfg.sim.coll.sigma_ex_v;
        c.cfg.sim.coll = CollisionParams::paper(c.cfg.convention);
        c.cfg.sim.coll.sigma_ex_v = sx;
        c.cfg.sim.pump_detuning = quoted_hz(700e6, c.cfg.convention);
        c.cfg.sim.bias_detuning = quoted_hz(1200e6, c.cfg.convention);
      },
      [](const R& r) { return std::string(r.convention == FreqConvention::ordinary ? "ordinary" : "angular"); });
  qty("atom.hyperfine_A_ground", Dim::frequency, [](R& r) -> double& { return r.sim.atom.A_ground; },
      [](double v) { return v > 0; }, "must be > 0");
  qty("atom.hyperfine_A_excited", Dim::frequency, [](R& r) -> double& { return r.sim.atom.A_excited; },
      [](double v) { return v > 0; }, "must be > 0");
  qty("atom.g_ground", Dim::freq_per_field, [](R& r) -> double& { return r.sim.atom.g_ground; });
  qty("atom.g_excited", Dim::freq_per_field, [](R& r) -> double& { return r.sim.atom.g_excited; });
  qty("atom.B", Dim::field, [](R& r) -> double& { return r.sim.B_z; }, [](double v) { return v >= 0; },
      "must be >= 0");

  // Gamma comes before every rate that may be written in units of Gamma.
  qty("model.Gamma", Dim::rate, [](R& r) -> double& { return r.gamma_reference; }, [](double v) { return v > 0; },
      "must be > 0");
  add("model.gamma_law",
      [](const Ctx& c, const YAML::Node& n) {
        c.cfg.gamma_law = choose<R::GammaLaw>(c, scalar(c, n),
                                              {{"constant", R::GammaLaw::constant}, {"temperature", R::GammaLaw::temperature}});
      },
      [](const R& r) { return std::string(r.gamma_law == R::GammaLaw::constant ? "constant" : "temperature"); });
  qty("model.cell_temperature", Dim::temperature, [](R& r) -> double& { return r.cell_temperature_c; },
      [](double v) { return v > -273.15; }, "below absolute zero");
  add("model.gamma_form",
      [](const Ctx& c, const YAML::Node& n) {
        c.cfg.sim.gamma_form =
            choose<GammaForm>(c, scalar(c, n), {{"lindblad", GammaForm::lindblad}, {"uniform", GammaForm::uniform}});
      },
      [](const R& r) { return std::string(r.sim.gamma_form == GammaForm::lindblad ? "lindblad" : "uniform"); });
  add("model.j_convention",
      [](const Ctx& c, const YAML::Node& n) {
        c.cfg.sim.j_convention = choose<JConvention>(
            c, scalar(c, n), {{"measured", JConvention::measured}, {"verbatim", JConvention::verbatim}});
      },
      [](const R& r) { return std::string(r.sim.j_convention == JConvention::measured ? "measured" : "verbatim"); });
  add("model.bias_model",
      [](const Ctx& c, const YAML::Node& n) {
        c.cfg.sim.bias_model = choose<BiasModel>(
            c, scalar(c, n),
            {{"none", BiasModel::none}, {"stretched", BiasModel::stretched}, {"optical", BiasModel::optical}});
      },
      [](const R& r) {
        switch (r.sim.bias_model) {
          case BiasModel::none: return std::string("none");
          case BiasModel::stretched: return std::string("stretched");
          default: return std::string("optical");
        }
      });
  add("model.projection",
      [](const Ctx& c, const YAML::Node& n) {
        c.cfg.sim.projection = choose<ProjectionMode>(c, scalar(c, n),
                                                      {{"none", ProjectionMode::none},
                                                       {"hyperfine_only", ProjectionMode::hyperfine_only},
                                                       {"hyperfine_zeeman", ProjectionMode::hyperfine_zeeman}});
      },
      [](const R& r) { return std::string(to_string(r.sim.projection)); });
  qty("model.kappa", Dim::none, [](R& r) -> double& { return r.sim.kappa; }, [](double v) { return v > 0; },
      "must be > 0");

  qty("collisions.gamma_c", Dim::frequency, [](R& r) -> double& { return r.sim.coll.gamma_c; },
      [](double v) { return v > 0; }, "must be > 0");
  qty("collisions.gamma_q", Dim::frequency, [](R& r) -> double& { return r.sim.coll.gamma_q; },
      [](double v) { return v >= 0; }, "must be >= 0");
  qty("collisions.gamma_p", Dim::frequency, [](R& r) -> double& { return r.sim.coll.gamma_p; },
      [](double v) { return v >= 0; }, "must be >= 0");
  qty("collisions.q", Dim::none, [](R& r) -> double& { return r.sim.coll.q_slowdown; },
      [](double v) { return v > 1; }, "must exceed 1");
  qty("collisions.sigma_ex_v", Dim::volume_rate, [](R& r) -> double& { return r.sim.coll.sigma_ex_v; },
      [](double v) { return v > 0; }, "must be > 0");

  qty("optics.pump_detuning", Dim::frequency, [](R& r) -> double& { return r.sim.pump_detuning; });
  qty("optics.bias_detuning", Dim::frequency, [](R& r) -> double& { return r.sim.bias_detuning; });
  qty("optics.doppler_temperature", Dim::temperature, [](R& r) -> double& { return r.doppler_temperature_c; },
      [](double v) { return v > -273.15; }, "below absolute zero");
  add("optics.quadrature_order",
      [](const Ctx& c, const YAML::Node& n) {
        const int v = integer(c, scalar(c, n));
        require(c, v >= 1 && v <= 200, "must be in [1, 200]");
        c.cfg.sim.doppler.order = v;
      },
      [](const R& r) { return std::to_string(r.sim.doppler.order); });
  add("optics.light_shift", [](const Ctx& c, const YAML::Node& n) { c.cfg.sim.light_shift = boolean(c, scalar(c, n)); },
      [](const R& r) { return std::string(r.sim.light_shift ? "true" : "false"); });
  add("optics.optical_zeeman",
      [](const Ctx& c, const YAML::Node& n) { c.cfg.sim.optical_zeeman = boolean(c, scalar(c, n)); },
      [](const R& r) { return std::string(r.sim.optical_zeeman ? "true" : "false"); });

  qty("rates.I", Dim::rate, [](R& r) -> double& { return r.sim.I; }, [](double v) { return v >= 0; },
      "must be >= 0");
  qty("rates.J", Dim::rate, [](R& r) -> double& { return r.sim.J; }, [](double v) { return v >= 0; },
      "must be >= 0");
  qty("rates.H", Dim::rate, [](R& r) -> double& { return r.sim.H; });

  qty("conditions.s_calib", Dim::calib, [](R& r) -> double& { return r.cond.s_calib; },
      [](double v) { return v > 0; }, "must be > 0");
  qty("conditions.beam_area", Dim::area, [](R& r) -> double& { return r.cond.beam_area; },
      [](double v) { return v > 0; }, "must be > 0");
  add("conditions.sigma_e",
      [](const Ctx& c, const YAML::Node& n) {
        const auto s = trim(scalar(c, n));
        if (s == "auto") {
          c.cfg.sigma_e_auto = true;
          return;
        }
        const double v = quantity(c, s, Dim::area);
        require(c, v > 0, "must be > 0");
        c.cfg.sigma_e_auto = false;
        c.cfg.cond.sigma_e = v;
      },
      [](const R& r) { return r.sigma_e_auto ? std::string("auto") : fmt_double(r.cond.sigma_e); });
  qty("conditions.cell_length", Dim::length, [](R& r) -> double& { return r.cond.cell_length; },
      [](double v) { return v > 0; }, "must be > 0");
  add("conditions.attenuation",
      [](const Ctx& c, const YAML::Node& n) {
        c.cfg.cond.attenuation = choose<AttenuationMode>(c, scalar(c, n),
                                                         {{"off", AttenuationMode::off},
                                                          {"point", AttenuationMode::point},
                                                          {"path_averaged", AttenuationMode::path_averaged}});
      },
      [](const R& r) { return std::string(to_string(r.cond.attenuation)); });

  qty("numerics.rtol", Dim::none, [](R& r) -> double& { return r.steady.traj.tol.rtol; },
      [](double v) { return v > 0 && v < 1e-2; }, "must be in (0, 1e-2)");
  qty("numerics.atol", Dim::none, [](R& r) -> double& { return r.steady.traj.tol.atol; },
      [](double v) { return v > 0 && v < 1e-2; }, "must be in (0, 1e-2)");
  qty("numerics.eps", Dim::none, [](R& r) -> double& { return r.eps; },
      [](double v) { return std::abs(v) <= 0.01; }, "|eps| must be <= 0.01");
  qty("numerics.t_max", Dim::time, [](R& r) -> double& { return r.steady.t_max_T1; },
      [](double v) { return v > 0; }, "must be > 0");
  qty("numerics.steady_window", Dim::time, [](R& r) -> double& { return r.steady.window_T1; },
      [](double v) { return v > 0; }, "must be > 0");
  qty("numerics.floor_fraction", Dim::none, [](R& r) -> double& { return r.floor_fraction; },
      [](double v) { return v >= 0 && v < 1; }, "must be in [0, 1)");
  add("numerics.integrator",
      [](const Ctx& c, const YAML::Node& n) {
        c.cfg.steady.traj.stepper = choose<Stepper>(
            c, scalar(c, n),
            {{"auto", Stepper::automatic}, {"dopri5", Stepper::dopri5}, {"rosenbrock", Stepper::rosenbrock}});
      },
      [](const R& r) { return std::string(to_string(r.steady.traj.stepper)); });
  add("numerics.workers",
      [](const Ctx& c, const YAML::Node& n) {
        const int v = integer(c, scalar(c, n));
        require(c, v >= 0 && v <= 1024, "must be in [0, 1024]");
        c.cfg.workers = v;
      },
      [](const R& r) { return std::to_string(r.workers); });

  qty("task.simulate.t_end", Dim::time, [](R& r) -> double& { return r.simulate_t_end_T1; },
      [](double v) { return v > 0; }, "must be > 0");
  add("task.sweep.axes",
      [](const Ctx& c, const YAML::Node& n) {
        const auto a = choose<SweepGrid::Axes>(
            c, scalar(c, n), {{"rates", SweepGrid::Axes::rates}, {"physical", SweepGrid::Axes::physical}});
        if (a != c.cfg.sweep_axes && a == SweepGrid::Axes::physical) {
          // Physical defaults: density span and a single power line.
          c.cfg.sweep_x = AxisSpec{AxisSpec::Spacing::log, 7e11, 5e13, 16, {}};
          c.cfg.sweep_y = AxisSpec{AxisSpec::Spacing::list, 0, 0, 0, {2, 5, 10, 20, 40}};
        }
        c.cfg.sweep_axes = a;
      },
      [](const R& r) { return std::string(r.sweep_axes == SweepGrid::Axes::rates ? "rates" : "physical"); });
  add("task.sweep.x",
      [](const Ctx& c, const YAML::Node& n) {
        const bool rates = c.cfg.sweep_axes == SweepGrid::Axes::rates;
        c.cfg.sweep_x = axis(c, n, rates ? Dim::rate : Dim::density, rates ? c.cfg.sim.Gamma : 1.0);
      },
      [](const R& r) { return r.sweep_x.canonical(); }, true);
  add("task.sweep.y",
      [](const Ctx& c, const YAML::Node& n) {
        const bool rates = c.cfg.sweep_axes == SweepGrid::Axes::rates;
        c.cfg.sweep_y = axis(c, n, rates ? Dim::rate : Dim::power, rates ? c.cfg.sim.Gamma : 1.0);
      },
      [](const R& r) { return r.sweep_y.canonical(); }, true);
  add("task.contour.axis",
      [](const Ctx& c, const YAML::Node& n) {
        c.cfg.contour_axis = choose<ContourAxis>(c, scalar(c, n),
                                                 {{"fixed_J", ContourAxis::fixed_J}, {"fixed_I", ContourAxis::fixed_I}});
      },
      [](const R& r) { return std::string(r.contour_axis == ContourAxis::fixed_J ? "fixed_J" : "fixed_I"); });
  add("task.contour.fixed",
      [](const Ctx& c, const YAML::Node& n) {
        const double v = quantity(c, scalar(c, n), Dim::rate);
        require(c, v > 0, "must be > 0");
        c.cfg.contour_fixed = v / c.cfg.sim.Gamma;
      },
      [num](const R& r) { return num(r.contour_fixed); });
  add("task.contour.controls",
      [](const Ctx& c, const YAML::Node& n) { c.cfg.contour_controls = axis(c, n, Dim::rate, c.cfg.sim.Gamma); },
      [](const R& r) { return r.contour_controls.canonical(); }, true);
  add("task.susceptibility.dH",
      [](const Ctx& c, const YAML::Node& n) {
        const double v = quantity(c, scalar(c, n), Dim::rate);
        require(c, v > 0, "must be > 0");
        c.cfg.susc_dH = v / c.cfg.sim.Gamma;
      },
      [num](const R& r) { return num(r.susc_dH); });
  add("task.susceptibility.richardson",
      [](const Ctx& c, const YAML::Node& n) { c.cfg.susc_richardson = boolean(c, scalar(c, n)); },
      [](const R& r) { return std::string(r.susc_richardson ? "true" : "false"); });
  add("task.susceptibility.controls",
      [](const Ctx& c, const YAML::Node& n) { c.cfg.susc_controls = axis(c, n, Dim::rate, c.cfg.sim.Gamma); },
      [](const R& r) { return r.susc_controls.canonical(); }, true);
  add("task.fit.form",
      [](const Ctx& c, const YAML::Node& n) {
        c.cfg.fit_form = choose<FitForm>(c, scalar(c, n),
                                         {{"beta", FitForm::beta},
                                          {"gamma", FitForm::gamma},
                                          {"znu", FitForm::znu},
                                          {"delta", FitForm::delta}});
      },
      [](const R& r) { return std::string(to_string(r.fit_form)); });
  add("task.fit.weights",
      [](const Ctx& c, const YAML::Node& n) {
        c.cfg.fit_weights = choose<std::string>(
            c, scalar(c, n), {{"default", "default"}, {"uniform", "uniform"}, {"inverse_cube", "inverse_cube"}});
      },
      [](const R& r) { return r.fit_weights; });
  add("task.fit.exclude",
      [](const Ctx& c, const YAML::Node& n) {
        const int v = integer(c, scalar(c, n));
        require(c, v >= 0 && v <= 20, "must be in [0, 20]");
        c.cfg.fit_exclude = v;
      },
      [](const R& r) { return std::to_string(r.fit_exclude); });
  return f;
}

// Walks the document and rejects any key that is not in the schema.
inline void reject_unknown(const YAML::Node& n, const std::string& prefix, const std::set<std::string>& leaves,
                           const std::set<std::string>& compound, RunConfig& cfg) {
  if (!n.IsMap()) return;
  for (const auto& kv : n) {
    const auto key = kv.first.as<std::string>();
    const auto path = prefix.empty() ? key : prefix + "." + key;
    if (leaves.count(path) || compound.count(path)) continue;
    bool is_prefix = false;
    for (const auto& l : leaves)
      if (l.rfind(path + ".", 0) == 0) is_prefix = true;
    for (const auto& l : compound)
      if (l.rfind(path + ".", 0) == 0) is_prefix = true;
    const Ctx c{cfg, path, kv.first.Mark().line >= 0 ? kv.first.Mark().line + 1 : -1};
    if (!is_prefix) fail(c, "unknown key");
    if (!kv.second.IsMap()) fail(c, "expected a section");
    reject_unknown(kv.second, path, leaves, compound, cfg);
  }
}

inline void set_path(YAML::Node root, const std::string& path, const std::string& value) {
  const auto parts = split(path, '.');
  std::vector<YAML::Node> chain{root};
  for (std::size_t k = 0; k + 1 < parts.size(); ++k) {
    YAML::Node next = chain.back()[parts[k]];
    chain.push_back(next);
  }
  chain.back()[parts.back()] = YAML::Load(value);
}

inline YAML::Node lookup(const YAML::Node& node, const std::vector<std::string>& parts, std::size_t k = 0) {
  if (k == parts.size()) return node;
  if (!node.IsMap()) return YAML::Node(YAML::NodeType::Undefined);
  const YAML::Node next = node[parts[k]];
  if (!next) return YAML::Node(YAML::NodeType::Undefined);
  return lookup(next, parts, k + 1);
}

}  // namespace config_detail

// Parses YAML text plus `path=value` overrides. Every field is recorded with
// its canonical value and whether the user set it.
inline RunConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides = {}) {
  using namespace config_detail;
  RunConfig cfg;
  YAML::Node root;
  try {
    root = trim(text).empty() ? YAML::Node(YAML::NodeType::Map) : YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(fmt::format("line {}: malformed YAML: {}", e.mark.line + 1, e.msg));
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  if (!root.IsMap()) throw ConfigError("config root must be a map");
  std::set<std::string> from_cli;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(fmt::format("override '{}' must be path=value", o));
    const auto path = trim(o.substr(0, eq));
    set_path(root, path, o.substr(eq + 1));
    from_cli.insert(path);
  }
  const auto fields = schema();
  std::set<std::string> leaves, compound;
  for (const auto& f : fields) (f.compound ? compound : leaves).insert(f.path);
  reject_unknown(root, "", leaves, compound, cfg);

  for (const auto& f : fields) {
    const YAML::Node n = lookup(root, split(f.path, '.'));
    FieldState st;
    if (n.IsDefined() && !n.IsNull()) {
      const int line = from_cli.count(f.path) ? -1 : n.Mark().line + 1;
      if (!f.compound && !n.IsScalar()) fail(Ctx{cfg, f.path, line}, "expected a scalar value");
      f.set(Ctx{cfg, f.path, line}, n);
      st.user_set = true;
      st.line = line;
    }
    // Gamma law resolves as soon as its inputs are known so later "Gamma" units see it.
    if (f.path == "model.cell_temperature") {
      cfg.sim.Gamma = cfg.gamma_law == RunConfig::GammaLaw::temperature
                          ? gamma_of_temperature(cfg.gamma_reference, cfg.cell_temperature_c)
                          : cfg.gamma_reference;
      if (!(cfg.sim.Gamma > 0)) fail(Ctx{cfg, "model.Gamma", -1}, "temperature law gives Gamma <= 0");
    }
    st.value = f.show(cfg);
    cfg.fields[f.path] = st;
    cfg.order.push_back(f.path);
  }

  cfg.sim.doppler.width = doppler_width(cfg.doppler_temperature_c);
  cfg.sim.eps = cfg.eps;
  cfg.cond.j_convention = cfg.sim.j_convention;
  cfg.cond.sigma_ex_v = cfg.sim.coll.sigma_ex_v;
  cfg.cond.q_slowdown = cfg.sim.coll.q_slowdown;
  if (cfg.sigma_e_auto) cfg.cond.sigma_e = default_sigma_e(cfg.sim);
  try {
    cfg.sim.validate();
    cfg.cond.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

inline RunConfig parse_config_file(const std::string& path, const std::vector<std::string>& overrides = {}) {
  return parse_config_text(read_file(path), overrides);
}

// Provenance block for manifests: one entry per field.
inline std::string provenance_yaml(const RunConfig& cfg) {
  std::string s;
  for (const auto& k : cfg.order) {
    const auto& st = cfg.fields.at(k);
    s += fmt::format("{}: {} ({})\n", k, st.value, st.user_set ? "user" : "default");
  }
  return s;
}

}  // namespace spingas
