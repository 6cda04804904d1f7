// spingas command-line driver.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "spingas/config.hpp"
#include "spingas/critfit.hpp"
#include "spingas/selftest.hpp"
#include "spingas/sweep.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace spingas;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  int workers = -1;
  bool quiet = false;
};

RunConfig load_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? parse_config_text("", c.overrides) : parse_config_file(c.config, c.overrides);
  if (c.workers >= 0) cfg.workers = c.workers;
  return cfg;
}

json manifest(const RunConfig& cfg, const std::string& sub) {
  json m;
  m["tool"] = "spingas";
  m["version"] = tool_version;
  m["subcommand"] = sub;
  m["config_hash"] = cfg.hash();
  json c = json::object();
  for (const auto& k : cfg.order) {
    const auto& f = cfg.fields.at(k);
    c[k] = {{"value", f.value}, {"source", f.user_set ? "user" : "default"}};
  }
  m["config"] = c;
  return m;
}

std::string header(const RunConfig& cfg, const std::string& what) {
  return fmt::format("# spingas-{} version={} config_hash={}\n", what, tool_version, cfg.hash());
}

fs::path with_suffix(const std::string& prefix, const std::string& suffix) { return fs::path(prefix + suffix); }

void write_manifest(const std::string& prefix, json m, const std::vector<std::string>& outputs) {
  m["outputs"] = outputs;
  write_atomic(with_suffix(prefix, ".manifest.json"), m.dump(2) + "\n");
}

void say(const Common& c, const std::string& s) {
  if (!c.quiet) std::cout << s << std::flush;
}

// ---------------------------------------------------------------------------

int cmd_table2(const Common& c) {
  const RunConfig cfg = load_config(c);
  const auto atom = AtomModel::build(cfg.sim.atom, 0.0);
  const auto rows = transition_probability_table(atom, OpticalField::x_linear(1.0, cfg.sim.pump_detuning));
  std::string csv = header(cfg, "table2") + "abs_m,p_up_exact,p_down_exact,p_up,p_down\n";
  std::string text = " |m|   up (exact)   down (exact)   up (matrix)        down (matrix)\n";
  for (const auto& r : rows) {
    csv += fmt::format("{},{},{},{},{}\n", r.abs_m, r.p_up_exact.str(), r.p_down_exact.str(), fmt_double(r.p_up),
                       fmt_double(r.p_down));
    text += fmt::format("{:>4}   {:>10}   {:>12}   {:.15f}  {:.15f}\n", r.abs_m, r.p_up_exact.str(),
                        r.p_down_exact.str(), r.p_up, r.p_down);
  }
  say(c, text);
  if (!c.out.empty()) {
    write_atomic(with_suffix(c.out, ".csv"), csv);
    write_manifest(c.out, manifest(cfg, "table2"), {c.out + ".csv"});
  }
  return exit_ok;
}

int cmd_simulate(const Common& c) {
  const RunConfig cfg = load_config(c);
  SteadyOptions so = cfg.steady;
  so.t_max_T1 = cfg.simulate_t_end_T1;
  const auto s = steady_state(cfg.sim, cfg.eps, so);
  const double G = cfg.sim.Gamma;
  json summary;
  summary["I_over_Gamma"] = cfg.sim.I / G;
  summary["J_over_Gamma"] = cfg.sim.J / G;
  summary["H_over_Gamma"] = cfg.sim.H / G;
  summary["eps"] = cfg.eps;
  summary["converged"] = s.converged;
  summary["M_final"] = s.M_ss;
  if (s.converged) {
    const auto r = response_time(s, G, absolute_M_floor);
    summary["tau_floored"] = r.floored;
    summary["tau_s"] = r.tau;
    summary["tau_over_T1"] = r.tau * G;
    summary["t_converge_s"] = s.t_converge;
  }
  summary["steps"] = s.trajectory.steps;
  summary["rejected_steps"] = s.trajectory.rejected;
  summary["worst_trace_error"] = s.trajectory.worst.trace_error;
  summary["worst_hermiticity"] = s.trajectory.worst.hermiticity;
  summary["worst_min_eigenvalue"] = s.trajectory.worst.min_eigenvalue;
  say(c, fmt::format("M = {:.8g}  converged = {}  steps = {}\n", s.M_ss, s.converged, s.trajectory.steps));
  if (!c.out.empty()) {
    std::string csv = header(cfg, "trajectory") + "t_s,M,dMdt\n";
    const auto& tr = s.trajectory;
    for (std::size_t k = 0; k < tr.times.size(); ++k)
      csv += fmt::format("{},{},{}\n", fmt_double(tr.times[k]), fmt_double(tr.magnetization[k]), fmt_double(tr.dMdt[k]));
    write_atomic(with_suffix(c.out, ".trajectory.csv"), csv);
    auto m = manifest(cfg, "simulate");
    m["summary"] = summary;
    write_manifest(c.out, m, {c.out + ".trajectory.csv"});
  }
  return s.converged ? exit_ok : exit_nonconverged;
}

int cmd_sweep(const Common& c, bool gnuplot) {
  const RunConfig cfg = load_config(c);
  const auto grid = cfg.grid();
  const auto opt = cfg.sweep_options();
  say(c, fmt::format("sweep {}x{} on {} worker(s)\n", grid.x.size(), grid.y.size(), opt.workers));
  auto res = run_sweep(grid, cfg.sim, cfg.cond, opt);
  res.config_hash = cfg.hash();
  int nonconv = 0;
  double mmax = 0;
  for (const auto& r : res.records) {
    if (!r.converged) ++nonconv;
    if (std::isfinite(r.M_abs)) mmax = std::max(mmax, r.M_abs);
  }
  std::size_t largest = 0;
  const int comps = ordered_components(res, 0.05, &largest);
  json summary{{"cells", res.records.size()},
               {"nonconverged", nonconv},
               {"max_abs_M", mmax},
               {"ordered_components", comps},
               {"largest_component_cells", largest}};
  say(c, fmt::format("max |M| = {:.4f}, ordered components = {}, nonconverged = {}\n", mmax, comps, nonconv));
  if (!c.out.empty()) {
    std::vector<std::string> outs{c.out + ".csv"};
    persist(res, with_suffix(c.out, ".csv"));
    if (gnuplot) {
      for (const char* f : {"M_abs", "tau"}) {
        const std::string name = c.out + "." + f + ".dat";
        write_atomic(name, header(cfg, "matrix") + gnuplot_matrix(res, f));
        outs.push_back(name);
      }
    }
    auto m = manifest(cfg, "sweep");
    m["summary"] = summary;
    write_manifest(c.out, m, outs);
  }
  return nonconv ? exit_nonconverged : exit_ok;
}

int cmd_contour(const Common& c, const std::string& from_sweep, std::optional<double> value) {
  const RunConfig cfg = load_config(c);
  std::vector<SeriesPoint> pts;
  double G = cfg.sim.Gamma;
  if (!from_sweep.empty()) {
    const auto res = load(from_sweep);
    G = res.Gamma;
    pts = extract_contour(res, cfg.contour_axis, value.value_or(cfg.contour_fixed));
  } else {
    pts = run_contour(cfg.sim, cfg.contour_axis, cfg.contour_fixed, cfg.contour_controls.resolve(), cfg.sweep_options());
  }
  const char* xname = cfg.contour_axis == ContourAxis::fixed_J ? "I_over_Gamma" : "J_over_Gamma";
  std::string csv = header(cfg, "contour") + fmt::format("# eps={}\n{},M_abs,tau_s,tau_over_T1,converged\n",
                                                         fmt_double(cfg.eps), xname);
  std::string text;
  bool all = true;
  for (const auto& p : pts) {
    all = all && p.converged;
    csv += fmt::format("{},{},{},{},{}\n", fmt_double(p.x), fmt_double(p.M), fmt_double(p.tau), fmt_double(p.tau * G),
                       p.converged ? 1 : 0);
    text += fmt::format("{:10.5f}  |M| = {:.6f}  tau/T1 = {:9.3f}{}\n", p.x, p.M, p.tau * G, p.converged ? "" : "  (not converged)");
  }
  // Near-critical tau depends on the seed; rerun the slowest cell at eps/10 and 10 eps.
  json sens = json::array();
  if (from_sweep.empty() && cfg.eps != 0.0) {
    std::size_t slow = pts.size();
    for (std::size_t k = 0; k < pts.size(); ++k)
      if (pts[k].converged && pts[k].tau * G > 1.0 + 1e-9 && (slow == pts.size() || pts[k].tau > pts[slow].tau))
        slow = k;
    if (slow < pts.size()) {
      SimParams p = cfg.sim;
      (cfg.contour_axis == ContourAxis::fixed_J ? p.I : p.J) = pts[slow].x * G;
      text += fmt::format("eps sensitivity at {} = {:.5f}:", xname, pts[slow].x);
      for (double f : {0.1, 1.0, 10.0}) {
        const double e = std::clamp(f * cfg.eps, -0.01, 0.01);
        const auto s = steady_state(p, e, cfg.steady);
        const double t = s.converged ? response_time(s, G, absolute_M_floor).tau * G : std::nan("");
        sens.push_back({{"eps", e}, {xname, pts[slow].x}, {"tau_over_T1", t}, {"converged", s.converged}});
        text += fmt::format("  eps {:g}: tau/T1 = {:.2f}", e, t);
      }
      text += "\n";
    }
  }
  say(c, text);
  if (!c.out.empty()) {
    write_atomic(with_suffix(c.out, ".csv"), csv);
    json m = manifest(cfg, "contour");
    m["eps_sensitivity"] = sens;
    write_manifest(c.out, m, {c.out + ".csv"});
  }
  return all ? exit_ok : exit_nonconverged;
}

int cmd_susceptibility(const Common& c) {
  const RunConfig cfg = load_config(c);
  const double G = cfg.sim.Gamma;
  auto controls = cfg.susc_controls.resolve();
  if (controls.empty()) controls = {cfg.sim.I / G};
  std::vector<SusceptibilityResult> out(controls.size());
  std::vector<std::string> errors(controls.size());
  parallel_for(controls.size(), cfg.sweep_options().workers, [&](std::size_t k) {
    SimParams p = cfg.sim;
    p.I = controls[k] * G;
    try {
      out[k] = susceptibility(p, cfg.susc_dH * G, cfg.eps == 0.0 ? 1e-4 : cfg.eps, cfg.steady, cfg.susc_richardson);
    } catch (const ConvergenceError& e) {
      errors[k] = e.what();
    }
  });
  std::string csv = header(cfg, "susceptibility") +
                    "I_over_Gamma,J_over_Gamma,chi_Gamma,chi_half_Gamma,richardson_Gamma,rel_change,ordered_flag\n";
  std::string text;
  bool ok = true;
  for (std::size_t k = 0; k < controls.size(); ++k) {
    if (!errors[k].empty()) {
      ok = false;
      text += fmt::format("I/Gamma = {:.5f}: {}\n", controls[k], errors[k]);
      continue;
    }
    const auto& s = out[k];
    csv += fmt::format("{},{},{},{},{},{},{}\n", fmt_double(controls[k]), fmt_double(cfg.sim.J / G),
                       fmt_double(s.chi * G), fmt_double(s.chi_half * G), fmt_double(s.richardson * G),
                       fmt_double(s.rel_change), s.ordered_flag ? 1 : 0);
    text += fmt::format("I/Gamma = {:.5f}  chi*Gamma = {:.6g}  dH-halving change = {:.2e}{}\n", controls[k],
                        s.chi * G, s.rel_change, s.ordered_flag ? "  [ordered: spontaneous M dominates]" : "");
  }
  say(c, text);
  if (!c.out.empty()) {
    write_atomic(with_suffix(c.out, ".csv"), csv);
    write_manifest(c.out, manifest(cfg, "susceptibility"), {c.out + ".csv"});
  }
  return ok ? exit_ok : exit_nonconverged;
}

// Two numeric columns from a CSV; '#' lines skipped, an optional header names columns.
std::pair<std::vector<double>, std::vector<double>> read_series(const std::string& path, const std::string& xcol,
                                                                const std::string& ycol) {
  const auto text = read_file(path);
  std::vector<std::string> names;
  std::vector<std::vector<double>> rows;
  int line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    auto cells = split(line, ',');
    for (auto& s : cells) s = trim(s);
    if (names.empty() && rows.empty()) {
      try {
        parse_double(cells[0]);
      } catch (const SchemaError&) {
        names = cells;
        continue;
      }
    }
    std::vector<double> r;
    for (const auto& s : cells) {
      try {
        r.push_back(parse_double(s));
      } catch (const SchemaError&) {
        throw SchemaError(fmt::format("{}:{}: '{}' is not a number", path, line_no, s));
      }
    }
    rows.push_back(std::move(r));
  }
  auto column = [&](const std::string& want, std::size_t fallback) -> std::size_t {
    if (want.empty()) return fallback;
    for (std::size_t k = 0; k < names.size(); ++k)
      if (names[k] == want) return k;
    try {
      return static_cast<std::size_t>(std::stoul(want));
    } catch (const std::exception&) {
      throw SchemaError(fmt::format("{}: no column '{}'", path, want));
    }
  };
  const std::size_t ix = column(xcol, 0), iy = column(ycol, 1);
  std::vector<double> x, y;
  for (const auto& r : rows) {
    if (r.size() <= std::max(ix, iy)) throw SchemaError(fmt::format("{}: row with too few columns", path));
    x.push_back(r[ix]);
    y.push_back(r[iy]);
  }
  if (x.empty()) throw SchemaError(fmt::format("{}: no data rows", path));
  return {x, y};
}

json fit_json(const FitResult& r) {
  json j{{"form", to_string(r.form)},
         {"exponent", r.exponent},
         {"exponent_se", r.se_exponent},
         {"critical_value", r.X0},
         {"critical_value_se", r.se_X0},
         {"amplitude", r.amplitude},
         {"amplitude_se", r.se_amplitude},
         {"residual_norm", r.residual_norm},
         {"reduced_chi2", r.chi2_red},
         {"points_used", r.points_used},
         {"points_excluded", r.points_excluded},
         {"weights", to_string(r.weights)},
         {"stages", r.stages}};
  if (r.form == FitForm::delta) {
    j["aic_power_law"] = r.aic_power;
    j["aic_analytic"] = r.aic_analytic;
    j["preferred_model"] = r.analytic_preferred ? "analytic M = aH + bH^2" : "power law";
  }
  return j;
}

int cmd_fit(const Common& c, const std::string& input, const std::string& form, const std::string& weights, int exclude,
            const std::string& xcol, const std::string& ycol) {
  Common cc = c;
  if (!form.empty()) cc.overrides.push_back("task.fit.form=" + form);
  if (!weights.empty()) cc.overrides.push_back("task.fit.weights=" + weights);
  if (exclude >= 0) cc.overrides.push_back("task.fit.exclude=" + std::to_string(exclude));
  const RunConfig cfg = load_config(cc);
  auto [x, y] = read_series(input, xcol, ycol);
  const FitSpec spec = cfg.fit_spec();
  if (spec.form == FitForm::beta || spec.form == FitForm::delta)
    for (auto& v : y) v = std::abs(v);

  FitResult r;
  json extra = json::object();
  switch (spec.form) {
    case FitForm::delta: r = fit_delta(x, y); break;
    case FitForm::znu: {
      // Series entirely at the T1 floor carries no divergence.
      const double floor = *std::min_element(y.begin(), y.end());
      const bool flat = *std::max_element(y.begin(), y.end()) <= floor * (1 + 1e-9);
      if (flat) throw FitError("no divergence detected (tau is constant at the floor)");
      r = three_step_fit(x, y, spec);
      break;
    }
    default: r = three_step_fit(x, y, spec);
  }
  if (spec.form == FitForm::gamma || spec.form == FitForm::znu) {
    const auto sens = exclusion_sensitivity(x, y, spec, {0, 2});
    extra["exclusion_sensitivity"] = {{"counts", sens.counts}, {"exponents", sens.exponents}};
    extra["constant_fit_residual"] = constant_fit_residual(x, y, spec.weights);
  }
  auto j = fit_json(r);
  for (auto& [k, v] : extra.items()) j[k] = v;
  say(c, fmt::format("{}: exponent = {:.6g} +- {:.3g}, critical value = {:.8g} +- {:.3g}, residual = {:.4g}\n",
                     to_string(r.form), r.exponent, r.se_exponent, r.X0, r.se_X0, r.residual_norm));
  if (!c.out.empty()) {
    std::string res = header(cfg, "fit-residuals") + "x,y,model,residual,weight,used\n";
    std::string loglog = header(cfg, "fit-loglog");
    const auto w = fit_weights(x, r.weights);
    const Params3 p(r.amplitude, r.X0, r.exponent);
    loglog += r.form == FitForm::delta ? "log10_h,log10_y,log10_model\n" : "log10_u,log10_y,log10_model\n";
    for (std::size_t k = 0; k < x.size(); ++k) {
      const bool def = form_defined(r.form, x[k], r.X0);
      const double model = def ? form_value(r.form, x[k], p) : std::numeric_limits<double>::quiet_NaN();
      const bool used = r.used.empty() || r.used[k];
      res += fmt::format("{},{},{},{},{},{}\n", fmt_double(x[k]), fmt_double(y[k]), fmt_double(model),
                         fmt_double(y[k] - model), fmt_double(w[k]), used ? 1 : 0);
      double u = x[k];
      if (r.form == FitForm::gamma) u = r.X0 / x[k] - 1.0;
      else if (r.form != FitForm::delta) u = 1.0 - r.X0 / x[k];
      if (u > 0 && y[k] > 0 && model > 0)
        loglog += fmt::format("{},{},{}\n", fmt_double(std::log10(u)), fmt_double(std::log10(y[k])),
                              fmt_double(std::log10(model)));
    }
    write_atomic(with_suffix(c.out, ".residuals.csv"), res);
    write_atomic(with_suffix(c.out, ".loglog.csv"), loglog);
    write_atomic(with_suffix(c.out, ".fit.json"), j.dump(2) + "\n");
    auto m = manifest(cfg, "fit");
    m["input"] = input;
    m["result"] = j;
    write_manifest(c.out, m, {c.out + ".fit.json", c.out + ".residuals.csv", c.out + ".loglog.csv"});
  }
  return exit_ok;
}

int cmd_selftest(const Common& c, int sets) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run_invariant_suite(sets);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  say(c, fmt::format("invariant suite over {} random parameter sets ({:.1f} s)\n", r.sets, secs));
  say(c, fmt::format("  trace drift          {:.3e}  (< 1e-9)\n", r.trace_drift));
  say(c, fmt::format("  hermiticity          {:.3e}  (< 1e-10)\n", r.hermiticity));
  say(c, fmt::format("  min eigenvalue       {:.3e}  (>= -1e-9)\n", r.min_eigenvalue));
  say(c, fmt::format("  exchange Tr(Fz X)    {:.3e}  (< 1e-10)\n", r.exchange_fz));
  say(c, fmt::format("  zero-seed |M|        {:.3e}  (< 1e-9)\n", r.zero_seed_M));
  say(c, fmt::format("  +-seed |M+ + M-|     {:.3e}  (< 1e-6; relative {:.2e})\n", r.sign_equivariance,
                     r.sign_equivariance_rel));
  for (const auto& f : r.failures) say(c, "  failure: " + f + "\n");
  say(c, r.ok() ? "selftest passed\n" : "selftest FAILED\n");
  return r.ok() ? exit_ok : exit_numerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spingas: spin-exchange ordering in optically pumped alkali vapour"};
  app.set_version_flag("--version", std::string(tool_version));
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* s, bool out_flag = true) {
    s->add_option("-c,--config", common.config, "YAML config file")->check(CLI::ExistingFile);
    s->add_option("--set", common.overrides, "override a config field, e.g. --set 'rates.I=2 Gamma'");
    if (out_flag) s->add_option("-o,--out", common.out, "output path prefix");
    s->add_option("-w,--workers", common.workers, "worker threads (0 = auto)");
    s->add_flag("-q,--quiet", common.quiet, "suppress console output");
  };

  auto* t2 = app.add_subcommand("table2", "transition probabilities of the reference line");
  add_common(t2);
  auto* sim = app.add_subcommand("simulate", "single-point trajectory, steady state and response time");
  add_common(sim);
  bool gnuplot = false;
  auto* sw = app.add_subcommand("sweep", "phase-diagram sweep over a 2-D grid");
  add_common(sw);
  sw->add_flag("--gnuplot", gnuplot, "also write matrix tables for heat maps");
  std::string from_sweep;
  std::optional<double> value;
  auto* ct = app.add_subcommand("contour", "1-D cut at fixed J or fixed I");
  add_common(ct);
  ct->add_option("--from-sweep", from_sweep, "extract from an existing sweep CSV instead of simulating");
  ct->add_option("--value", value, "fixed value / Gamma for --from-sweep (default task.contour.fixed)");
  auto* su = app.add_subcommand("susceptibility", "chi = dM/dH at H = 0");
  add_common(su);
  std::string input, form, weights, xcol, ycol;
  int exclude = -1;
  auto* ft = app.add_subcommand("fit", "critical-exponent fit of a series");
  add_common(ft);
  ft->add_option("-i,--input", input, "CSV series")->required();
  ft->add_option("--form", form, "beta | gamma | delta | znu");
  ft->add_option("--weights", weights, "default | uniform | inverse_cube");
  ft->add_option("--exclude", exclude, "points dropped around the maximum");
  ft->add_option("--x-col", xcol, "abscissa column name or index (default 0)");
  ft->add_option("--y-col", ycol, "ordinate column name or index (default 1)");
  int sets = 20;
  auto* st = app.add_subcommand("selftest", "randomised invariant suite");
  add_common(st, false);
  st->add_option("--sets", sets, "number of random parameter sets")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? exit_ok : exit_usage;
  }

  try {
    if (*t2) return cmd_table2(common);
    if (*sim) return cmd_simulate(common);
    if (*sw) return cmd_sweep(common, gnuplot);
    if (*ct) return cmd_contour(common, from_sweep, value);
    if (*su) return cmd_susceptibility(common);
    if (*ft) return cmd_fit(common, input, form, weights, exclude, xcol, ycol);
    if (*st) return cmd_selftest(common, sets);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return exit_io;
  } catch (const ConvergenceError& e) {
    std::cerr << "not converged: " << e.what() << "\n";
    return exit_nonconverged;
  } catch (const FitError& e) {
    std::cerr << "fit failed: " << e.what() << "\n";
    return exit_numerical;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return exit_numerical;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_config;
  }
  return exit_usage;
}
