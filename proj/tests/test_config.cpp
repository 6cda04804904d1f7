#include <gtest/gtest.h>

#include "spingas/config.hpp"

using namespace spingas;

namespace {

std::string error_of(const std::string& text, const std::vector<std::string>& ov = {}) {
  try {
    parse_config_text(text, ov);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Config, EmptyGivesDefaults) {
  const auto c = parse_config_text("");
  EXPECT_DOUBLE_EQ(c.sim.Gamma, 58.0);
  EXPECT_DOUBLE_EQ(c.sim.coll.q_slowdown, 4.57);
  EXPECT_DOUBLE_EQ(c.sim.kappa, default_kappa);
  EXPECT_EQ(c.sim.projection, ProjectionMode::hyperfine_zeeman);
  EXPECT_NEAR(c.sim.atom.A_ground, 2 * M_PI * 2.3e9, 1.0);
  EXPECT_EQ(c.grid().x.size(), 30u);
  for (const auto& [k, st] : c.fields) EXPECT_FALSE(st.user_set) << k;
  EXPECT_EQ(c.fields.size(), c.order.size());
}

TEST(Config, SingleOverrideIsFlagged) {
  const auto c = parse_config_text("rates:\n  I: 2.5 Gamma\n");
  EXPECT_DOUBLE_EQ(c.sim.I, 2.5 * 58.0);
  EXPECT_TRUE(c.fields.at("rates.I").user_set);
  EXPECT_EQ(c.fields.at("rates.I").line, 2);
  EXPECT_FALSE(c.fields.at("rates.J").user_set);
  const auto p = provenance_yaml(c);
  EXPECT_NE(p.find("rates.I: 145 (user)"), std::string::npos);
  EXPECT_NE(p.find("rates.J: 0 (default)"), std::string::npos);
}

TEST(Config, CommandLineOverride) {
  const auto c = parse_config_text("rates:\n  I: 1 Gamma\n", {"rates.I=3 Gamma", "task.fit.form=znu"});
  EXPECT_DOUBLE_EQ(c.sim.I, 3 * 58.0);
  EXPECT_EQ(c.fields.at("rates.I").line, -1);
  EXPECT_EQ(c.fit_form, FitForm::znu);
  EXPECT_EQ(c.fit_spec().exclude, 2);
}

TEST(Config, RejectsNegativeGammaWithPath) {
  const auto e = error_of("model:\n  Gamma: -5 /s\n");
  EXPECT_NE(e.find("model.Gamma"), std::string::npos) << e;
  EXPECT_NE(e.find("line 2"), std::string::npos) << e;
}

TEST(Config, UnknownKeyReportsLine) {
  const auto e = error_of("rates:\n  I: 1 Gamma\n  Q: 3 /s\n");
  EXPECT_NE(e.find("line 3"), std::string::npos) << e;
  EXPECT_NE(e.find("rates.Q"), std::string::npos) << e;
  EXPECT_NE(e.find("unknown key"), std::string::npos) << e;
  EXPECT_FALSE(error_of("bogus: 1\n").empty());
}

TEST(Config, MissingAndWrongUnits) {
  EXPECT_NE(error_of("rates:\n  I: 100\n").find("unit tag missing"), std::string::npos);
  EXPECT_NE(error_of("rates:\n  I: 100 G\n").find("not valid"), std::string::npos);
  EXPECT_NE(error_of("model:\n  projection: sometimes\n").find("model.projection"), std::string::npos);
  EXPECT_FALSE(error_of("rates: [1, 2\n").empty());
}

TEST(Config, UnitConversions) {
  const auto c = parse_config_text(
      "atom:\n  B: 250 mG\nrates:\n  J: 116 /s\nnumerics:\n  t_max: 2 s\ntask:\n  simulate:\n    t_end: 20 ms\n");
  EXPECT_DOUBLE_EQ(c.sim.B_z, 0.25);
  EXPECT_DOUBLE_EQ(c.sim.J, 116.0);
  EXPECT_NEAR(c.steady.t_max_T1, 116.0, 1e-12);
  EXPECT_NEAR(c.simulate_t_end_T1, 1.16, 1e-12);
}

TEST(Config, AngularConvention) {
  const auto ord = parse_config_text("");
  const auto ang = parse_config_text("atom:\n  frequency_convention: angular\n");
  EXPECT_NEAR(ang.sim.atom.A_ground, 2.3e9, 1e-3);
  EXPECT_NEAR(ord.sim.atom.A_ground / ang.sim.atom.A_ground, 2 * M_PI, 1e-12);
  EXPECT_NEAR(ang.sim.coll.gamma_c, 1.86e9, 1e-3);
  const auto exp = parse_config_text("atom:\n  frequency_convention: angular\n  hyperfine_A_ground: 1 GHz\n");
  EXPECT_NEAR(exp.sim.atom.A_ground, 1e9, 1e-3);
  EXPECT_NE(ord.hash(), ang.hash());
}

TEST(Config, HashIgnoresWorkersOnly) {
  const auto a = parse_config_text("numerics:\n  workers: 1\n");
  const auto b = parse_config_text("numerics:\n  workers: 8\n");
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.sweep_options().workers, 1);
  const auto c = parse_config_text("numerics:\n  eps: 1e-5\n");
  EXPECT_NE(a.hash(), c.hash());
  EXPECT_DOUBLE_EQ(c.sim.eps, 1e-5);
}

TEST(Config, SweepAxes) {
  const auto c = parse_config_text(
      "task:\n  sweep:\n    x: {from: 1 Gamma, to: 2 Gamma, n: 3}\n    y: {values: [0.5 Gamma, 1 Gamma]}\n");
  const auto g = c.grid();
  ASSERT_EQ(g.x.size(), 3u);
  EXPECT_DOUBLE_EQ(g.x[1], 1.5);
  ASSERT_EQ(g.y.size(), 2u);
  EXPECT_DOUBLE_EQ(g.y[0], 0.5);
  const auto p = parse_config_text("task:\n  sweep:\n    axes: physical\n");
  EXPECT_EQ(p.grid().axes, SweepGrid::Axes::physical);
  EXPECT_EQ(p.grid().y.size(), 5u);
  EXPECT_NEAR(p.grid().x.front(), 7e11, 1.0);
}

TEST(Config, SigmaAuto) {
  const auto c = parse_config_text("conditions:\n  sigma_e: auto\n");
  EXPECT_TRUE(c.sigma_e_auto);
  EXPECT_NEAR(c.cond.sigma_e, default_sigma_e(c.sim), 1e-20);
}
