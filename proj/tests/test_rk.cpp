#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "rknet/rk.hpp"

using namespace rknet::rk;

namespace {

// y' = A y with a fixed 2x2 A.
constexpr double kA[2][2] = {{-0.5, 1.0}, {-1.0, -0.3}};

State apply_a(const State& y) {
  return {kA[0][0] * y[0] + kA[0][1] * y[1], kA[1][0] * y[0] + kA[1][1] * y[1]};
}

RhsFn linear_rhs() {
  return [](double, const State& y) { return apply_a(y); };
}

}  // namespace

TEST_CASE("library tableaus satisfy their order conditions") {
  for (const auto& name : tableau_names()) {
    const auto tab = tableau_library(name);
    INFO(name);
    CHECK(tab.a.size() == tab.stages);
    CHECK(tab.b.size() == tab.stages);
    const auto report = check_tableau(tab);
    CHECK(report.find("consistency").passed);
    CHECK(report.find("row_sum").passed);
    // Every library method but forward Euler has order >= 2.
    CHECK(report.find("order2").passed == (name != "euler"));
    CHECK(report.find("consistency").value == doctest::Approx(1.0));
  }
  CHECK(tableau_library("rk4").is_explicit());
  CHECK_FALSE(tableau_library("gauss2").is_explicit());
  CHECK_FALSE(tableau_library("implicit_midpoint").is_explicit());
  CHECK_THROWS_AS(tableau_library("rk5"), UnknownNameError);
  CHECK_THROWS_AS(problem_library("stiff"), UnknownNameError);
}

TEST_CASE("a broken tableau fails the right condition") {
  auto tab = tableau_library("heun");
  tab.b = {0.6, 0.5};
  const auto report = check_tableau(tab);
  CHECK_FALSE(report.find("consistency").passed);
  CHECK(report.find("row_sum").passed);
}

TEST_CASE("rk4 step matches the expanded classical formula") {
  const State y{1.0, -0.5};
  const double h = 0.1;
  // k1..k4 written out by hand.
  const State k1 = apply_a(y);
  const State k2 = apply_a({y[0] + h / 2 * k1[0], y[1] + h / 2 * k1[1]});
  const State k3 = apply_a({y[0] + h / 2 * k2[0], y[1] + h / 2 * k2[1]});
  const State k4 = apply_a({y[0] + h * k3[0], y[1] + h * k3[1]});
  const State next = rk_step(tableau_library("rk4"), linear_rhs(), 0.0, y, h);
  for (int d = 0; d < 2; ++d) {
    const double expect = y[d] + h / 6 * (k1[d] + 2 * k2[d] + 2 * k3[d] + k4[d]);
    CHECK(next[d] == doctest::Approx(expect).epsilon(1e-15));
  }
}

TEST_CASE("explicit stages are evaluated once each, in order, at t + c_i h") {
  std::vector<double> times;
  RhsFn f = [&](double t, const State& y) {
    times.push_back(t);
    return State{-y[0]};
  };
  const auto tab = tableau_library("rk4");
  rk_step(tab, f, 1.0, {1.0}, 0.2);
  REQUIRE(times.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(times[i] == doctest::Approx(1.0 + tab.c[i] * 0.2));
}

TEST_CASE("rk_step is linear in the state for linear problems") {
  const State a{0.3, -1.2}, b{2.0, 0.7};
  for (const auto& name : tableau_names()) {
    const auto tab = tableau_library(name);
    const auto sa = rk_step(tab, linear_rhs(), 0, a, 0.1);
    const auto sb = rk_step(tab, linear_rhs(), 0, b, 0.1);
    const auto sab = rk_step(tab, linear_rhs(), 0, {2 * a[0] - b[0], 2 * a[1] - b[1]}, 0.1);
    for (int d = 0; d < 2; ++d) CHECK(sab[d] == doctest::Approx(2 * sa[d] - sb[d]).epsilon(1e-10));
  }
}

TEST_CASE("implicit stage solutions satisfy the stage equations") {
  for (const char* name : {"implicit_midpoint", "gauss2"}) {
    const auto tab = tableau_library(name);
    const auto prob = logistic_problem();
    const auto z = rk_stages(tab, prob.f, 0.0, prob.y0, 0.1);
    CHECK(stage_residual(tab, prob.f, 0.0, prob.y0, 0.1, z) < 1e-10);
  }
}

TEST_CASE("gauss2 on y' = -y matches the closed-form stage solution") {
  const auto tab = tableau_library("gauss2");
  const double h = 0.1;
  // z = -(I + hA)^{-1} 1 y for scalar y' = -y.
  const double m00 = 1 + h * tab.a[0][0], m01 = h * tab.a[0][1];
  const double m10 = h * tab.a[1][0], m11 = 1 + h * tab.a[1][1];
  const double det = m00 * m11 - m01 * m10;
  const double z0 = -(m11 - m01) / det, z1 = -(m00 - m10) / det;
  const double expect = 1 + h * (tab.b[0] * z0 + tab.b[1] * z1);
  CHECK(rk_step(tab, decay_problem().f, 0, {1.0}, h)[0] == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("non-convergent implicit solves raise ConvergenceError") {
  const auto tab = tableau_library("gauss2");
  RhsFn stiff = [](double, const State& y) { return State{-50 * y[0]}; };
  CHECK_THROWS_AS(rk_step(tab, stiff, 0, {1.0}, 1.0), ConvergenceError);
  try {
    rk_step(tab, stiff, 0, {1.0}, 1.0);
  } catch (const ConvergenceError& e) {
    CHECK(e.iterations() == 100);
  }
}

TEST_CASE("integrate records the trajectory") {
  const auto traj = integrate(tableau_library("euler"), decay_problem(), 0.1, 10);
  REQUIRE(traj.states.size() == 11);
  CHECK(traj.times.back() == doctest::Approx(1.0));
  CHECK(traj.states.back()[0] == doctest::Approx(std::pow(0.9, 10)));
  CHECK_THROWS(integrate(tableau_library("euler"), decay_problem(), 0.1, 0));
  CHECK_THROWS(rk_step(tableau_library("euler"), decay_problem().f, 0, {1.0}, 0.0));
}

TEST_CASE("estimated orders match theory on decay and logistic problems") {
  struct Case {
    const char* method;
    double order;
  };
  for (const auto& problem : {decay_problem(), logistic_problem()}) {
    for (auto c : {Case{"euler", 1}, Case{"heun", 2}, Case{"rk4", 4}, Case{"implicit_midpoint", 2},
                   Case{"gauss2", 4}}) {
      INFO(c.method << " on " << problem.name);
      const auto est = estimate_order_detailed(tableau_library(c.method), problem, 0.1, 4);
      CHECK(est.levels.size() == 4);
      CHECK_FALSE(est.levels.front().local_order.has_value());
      CHECK(std::abs(est.order - c.order) <= 0.3);
    }
  }
}

TEST_CASE("order estimation guards") {
  const auto euler = tableau_library("euler");
  CHECK_THROWS(estimate_order(euler, decay_problem(), 0.1, 2));
  OdeProblem no_exact = decay_problem();
  no_exact.exact = nullptr;
  CHECK_THROWS(estimate_order(euler, no_exact, 0.1, 4));
  OdeProblem constant = decay_problem();
  constant.f = [](double, const State& y) { return State(y.size(), 0.0); };
  constant.exact = [](double) { return State{1.0}; };
  CHECK_THROWS_AS(estimate_order(euler, constant, 0.1, 4), std::domain_error);
}
