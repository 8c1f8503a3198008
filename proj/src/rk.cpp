#include "rknet/rk.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rknet::rk {

bool ButcherTableau::is_explicit() const {
  for (std::size_t i = 0; i < stages; ++i) {
    for (std::size_t j = i; j < stages; ++j) {
      if (a[i][j] != 0.0) return false;
    }
  }
  return true;
}

ButcherTableau tableau_library(std::string_view name) {
  if (name == "euler") {
    return {"euler", 1, {{0.0}}, {1.0}, {0.0}};
  }
  if (name == "heun") {
    return {"heun", 2, {{0.0, 0.0}, {1.0, 0.0}}, {0.5, 0.5}, {0.0, 1.0}};
  }
  if (name == "rk4") {
    return {"rk4",
            4,
            {{0.0, 0.0, 0.0, 0.0}, {0.5, 0.0, 0.0, 0.0}, {0.0, 0.5, 0.0, 0.0}, {0.0, 0.0, 1.0, 0.0}},
            {1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0},
            {0.0, 0.5, 0.5, 1.0}};
  }
  if (name == "implicit_midpoint") {
    return {"implicit_midpoint", 1, {{0.5}}, {1.0}, {0.5}};
  }
  if (name == "gauss2") {
    const double r = std::sqrt(3.0) / 6.0;
    return {"gauss2", 2, {{0.25, 0.25 - r}, {0.25 + r, 0.25}}, {0.5, 0.5}, {0.5 - r, 0.5 + r}};
  }
  throw UnknownNameError("unknown tableau '" + std::string(name) +
                         "' (known: euler, heun, rk4, implicit_midpoint, gauss2)");
}

std::vector<std::string> tableau_names() {
  return {"euler", "heun", "rk4", "implicit_midpoint", "gauss2"};
}

OdeProblem decay_problem() {
  OdeProblem p;
  p.name = "decay";
  p.f = [](double, const State& y) {
    State out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = -y[i];
    return out;
  };
  p.y0 = {1.0};
  p.exact = [](double t) { return State{std::exp(-t)}; };
  return p;
}

OdeProblem logistic_problem() {
  OdeProblem p;
  p.name = "logistic";
  p.f = [](double, const State& y) {
    State out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] * (1.0 - y[i]);
    return out;
  };
  p.y0 = {0.5};
  p.exact = [](double t) { return State{1.0 / (1.0 + std::exp(-t))}; };
  return p;
}

OdeProblem problem_library(std::string_view name) {
  if (name == "decay") return decay_problem();
  if (name == "logistic") return logistic_problem();
  throw UnknownNameError("unknown problem '" + std::string(name) + "' (known: decay, logistic)");
}

std::vector<std::string> problem_names() { return {"decay", "logistic"}; }

double max_norm(const State& v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

namespace {

void check_rhs_dim(const State& out, const State& y) {
  if (out.size() != y.size()) {
    throw std::invalid_argument("rhs returned " + std::to_string(out.size()) +
                                " components for a state of dimension " + std::to_string(y.size()));
  }
}

// y + h * sum_j a_ij z_j over j in [0, upto)
State stage_argument(const ButcherTableau& tab, std::size_t i, std::size_t upto, const State& y,
                     double h, const std::vector<State>& z) {
  State arg = y;
  for (std::size_t j = 0; j < upto; ++j) {
    const double coef = h * tab.a[i][j];
    if (coef == 0.0) continue;
    for (std::size_t d = 0; d < y.size(); ++d) arg[d] += coef * z[j][d];
  }
  return arg;
}

}  // namespace

std::vector<State> rk_stages(const ButcherTableau& tab, const RhsFn& f, double t, const State& y,
                             double h, const ImplicitSolverOptions& opts) {
  if (h == 0.0) throw std::invalid_argument("rk_step: step size must be nonzero");
  const std::size_t s = tab.stages;
  std::vector<State> z(s);
  if (tab.is_explicit()) {
    for (std::size_t i = 0; i < s; ++i) {
      z[i] = f(t + tab.c[i] * h, stage_argument(tab, i, i, y, h, z));
      check_rhs_dim(z[i], y);
    }
    return z;
  }
  const State f0 = f(t, y);
  check_rhs_dim(f0, y);
  std::fill(z.begin(), z.end(), f0);
  double change = 0;
  for (int it = 1; it <= opts.max_iterations; ++it) {
    std::vector<State> next(s);
    change = 0;
    for (std::size_t i = 0; i < s; ++i) {
      next[i] = f(t + tab.c[i] * h, stage_argument(tab, i, s, y, h, z));
      check_rhs_dim(next[i], y);
      for (std::size_t d = 0; d < y.size(); ++d) {
        change = std::max(change, std::abs(next[i][d] - z[i][d]));
      }
    }
    z = std::move(next);
    if (change < opts.tolerance) return z;
  }
  const double residual = stage_residual(tab, f, t, y, h, z);
  std::ostringstream msg;
  msg << "implicit stage solve for " << tab.name << " did not converge in " << opts.max_iterations
      << " iterations (last change " << change << ", residual " << residual << ")";
  throw ConvergenceError(msg.str(), residual, opts.max_iterations);
}

double stage_residual(const ButcherTableau& tab, const RhsFn& f, double t, const State& y,
                      double h, const std::vector<State>& z) {
  double r = 0;
  for (std::size_t i = 0; i < tab.stages; ++i) {
    const State fi = f(t + tab.c[i] * h, stage_argument(tab, i, tab.stages, y, h, z));
    for (std::size_t d = 0; d < y.size(); ++d) r = std::max(r, std::abs(fi[d] - z[i][d]));
  }
  return r;
}

State rk_step(const ButcherTableau& tab, const RhsFn& f, double t, const State& y, double h,
              const ImplicitSolverOptions& opts) {
  const auto z = rk_stages(tab, f, t, y, h, opts);
  State next = y;
  for (std::size_t i = 0; i < tab.stages; ++i) {
    const double coef = h * tab.b[i];
    for (std::size_t d = 0; d < y.size(); ++d) next[d] += coef * z[i][d];
  }
  return next;
}

Trajectory integrate(const ButcherTableau& tab, const OdeProblem& problem, double h, int n_steps) {
  if (n_steps < 1) throw std::invalid_argument("integrate: n_steps must be >= 1");
  Trajectory traj;
  traj.times.reserve(static_cast<std::size_t>(n_steps) + 1);
  traj.states.reserve(static_cast<std::size_t>(n_steps) + 1);
  traj.times.push_back(problem.t0);
  traj.states.push_back(problem.y0);
  for (int n = 0; n < n_steps; ++n) {
    traj.states.push_back(rk_step(tab, problem.f, traj.times.back(), traj.states.back(), h));
    traj.times.push_back(problem.t0 + static_cast<double>(n + 1) * h);
  }
  return traj;
}

OrderEstimate estimate_order_detailed(const ButcherTableau& tab, const OdeProblem& problem,
                                      double h0, int levels) {
  if (levels < 3) throw std::invalid_argument("estimate_order: levels must be >= 3");
  if (!problem.exact) {
    throw std::invalid_argument("estimate_order: problem '" + problem.name +
                                "' has no exact solution");
  }
  if (!(h0 > 0)) throw std::invalid_argument("estimate_order: h0 must be positive");
  const double span = problem.t_end - problem.t0;
  OrderEstimate est;
  double h = h0;
  double order_sum = 0;
  for (int level = 0; level < levels; ++level, h /= 2) {
    const int steps = static_cast<int>(std::lround(span / h));
    const auto traj = integrate(tab, problem, span / steps, steps);
    const State exact = problem.exact(traj.times.back());
    State diff = traj.states.back();
    for (std::size_t d = 0; d < diff.size(); ++d) diff[d] -= exact[d];
    OrderLevel lv;
    lv.h = span / steps;
    lv.error = max_norm(diff);
    if (lv.error == 0.0) {
      throw std::domain_error("estimate_order: zero global error for " + tab.name + " on " +
                              problem.name + " at h=" + std::to_string(lv.h) +
                              "; choose a problem the method does not solve exactly");
    }
    if (!est.levels.empty()) {
      lv.local_order = std::log2(est.levels.back().error / lv.error);
      order_sum += *lv.local_order;
    }
    est.levels.push_back(lv);
  }
  est.order = order_sum / static_cast<double>(levels - 1);
  return est;
}

double estimate_order(const ButcherTableau& tab, const OdeProblem& problem, double h0,
                      int levels) {
  return estimate_order_detailed(tab, problem, h0, levels).order;
}

bool TableauReport::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
}

const ConditionCheck& TableauReport::find(std::string_view condition) const {
  for (const auto& c : checks) {
    if (c.condition == condition) return c;
  }
  throw std::out_of_range("no tableau condition named " + std::string(condition));
}

TableauReport check_tableau(const ButcherTableau& tab, double tolerance) {
  TableauReport report;
  double sum_b = 0, sum_bc = 0, worst_row = 0;
  for (std::size_t i = 0; i < tab.stages; ++i) {
    sum_b += tab.b[i];
    sum_bc += tab.b[i] * tab.c[i];
    double row = 0;
    for (std::size_t j = 0; j < tab.stages; ++j) row += tab.a[i][j];
    worst_row = std::max(worst_row, std::abs(row - tab.c[i]));
  }
  report.checks.push_back({"consistency", sum_b, 1.0, std::abs(sum_b - 1.0) <= tolerance});
  report.checks.push_back({"row_sum", worst_row, 0.0, worst_row <= tolerance});
  report.checks.push_back({"order2", sum_bc, 0.5, std::abs(sum_bc - 0.5) <= tolerance});
  return report;
}

}  // namespace rknet::rk
