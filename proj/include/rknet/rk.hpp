#pragma once

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rknet::rk {

using State = std::vector<double>;
using RhsFn = std::function<State(double t, const State& y)>;

/// Coefficients (a, b, c) of an s-stage Runge-Kutta method.
struct ButcherTableau {
  std::string name;
  std::size_t stages = 0;
  std::vector<std::vector<double>> a;  // stages x stages
  std::vector<double> b;
  std::vector<double> c;

  // Strictly lower-triangular a.
  bool is_explicit() const;
};

class UnknownNameError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The implicit stage iteration did not settle within the iteration cap.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual, int iterations)
      : std::runtime_error(what), residual_(residual), iterations_(iterations) {}
  double residual() const { return residual_; }
  int iterations() const { return iterations_; }

 private:
  double residual_;
  int iterations_;
};

// euler, heun, rk4, implicit_midpoint, gauss2
ButcherTableau tableau_library(std::string_view name);
std::vector<std::string> tableau_names();

struct OdeProblem {
  std::string name;
  RhsFn f;
  State y0;
  double t0 = 0.0;
  double t_end = 1.0;
  std::function<State(double t)> exact;
};

// y' = -y, y(0) = 1 on [0, 1].
OdeProblem decay_problem();
// y' = y (1 - y), y(0) = 1/2 on [0, 1].
OdeProblem logistic_problem();
OdeProblem problem_library(std::string_view name);
std::vector<std::string> problem_names();

struct Trajectory {
  std::vector<double> times;
  std::vector<State> states;
};

struct ImplicitSolverOptions {
  double tolerance = 1e-12;
  int max_iterations = 100;
};

// Stage slopes z_1..z_s of one step, with y_{n+1} = y_n + h * sum b_i z_i.
std::vector<State> rk_stages(const ButcherTableau& tab, const RhsFn& f, double t, const State& y,
                             double h, const ImplicitSolverOptions& opts = {});
State rk_step(const ButcherTableau& tab, const RhsFn& f, double t, const State& y, double h,
              const ImplicitSolverOptions& opts = {});

// Max-norm residual of the stage equations for the given slopes.
double stage_residual(const ButcherTableau& tab, const RhsFn& f, double t, const State& y,
                      double h, const std::vector<State>& z);

Trajectory integrate(const ButcherTableau& tab, const OdeProblem& problem, double h,
                     int n_steps);

struct OrderLevel {
  double h = 0;
  double error = 0;
  // log2(err(2h) / err(h)); absent for the coarsest level.
  std::optional<double> local_order;
};

struct OrderEstimate {
  std::vector<OrderLevel> levels;
  double order = 0;
};

// Integrates over [t0, t_end] at h0, h0/2, ... and averages the observed orders.
OrderEstimate estimate_order_detailed(const ButcherTableau& tab, const OdeProblem& problem,
                                      double h0, int levels);
double estimate_order(const ButcherTableau& tab, const OdeProblem& problem, double h0,
                      int levels);

struct ConditionCheck {
  std::string condition;
  double value = 0;
  double expected = 0;
  bool passed = false;
};

struct TableauReport {
  std::vector<ConditionCheck> checks;
  bool all_passed() const;
  const ConditionCheck& find(std::string_view condition) const;
};

// consistency (sum b = 1), row_sum (c_i = sum_j a_ij), order2 (sum b_i c_i = 1/2)
TableauReport check_tableau(const ButcherTableau& tab, double tolerance = 1e-12);

double max_norm(const State& v);

}  // namespace rknet::rk
