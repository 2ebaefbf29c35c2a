#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "gopt/linear_system.hpp"

namespace gopt {

struct LMConfig {
  int max_iterations = 10;
  double tolerance = 1e-6;  // relative chi^2 decrease on an accepted step
  int level = 0;
  double tau = 1e-4;  // initial damping factor
  PCGConfig pcg;
  LinearSystemOptions linear;
  bool use_rejection_guard = true;  // low-quality PCG steps pre-inflate lambda
  bool refresh_on_reject = false;   // re-linearize after rejected steps too
  double lambda_max = 1e32;
  double gradient_tolerance = 1e-12;  // max-norm of b
};

enum class Termination {
  max_iterations,
  tolerance_reached,
  gradient_small,
  damping_overflow,
  non_finite_linearization,
  no_free_parameters,
};

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::max_iterations: return "max_iterations";
    case Termination::tolerance_reached: return "tolerance_reached";
    case Termination::gradient_small: return "gradient_small";
    case Termination::damping_overflow: return "damping_overflow";
    case Termination::non_finite_linearization: return "non_finite_linearization";
    case Termination::no_free_parameters: return "no_free_parameters";
  }
  return "?";
}

struct IterationRecord {
  int iteration = 0;
  double chi2_before = 0;
  double chi2_after = 0;  // candidate chi^2, kept even when rejected
  double lambda = 0;      // damping used in the linear solve
  int pcg_iterations = 0;
  bool pcg_converged = false;
  double pcg_relative_residual = 0;
  bool low_quality_step = false;
  int precond_fallback_blocks = 0;
  bool accepted = false;
  double wall_seconds = 0;
};

struct MemoryAccount {
  std::size_t jacobian_bytes = 0;
  std::size_t preconditioner_bytes = 0;
  std::size_t workspace_bytes = 0;
  std::size_t graph_bytes = 0;
};

/// Per-iteration trace plus summary of one Levenberg-Marquardt run. The
/// reported chi^2 is sum rho(r^T Omega r) without the 1/2 factor.
struct SolveReport {
  std::vector<IterationRecord> iterations;
  double initial_chi2 = 0;
  double final_chi2 = 0;
  int accepted_steps = 0;
  Termination termination = Termination::max_iterations;
  double total_seconds = 0;
  std::int64_t free_dims = 0;
  std::int64_t residual_dims = 0;
  std::size_t active_factors = 0;
  MemoryAccount memory;
};

/// Nielsen damping schedule. On accept lambda shrinks with the gain ratio
/// (at most by 1/3) and nu resets to 2; on reject lambda grows by nu and nu
/// doubles.
template <typename FP>
void update_damping(FP& lambda, FP& nu, bool accepted, FP gain_ratio) {
  if (accepted) {
    const FP g = FP(2) * gain_ratio - FP(1);
    lambda *= std::max(FP(1) / FP(3), FP(1) - g * g * g);
    nu = FP(2);
  } else {
    lambda *= nu;
    nu *= FP(2);
  }
}

template <typename FP, typename SP>
MemoryAccount account_memory(Graph<FP, SP>& graph, const LinearSystem<FP, SP>& ls) {
  MemoryAccount m;
  m.jacobian_bytes = graph.jacobian_bytes();
  m.preconditioner_bytes = ls.preconditioner_bytes();
  m.workspace_bytes = ls.workspace_bytes();
  m.graph_bytes = graph.graph_bytes();
  return m;
}

/// The LM outer loop: linearize, solve the damped normal equations with
/// matrix-free PCG, apply the candidate step in place, accept on strict
/// chi^2 decrease or revert bit-exactly from a snapshot. Jacobians are
/// refreshed only at accepted linearization points unless configured
/// otherwise.
template <typename FP, typename SP>
SolveReport levenberg_marquardt(Graph<FP, SP>& graph, const LMConfig& config) {
  using Clock = std::chrono::steady_clock;
  const auto t_start = Clock::now();
  auto seconds_since = [](Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
  };

  SolveReport report;
  const ActivePlan& plan = graph.activate(config.level);
  report.free_dims = plan.total_free_dims;
  report.residual_dims = plan.total_residual_dims;
  report.active_factors = plan.active_factors;

  LinearSystem<FP, SP> ls(graph, config.linear);
  ls.prepare();

  FP chi2 = ls.linearize();
  if (!std::isfinite(static_cast<double>(chi2)))
    throw std::runtime_error("levenberg_marquardt: non-finite chi^2 at the initial parameters");
  report.initial_chi2 = static_cast<double>(chi2);
  report.final_chi2 = report.initial_chi2;
  report.memory = account_memory(graph, ls);

  if (plan.total_free_dims == 0) {
    report.termination = Termination::no_free_parameters;
    report.total_seconds = seconds_since(t_start);
    return report;
  }

  FP lambda = ls.initialize_damping(FP(config.tau));
  FP nu = FP(2);
  std::vector<FP> dx(static_cast<std::size_t>(plan.total_free_dims));

  for (int it = 1; it <= config.max_iterations; ++it) {
    const auto t_iter = Clock::now();
    IterationRecord rec;
    rec.iteration = it;
    rec.chi2_before = static_cast<double>(chi2);
    rec.lambda = static_cast<double>(lambda);

    if (!ls.linearization_finite()) {
      rec.chi2_after = rec.chi2_before;
      rec.wall_seconds = seconds_since(t_iter);
      report.iterations.push_back(rec);
      report.termination = Termination::non_finite_linearization;
      break;
    }
    if (ls.gradient_max_norm() < FP(config.gradient_tolerance)) {
      rec.chi2_after = rec.chi2_before;
      rec.wall_seconds = seconds_since(t_iter);
      report.iterations.push_back(rec);
      report.termination = Termination::gradient_small;
      break;
    }

    StepResult<FP> step = ls.solve_step(lambda, config.pcg, dx);
    rec.pcg_iterations = step.stats.iterations;
    rec.pcg_converged = step.stats.converged;
    rec.pcg_relative_residual = step.stats.final_relative_residual;
    rec.precond_fallback_blocks = ls.fallback_blocks();

    if (config.use_rejection_guard && !step.stats.converged &&
        step.stats.final_relative_residual > config.pcg.rejection_ratio * config.pcg.tolerance) {
      rec.low_quality_step = true;
      lambda *= nu;
    }

    std::vector<FP> snap = graph.snapshot();
    FP chi2_new = std::numeric_limits<FP>::quiet_NaN();
    if (step.finite) {
      graph.apply_step(dx);
      chi2_new = graph.total_error_active();
    }
    rec.chi2_after = static_cast<double>(chi2_new);

    const bool accepted = std::isfinite(static_cast<double>(chi2_new)) && chi2_new < chi2;
    rec.accepted = accepted;
    FP rel_decrease = FP(0);
    if (accepted) {
      ++report.accepted_steps;
      const FP gain = step.predicted_decrease > FP(0)
                          ? (chi2 - chi2_new) / step.predicted_decrease
                          : std::numeric_limits<FP>::infinity();
      update_damping(lambda, nu, true, gain);
      rel_decrease = (chi2 - chi2_new) / chi2;
      chi2 = ls.linearize();  // refresh at the accepted point
      report.final_chi2 = static_cast<double>(chi2);
    } else {
      if (step.finite) graph.restore(snap);
      update_damping(lambda, nu, false, FP(0));
      if (config.refresh_on_reject) ls.linearize();
    }

    rec.wall_seconds = seconds_since(t_iter);
    report.iterations.push_back(rec);

    if (accepted && static_cast<double>(rel_decrease) < config.tolerance) {
      report.termination = Termination::tolerance_reached;
      break;
    }
    if (static_cast<double>(lambda) > config.lambda_max) {
      report.termination = Termination::damping_overflow;
      break;
    }
  }

  report.total_seconds = seconds_since(t_start);
  return report;
}

}  // namespace gopt
