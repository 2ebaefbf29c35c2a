#pragma once

#include <cstdio>
#include <string>

#include "gopt/levenberg_marquardt.hpp"
#include "json.hpp"

namespace gopt {

inline nlohmann::json to_json(const MemoryAccount& m) {
  return {{"jacobian_bytes", m.jacobian_bytes},
          {"preconditioner_bytes", m.preconditioner_bytes},
          {"workspace_bytes", m.workspace_bytes},
          {"graph_bytes", m.graph_bytes}};
}

inline nlohmann::json to_json(const IterationRecord& r) {
  return {{"iteration", r.iteration},
          {"chi2_before", r.chi2_before},
          {"chi2_after", r.chi2_after},
          {"lambda", r.lambda},
          {"pcg_iterations", r.pcg_iterations},
          {"pcg_converged", r.pcg_converged},
          {"pcg_relative_residual", r.pcg_relative_residual},
          {"low_quality_step", r.low_quality_step},
          {"precond_fallback_blocks", r.precond_fallback_blocks},
          {"accepted", r.accepted},
          {"wall_seconds", r.wall_seconds}};
}

inline nlohmann::json to_json(const SolveReport& report) {
  nlohmann::json iters = nlohmann::json::array();
  for (const auto& r : report.iterations) iters.push_back(to_json(r));
  return {{"iterations", iters},
          {"summary",
           {{"initial_chi2", report.initial_chi2},
            {"final_chi2", report.final_chi2},
            {"iterations_run", report.iterations.size()},
            {"accepted_steps", report.accepted_steps},
            {"termination", to_string(report.termination)},
            {"total_seconds", report.total_seconds},
            {"free_dims", report.free_dims},
            {"residual_dims", report.residual_dims},
            {"active_factors", report.active_factors}}},
          {"memory_account", to_json(report.memory)}};
}

/// Fixed CSV column order; summary and memory fields ride along as
/// '#'-prefixed header comments.
inline std::string to_csv(const SolveReport& report) {
  std::string out;
  auto line = [&out](const std::string& s) { out += s + "\n"; };
  line("# initial_chi2=" + std::to_string(report.initial_chi2) +
       " final_chi2=" + std::to_string(report.final_chi2) +
       " accepted_steps=" + std::to_string(report.accepted_steps) +
       " termination=" + to_string(report.termination));
  line("# jacobian_bytes=" + std::to_string(report.memory.jacobian_bytes) +
       " preconditioner_bytes=" + std::to_string(report.memory.preconditioner_bytes) +
       " workspace_bytes=" + std::to_string(report.memory.workspace_bytes) +
       " graph_bytes=" + std::to_string(report.memory.graph_bytes));
  line("iteration,chi2_before,chi2_after,lambda,pcg_iterations,pcg_converged,"
       "pcg_relative_residual,low_quality_step,precond_fallback_blocks,accepted,wall_seconds");
  char buf[512];
  for (const auto& r : report.iterations) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%d,%d,%.17g,%d,%d,%d,%.6f",
                  r.iteration, r.chi2_before, r.chi2_after, r.lambda, r.pcg_iterations,
                  r.pcg_converged ? 1 : 0, r.pcg_relative_residual, r.low_quality_step ? 1 : 0,
                  r.precond_fallback_blocks, r.accepted ? 1 : 0, r.wall_seconds);
    line(buf);
  }
  return out;
}

}  // namespace gopt
