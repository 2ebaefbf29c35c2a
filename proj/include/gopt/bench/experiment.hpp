#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "gopt/factor_descriptor.hpp"
#include "gopt/levenberg_marquardt.hpp"
#include "json.hpp"

namespace gopt::bench {

enum class ProblemKind { circle, bal };
enum class PrecisionMode { fp64, fp32, fp32_bf16 };

inline const char* to_string(ProblemKind p) { return p == ProblemKind::circle ? "circle" : "bal"; }

inline const char* to_string(PrecisionMode p) {
  switch (p) {
    case PrecisionMode::fp64: return "fp64";
    case PrecisionMode::fp32: return "fp32";
    case PrecisionMode::fp32_bf16: return "fp32-bf16";
  }
  return "?";
}

struct ExperimentConfig {
  ProblemKind problem = ProblemKind::circle;
  std::string input;  // BAL file when problem == bal
  PrecisionMode precision = PrecisionMode::fp64;
  DifferentiationMode diff_mode = DifferentiationMode::Analytic;
  int max_iterations = -1;  // <0 picks the problem default (circle 10, bal 50)
  double tolerance = 1e-6;
  int level = 0;
  double tau = 1e-4;
  PCGConfig pcg;
  std::optional<double> huber_delta;
  std::uint64_t seed = 42;
  std::size_t circle_points = 50;
  double circle_radius = 5.0;
  double circle_sigma = 0.1;
  bool fix_last = false;    // mirror of fixing the last vertex
  bool level_demo = false;  // mirror of leveling the third constraint out
  int workers = 1;
};

struct ExperimentResult {
  nlohmann::json report;
  std::string csv;
};

/// Builds the configured problem, runs Levenberg-Marquardt, and returns the
/// machine-readable report (config echo, per-iteration trace, summary with
/// chi^2 and, for BAL, MSE, and the analytic memory account).
ExperimentResult run_experiment(const ExperimentConfig& config);

/// Runs analytic, auto, and dynamic differentiation under an otherwise
/// identical config and reports per-iteration relative chi^2 divergences for
/// each mode pair plus the memory-account deltas.
ExperimentResult compare_modes(const ExperimentConfig& config);

int resolved_max_iterations(const ExperimentConfig& config);

}  // namespace gopt::bench
