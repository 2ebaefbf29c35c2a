#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "gopt/bal/problem.hpp"
#include "gopt/bench/experiment.hpp"

namespace {

// exit codes follow sysexits: 64 usage, 65 bad data, 66 missing input, 70 internal
constexpr int kExitUsage = 64;
constexpr int kExitDataError = 65;
constexpr int kExitNoInput = 66;
constexpr int kExitInternal = 70;

void write_output(const std::string& path, const std::string& body) {
  if (path.empty() || path == "-") {
    std::cout << body;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open output file " + path);
  out << body;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Batched graph nonlinear least-squares benchmark harness"};
  gopt::bench::ExperimentConfig cfg;

  std::string problem = "circle", precision = "fp64", diff = "analytic", format = "json";
  std::string output = "-";
  double huber = 0;
  bool compare = false;
  int max_iters = -1;

  app.add_option("--problem", problem, "Problem to run")
      ->check(CLI::IsMember({"circle", "bal"}));
  app.add_option("--input", cfg.input, "BAL problem file (.txt or .txt.gz)");
  app.add_option("--precision", precision, "Graph/system precision pair")
      ->check(CLI::IsMember({"fp64", "fp32", "fp32-bf16"}));
  app.add_option("--diff", diff, "Differentiation mode")
      ->check(CLI::IsMember({"analytic", "auto", "dynamic"}));
  app.add_option("--max-iters", max_iters, "LM iterations (default: 10 circle, 50 bal)");
  app.add_option("--pcg-iters", cfg.pcg.max_iterations, "PCG iteration cap");
  app.add_option("--pcg-tol", cfg.pcg.tolerance, "PCG relative residual tolerance");
  app.add_option("--rejection-ratio", cfg.pcg.rejection_ratio, "Low-quality step guard ratio");
  app.add_option("--tol", cfg.tolerance, "LM relative chi^2 decrease tolerance");
  app.add_option("--tau", cfg.tau, "Initial damping factor");
  app.add_option("--level", cfg.level, "Optimization level");
  auto* huber_opt = app.add_option("--huber", huber, "Huber loss threshold (default loss if absent)");
  app.add_option("--seed", cfg.seed, "Generator seed");
  app.add_option("--points", cfg.circle_points, "Circle problem: point count");
  app.add_option("--radius", cfg.circle_radius, "Circle problem: radius");
  app.add_option("--sigma", cfg.circle_sigma, "Circle problem: noise sigma");
  app.add_flag("--fix-last", cfg.fix_last, "Fix the last vertex");
  app.add_flag("--level-demo", cfg.level_demo, "Move the third constraint to level 1");
  app.add_option("--workers", cfg.workers, "Worker threads for batch maps");
  app.add_flag("--compare-modes", compare, "Run analytic/auto/dynamic and report divergences");
  app.add_option("--output", output, "Report path or '-' for stdout");
  app.add_option("--format", format, "Report format")->check(CLI::IsMember({"json", "csv"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  cfg.problem = problem == "bal" ? gopt::bench::ProblemKind::bal : gopt::bench::ProblemKind::circle;
  cfg.precision = precision == "fp64"
                      ? gopt::bench::PrecisionMode::fp64
                      : (precision == "fp32" ? gopt::bench::PrecisionMode::fp32
                                             : gopt::bench::PrecisionMode::fp32_bf16);
  cfg.diff_mode = diff == "analytic"
                      ? gopt::DifferentiationMode::Analytic
                      : (diff == "auto" ? gopt::DifferentiationMode::Auto
                                        : gopt::DifferentiationMode::Dynamic);
  cfg.max_iterations = max_iters;
  if (huber_opt->count() > 0) cfg.huber_delta = huber;

  if (cfg.problem == gopt::bench::ProblemKind::bal && cfg.input.empty()) {
    std::cerr << "error: --problem bal requires --input\n";
    return kExitUsage;
  }

  try {
    gopt::bench::ExperimentResult result =
        compare ? gopt::bench::compare_modes(cfg) : gopt::bench::run_experiment(cfg);
    write_output(output, format == "json" ? result.report.dump(2) + "\n" : result.csv);
    return 0;
  } catch (const gopt::bal::ParseError& e) {
    std::cerr << "error: malformed BAL input: " << e.what() << "\n";
    return kExitDataError;
  } catch (const std::runtime_error& e) {
    const std::string what = e.what();
    std::cerr << "error: " << what << "\n";
    return what.find("cannot open") != std::string::npos ? kExitNoInput : kExitInternal;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInternal;
  }
}
