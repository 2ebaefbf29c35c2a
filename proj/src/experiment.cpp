#include "gopt/bench/experiment.hpp"

#include <cmath>

#include "gopt/bal/adapter.hpp"
#include "gopt/report.hpp"
#include "gopt/toy/circle.hpp"

namespace gopt::bench {

namespace {

nlohmann::json config_echo(const ExperimentConfig& cfg) {
  const PrecisionPair pp = cfg.precision == PrecisionMode::fp64
                               ? PrecisionPair{ScalarKind::binary64, ScalarKind::binary64}
                               : (cfg.precision == PrecisionMode::fp32
                                      ? PrecisionPair{ScalarKind::binary32, ScalarKind::binary32}
                                      : PrecisionPair{ScalarKind::binary32, ScalarKind::bfloat16_storage});
  nlohmann::json j{{"problem", to_string(cfg.problem)},
                   {"input", cfg.input},
                   {"precision", to_string(cfg.precision)},
                   {"graph_precision", to_string(pp.graph_precision)},
                   {"system_precision", to_string(pp.system_precision)},
                   {"diff_mode", to_string(cfg.diff_mode)},
                   {"max_iterations", resolved_max_iterations(cfg)},
                   {"tolerance", cfg.tolerance},
                   {"level", cfg.level},
                   {"tau", cfg.tau},
                   {"pcg",
                    {{"max_iterations", cfg.pcg.max_iterations},
                     {"tolerance", cfg.pcg.tolerance},
                     {"rejection_ratio", cfg.pcg.rejection_ratio},
                     {"normalize_rhs", cfg.pcg.normalize_rhs}}},
                   {"seed", cfg.seed},
                   {"fix_last", cfg.fix_last},
                   {"level_demo", cfg.level_demo},
                   {"workers", cfg.workers}};
  if (cfg.huber_delta)
    j["huber_delta"] = *cfg.huber_delta;
  else
    j["huber_delta"] = nullptr;
  if (cfg.problem == ProblemKind::circle)
    j["circle"] = {{"points", cfg.circle_points},
                   {"radius", cfg.circle_radius},
                   {"sigma", cfg.circle_sigma}};
  return j;
}

LMConfig lm_config_of(const ExperimentConfig& cfg) {
  LMConfig lm;
  lm.max_iterations = resolved_max_iterations(cfg);
  lm.tolerance = cfg.tolerance;
  lm.level = cfg.level;
  lm.tau = cfg.tau;
  lm.pcg = cfg.pcg;
  return lm;
}

template <typename FP, typename SP>
ExperimentResult run_typed(const ExperimentConfig& cfg) {
  const LMConfig lm = lm_config_of(cfg);
  SolveReport report;
  double initial_mse = 0, final_mse = 0;
  bool has_mse = false;

  if (cfg.problem == ProblemKind::circle) {
    auto prob = toy::generate_circle_problem<FP, SP>(cfg.circle_points, cfg.circle_radius,
                                                     cfg.circle_sigma, cfg.seed, cfg.fix_last,
                                                     cfg.level_demo);
    prob->factor_desc->set_differentiation_mode(cfg.diff_mode);
    prob->graph.set_workers(cfg.workers);
    report = levenberg_marquardt(prob->graph, lm);
  } else {
    const bal::BALProblem problem = bal::parse_bal_file(cfg.input);
    auto bg = bal::build_graph<FP, SP>(problem, cfg.diff_mode, cfg.huber_delta);
    bg->graph.set_workers(cfg.workers);
    initial_mse = static_cast<double>(bg->mse());
    report = levenberg_marquardt(bg->graph, lm);
    final_mse = static_cast<double>(bg->mse());
    has_mse = true;
  }

  ExperimentResult result;
  result.report = to_json(report);
  result.report["config"] = config_echo(cfg);
  if (has_mse) {
    result.report["summary"]["initial_mse"] = initial_mse;
    result.report["summary"]["final_mse"] = final_mse;
  }
  result.csv = to_csv(report);
  return result;
}

template <typename FP, typename SP>
ExperimentResult compare_typed(const ExperimentConfig& base) {
  const DifferentiationMode modes[3] = {DifferentiationMode::Analytic, DifferentiationMode::Auto,
                                        DifferentiationMode::Dynamic};
  nlohmann::json per_mode = nlohmann::json::object();
  std::array<std::vector<double>, 3> traces;
  std::array<double, 3> final_mse{};
  for (int m = 0; m < 3; ++m) {
    ExperimentConfig cfg = base;
    cfg.diff_mode = modes[m];
    ExperimentResult r = run_typed<FP, SP>(cfg);
    // the state chi^2 each iteration ends with; finite even when a rejected
    // candidate evaluated to a non-finite value
    for (const auto& it : r.report["iterations"])
      traces[m].push_back(it["accepted"].get<bool>() ? it["chi2_after"].get<double>()
                                                     : it["chi2_before"].get<double>());
    if (r.report["summary"].contains("final_mse")) final_mse[m] = r.report["summary"]["final_mse"];
    per_mode[to_string(modes[m])] = {{"summary", r.report["summary"]},
                                     {"memory_account", r.report["memory_account"]}};
  }

  auto divergence = [&](int a, int b) {
    nlohmann::json rows = nlohmann::json::array();
    const std::size_t n = std::min(traces[a].size(), traces[b].size());
    for (std::size_t i = 0; i < n; ++i) {
      const double va = traces[a][i], vb = traces[b][i];
      rows.push_back(va != 0 ? std::abs(va - vb) / std::abs(va) : std::abs(vb));
    }
    return rows;
  };

  ExperimentResult result;
  result.report = {{"config", config_echo(base)},
                   {"modes", per_mode},
                   {"divergence",
                    {{"analytic_vs_auto", divergence(0, 1)},
                     {"analytic_vs_dynamic", divergence(0, 2)},
                     {"auto_vs_dynamic", divergence(1, 2)}}}};
  if (base.problem == ProblemKind::bal)
    result.report["final_mse"] = {{"analytic", final_mse[0]},
                                  {"auto", final_mse[1]},
                                  {"dynamic", final_mse[2]}};

  std::string csv = "iteration,analytic_vs_auto,analytic_vs_dynamic,auto_vs_dynamic\n";
  const auto& d01 = result.report["divergence"]["analytic_vs_auto"];
  const auto& d02 = result.report["divergence"]["analytic_vs_dynamic"];
  const auto& d12 = result.report["divergence"]["auto_vs_dynamic"];
  const std::size_t rows = std::min({d01.size(), d02.size(), d12.size()});
  char buf[160];
  for (std::size_t i = 0; i < rows; ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", i + 1, d01[i].get<double>(),
                  d02[i].get<double>(), d12[i].get<double>());
    csv += buf;
  }
  result.csv = csv;
  return result;
}

template <typename Fn>
ExperimentResult dispatch(PrecisionMode precision, Fn&& fn) {
  switch (precision) {
    case PrecisionMode::fp64: return fn.template operator()<double, double>();
    case PrecisionMode::fp32: return fn.template operator()<float, float>();
    case PrecisionMode::fp32_bf16: return fn.template operator()<float, bfloat16>();
  }
  throw std::logic_error("unknown precision mode");
}

}  // namespace

int resolved_max_iterations(const ExperimentConfig& config) {
  if (config.max_iterations >= 0) return config.max_iterations;
  return config.problem == ProblemKind::circle ? 10 : 50;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  return dispatch(config.precision, [&]<typename FP, typename SP>() {
    return run_typed<FP, SP>(config);
  });
}

ExperimentResult compare_modes(const ExperimentConfig& config) {
  return dispatch(config.precision, [&]<typename FP, typename SP>() {
    return compare_typed<FP, SP>(config);
  });
}

}  // namespace gopt::bench
