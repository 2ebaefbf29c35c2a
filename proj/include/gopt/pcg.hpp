#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "gopt/precision.hpp"

namespace gopt {

struct PCGConfig {
  int max_iterations = 50;
  double tolerance = 1e-6;        // relative residual threshold
  double rejection_ratio = 10.0;  // low-quality guard, see LMConfig::use_rejection_guard
  bool normalize_rhs = true;      // scale rhs to unit norm, rescale the solution after
};

struct PCGStats {
  int iterations = 0;
  double final_relative_residual = 0.0;
  bool converged = false;
};

/// Preconditioned conjugate gradients from x0 = 0 on a symmetric positive
/// semi-definite (damped) operator. Workspace vectors live at system
/// precision SP; every dot product and scalar recurrence accumulates at graph
/// precision FP. The rhs is normalized to unit Euclidean norm before
/// iterating and the solution rescaled afterwards, which keeps 16-bit vector
/// storage in a well-scaled range.
///
/// A: void(std::span<const SP> v, std::span<arith_t<SP>> out)
/// M: void(std::span<const SP> r, std::span<SP> z)   (preconditioner apply)
template <typename FP, typename SP, typename Op, typename Precond>
PCGStats pcg_solve(Op&& A, Precond&& M, std::span<const FP> rhs, const PCGConfig& config,
                   std::span<FP> x_out) {
  using Arith = arith_t<SP>;
  const std::size_t n = rhs.size();
  PCGStats stats;

  FP rhs_norm = FP(0);
  for (std::size_t i = 0; i < n; ++i) rhs_norm += rhs[i] * rhs[i];
  rhs_norm = std::sqrt(rhs_norm);
  if (!(rhs_norm > FP(0))) {
    for (std::size_t i = 0; i < n; ++i) x_out[i] = FP(0);
    stats.converged = std::isfinite(static_cast<double>(rhs_norm));
    return stats;
  }
  const FP scale = config.normalize_rhs ? FP(1) / rhs_norm : FP(1);

  std::vector<SP> x(n, SP{}), r(n), z(n), p(n), ap(n);
  std::vector<Arith> ap_wide(n);

  for (std::size_t i = 0; i < n; ++i) r[i] = narrow<SP>(rhs[i] * scale);
  M(std::span<const SP>(r), std::span<SP>(z));
  for (std::size_t i = 0; i < n; ++i) p[i] = z[i];

  auto dot = [n](std::span<const SP> a, std::span<const SP> b) {
    FP acc = FP(0);
    for (std::size_t i = 0; i < n; ++i) acc += widen<FP>(a[i]) * widen<FP>(b[i]);
    return acc;
  };

  const FP ref_norm = config.normalize_rhs ? FP(1) : rhs_norm;
  FP rho = dot(r, z);
  FP res_norm = std::sqrt(dot(r, r));
  stats.final_relative_residual = static_cast<double>(res_norm / ref_norm);

  while (stats.iterations < config.max_iterations) {
    A(std::span<const SP>(p), std::span<Arith>(ap_wide));
    for (std::size_t i = 0; i < n; ++i) ap[i] = narrow<SP>(ap_wide[i]);
    const FP pap = dot(p, ap);
    if (!(pap > FP(0)) || !std::isfinite(static_cast<double>(pap))) {
      // indefiniteness from rounding: keep the current iterate
      stats.converged = false;
      break;
    }
    const FP alpha = rho / pap;
    for (std::size_t i = 0; i < n; ++i)
      x[i] = narrow<SP>(widen<FP>(x[i]) + alpha * widen<FP>(p[i]));
    for (std::size_t i = 0; i < n; ++i)
      r[i] = narrow<SP>(widen<FP>(r[i]) - alpha * widen<FP>(ap[i]));
    ++stats.iterations;
    res_norm = std::sqrt(dot(r, r));
    stats.final_relative_residual = static_cast<double>(res_norm / ref_norm);
    if (!std::isfinite(stats.final_relative_residual)) {
      stats.converged = false;
      break;
    }
    if (res_norm <= FP(config.tolerance) * ref_norm) {
      stats.converged = true;
      break;
    }
    M(std::span<const SP>(r), std::span<SP>(z));
    const FP rho_next = dot(r, z);
    const FP beta = rho_next / rho;
    rho = rho_next;
    for (std::size_t i = 0; i < n; ++i)
      p[i] = narrow<SP>(widen<FP>(z[i]) + beta * widen<FP>(p[i]));
  }

  const FP unscale = config.normalize_rhs ? rhs_norm : FP(1);
  for (std::size_t i = 0; i < n; ++i) x_out[i] = widen<FP>(x[i]) * unscale;
  return stats;
}

}  // namespace gopt
