#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace gopt {

enum class LossKind { Default, Huber };

/// Robust loss applied to the squared weighted residual s = r^T Omega r.
/// Default: rho(s) = s. Huber: rho(s) = s for s <= delta^2, else
/// 2*delta*sqrt(s) - delta^2 (continuous with continuous derivative at the
/// branch point).
template <typename FP>
struct LossParams {
  LossKind kind = LossKind::Default;
  FP delta = FP(1);  // Huber threshold in residual units, unused for Default

  static LossParams Default() { return {LossKind::Default, FP(1)}; }
  static LossParams Huber(FP delta) { return {LossKind::Huber, delta}; }
};

template <typename FP>
inline FP loss_value(const LossParams<FP>& loss, FP s) {
  if (loss.kind == LossKind::Default) return s;
  const FP d2 = loss.delta * loss.delta;
  if (s <= d2) return s;
  return FP(2) * loss.delta * std::sqrt(s) - d2;
}

/// IRLS weight w = rho'(s); the Gauss-Newton system uses sqrt(w)*J and
/// sqrt(w)*r.
template <typename FP>
inline FP loss_weight(const LossParams<FP>& loss, FP s) {
  if (loss.kind == LossKind::Default) return FP(1);
  const FP d2 = loss.delta * loss.delta;
  if (s <= d2) return FP(1);
  return loss.delta / std::sqrt(s);
}

/// Evaluates w = rho'(r^T Omega r) and writes sqrt(w) * r; information is the
/// row-major n x n matrix (symmetric PSD). Returns w.
template <typename FP>
inline FP apply_loss_weighting(std::span<const FP> residual, std::span<const FP> information,
                               const LossParams<FP>& loss, std::span<FP> weighted_residual) {
  const std::size_t n = residual.size();
  FP s = FP(0);
  for (std::size_t i = 0; i < n; ++i) {
    FP acc = FP(0);
    for (std::size_t j = 0; j < n; ++j) acc += information[i * n + j] * residual[j];
    s += residual[i] * acc;
  }
  const FP w = loss_weight(loss, s);
  const FP sqrt_w = std::sqrt(w);
  for (std::size_t i = 0; i < n; ++i) weighted_residual[i] = sqrt_w * residual[i];
  return w;
}

}  // namespace gopt
