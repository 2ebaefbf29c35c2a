#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "gopt/graph.hpp"
#include "gopt/pcg.hpp"

namespace gopt {

struct LinearSystemOptions {
  double clamp_min = 1e-6;
  double clamp_max = 1e32;
  DampingPlacement damping = DampingPlacement::after_scaling;
};

template <typename FP>
struct StepResult {
  PCGStats stats;
  FP predicted_decrease = FP(0);
  bool finite = true;
};

/// The damped normal equations of one LM iteration, solved matrix-free: the
/// Hessian is never materialized; Hessian-vector products sweep the graph
/// structure directly (forward over factors, segmented reduction over
/// vertices). Columns are rescaled by the square-root inverse of the clamped
/// Hessian diagonal and the block-Jacobi preconditioner is kept at graph
/// precision.
template <typename FP, typename SP>
class LinearSystem {
 public:
  using Arith = arith_t<SP>;

  LinearSystem(Graph<FP, SP>& graph, LinearSystemOptions options = {})
      : graph_(graph), options_(options) {}

  /// Sizes workspace and the preconditioner layout from the current
  /// activation.
  void prepare() {
    const auto& plan = graph_.plan();
    n_ = static_cast<std::size_t>(plan.total_free_dims);
    b_.assign(n_, FP(0));
    diag_.assign(n_, FP(0));
    clamped_.assign(n_, FP(0));
    scaling_.assign(n_, FP(1));
    layout_.segments.clear();
    std::size_t block_elems = 0;
    for (auto* vd : graph_.vertex_descriptors()) {
      const std::size_t nfree = vd->free_count();
      const int dim = vd->block_dimension();
      layout_.segments.push_back({vd, nfree ? vd->first_column() : 0, block_elems, dim});
      block_elems += nfree * static_cast<std::size_t>(dim) * static_cast<std::size_t>(dim);
    }
    precond_.assign(block_elems, FP(0));
    layout_.blocks = std::span<FP>(precond_);
    fallback_blocks_ = 0;
  }

  /// Evaluates residuals, loss weights, and Jacobians at the current
  /// parameters, then accumulates the gradient and Hessian diagonal and
  /// refreshes the column scaling. Returns chi^2.
  FP linearize() {
    FP chi = FP(0);
    for (auto* fd : graph_.factor_descriptors()) chi += fd->linearize(graph_.workers());
    std::fill(b_.begin(), b_.end(), FP(0));
    std::fill(diag_.begin(), diag_.end(), FP(0));
    for (auto* fd : graph_.factor_descriptors())
      fd->accumulate_gradient_and_diagonal(b_, diag_, graph_.workers());
    for (std::size_t i = 0; i < n_; ++i) {
      clamped_[i] = std::clamp(diag_[i], FP(options_.clamp_min), FP(options_.clamp_max));
      scaling_[i] = FP(1) / std::sqrt(clamped_[i]);
    }
    finite_ = std::isfinite(static_cast<double>(chi));
    for (std::size_t i = 0; i < n_ && finite_; ++i)
      finite_ = std::isfinite(static_cast<double>(b_[i])) && std::isfinite(static_cast<double>(diag_[i]));
    return chi;
  }

  bool linearization_finite() const { return finite_; }

  FP gradient_max_norm() const {
    FP m = FP(0);
    for (FP v : b_) m = std::max(m, std::abs(v));
    return m;
  }

  /// lambda0 = tau * max over free columns of the scaled clamped diagonal
  /// (which is 1 up to clamping), or tau alone for an empty free set.
  FP initialize_damping(FP tau) const {
    if (n_ == 0) return tau;
    FP m = FP(0);
    for (std::size_t i = 0; i < n_; ++i) m = std::max(m, scaling_[i] * scaling_[i] * clamped_[i]);
    return tau * m;
  }

  /// out = (D H D + damp) v, computed in two graph sweeps; no matrix is ever
  /// formed. Dynamic-mode descriptors re-evaluate Jacobian blocks inside the
  /// sweep.
  void hvp(std::span<const SP> v, std::span<Arith> out, FP lambda) {
    const bool before = options_.damping == DampingPlacement::before_scaling;
    for (std::size_t i = 0; i < n_; ++i) {
      const Arith damp = before ? static_cast<Arith>(lambda * scaling_[i] * scaling_[i])
                                : static_cast<Arith>(lambda);
      out[i] = damp * widen<Arith>(v[i]);
    }
    for (auto* fd : graph_.factor_descriptors()) {
      fd->hvp_forward(v, scaling_, graph_.workers());
      fd->hvp_scatter(out, scaling_, graph_.workers());
    }
  }

  /// Assembles and inverts the damped scaled diagonal blocks. Numerically
  /// singular blocks fall back to a clamped diagonal-only inverse; the count
  /// is reported per iteration.
  void build_preconditioner(FP lambda) {
    std::fill(precond_.begin(), precond_.end(), FP(0));
    for (auto* fd : graph_.factor_descriptors())
      fd->accumulate_precond_blocks(layout_, scaling_, graph_.workers());
    const bool before = options_.damping == DampingPlacement::before_scaling;
    fallback_blocks_ = 0;
    using Mat = Eigen::Matrix<FP, Eigen::Dynamic, Eigen::Dynamic>;
    for (const auto& seg : layout_.segments) {
      const std::size_t nblocks = seg.vd->free_count();
      const int dim = seg.dim;
      std::vector<int> fallbacks(nblocks, 0);
      parallel_for(nblocks, graph_.workers(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t bi = lo; bi < hi; ++bi) {
          FP* block = precond_.data() + seg.block_base + bi * dim * dim;
          const std::size_t col0 = static_cast<std::size_t>(seg.col_base) + bi * dim;
          for (int k = 0; k < dim; ++k) {
            const FP damp = before ? lambda * scaling_[col0 + k] * scaling_[col0 + k] : lambda;
            block[k * dim + k] += damp;
          }
          Eigen::Map<Mat> m(block, dim, dim);
          Eigen::LLT<Mat> llt(m);
          if (llt.info() == Eigen::Success) {
            Mat inv = llt.solve(Mat::Identity(dim, dim));
            bool ok = inv.allFinite();
            if (ok) {
              m = inv;
              continue;
            }
          }
          // diagonal-only inverse of the clamped block diagonal
          fallbacks[bi] = 1;
          std::vector<FP> d(dim);
          for (int k = 0; k < dim; ++k)
            d[k] = std::clamp(block[k * dim + k], FP(options_.clamp_min), FP(options_.clamp_max));
          for (int i = 0; i < dim * dim; ++i) block[i] = FP(0);
          for (int k = 0; k < dim; ++k) block[k * dim + k] = FP(1) / d[k];
        }
      });
      for (int f : fallbacks) fallback_blocks_ += f;
    }
  }

  int fallback_blocks() const { return fallback_blocks_; }

  void apply_preconditioner(std::span<const SP> r, std::span<SP> z) const {
    for (const auto& seg : layout_.segments) {
      const std::size_t nblocks = seg.vd->free_count();
      const int dim = seg.dim;
      parallel_for(nblocks, graph_.workers(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t bi = lo; bi < hi; ++bi) {
          const FP* block = precond_.data() + seg.block_base + bi * dim * dim;
          const std::size_t col0 = static_cast<std::size_t>(seg.col_base) + bi * dim;
          for (int i = 0; i < dim; ++i) {
            FP acc = FP(0);
            for (int j = 0; j < dim; ++j) acc += block[i * dim + j] * widen<FP>(r[col0 + j]);
            z[col0 + i] = narrow<SP>(acc);
          }
        }
      });
    }
  }

  /// One damped solve: scale, PCG, unscale. dx_out receives the step in
  /// original parameter coordinates; the predicted model decrease is
  /// computed in scaled coordinates for the gain ratio.
  StepResult<FP> solve_step(FP lambda, const PCGConfig& pcg, std::span<FP> dx_out) {
    StepResult<FP> result;
    build_preconditioner(lambda);
    std::vector<FP> rhs(n_);
    for (std::size_t i = 0; i < n_; ++i) rhs[i] = -scaling_[i] * b_[i];
    std::vector<FP> x_scaled(n_, FP(0));
    result.stats = pcg_solve<FP, SP>(
        [this, lambda](std::span<const SP> v, std::span<Arith> out) { hvp(v, out, lambda); },
        [this](std::span<const SP> r, std::span<SP> z) { apply_preconditioner(r, z); },
        std::span<const FP>(rhs), pcg, std::span<FP>(x_scaled));
    const bool before = options_.damping == DampingPlacement::before_scaling;
    FP pred = FP(0);
    for (std::size_t i = 0; i < n_; ++i) {
      const FP damp = before ? lambda * scaling_[i] * scaling_[i] : lambda;
      pred += x_scaled[i] * (damp * x_scaled[i] + rhs[i]);
    }
    result.predicted_decrease = pred;
    for (std::size_t i = 0; i < n_; ++i) {
      dx_out[i] = scaling_[i] * x_scaled[i];
      if (!std::isfinite(static_cast<double>(dx_out[i]))) result.finite = false;
    }
    return result;
  }

  std::span<const FP> gradient() const { return b_; }
  std::span<const FP> hessian_diagonal() const { return diag_; }
  std::span<const FP> clamped_diagonal() const { return clamped_; }
  std::span<const FP> column_scaling() const { return scaling_; }
  std::span<const FP> preconditioner_storage() const { return precond_; }
  const PrecondLayout<FP, SP>& preconditioner_layout() const { return layout_; }
  std::size_t dims() const { return n_; }
  const LinearSystemOptions& options() const { return options_; }

  std::size_t preconditioner_bytes() const { return precond_.size() * sizeof(FP); }
  std::size_t workspace_bytes() const {
    // 5 PCG vectors at system precision, 6 free-dim vectors at graph
    // precision (b, diagonal, clamped diagonal, scaling, rhs, scaled step),
    // plus per-factor caches
    return 5 * n_ * sizeof(SP) + 6 * n_ * sizeof(FP) + graph_.factor_workspace_bytes();
  }

 private:
  Graph<FP, SP>& graph_;
  LinearSystemOptions options_;
  std::size_t n_ = 0;
  std::vector<FP> b_, diag_, clamped_, scaling_;
  std::vector<FP> precond_;
  PrecondLayout<FP, SP> layout_;
  int fallback_blocks_ = 0;
  bool finite_ = true;
};

/// Clamps each diagonal entry into [clamp_min, clamp_max].
template <typename FP>
std::vector<FP> clamp_diagonal(std::span<const FP> diagonal, FP clamp_min, FP clamp_max) {
  std::vector<FP> out(diagonal.size());
  for (std::size_t i = 0; i < diagonal.size(); ++i) out[i] = std::clamp(diagonal[i], clamp_min, clamp_max);
  return out;
}

/// D[c] = 1/sqrt(clamped diagonal[c]); the scaled system has unit diagonal up
/// to clamping.
template <typename FP>
std::vector<FP> compute_column_scaling(std::span<const FP> clamped_diagonal) {
  std::vector<FP> out(clamped_diagonal.size());
  for (std::size_t i = 0; i < clamped_diagonal.size(); ++i) out[i] = FP(1) / std::sqrt(clamped_diagonal[i]);
  return out;
}

/// dx[c] = D[c] * dx_scaled[c]: the step back in original coordinates.
template <typename FP>
std::vector<FP> unscale_step(std::span<const FP> dx_scaled, std::span<const FP> scaling) {
  std::vector<FP> out(dx_scaled.size());
  for (std::size_t i = 0; i < dx_scaled.size(); ++i) out[i] = scaling[i] * dx_scaled[i];
  return out;
}

}  // namespace gopt
