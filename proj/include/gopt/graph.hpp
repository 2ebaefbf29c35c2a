#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "gopt/factor_descriptor.hpp"
#include "gopt/precision.hpp"
#include "gopt/vertex_descriptor.hpp"

namespace gopt {

/// Totals of one activation: contiguous free-parameter packing plus the set
/// of factors participating at the active level.
struct ActivePlan {
  std::int64_t total_free_dims = 0;
  std::int64_t total_residual_dims = 0;
  std::size_t active_factors = 0;
  int level = 0;
};

/// The optimization problem: ordered vertex and factor descriptor batches.
/// Descriptors are owned by the caller; the graph only sequences batch
/// operations over them.
template <typename FP, typename SP>
class Graph {
 public:
  static_assert(sizeof(SP) <= sizeof(FP), "system precision must not exceed graph precision");

  static constexpr PrecisionPair precision() {
    return PrecisionPair{scalar_kind_of_v<FP>, scalar_kind_of_v<SP>};
  }

  void add_vertex_descriptor(VertexDescriptorBase<FP, SP>* vd) {
    if (vd == nullptr) throw std::invalid_argument("null vertex descriptor");
    vertex_descs_.push_back(vd);
    dirty_ = true;
  }

  void add_factor_descriptor(FactorDescriptorBase<FP, SP>* fd) {
    if (fd == nullptr) throw std::invalid_argument("null factor descriptor");
    factor_descs_.push_back(fd);
    dirty_ = true;
  }

  std::span<VertexDescriptorBase<FP, SP>* const> vertex_descriptors() const { return vertex_descs_; }
  std::span<FactorDescriptorBase<FP, SP>* const> factor_descriptors() const { return factor_descs_; }

  void set_workers(int workers) { workers_ = workers < 1 ? 1 : workers; }
  int workers() const { return workers_; }

  /// Forces re-activation on the next use even without a detected edit.
  void mark_dirty() { dirty_ = true; }

  /// Assigns column offsets to free vertices in descriptor-registration order
  /// then insertion order, masks factors above `level`, and rebuilds the
  /// incidence plans.
  const ActivePlan& activate(int level) {
    for (auto* fd : factor_descs_) {
      for (const void* id : fd->slot_descriptor_ids()) {
        bool known = false;
        for (auto* vd : vertex_descs_) known = known || static_cast<const void*>(vd) == id;
        if (!known)
          throw std::logic_error("factor descriptor references a vertex descriptor not in this graph");
      }
    }
    std::int64_t next = 0;
    for (auto* vd : vertex_descs_) next = vd->assign_columns(next);
    plan_.total_free_dims = next;
    plan_.total_residual_dims = 0;
    plan_.active_factors = 0;
    plan_.level = level;
    for (auto* fd : factor_descs_) {
      fd->activate(level);
      plan_.active_factors += fd->active_count();
      plan_.total_residual_dims += static_cast<std::int64_t>(fd->active_count()) * fd->residual_dimension();
    }
    dirty_ = false;
    activated_ = true;
    activation_revision_ = revision_sum();
    return plan_;
  }

  const ActivePlan& ensure_activated(int level) {
    if (dirty_ || !activated_ || plan_.level != level || activation_revision_ != revision_sum())
      return activate(level);
    return plan_;
  }

  const ActivePlan& plan() const {
    if (!activated_) throw std::logic_error("graph not activated");
    return plan_;
  }

  /// chi^2 = sum over active factors of rho(r^T Omega r); descriptor sums are
  /// sequential and descriptors are visited in order, so the reduction is
  /// deterministic for any worker count.
  FP total_error(int level) {
    ensure_activated(level);
    FP chi = FP(0);
    for (auto* fd : factor_descs_) chi += fd->evaluate_chi2(workers_);
    return chi;
  }

  /// chi^2 at the current activation (candidate scoring during a solve).
  FP total_error_active() {
    FP chi = FP(0);
    for (auto* fd : factor_descs_) chi += fd->evaluate_chi2(workers_);
    return chi;
  }

  /// Copies all free parameter blocks into the packed free vector layout.
  std::vector<FP> snapshot() const {
    std::vector<FP> snap(static_cast<std::size_t>(plan().total_free_dims));
    for (auto* vd : vertex_descs_) vd->gather_free(snap);
    return snap;
  }

  /// Writes a snapshot back through direct assignment (bit-exact restore).
  void restore(const std::vector<FP>& snap) {
    for (auto* vd : vertex_descs_) vd->scatter_free(snap);
  }

  /// Applies a packed step through each descriptor's update op, in place.
  void apply_step(std::span<const FP> dx) {
    for (auto* vd : vertex_descs_) vd->apply_step(dx, workers_);
  }

  std::size_t jacobian_bytes() const {
    std::size_t n = 0;
    for (auto* fd : factor_descs_) n += fd->jacobian_store_bytes();
    return n;
  }

  std::size_t graph_bytes() const {
    std::size_t n = 0;
    for (auto* vd : vertex_descs_) n += vd->graph_bytes();
    for (auto* fd : factor_descs_) n += fd->graph_bytes();
    return n;
  }

  std::size_t factor_workspace_bytes() const {
    std::size_t n = 0;
    for (auto* fd : factor_descs_) n += fd->workspace_bytes();
    return n;
  }

 private:
  std::uint64_t revision_sum() const {
    std::uint64_t sum = 0;
    for (auto* vd : vertex_descs_) sum += vd->revision();
    for (auto* fd : factor_descs_) sum += fd->revision();
    return sum;
  }

  std::vector<VertexDescriptorBase<FP, SP>*> vertex_descs_;
  std::vector<FactorDescriptorBase<FP, SP>*> factor_descs_;
  ActivePlan plan_;
  std::uint64_t activation_revision_ = 0;
  int workers_ = 1;
  bool dirty_ = true;
  bool activated_ = false;
};

}  // namespace gopt
