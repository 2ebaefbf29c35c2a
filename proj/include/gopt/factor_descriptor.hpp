#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "gopt/dual.hpp"
#include "gopt/loss.hpp"
#include "gopt/parallel.hpp"
#include "gopt/precision.hpp"
#include "gopt/vertex_descriptor.hpp"

namespace gopt {

/// Analytic and Auto fill a stored Jacobian block array at system precision;
/// Dynamic stores nothing and re-evaluates blocks at graph precision wherever
/// they are used.
enum class DifferentiationMode { Analytic, Auto, Dynamic };

inline const char* to_string(DifferentiationMode m) {
  switch (m) {
    case DifferentiationMode::Analytic: return "analytic";
    case DifferentiationMode::Auto: return "auto";
    case DifferentiationMode::Dynamic: return "dynamic";
  }
  return "?";
}

/// Where the damping term enters the scaled system A = (D H D) + damp:
/// after_scaling uses lambda*I (unit-diagonal regime), before_scaling uses
/// lambda*D^2 which is exactly (H + lambda*I) in unscaled coordinates.
enum class DampingPlacement { after_scaling, before_scaling };

/// Block layout of the block-Jacobi preconditioner owned by the linear
/// system: one dim x dim block per free vertex, addressed through the
/// vertex's global column offset.
template <typename FP, typename SP>
struct PrecondLayout {
  struct Segment {
    const VertexDescriptorBase<FP, SP>* vd;
    std::int64_t col_base;
    std::size_t block_base;
    int dim;
  };
  std::vector<Segment> segments;
  std::span<FP> blocks;

  const Segment& segment_of(const VertexDescriptorBase<FP, SP>* vd) const {
    for (const auto& s : segments)
      if (s.vd == vd) return s;
    throw std::logic_error("preconditioner layout: unknown vertex descriptor");
  }

  static std::size_t block_offset(const Segment& s, std::int64_t column) {
    return s.block_base + static_cast<std::size_t>((column - s.col_base) / s.dim) *
                              static_cast<std::size_t>(s.dim) * static_cast<std::size_t>(s.dim);
  }
};

namespace detail {

template <typename Tuple>
struct ptr_tuple;
template <typename... Ts>
struct ptr_tuple<std::tuple<Ts...>> {
  using type = std::tuple<Ts*...>;
};

template <typename Traits, typename FP, std::size_t Arity>
constexpr bool has_analytic_jacobian() {
  return requires(const std::array<const FP*, Arity>& p,
                  const typename Traits::Observation& o,
                  const typename Traits::ConstantData& d, FP* out) {
    Traits::template jacobian<0>(p, o, d, out);
  };
}

}  // namespace detail

/// Type-erased surface of a homogeneous constraint batch, consumed by the
/// graph, the linear system, and the optimizer. One virtual call per batch
/// operation.
template <typename FP, typename SP>
class FactorDescriptorBase {
 public:
  using Arith = arith_t<SP>;

  virtual ~FactorDescriptorBase() = default;

  virtual std::size_t size() const = 0;
  virtual std::size_t active_count() const = 0;
  virtual int residual_dimension() const = 0;
  virtual int arity() const = 0;
  virtual std::uint8_t level_at(std::size_t index) const = 0;
  virtual void set_level(std::size_t index, std::uint8_t level) = 0;
  virtual DifferentiationMode differentiation_mode() const = 0;
  virtual void set_differentiation_mode(DifferentiationMode mode) = 0;
  virtual std::vector<const void*> slot_descriptor_ids() const = 0;
  /// Bumped by every structural edit; lets the graph detect stale activations.
  virtual std::uint64_t revision() const = 0;

  /// Rebuilds the active-factor list (level <= active level), the per-vertex
  /// incidence used for deterministic segmented reductions, and all scratch.
  /// Requires vertex columns to be assigned first.
  virtual void activate(int level) = 0;

  /// Residuals, loss weights, weighted residuals, chi-square terms, and (for
  /// stored modes) Jacobian blocks at the current parameters. Returns the
  /// descriptor's chi-square contribution.
  virtual FP linearize(int workers) = 0;
  /// Chi-square at the current parameters without touching the linearization
  /// caches (used to score candidate steps).
  virtual FP evaluate_chi2(int workers) = 0;
  /// Sum of unweighted, loss-free squared residual norms over active factors.
  virtual FP raw_residual_sqnorm(int workers) = 0;

  virtual void accumulate_gradient_and_diagonal(std::span<FP> b, std::span<FP> diag,
                                                int workers) const = 0;
  /// Forward hvp sweep: per active factor q = w * Omega * J~ * gather(v).
  virtual void hvp_forward(std::span<const SP> v, std::span<const FP> scaling, int workers) = 0;
  /// Segmented-reduction sweep: out[cols] += D * J^T q, per free vertex.
  virtual void hvp_scatter(std::span<Arith> out, std::span<const FP> scaling, int workers) const = 0;
  virtual void accumulate_precond_blocks(const PrecondLayout<FP, SP>& layout,
                                         std::span<const FP> scaling, int workers) const = 0;

  virtual std::size_t jacobian_store_bytes() const = 0;
  virtual std::size_t workspace_bytes() const = 0;
  virtual std::size_t graph_bytes() const = 0;
};

/// Homogeneous batch of constraints of one type. Traits supply the residual
/// contract and optionally closed-form Jacobians:
///
///   struct Traits {
///     static constexpr int residual_dimension;
///     using SlotDescriptors = std::tuple<SomeVertexDescriptor, ...>;
///     using Observation = ...;   // 1-byte placeholder when unused
///     using ConstantData = ...;  // 1-byte placeholder when unused
///     template <typename T>
///     static void residual(const std::array<const T*, Arity>& params,
///                          const Observation&, const ConstantData&, T* out);
///     template <std::size_t Slot>                       // optional
///     static void jacobian(const std::array<const FP*, Arity>& params,
///                          const Observation&, const ConstantData&,
///                          FP* out);  // residual_dimension x slot_dim, row-major
///   };
template <typename FP, typename SP, typename Traits>
class FactorDescriptor final : public FactorDescriptorBase<FP, SP> {
 public:
  using SlotDescs = typename Traits::SlotDescriptors;
  using Observation = typename Traits::Observation;
  using ConstantData = typename Traits::ConstantData;
  using Arith = arith_t<SP>;
  static constexpr std::size_t kArity = std::tuple_size_v<SlotDescs>;
  static constexpr int kResDim = Traits::residual_dimension;
  static_assert(kResDim >= 1);
  static_assert(kArity >= 1);

  static constexpr std::array<int, kArity> kSlotDims = []<std::size_t... Is>(std::index_sequence<Is...>) {
    return std::array<int, kArity>{std::tuple_element_t<Is, SlotDescs>::kDim...};
  }(std::make_index_sequence<kArity>{});
  static constexpr std::array<int, kArity + 1> kPrefix = [] {
    std::array<int, kArity + 1> p{};
    for (std::size_t i = 0; i < kArity; ++i) p[i + 1] = p[i] + kSlotDims[i];
    return p;
  }();
  static constexpr int kSumDims = kPrefix[kArity];
  static constexpr int kMaxSlotDim = [] {
    int m = 0;
    for (int d : kSlotDims) m = d > m ? d : m;
    return m;
  }();
  static constexpr bool kHasAnalytic = detail::has_analytic_jacobian<Traits, FP, kArity>();

  using SlotPtrs = typename detail::ptr_tuple<SlotDescs>::type;

  template <typename... Ds>
  explicit FactorDescriptor(Ds*... slots) : slots_(slots...) {
    static_assert(std::is_same_v<std::tuple<Ds*...>, SlotPtrs>,
                  "slot descriptor types must match Traits::SlotDescriptors");
  }

  void reserve(std::size_t n) { entries_.reserve(n); }

  /// Appends a constraint; a null information pointer defaults to the
  /// identity matrix, level starts at 0.
  void add_factor(const std::array<std::uint64_t, kArity>& vertex_ids, Observation observation,
                  const FP* information, ConstantData data, LossParams<FP> loss) {
    Entry e;
    resolve_slots(vertex_ids, e.slot_pos);
    e.obs = std::move(observation);
    e.data = std::move(data);
    e.loss = loss;
    if (information == nullptr) {
      e.identity_info = true;
      for (int i = 0; i < kResDim; ++i)
        for (int j = 0; j < kResDim; ++j) e.info[i * kResDim + j] = (i == j) ? FP(1) : FP(0);
    } else {
      e.identity_info = false;
      for (int i = 0; i < kResDim * kResDim; ++i) e.info[i] = information[i];
    }
    e.level = 0;
    entries_.push_back(std::move(e));
    ++revision_;
  }

  std::size_t size() const override { return entries_.size(); }
  std::size_t active_count() const override { return active_.size(); }
  int residual_dimension() const override { return kResDim; }
  int arity() const override { return static_cast<int>(kArity); }

  std::uint8_t level_at(std::size_t index) const override {
    check_index(index);
    return entries_[index].level;
  }

  void set_level(std::size_t index, std::uint8_t level) override {
    check_index(index);
    entries_[index].level = level;
    ++revision_;
  }

  DifferentiationMode differentiation_mode() const override { return mode_; }

  void set_differentiation_mode(DifferentiationMode mode) override {
    if (mode == DifferentiationMode::Analytic && !kHasAnalytic)
      throw std::invalid_argument("factor type has no analytic jacobian");
    mode_ = mode;
    ++revision_;
  }

  std::uint64_t revision() const override { return revision_; }

  std::vector<const void*> slot_descriptor_ids() const override {
    std::vector<const void*> out;
    std::apply([&](auto*... d) { (out.push_back(static_cast<const void*>(d)), ...); }, slots_);
    return out;
  }

  const Observation& observation_at(std::size_t index) const { return entries_[index].obs; }
  std::span<const FP> information_at(std::size_t index) const {
    return {entries_[index].info.data(), static_cast<std::size_t>(kResDim * kResDim)};
  }
  const LossParams<FP>& loss_at(std::size_t index) const { return entries_[index].loss; }
  std::uint32_t slot_position_at(std::size_t index, std::size_t slot) const {
    return entries_[index].slot_pos[slot];
  }

  void activate(int level) override {
    active_.clear();
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (static_cast<int>(entries_[i].level) <= level) active_.push_back(static_cast<std::uint32_t>(i));
    const std::size_t n = active_.size();
    weights_.assign(n, FP(1));
    wresid_.assign(n * kResDim, FP(0));
    chi_terms_.assign(n, FP(0));
    q_.assign(n * kResDim, Arith(0));
    if (mode_ == DifferentiationMode::Dynamic) {
      jblocks_.clear();
      jblocks_.shrink_to_fit();
    } else {
      jblocks_.assign(n * static_cast<std::size_t>(kResDim) * kSumDims, SP{});
    }
    build_incidence();
  }

  FP linearize(int workers) override {
    const std::size_t store_elems =
        mode_ == DifferentiationMode::Dynamic
            ? 0
            : active_.size() * static_cast<std::size_t>(kResDim) * kSumDims;
    if (jblocks_.size() != store_elems) jblocks_.assign(store_elems, SP{});
    parallel_for(active_.size(), workers, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t a = lo; a < hi; ++a) {
        const Entry& e = entries_[active_[a]];
        std::array<FP, kResDim> r;
        eval_residual(e, r.data());
        const FP s = weighted_square(e, r.data());
        const FP w = loss_weight(e.loss, s);
        chi_terms_[a] = loss_value(e.loss, s);
        weights_[a] = w;
        apply_info(e, r.data(), &wresid_[a * kResDim], w);
        if (mode_ != DifferentiationMode::Dynamic) store_jacobians(e, a);
      }
    });
    return sum_terms(chi_terms_);
  }

  FP evaluate_chi2(int workers) override {
    cand_terms_.resize(active_.size());
    parallel_for(active_.size(), workers, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t a = lo; a < hi; ++a) {
        const Entry& e = entries_[active_[a]];
        std::array<FP, kResDim> r;
        eval_residual(e, r.data());
        cand_terms_[a] = loss_value(e.loss, weighted_square(e, r.data()));
      }
    });
    return sum_terms(cand_terms_);
  }

  FP raw_residual_sqnorm(int workers) override {
    cand_terms_.resize(active_.size());
    parallel_for(active_.size(), workers, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t a = lo; a < hi; ++a) {
        const Entry& e = entries_[active_[a]];
        std::array<FP, kResDim> r;
        eval_residual(e, r.data());
        FP s = FP(0);
        for (int i = 0; i < kResDim; ++i) s += r[i] * r[i];
        cand_terms_[a] = s;
      }
    });
    return sum_terms(cand_terms_);
  }

  void accumulate_gradient_and_diagonal(std::span<FP> b, std::span<FP> diag,
                                        int workers) const override {
    for (const auto& inc : incidence_) {
      parallel_for(inc.vertex_of_segment.size(), workers, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t seg = lo; seg < hi; ++seg) {
          const std::size_t vtx = inc.vertex_of_segment[seg];
          const std::int64_t col = inc.vd->column_at(vtx);
          const int dim = inc.vd->block_dimension();
          for (std::size_t k = inc.offsets[seg]; k < inc.offsets[seg + 1];) {
            const std::uint32_t a = inc.items[k].first;
            const Entry& e = entries_[active_[a]];
            // group all slots of this factor that land on this vertex
            std::size_t k_end = k;
            while (k_end < inc.offsets[seg + 1] && inc.items[k_end].first == a) ++k_end;
            std::array<FP, kResDim * kMaxSlotDim> colsum{};
            for (std::size_t kk = k; kk < k_end; ++kk)
              add_block_fp(a, inc.items[kk].second, e, colsum.data(), dim);
            // b += J^T (w Omega r): linear in the summed block
            const FP* wr = &wresid_[a * kResDim];
            for (int c = 0; c < dim; ++c) {
              FP acc = FP(0);
              for (int row = 0; row < kResDim; ++row) acc += colsum[row * dim + c] * wr[row];
              b[static_cast<std::size_t>(col) + c] += acc;
            }
            // diag += w * diag(J^T Omega J) over the summed block
            const FP w = weights_[a];
            for (int c = 0; c < dim; ++c) {
              FP acc = FP(0);
              if (e.identity_info) {
                for (int row = 0; row < kResDim; ++row) {
                  const FP j = colsum[row * dim + c];
                  acc += j * j;
                }
              } else {
                for (int row = 0; row < kResDim; ++row) {
                  FP omega_j = FP(0);
                  for (int rr = 0; rr < kResDim; ++rr)
                    omega_j += e.info[row * kResDim + rr] * colsum[rr * dim + c];
                  acc += colsum[row * dim + c] * omega_j;
                }
              }
              diag[static_cast<std::size_t>(col) + c] += w * acc;
            }
            k = k_end;
          }
        }
      });
    }
  }

  void hvp_forward(std::span<const SP> v, std::span<const FP> scaling, int workers) override {
    parallel_for(active_.size(), workers, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t a = lo; a < hi; ++a) {
        const Entry& e = entries_[active_[a]];
        std::array<Arith, kResDim> u{};
        for_each_slot([&]<std::size_t S>(std::integral_constant<std::size_t, S>) {
          const auto* vd = std::get<S>(slots_);
          const std::int64_t col = vd->column_at(e.slot_pos[S]);
          if (col == kFixedColumn) return;
          constexpr int dim = kSlotDims[S];
          std::array<Arith, kMaxSlotDim> vt;
          for (int c = 0; c < dim; ++c)
            vt[c] = static_cast<Arith>(scaling[static_cast<std::size_t>(col) + c]) *
                    widen<Arith>(v[static_cast<std::size_t>(col) + c]);
          std::array<Arith, kResDim * kMaxSlotDim> jb;
          load_block<S>(a, e, jb.data());
          for (int row = 0; row < kResDim; ++row) {
            Arith acc = Arith(0);
            for (int c = 0; c < dim; ++c) acc += jb[row * dim + c] * vt[c];
            u[row] += acc;
          }
        });
        const Arith w = static_cast<Arith>(weights_[a]);
        Arith* q = &q_[a * kResDim];
        if (e.identity_info) {
          for (int row = 0; row < kResDim; ++row) q[row] = w * u[row];
        } else {
          for (int row = 0; row < kResDim; ++row) {
            Arith acc = Arith(0);
            for (int c = 0; c < kResDim; ++c) acc += static_cast<Arith>(e.info[row * kResDim + c]) * u[c];
            q[row] = w * acc;
          }
        }
      }
    });
  }

  void hvp_scatter(std::span<Arith> out, std::span<const FP> scaling, int workers) const override {
    for (const auto& inc : incidence_) {
      parallel_for(inc.vertex_of_segment.size(), workers, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t seg = lo; seg < hi; ++seg) {
          const std::size_t vtx = inc.vertex_of_segment[seg];
          const std::int64_t col = inc.vd->column_at(vtx);
          const int dim = inc.vd->block_dimension();
          for (std::size_t k = inc.offsets[seg]; k < inc.offsets[seg + 1]; ++k) {
            const std::uint32_t a = inc.items[k].first;
            const std::uint16_t slot = inc.items[k].second;
            const Entry& e = entries_[active_[a]];
            std::array<Arith, kResDim * kMaxSlotDim> jb;
            load_block_dyn(a, slot, e, jb.data());
            const Arith* q = &q_[a * kResDim];
            for (int c = 0; c < dim; ++c) {
              Arith acc = Arith(0);
              for (int row = 0; row < kResDim; ++row) acc += jb[row * dim + c] * q[row];
              out[static_cast<std::size_t>(col) + c] +=
                  static_cast<Arith>(scaling[static_cast<std::size_t>(col) + c]) * acc;
            }
          }
        }
      });
    }
  }

  void accumulate_precond_blocks(const PrecondLayout<FP, SP>& layout, std::span<const FP> scaling,
                                 int workers) const override {
    for (const auto& inc : incidence_) {
      const auto& seg_layout = layout.segment_of(inc.vd);
      parallel_for(inc.vertex_of_segment.size(), workers, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t seg = lo; seg < hi; ++seg) {
          const std::size_t vtx = inc.vertex_of_segment[seg];
          const std::int64_t col = inc.vd->column_at(vtx);
          const int dim = inc.vd->block_dimension();
          FP* block = layout.blocks.data() + PrecondLayout<FP, SP>::block_offset(seg_layout, col);
          for (std::size_t k = inc.offsets[seg]; k < inc.offsets[seg + 1];) {
            const std::uint32_t a = inc.items[k].first;
            const Entry& e = entries_[active_[a]];
            std::size_t k_end = k;
            while (k_end < inc.offsets[seg + 1] && inc.items[k_end].first == a) ++k_end;
            std::array<FP, kResDim * kMaxSlotDim> colsum{};
            for (std::size_t kk = k; kk < k_end; ++kk)
              add_block_fp(a, inc.items[kk].second, e, colsum.data(), dim);
            // scale columns: J~ = J * diag(D)
            for (int row = 0; row < kResDim; ++row)
              for (int c = 0; c < dim; ++c)
                colsum[row * dim + c] *= scaling[static_cast<std::size_t>(col) + c];
            const FP w = weights_[a];
            std::array<FP, kResDim * kMaxSlotDim> omega_cs;
            if (e.identity_info) {
              for (int i = 0; i < kResDim * dim; ++i) omega_cs[i] = colsum[i];
            } else {
              for (int row = 0; row < kResDim; ++row)
                for (int c = 0; c < dim; ++c) {
                  FP acc = FP(0);
                  for (int rr = 0; rr < kResDim; ++rr)
                    acc += e.info[row * kResDim + rr] * colsum[rr * dim + c];
                  omega_cs[row * dim + c] = acc;
                }
            }
            for (int i = 0; i < dim; ++i)
              for (int j = 0; j < dim; ++j) {
                FP acc = FP(0);
                for (int row = 0; row < kResDim; ++row)
                  acc += colsum[row * dim + i] * omega_cs[row * dim + j];
                block[i * dim + j] += w * acc;
              }
            k = k_end;
          }
        }
      });
    }
  }

  std::size_t jacobian_store_bytes() const override {
    if (mode_ == DifferentiationMode::Dynamic) return 0;
    return active_.size() * static_cast<std::size_t>(kResDim) * kSumDims * sizeof(SP);
  }

  std::size_t workspace_bytes() const override {
    return active_.size() * ((2 + kResDim) * sizeof(FP) + kResDim * sizeof(Arith));
  }

  std::size_t graph_bytes() const override {
    return entries_.size() * (kArity * sizeof(std::uint32_t) + sizeof(Observation) +
                              sizeof(ConstantData) + kResDim * kResDim * sizeof(FP) +
                              sizeof(LossParams<FP>) + 1);
  }

  // --- per-factor evaluation helpers (also the unit-test surface) ---

  /// Raw residual of one factor at the current parameters.
  void residual_of(std::size_t index, std::span<FP> out) const {
    check_index(index);
    eval_residual(entries_[index], out.data());
  }

  /// Jacobian block via per-column dual-number differentiation.
  void jacobian_auto_of(std::size_t index, std::size_t slot, FP* out) const {
    check_index(index);
    jacobian_slot_dispatch</*Analytic=*/false>(entries_[index], slot, out);
  }

  /// Jacobian block via the factor type's closed form.
  void jacobian_analytic_of(std::size_t index, std::size_t slot, FP* out) const {
    check_index(index);
    if constexpr (!kHasAnalytic)
      throw std::logic_error("factor type has no analytic jacobian");
    else
      jacobian_slot_dispatch</*Analytic=*/true>(entries_[index], slot, out);
  }

 private:
  struct Entry {
    std::array<std::uint32_t, kArity> slot_pos;
    Observation obs;
    ConstantData data;
    LossParams<FP> loss;
    std::array<FP, kResDim * kResDim> info;
    bool identity_info;
    std::uint8_t level;
  };

  /// Per-vertex incidence of one referenced vertex descriptor: segments over
  /// free vertices, items (active factor index, slot) in fixed (factor, slot)
  /// order. Drives all deterministic segmented reductions.
  struct Incidence {
    VertexDescriptorBase<FP, SP>* vd;
    std::vector<std::size_t> vertex_of_segment;
    std::vector<std::size_t> offsets;  // CSR over segments
    std::vector<std::pair<std::uint32_t, std::uint16_t>> items;
  };

  void check_index(std::size_t index) const {
    if (index >= entries_.size())
      throw std::out_of_range("factor index " + std::to_string(index) + " out of range (size " +
                              std::to_string(entries_.size()) + ")");
  }

  void resolve_slots(const std::array<std::uint64_t, kArity>& ids,
                     std::array<std::uint32_t, kArity>& out) const {
    for_each_slot([&]<std::size_t S>(std::integral_constant<std::size_t, S>) {
      auto pos = std::get<S>(slots_)->try_position(ids[S]);
      if (!pos)
        throw std::invalid_argument("add_factor: slot " + std::to_string(S) +
                                    " references unknown vertex id " + std::to_string(ids[S]));
      out[S] = static_cast<std::uint32_t>(*pos);
    });
  }

  template <typename Fn>
  static void for_each_slot(Fn&& fn) {
    [&]<std::size_t... Is>(std::index_sequence<Is...>) {
      (fn(std::integral_constant<std::size_t, Is>{}), ...);
    }(std::make_index_sequence<kArity>{});
  }

  template <typename T>
  void stack_params(const Entry& e, T* buf, std::array<const T*, kArity>& ptrs) const {
    for_each_slot([&]<std::size_t S>(std::integral_constant<std::size_t, S>) {
      using VD = std::tuple_element_t<S, SlotDescs>;
      auto block = VD::TraitsType::parameters(std::get<S>(slots_)->vertex_at(e.slot_pos[S]));
      for (int k = 0; k < kSlotDims[S]; ++k) buf[kPrefix[S] + k] = T(block[k]);
      ptrs[S] = buf + kPrefix[S];
    });
  }

  void eval_residual(const Entry& e, FP* out) const {
    std::array<FP, kSumDims> buf;
    std::array<const FP*, kArity> ptrs;
    stack_params(e, buf.data(), ptrs);
    Traits::residual(ptrs, e.obs, e.data, out);
  }

  FP weighted_square(const Entry& e, const FP* r) const {
    FP s = FP(0);
    if (e.identity_info) {
      for (int i = 0; i < kResDim; ++i) s += r[i] * r[i];
    } else {
      for (int i = 0; i < kResDim; ++i) {
        FP acc = FP(0);
        for (int j = 0; j < kResDim; ++j) acc += e.info[i * kResDim + j] * r[j];
        s += r[i] * acc;
      }
    }
    return s;
  }

  void apply_info(const Entry& e, const FP* r, FP* out, FP w) const {
    if (e.identity_info) {
      for (int i = 0; i < kResDim; ++i) out[i] = w * r[i];
    } else {
      for (int i = 0; i < kResDim; ++i) {
        FP acc = FP(0);
        for (int j = 0; j < kResDim; ++j) acc += e.info[i * kResDim + j] * r[j];
        out[i] = w * acc;
      }
    }
  }

  /// Column-by-column dual pass for slot S; residual recomputed per column.
  template <std::size_t S>
  void jacobian_auto_slot(const Entry& e, FP* out) const {
    std::array<Dual<FP>, kSumDims> buf;
    std::array<const Dual<FP>*, kArity> ptrs;
    stack_params(e, buf.data(), ptrs);
    constexpr int dim = kSlotDims[S];
    for (int c = 0; c < dim; ++c) {
      for (int k = 0; k < kSumDims; ++k) buf[k].deriv = FP(0);
      buf[kPrefix[S] + c].deriv = FP(1);
      std::array<Dual<FP>, kResDim> r;
      Traits::residual(ptrs, e.obs, e.data, r.data());
      for (int row = 0; row < kResDim; ++row) out[row * dim + c] = r[row].deriv;
    }
  }

  template <std::size_t S>
  void jacobian_analytic_slot(const Entry& e, FP* out) const {
    std::array<FP, kSumDims> buf;
    std::array<const FP*, kArity> ptrs;
    stack_params(e, buf.data(), ptrs);
    Traits::template jacobian<S>(ptrs, e.obs, e.data, out);
  }

  template <bool Analytic>
  void jacobian_slot_dispatch(const Entry& e, std::size_t slot, FP* out) const {
    bool handled = false;
    for_each_slot([&]<std::size_t S>(std::integral_constant<std::size_t, S>) {
      if (S != slot) return;
      handled = true;
      if constexpr (Analytic) {
        if constexpr (kHasAnalytic) jacobian_analytic_slot<S>(e, out);
      } else {
        jacobian_auto_slot<S>(e, out);
      }
    });
    if (!handled) throw std::out_of_range("slot index out of range");
  }

  /// Evaluates slot S's block at graph precision with the descriptor's
  /// differentiation rule (analytic preferred, dual fallback).
  template <std::size_t S>
  void eval_block_fp(const Entry& e, FP* out) const {
    if constexpr (kHasAnalytic) {
      if (mode_ != DifferentiationMode::Auto) {
        jacobian_analytic_slot<S>(e, out);
        return;
      }
    }
    jacobian_auto_slot<S>(e, out);
  }

  void store_jacobians(const Entry& e, std::size_t a) {
    SP* base = &jblocks_[a * static_cast<std::size_t>(kResDim) * kSumDims];
    for_each_slot([&]<std::size_t S>(std::integral_constant<std::size_t, S>) {
      std::array<FP, kResDim * kMaxSlotDim> tmp;
      eval_block_fp<S>(e, tmp.data());
      SP* dst = base + kResDim * kPrefix[S];
      for (int i = 0; i < kResDim * kSlotDims[S]; ++i) dst[i] = narrow<SP>(tmp[i]);
    });
  }

  /// Loads the (factor, slot) block widened to Arith; Dynamic re-evaluates.
  template <std::size_t S>
  void load_block(std::size_t a, const Entry& e, Arith* out) const {
    constexpr int n = kResDim * kSlotDims[S];
    if (mode_ == DifferentiationMode::Dynamic) {
      std::array<FP, kResDim * kMaxSlotDim> tmp;
      eval_block_fp<S>(e, tmp.data());
      for (int i = 0; i < n; ++i) out[i] = static_cast<Arith>(tmp[i]);
    } else {
      const SP* src = &jblocks_[a * static_cast<std::size_t>(kResDim) * kSumDims + kResDim * kPrefix[S]];
      for (int i = 0; i < n; ++i) out[i] = widen<Arith>(src[i]);
    }
  }

  void load_block_dyn(std::size_t a, std::size_t slot, const Entry& e, Arith* out) const {
    for_each_slot([&]<std::size_t S>(std::integral_constant<std::size_t, S>) {
      if (S == slot) load_block<S>(a, e, out);
    });
  }

  /// Adds the (factor, slot) block at graph precision into a row-major
  /// accumulator with leading dimension `dim`.
  void add_block_fp(std::size_t a, std::size_t slot, const Entry& e, FP* acc, int dim) const {
    for_each_slot([&]<std::size_t S>(std::integral_constant<std::size_t, S>) {
      if (S != slot) return;
      std::array<FP, kResDim * kMaxSlotDim> tmp;
      if (mode_ == DifferentiationMode::Dynamic) {
        eval_block_fp<S>(e, tmp.data());
      } else {
        const SP* src =
            &jblocks_[a * static_cast<std::size_t>(kResDim) * kSumDims + kResDim * kPrefix[S]];
        for (int i = 0; i < kResDim * kSlotDims[S]; ++i) tmp[i] = widen<FP>(src[i]);
      }
      for (int row = 0; row < kResDim; ++row)
        for (int c = 0; c < kSlotDims[S]; ++c) acc[row * dim + c] += tmp[row * kSlotDims[S] + c];
    });
  }

  void build_incidence() {
    incidence_.clear();
    // one incidence per distinct referenced vertex descriptor
    std::vector<VertexDescriptorBase<FP, SP>*> distinct;
    for_each_slot([&]<std::size_t S>(std::integral_constant<std::size_t, S>) {
      VertexDescriptorBase<FP, SP>* vd = std::get<S>(slots_);
      for (auto* d : distinct)
        if (d == vd) return;
      distinct.push_back(vd);
    });
    for (auto* vd : distinct) {
      Incidence inc;
      inc.vd = vd;
      std::vector<std::uint32_t> counts(vd->size(), 0);
      for_each_slot([&]<std::size_t S>(std::integral_constant<std::size_t, S>) {
        if (static_cast<VertexDescriptorBase<FP, SP>*>(std::get<S>(slots_)) != vd) return;
        for (std::uint32_t a = 0; a < active_.size(); ++a) {
          const std::size_t vtx = entries_[active_[a]].slot_pos[S];
          if (!vd->fixed_at(vtx)) ++counts[vtx];
        }
      });
      std::vector<std::size_t> vertex_segment(vd->size(), SIZE_MAX);
      for (std::size_t v = 0; v < counts.size(); ++v) {
        if (counts[v] == 0) continue;
        vertex_segment[v] = inc.vertex_of_segment.size();
        inc.vertex_of_segment.push_back(v);
      }
      inc.offsets.assign(inc.vertex_of_segment.size() + 1, 0);
      for (std::size_t seg = 0; seg < inc.vertex_of_segment.size(); ++seg)
        inc.offsets[seg + 1] = inc.offsets[seg] + counts[inc.vertex_of_segment[seg]];
      inc.items.resize(inc.offsets.back());
      std::vector<std::size_t> cursor(inc.offsets.begin(), inc.offsets.end() - 1);
      // fill in (factor, slot) order so each segment is sorted
      for (std::uint32_t a = 0; a < active_.size(); ++a) {
        for_each_slot([&]<std::size_t S>(std::integral_constant<std::size_t, S>) {
          if (static_cast<VertexDescriptorBase<FP, SP>*>(std::get<S>(slots_)) != vd) return;
          const std::size_t vtx = entries_[active_[a]].slot_pos[S];
          if (vd->fixed_at(vtx)) return;
          inc.items[cursor[vertex_segment[vtx]]++] = {a, static_cast<std::uint16_t>(S)};
        });
      }
      incidence_.push_back(std::move(inc));
    }
  }

  static FP sum_terms(const std::vector<FP>& terms) {
    FP s = FP(0);
    for (FP t : terms) s += t;
    return s;
  }

  SlotPtrs slots_;
  std::vector<Entry> entries_;
  DifferentiationMode mode_ = DifferentiationMode::Auto;
  std::uint64_t revision_ = 0;

  std::vector<std::uint32_t> active_;
  std::vector<FP> weights_;
  std::vector<FP> wresid_;
  std::vector<FP> chi_terms_;
  std::vector<FP> cand_terms_;
  std::vector<Arith> q_;
  std::vector<SP> jblocks_;
  std::vector<Incidence> incidence_;
};

}  // namespace gopt
