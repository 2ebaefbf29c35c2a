#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "gopt/parallel.hpp"
#include "gopt/precision.hpp"

namespace gopt {

inline constexpr std::int64_t kFixedColumn = -1;

/// Type-erased surface of a homogeneous vertex batch. One virtual call per
/// batch operation; the per-item loops live in the typed descriptor.
template <typename FP, typename SP>
class VertexDescriptorBase {
 public:
  virtual ~VertexDescriptorBase() = default;

  virtual std::size_t size() const = 0;
  virtual int block_dimension() const = 0;
  virtual std::size_t free_count() const = 0;
  virtual bool fixed_at(std::size_t index) const = 0;
  virtual std::int64_t column_at(std::size_t index) const = 0;
  /// Bumped by every structural edit; lets the graph detect stale activations.
  virtual std::uint64_t revision() const = 0;

  /// Assigns contiguous column offsets to free vertices in insertion order;
  /// returns the next unassigned column.
  virtual std::int64_t assign_columns(std::int64_t next) = 0;
  /// First column assigned to this descriptor (undefined when free_count()==0).
  virtual std::int64_t first_column() const = 0;

  virtual void gather_free(std::span<FP> global) const = 0;
  virtual void scatter_free(std::span<const FP> global) = 0;
  virtual void apply_step(std::span<const FP> dx, int workers) = 0;
  virtual void read_block(std::size_t index, std::span<FP> out) const = 0;

  virtual std::size_t graph_bytes() const = 0;
};

/// Homogeneous batch of optimizable variables of one type. Traits supply the
/// storage type and the parameter-block access/update contract:
///
///   struct Traits {
///     static constexpr int dimension;
///     using Vertex = ...;
///     static std::array<FP, dimension> parameters(const Vertex&);
///     static void update(Vertex&, const FP* delta);          // in place
///     static void set_parameters(Vertex&, const FP* block);  // bit-exact restore
///   };
template <typename FP, typename SP, typename Traits>
class VertexDescriptor final : public VertexDescriptorBase<FP, SP> {
 public:
  using Vertex = typename Traits::Vertex;
  using TraitsType = Traits;
  static constexpr int kDim = Traits::dimension;
  static_assert(kDim >= 1);

  void reserve(std::size_t n) {
    entries_.reserve(n);
    index_.reserve(n);
  }

  void add_vertex(std::uint64_t vertex_id, Vertex* handle) {
    if (handle == nullptr) throw std::invalid_argument("add_vertex: null handle");
    auto [it, inserted] = index_.emplace(vertex_id, entries_.size());
    if (!inserted)
      throw std::invalid_argument("add_vertex: duplicate vertex id " + std::to_string(vertex_id));
    entries_.push_back(Entry{vertex_id, handle, false, kFixedColumn});
    ++revision_;
  }

  void set_fixed(std::uint64_t vertex_id, bool fixed) {
    entries_[position_of(vertex_id)].fixed = fixed;
    ++revision_;
  }

  bool is_fixed(std::uint64_t vertex_id) const { return entries_[position_of(vertex_id)].fixed; }

  /// Insertion position of a vertex id; throws for unknown ids.
  std::size_t position_of(std::uint64_t vertex_id) const {
    auto it = index_.find(vertex_id);
    if (it == index_.end())
      throw std::invalid_argument("unknown vertex id " + std::to_string(vertex_id));
    return it->second;
  }

  std::optional<std::size_t> try_position(std::uint64_t vertex_id) const {
    auto it = index_.find(vertex_id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const Vertex& vertex_at(std::size_t index) const { return *entries_[index].handle; }
  Vertex& mutable_vertex_at(std::size_t index) { return *entries_[index].handle; }

  std::size_t size() const override { return entries_.size(); }
  int block_dimension() const override { return kDim; }
  bool fixed_at(std::size_t index) const override { return entries_[index].fixed; }
  std::int64_t column_at(std::size_t index) const override { return entries_[index].column; }
  std::uint64_t revision() const override { return revision_; }

  std::size_t free_count() const override {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.fixed ? 0 : 1;
    return n;
  }

  std::int64_t assign_columns(std::int64_t next) override {
    first_column_ = next;
    for (auto& e : entries_) {
      if (e.fixed) {
        e.column = kFixedColumn;
      } else {
        e.column = next;
        next += kDim;
      }
    }
    return next;
  }

  std::int64_t first_column() const override { return first_column_; }

  void gather_free(std::span<FP> global) const override {
    for (const auto& e : entries_) {
      if (e.fixed) continue;
      auto block = Traits::parameters(*e.handle);
      for (int k = 0; k < kDim; ++k) global[static_cast<std::size_t>(e.column) + k] = block[k];
    }
  }

  void scatter_free(std::span<const FP> global) override {
    for (auto& e : entries_) {
      if (e.fixed) continue;
      Traits::set_parameters(*e.handle, global.data() + e.column);
    }
  }

  void apply_step(std::span<const FP> dx, int workers) override {
    parallel_for(entries_.size(), workers, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        auto& entry = entries_[i];
        if (entry.fixed) continue;
        Traits::update(*entry.handle, dx.data() + entry.column);
      }
    });
  }

  void read_block(std::size_t index, std::span<FP> out) const override {
    auto block = Traits::parameters(*entries_[index].handle);
    for (int k = 0; k < kDim; ++k) out[k] = block[k];
  }

  std::size_t graph_bytes() const override {
    // parameter block + id + handle + fixed flag + column offset per entry
    return entries_.size() * (kDim * sizeof(FP) + sizeof(std::uint64_t) + sizeof(void*) + 1 + sizeof(std::int64_t));
  }

 private:
  struct Entry {
    std::uint64_t id;
    Vertex* handle;
    bool fixed;
    std::int64_t column;
  };

  std::vector<Entry> entries_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  std::int64_t first_column_ = 0;
  std::uint64_t revision_ = 0;
};

}  // namespace gopt
