#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "gopt/graph.hpp"

namespace gopt::toy {

/// 2D point vertex with additive update.
template <typename FP, typename SP>
struct PointTraits {
  static constexpr int dimension = 2;
  using Vertex = std::array<FP, 2>;

  static std::array<FP, 2> parameters(const Vertex& v) { return v; }
  static void update(Vertex& v, const FP* delta) {
    v[0] += delta[0];
    v[1] += delta[1];
  }
  static void set_parameters(Vertex& v, const FP* block) {
    v[0] = block[0];
    v[1] = block[1];
  }
};

template <typename FP, typename SP>
using PointDescriptor = VertexDescriptor<FP, SP, PointTraits<FP, SP>>;

/// Distance-from-circumference constraint: e = x^2 + y^2 - r^2 for a circle
/// of radius r centered at the origin.
template <typename FP, typename SP>
struct CircleFactorTraits {
  static constexpr int residual_dimension = 1;
  using SlotDescriptors = std::tuple<PointDescriptor<FP, SP>>;
  using Observation = FP;           // the radius
  using ConstantData = std::uint8_t;  // unused

  template <typename T>
  static void residual(const std::array<const T*, 1>& params, const Observation& radius,
                       const ConstantData&, T* error) {
    const T x = params[0][0];
    const T y = params[0][1];
    error[0] = x * x + y * y - radius * radius;
  }

  template <std::size_t Slot>
  static void jacobian(const std::array<const FP*, 1>& params, const Observation&,
                       const ConstantData&, FP* out) {
    static_assert(Slot == 0);
    out[0] = FP(2) * params[0][0];
    out[1] = FP(2) * params[0][1];
  }
};

template <typename FP, typename SP>
using CircleFactor = FactorDescriptor<FP, SP, CircleFactorTraits<FP, SP>>;

/// Owns the points and descriptors of one circle-fitting instance.
template <typename FP, typename SP>
struct CircleProblem {
  std::vector<std::array<FP, 2>> points;
  std::unique_ptr<PointDescriptor<FP, SP>> point_desc;
  std::unique_ptr<CircleFactor<FP, SP>> factor_desc;
  Graph<FP, SP> graph;
};

/// Deterministic standard-normal sampler (Box-Muller over mt19937_64), so
/// generated problems are identical across standard libraries.
class NormalSampler {
 public:
  explicit NormalSampler(std::uint64_t seed) : rng_(seed) {}

  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return mag * std::cos(2.0 * M_PI * u2);
  }

  double uniform() {  // in (0, 1]
    return (static_cast<double>(rng_() >> 11) + 1.0) * 0x1.0p-53;
  }

 private:
  std::mt19937_64 rng_;
  double spare_ = 0;
  bool have_spare_ = false;
};

/// n noisy points sampled on the circle of the given radius, one constraint
/// per point. Optionally fixes the last vertex and moves the third
/// constraint to level 1 so it drops out of a level-0 pass.
template <typename FP, typename SP>
std::unique_ptr<CircleProblem<FP, SP>> generate_circle_problem(std::size_t n, double radius,
                                                               double noise_sigma,
                                                               std::uint64_t seed,
                                                               bool fix_last = false,
                                                               bool level_demo = false) {
  auto prob = std::make_unique<CircleProblem<FP, SP>>();
  NormalSampler sampler(seed);
  prob->points.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double angle = 2.0 * M_PI * sampler.uniform();
    prob->points[i] = {FP(radius * std::cos(angle) + noise_sigma * sampler.next()),
                       FP(radius * std::sin(angle) + noise_sigma * sampler.next())};
  }
  prob->point_desc = std::make_unique<PointDescriptor<FP, SP>>();
  prob->point_desc->reserve(n);
  prob->graph.add_vertex_descriptor(prob->point_desc.get());
  for (std::size_t i = 0; i < n; ++i) prob->point_desc->add_vertex(i, &prob->points[i]);

  prob->factor_desc = std::make_unique<CircleFactor<FP, SP>>(prob->point_desc.get());
  prob->factor_desc->reserve(n);
  prob->graph.add_factor_descriptor(prob->factor_desc.get());
  const auto loss = LossParams<FP>::Default();
  for (std::size_t i = 0; i < n; ++i)
    prob->factor_desc->add_factor({i}, FP(radius), nullptr, 0, loss);

  if (fix_last && n > 0) prob->point_desc->set_fixed(n - 1, true);
  if (level_demo && n > 2) prob->factor_desc->set_level(2, 1);
  return prob;
}

}  // namespace gopt::toy
