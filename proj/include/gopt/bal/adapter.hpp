#pragma once

#include <array>
#include <memory>
#include <optional>
#include <vector>

#include "gopt/bal/problem.hpp"
#include "gopt/bal/snavely.hpp"
#include "gopt/graph.hpp"

namespace gopt::bal {

/// 9-parameter camera with plain additive update (angle-axis composition by
/// addition, the standard BAL convention).
template <typename FP, typename SP>
struct CameraTraits {
  static constexpr int dimension = 9;
  using Vertex = std::array<FP, 9>;

  static std::array<FP, 9> parameters(const Vertex& v) { return v; }
  static void update(Vertex& v, const FP* delta) {
    for (int i = 0; i < 9; ++i) v[i] += delta[i];
  }
  static void set_parameters(Vertex& v, const FP* block) {
    for (int i = 0; i < 9; ++i) v[i] = block[i];
  }
};

template <typename FP, typename SP>
struct Point3Traits {
  static constexpr int dimension = 3;
  using Vertex = std::array<FP, 3>;

  static std::array<FP, 3> parameters(const Vertex& v) { return v; }
  static void update(Vertex& v, const FP* delta) {
    for (int i = 0; i < 3; ++i) v[i] += delta[i];
  }
  static void set_parameters(Vertex& v, const FP* block) {
    for (int i = 0; i < 3; ++i) v[i] = block[i];
  }
};

template <typename FP, typename SP>
using CameraDescriptor = VertexDescriptor<FP, SP, CameraTraits<FP, SP>>;
template <typename FP, typename SP>
using Point3Descriptor = VertexDescriptor<FP, SP, Point3Traits<FP, SP>>;

/// Pixel reprojection constraint: residual = predicted - observed, 2
/// components, one camera slot and one point slot.
template <typename FP, typename SP>
struct ReprojectionTraits {
  static constexpr int residual_dimension = 2;
  using SlotDescriptors = std::tuple<CameraDescriptor<FP, SP>, Point3Descriptor<FP, SP>>;
  using Observation = std::array<FP, 2>;
  using ConstantData = std::uint8_t;  // unused

  template <typename T>
  static void residual(const std::array<const T*, 2>& params, const Observation& observed,
                       const ConstantData&, T* error) {
    T predicted[2];
    snavely_project<FP>(params[0], params[1], predicted);
    error[0] = predicted[0] - observed[0];
    error[1] = predicted[1] - observed[1];
  }

  template <std::size_t Slot>
  static void jacobian(const std::array<const FP*, 2>& params, const Observation&,
                       const ConstantData&, FP* out) {
    if constexpr (Slot == 0)
      snavely_camera_jacobian(params[0], params[1], out);
    else
      snavely_point_jacobian(params[0], params[1], out);
  }
};

template <typename FP, typename SP>
using ReprojectionFactor = FactorDescriptor<FP, SP, ReprojectionTraits<FP, SP>>;

/// The optimizable graph of one BAL problem. Owns the variables in
/// contiguous arrays; the solver refines them in place.
template <typename FP, typename SP>
struct BalGraph {
  std::vector<std::array<FP, 9>> cameras;
  std::vector<std::array<FP, 3>> points;
  std::unique_ptr<CameraDescriptor<FP, SP>> camera_desc;
  std::unique_ptr<Point3Descriptor<FP, SP>> point_desc;
  std::unique_ptr<ReprojectionFactor<FP, SP>> factor_desc;
  Graph<FP, SP> graph;
  std::size_t num_observations = 0;

  /// Mean squared reprojection error: sum of raw (unweighted, loss-free)
  /// squared residual norms over observations, divided by the observation
  /// count.
  FP mse() {
    graph.ensure_activated(0);
    if (num_observations == 0) return FP(0);
    return factor_desc->raw_residual_sqnorm(graph.workers()) / FP(num_observations);
  }
};

/// Builds the camera/point/reprojection descriptors for a parsed problem.
/// Values narrow from binary64 to graph precision here. Every factor gets
/// identity information and level 0; an optional Huber delta applies the
/// robust kernel to every observation.
template <typename FP, typename SP>
std::unique_ptr<BalGraph<FP, SP>> build_graph(const BALProblem& problem,
                                              DifferentiationMode mode,
                                              std::optional<double> huber_delta = std::nullopt) {
  auto bg = std::make_unique<BalGraph<FP, SP>>();
  bg->num_observations = problem.num_observations();

  bg->cameras.resize(problem.num_cameras());
  for (std::size_t c = 0; c < problem.num_cameras(); ++c)
    for (int k = 0; k < 9; ++k) bg->cameras[c][k] = static_cast<FP>(problem.cameras[c][k]);
  bg->points.resize(problem.num_points());
  for (std::size_t p = 0; p < problem.num_points(); ++p)
    for (int k = 0; k < 3; ++k) bg->points[p][k] = static_cast<FP>(problem.points[p][k]);

  bg->camera_desc = std::make_unique<CameraDescriptor<FP, SP>>();
  bg->camera_desc->reserve(bg->cameras.size());
  bg->graph.add_vertex_descriptor(bg->camera_desc.get());
  for (std::size_t c = 0; c < bg->cameras.size(); ++c)
    bg->camera_desc->add_vertex(c, &bg->cameras[c]);

  bg->point_desc = std::make_unique<Point3Descriptor<FP, SP>>();
  bg->point_desc->reserve(bg->points.size());
  bg->graph.add_vertex_descriptor(bg->point_desc.get());
  for (std::size_t p = 0; p < bg->points.size(); ++p)
    bg->point_desc->add_vertex(p, &bg->points[p]);

  bg->factor_desc =
      std::make_unique<ReprojectionFactor<FP, SP>>(bg->camera_desc.get(), bg->point_desc.get());
  bg->factor_desc->reserve(problem.num_observations());
  bg->factor_desc->set_differentiation_mode(mode);
  bg->graph.add_factor_descriptor(bg->factor_desc.get());
  const auto loss = huber_delta ? LossParams<FP>::Huber(static_cast<FP>(*huber_delta))
                                : LossParams<FP>::Default();
  for (const auto& obs : problem.observations)
    bg->factor_desc->add_factor({obs.camera_index, obs.point_index},
                                {static_cast<FP>(obs.x), static_cast<FP>(obs.y)}, nullptr, 0, loss);
  return bg;
}

}  // namespace gopt::bal
