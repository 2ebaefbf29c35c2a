#include <array>
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "gopt/graph.hpp"
#include "gopt/toy/circle.hpp"
#include "oracles.hpp"

using gopt::toy::CircleFactor;
using gopt::toy::PointDescriptor;
using Point = std::array<double, 2>;

namespace {

struct CircleFixture {
  std::vector<Point> points;
  PointDescriptor<double, double> desc;
  CircleFactor<double, double> factors{&desc};
  gopt::Graph<double, double> graph;

  explicit CircleFixture(std::vector<Point> pts, double radius = 5.0) : points(std::move(pts)) {
    graph.add_vertex_descriptor(&desc);
    graph.add_factor_descriptor(&factors);
    for (std::size_t i = 0; i < points.size(); ++i) desc.add_vertex(i, &points[i]);
    for (std::size_t i = 0; i < points.size(); ++i)
      factors.add_factor({i}, radius, nullptr, 0, gopt::LossParams<double>::Default());
  }
};

}  // namespace

TEST_CASE("add_vertex defaults and ordering") {
  std::vector<Point> pts(4, Point{0, 0});
  PointDescriptor<double, double> desc;
  desc.add_vertex(0, &pts[0]);
  CHECK(desc.size() == 1);
  CHECK_FALSE(desc.fixed_at(0));

  for (std::uint64_t i = 1; i < 4; ++i) desc.add_vertex(i, &pts[i]);
  CHECK(desc.size() == 4);
  for (std::uint64_t i = 0; i < 4; ++i) CHECK(desc.position_of(i) == i);
}

TEST_CASE("add_vertex rejects duplicate ids naming the id") {
  std::vector<Point> pts(2, Point{0, 0});
  PointDescriptor<double, double> desc;
  desc.add_vertex(0, &pts[0]);
  CHECK_THROWS_WITH_AS(desc.add_vertex(0, &pts[1]), doctest::Contains("duplicate vertex id 0"),
                       std::invalid_argument);
}

TEST_CASE("add_factor stores identity information by default") {
  std::vector<Point> pts(5, Point{1, 1});
  PointDescriptor<double, double> desc;
  for (std::size_t i = 0; i < pts.size(); ++i) desc.add_vertex(i, &pts[i]);
  CircleFactor<double, double> factors(&desc);
  factors.add_factor({3}, 5.0, nullptr, 0, gopt::LossParams<double>::Default());
  auto info = factors.information_at(0);
  REQUIRE(info.size() == 1);
  CHECK(info[0] == 1.0);
}

TEST_CASE("add_factor keeps an explicit information matrix verbatim") {
  std::vector<Point> pts(2, Point{0, 0});
  PointDescriptor<double, double> desc;
  for (std::size_t i = 0; i < pts.size(); ++i) desc.add_vertex(i, &pts[i]);
  testutil::AnchorFactor<double, double> anchors(&desc);
  const double info[4] = {1.0, 0.0, 0.0, 1.0};
  anchors.add_factor({1}, {0.5, 0.5}, info, 0, gopt::LossParams<double>::Default());
  auto stored = anchors.information_at(0);
  for (int i = 0; i < 4; ++i) CHECK(stored[i] == info[i]);
}

TEST_CASE("add_factor rejects dangling vertex references naming the slot") {
  std::vector<Point> pts(2, Point{0, 0});
  PointDescriptor<double, double> desc;
  desc.add_vertex(0, &pts[0]);
  CircleFactor<double, double> factors(&desc);
  CHECK_THROWS_WITH_AS(
      factors.add_factor({7}, 1.0, nullptr, 0, gopt::LossParams<double>::Default()),
      doctest::Contains("slot 0 references unknown vertex id 7"), std::invalid_argument);
}

TEST_CASE("set_fixed excludes vertices from the free count") {
  CircleFixture fx({{1, 0}, {2, 0}, {3, 0}});
  fx.desc.set_fixed(2, true);
  auto plan = fx.graph.activate(0);
  CHECK(plan.total_free_dims == 4);

  // descriptor edits are detected without an explicit re-activation request
  fx.desc.set_fixed(2, false);
  CHECK(fx.graph.ensure_activated(0).total_free_dims == 6);

  for (std::uint64_t i = 0; i < 3; ++i) fx.desc.set_fixed(i, true);
  CHECK(fx.graph.ensure_activated(0).total_free_dims == 0);

  CHECK_THROWS_AS(fx.desc.set_fixed(99, true), std::invalid_argument);
}

TEST_CASE("set_level masks factors above the active level") {
  CircleFixture fx({{1, 0}, {2, 0}, {3, 0}, {4, 0}});
  fx.factors.set_level(2, 1);
  fx.graph.activate(0);

  // brute-force chi^2 over exactly the factors with level <= L
  auto brute_chi2 = [&](int level) {
    double chi = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      if (fx.factors.level_at(i) > level) continue;
      const double x = fx.points[i][0], y = fx.points[i][1];
      const double r = x * x + y * y - 25.0;
      chi += r * r;
    }
    return chi;
  };

  CHECK(fx.graph.total_error(0) == doctest::Approx(brute_chi2(0)).epsilon(1e-14));
  CHECK(fx.graph.total_error(1) == doctest::Approx(brute_chi2(1)).epsilon(1e-14));
  CHECK(fx.graph.total_error(0) != doctest::Approx(fx.graph.total_error(1)).epsilon(1e-14));

  SUBCASE("all factors at level 0 contribute at level 0") {
    fx.factors.set_level(2, 0);
    CHECK(fx.graph.activate(0).active_factors == 4);
  }

  CHECK_THROWS_AS(fx.factors.set_level(99, 0), std::out_of_range);
}

TEST_CASE("activate assigns contiguous offsets in registration then insertion order") {
  CircleFixture fx({{1, 0}, {2, 0}, {3, 0}});
  auto plan = fx.graph.activate(0);
  CHECK(plan.total_free_dims == 6);
  CHECK(fx.desc.column_at(0) == 0);
  CHECK(fx.desc.column_at(1) == 2);
  CHECK(fx.desc.column_at(2) == 4);

  SUBCASE("fixed middle vertex gets no column") {
    fx.desc.set_fixed(1, true);
    auto p = fx.graph.activate(0);
    CHECK(p.total_free_dims == 4);
    CHECK(fx.desc.column_at(0) == 0);
    CHECK(fx.desc.column_at(1) == gopt::kFixedColumn);
    CHECK(fx.desc.column_at(2) == 2);
  }

  SUBCASE("leveled-out factors drop out of the residual total") {
    CHECK(fx.graph.activate(0).total_residual_dims == 3);
    fx.factors.set_level(1, 1);
    CHECK(fx.graph.activate(0).total_residual_dims == 2);
  }
}

TEST_CASE("activate rejects factors referencing unregistered descriptors") {
  std::vector<Point> pts(1, Point{1, 1});
  PointDescriptor<double, double> desc;
  desc.add_vertex(0, &pts[0]);
  CircleFactor<double, double> factors(&desc);
  factors.add_factor({0}, 1.0, nullptr, 0, gopt::LossParams<double>::Default());
  gopt::Graph<double, double> graph;
  graph.add_factor_descriptor(&factors);
  CHECK_THROWS_AS(graph.activate(0), std::logic_error);
}

TEST_CASE("circle residual examples") {
  CircleFixture on5({{3, 4}}, 5.0);
  double r = -1;
  on5.factors.residual_of(0, {&r, 1});
  CHECK(r == 0.0);

  CircleFixture off1({{2, 0}}, 1.0);
  off1.factors.residual_of(0, {&r, 1});
  CHECK(r == 3.0);

  CircleFixture center({{0, 0}}, 2.0);
  center.factors.residual_of(0, {&r, 1});
  CHECK(r == -4.0);
}

TEST_CASE("residual evaluation is pure and bit-identical") {
  auto tg = testutil::make_random_graph(17);
  tg->graph.activate(tg->active_level);
  const double chi_a = tg->graph.total_error_active();
  const double chi_b = tg->graph.total_error_active();
  CHECK(std::memcmp(&chi_a, &chi_b, sizeof(double)) == 0);
}

TEST_CASE("total_error examples") {
  SUBCASE("all points on the circumference") {
    CircleFixture fx({{5, 0}, {0, 5}, {-5, 0}, {3, 4}});
    CHECK(fx.graph.total_error(0) == 0.0);
  }
  SUBCASE("single residual 3 with default loss") {
    CircleFixture fx({{2, 0}}, 1.0);  // r = 3
    CHECK(fx.graph.total_error(0) == 9.0);
  }
  SUBCASE("single residual 3 with Huber delta 1") {
    std::vector<Point> pts{{2, 0}};
    PointDescriptor<double, double> desc;
    desc.add_vertex(0, &pts[0]);
    CircleFactor<double, double> factors(&desc);
    factors.add_factor({0}, 1.0, nullptr, 0, gopt::LossParams<double>::Huber(1.0));
    gopt::Graph<double, double> graph;
    graph.add_vertex_descriptor(&desc);
    graph.add_factor_descriptor(&factors);
    CHECK(graph.total_error(0) == doctest::Approx(5.0).epsilon(1e-15));
  }
}

TEST_CASE("loss weighting") {
  const auto dflt = gopt::LossParams<double>::Default();
  CHECK(gopt::loss_weight(dflt, 123.4) == 1.0);
  const auto huber = gopt::LossParams<double>::Huber(1.0);
  CHECK(gopt::loss_weight(huber, 0.25) == 1.0);
  CHECK(gopt::loss_weight(huber, 4.0) == 0.5);

  SUBCASE("apply_loss_weighting returns w and sqrt(w)-scaled residuals") {
    const double identity[1] = {1.0};
    double r = 0.5, out = 0;  // s = 0.25: inlier branch
    CHECK(gopt::apply_loss_weighting<double>({&r, 1}, {identity, 1}, huber, {&out, 1}) == 1.0);
    CHECK(out == 0.5);
    r = 2.0;  // s = 4: w = 0.5
    CHECK(gopt::apply_loss_weighting<double>({&r, 1}, {identity, 1}, huber, {&out, 1}) == 0.5);
    CHECK(out == doctest::Approx(std::sqrt(0.5) * 2.0).epsilon(1e-15));
    CHECK(gopt::apply_loss_weighting<double>({&r, 1}, {identity, 1}, dflt, {&out, 1}) == 1.0);
  }
}

TEST_CASE("precision pairs obey the width rule") {
  using gopt::PrecisionPair;
  using gopt::ScalarKind;
  CHECK(PrecisionPair{ScalarKind::binary64, ScalarKind::binary64}.valid());
  CHECK(PrecisionPair{ScalarKind::binary64, ScalarKind::binary32}.valid());
  CHECK(PrecisionPair{ScalarKind::binary64, ScalarKind::bfloat16_storage}.valid());
  CHECK(PrecisionPair{ScalarKind::binary32, ScalarKind::bfloat16_storage}.valid());
  CHECK_FALSE(PrecisionPair{ScalarKind::binary32, ScalarKind::binary64}.valid());
  CHECK_THROWS_AS((PrecisionPair{ScalarKind::binary32, ScalarKind::binary64}.validate()),
                  std::invalid_argument);
  CHECK((gopt::Graph<double, float>::precision().system_precision == ScalarKind::binary32));
}

TEST_CASE("Huber loss is C1 at the branch point") {
  const double delta = 1.3;
  const auto huber = gopt::LossParams<double>::Huber(delta);
  const double d2 = delta * delta;
  const double eps = 1e-8;
  CHECK(std::abs(gopt::loss_value(huber, d2 - eps) - gopt::loss_value(huber, d2 + eps)) < 1e-6);
  CHECK(std::abs(gopt::loss_weight(huber, d2 - eps) - gopt::loss_weight(huber, d2 + eps)) < 1e-6);
}

TEST_CASE("packing bijection: gather then scatter is the bitwise identity") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto tg = testutil::make_random_graph(seed);
    tg->graph.activate(tg->active_level);
    const auto before = tg->points;
    auto snap = tg->graph.snapshot();
    tg->graph.restore(snap);
    for (std::size_t d = 0; d < before.size(); ++d)
      CHECK(std::memcmp(tg->points[d].data(), before[d].data(),
                        before[d].size() * sizeof(Point)) == 0);

    // and the column map hits each free slot exactly once
    std::vector<int> hits(static_cast<std::size_t>(tg->graph.plan().total_free_dims), 0);
    for (std::size_t d = 0; d < tg->vds.size(); ++d)
      for (std::size_t v = 0; v < tg->points[d].size(); ++v) {
        const auto col = tg->vds[d]->column_at(v);
        if (col < 0) continue;
        ++hits[static_cast<std::size_t>(col)];
        ++hits[static_cast<std::size_t>(col) + 1];
      }
    for (int h : hits) CHECK(h == 1);
  }
}

TEST_CASE("level masking matches brute force on random graphs") {
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    auto tg = testutil::make_random_graph(seed);
    tg->graph.activate(tg->active_level);
    double brute = 0;
    for (const auto& rec : tg->records) {
      if (!tg->factor_active(rec)) continue;
      const auto r = tg->residual_of(rec);
      brute += gopt::loss_value(rec.loss, r.dot(rec.info * r));
    }
    CHECK(tg->graph.total_error_active() == doctest::Approx(brute).epsilon(1e-12));
  }
}
