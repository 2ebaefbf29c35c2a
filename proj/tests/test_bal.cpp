#include <cmath>
#include <cstdio>
#include <random>

#include "doctest.h"
#include "gopt/bal/adapter.hpp"
#include "gopt/bal/problem.hpp"
#include "gopt/bal/snavely.hpp"
#include "gopt/levenberg_marquardt.hpp"
#include "oracles.hpp"

using gopt::bal::BALProblem;
using testutil::Matrix;
using testutil::Vector;

namespace {

const char* kMinimalBal =
    "2 2 2\n"
    "0 0 10.5 -3.25\n"
    "1 1 -7.0 2.0\n"
    // camera 0
    "0.01\n-0.02\n0.03\n0.1\n0.2\n-1.0\n500.0\n-1e-7\n1e-13\n"
    // camera 1
    "0.0\n0.0\n0.0\n0.0\n0.0\n-2.0\n450.0\n0.0\n0.0\n"
    // points
    "1.0\n2.0\n-3.0\n"
    "0.5\n-0.5\n-4.0\n";

std::string temp_path(const char* name) {
  return std::string("./") + name;
}

}  // namespace

TEST_CASE("parses a minimal well-formed file") {
  const BALProblem p = gopt::bal::parse_bal_text(kMinimalBal);
  CHECK(p.num_cameras() == 2);
  CHECK(p.num_points() == 2);
  CHECK(p.num_observations() == 2);
  CHECK(p.observations[0].camera_index == 0);
  CHECK(p.observations[1].point_index == 1);
  CHECK(p.observations[0].x == 10.5);
  CHECK(p.observations[0].y == -3.25);
  CHECK(p.cameras[0][6] == 500.0);
  CHECK(p.cameras[0][7] == -1e-7);
  CHECK(p.points[1][2] == -4.0);
}

TEST_CASE("parser reports truncation with the expected line") {
  std::string text(kMinimalBal);
  // drop the final point line
  text.erase(text.rfind("-4.0"));
  try {
    gopt::bal::parse_bal_text(text);
    FAIL("expected ParseError");
  } catch (const gopt::bal::ParseError& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    CHECK(e.line() == 27);  // one past the last populated line
  }
}

TEST_CASE("parser reports non-numeric tokens with line numbers") {
  std::string text(kMinimalBal);
  const auto pos = text.find("500.0");
  text.replace(pos, 5, "bogus");
  try {
    gopt::bal::parse_bal_text(text);
    FAIL("expected ParseError");
  } catch (const gopt::bal::ParseError& e) {
    CHECK(std::string(e.what()).find("bogus") != std::string::npos);
    CHECK(e.line() == 10);
  }
}

TEST_CASE("parser rejects out-of-range observation indices") {
  std::string text(kMinimalBal);
  const auto pos = text.find("1 1 -7.0");
  text.replace(pos, 3, "1 9");
  CHECK_THROWS_WITH_AS(gopt::bal::parse_bal_text(text), doctest::Contains("out of range"),
                       gopt::bal::ParseError);
}

TEST_CASE("serialize-parse round trip preserves binary64 values") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> gauss;
  BALProblem p;
  p.cameras.resize(3);
  p.points.resize(5);
  for (auto& c : p.cameras)
    for (auto& v : c) v = gauss(rng) * std::pow(10.0, static_cast<int>(rng() % 7) - 3);
  for (auto& q : p.points)
    for (auto& v : q) v = gauss(rng);
  for (int i = 0; i < 8; ++i)
    p.observations.push_back({static_cast<std::uint32_t>(rng() % 3),
                              static_cast<std::uint32_t>(rng() % 5), gauss(rng) * 100,
                              gauss(rng) * 100});

  const BALProblem q = gopt::bal::parse_bal_text(gopt::bal::serialize_bal_text(p));
  REQUIRE(q.num_observations() == p.num_observations());
  for (std::size_t i = 0; i < p.observations.size(); ++i) {
    CHECK(q.observations[i].x == p.observations[i].x);
    CHECK(q.observations[i].y == p.observations[i].y);
  }
  for (std::size_t c = 0; c < p.cameras.size(); ++c)
    for (int k = 0; k < 9; ++k) CHECK(q.cameras[c][k] == p.cameras[c][k]);
  for (std::size_t i = 0; i < p.points.size(); ++i)
    for (int k = 0; k < 3; ++k) CHECK(q.points[i][k] == p.points[i][k]);

  SUBCASE("gzip round trip through files") {
    const std::string path = temp_path("roundtrip_test.txt.gz");
    gopt::bal::serialize_bal_file(p, path);
    const BALProblem r = gopt::bal::parse_bal_file(path);
    CHECK(r.cameras[2][8] == p.cameras[2][8]);
    CHECK(r.points[4][2] == p.points[4][2]);
    std::remove(path.c_str());
  }
}

TEST_CASE("snavely projection closed-form examples") {
  double camera[9] = {0, 0, 0, 0, 0, 0, 100.0, 0, 0};
  double point[3] = {0, 0, -1};
  double predicted[2];

  gopt::bal::snavely_project<double>(camera, point, predicted);
  CHECK(predicted[0] == 0.0);
  CHECK(predicted[1] == 0.0);

  point[0] = 1;  // X = (1, 0, -1): p = (1, 0), predicted (100, 0)
  gopt::bal::snavely_project<double>(camera, point, predicted);
  CHECK(predicted[0] == doctest::Approx(100.0).epsilon(1e-14));
  CHECK(predicted[1] == 0.0);

  camera[7] = 0.1;  // d = 1 + 0.1 * 1 = 1.1
  gopt::bal::snavely_project<double>(camera, point, predicted);
  CHECK(predicted[0] == doctest::Approx(110.0).epsilon(1e-14));
}

TEST_CASE("angle-axis rotation matches known rotations") {
  const double half_pi = M_PI / 2;
  double omega[3] = {0, 0, half_pi};
  double x[3] = {1, 0, 0};
  double y[3];
  gopt::bal::rotate_angle_axis<double>(omega, x, y);
  CHECK(y[0] == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(std::abs(y[2]) < 1e-15);

  SUBCASE("Taylor branch agrees with the closed form at the threshold") {
    // just below and just above theta^2 = 1e-6
    for (double theta : {9.99e-4, 1.01e-3}) {
      double w[3] = {theta / std::sqrt(3.0), theta / std::sqrt(3.0), theta / std::sqrt(3.0)};
      double v[3] = {0.3, -0.7, 1.1};
      double out[3];
      gopt::bal::rotate_angle_axis<double>(w, v, out);
      // reference: quaternion-free explicit Rodrigues at full precision
      const double c = std::cos(theta), s = std::sin(theta);
      Eigen::Vector3d k(w[0] / theta, w[1] / theta, w[2] / theta);
      Eigen::Vector3d vv(v[0], v[1], v[2]);
      Eigen::Vector3d ref = c * vv + s * k.cross(vv) + (1 - c) * k.dot(vv) * k;
      for (int i = 0; i < 3; ++i) CHECK(out[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
}

namespace {

struct ReprojectionRig {
  std::vector<std::array<double, 9>> cams;
  std::vector<std::array<double, 3>> pts;
  gopt::bal::CameraDescriptor<double, double> cam_desc;
  gopt::bal::Point3Descriptor<double, double> pt_desc;
  gopt::bal::ReprojectionFactor<double, double> factors{&cam_desc, &pt_desc};

  ReprojectionRig(const std::array<double, 9>& cam, const std::array<double, 3>& pt,
                  const std::array<double, 2>& obs)
      : cams{cam}, pts{pt} {
    cam_desc.add_vertex(0, &cams[0]);
    pt_desc.add_vertex(0, &pts[0]);
    factors.add_factor({0, 0}, obs, nullptr, 0, gopt::LossParams<double>::Default());
  }
};

/// Random camera/point pair with the transformed point at depth < -0.1.
bool random_visible_pair(std::mt19937_64& rng, std::array<double, 9>& cam,
                         std::array<double, 3>& pt) {
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> fdist(300, 1500);
  for (int k = 0; k < 3; ++k) cam[k] = gauss(rng) * 0.4;
  for (int k = 3; k < 6; ++k) cam[k] = gauss(rng);
  cam[6] = fdist(rng);
  cam[7] = gauss(rng) * 1e-1;
  cam[8] = gauss(rng) * 1e-2;
  for (int k = 0; k < 3; ++k) pt[k] = gauss(rng) * 2;
  double p[3];
  gopt::bal::rotate_angle_axis<double>(cam.data(), pt.data(), p);
  return p[2] + cam[5] < -0.1;
}

}  // namespace

TEST_CASE("reprojection jacobians match finite differences and dual mode") {
  std::mt19937_64 rng(44);
  int checked = 0;
  while (checked < 200) {
    std::array<double, 9> cam;
    std::array<double, 3> pt;
    if (!random_visible_pair(rng, cam, pt)) continue;
    ++checked;
    ReprojectionRig rig(cam, pt, {0, 0});

    double Jcam_an[18], Jcam_auto[18], Jpt_an[6], Jpt_auto[6];
    rig.factors.jacobian_analytic_of(0, 0, Jcam_an);
    rig.factors.jacobian_auto_of(0, 0, Jcam_auto);
    rig.factors.jacobian_analytic_of(0, 1, Jpt_an);
    rig.factors.jacobian_auto_of(0, 1, Jpt_auto);

    auto fcam = [&pt](const Vector& c) {
      double pred[2];
      gopt::bal::snavely_project<double>(c.data(), pt.data(), pred);
      return Vector{{pred[0], pred[1]}};
    };
    auto fpt = [&cam](const Vector& p) {
      double pred[2];
      gopt::bal::snavely_project<double>(cam.data(), p.data(), pred);
      return Vector{{pred[0], pred[1]}};
    };
    Vector c0 = Eigen::Map<const Vector>(cam.data(), 9);
    Vector p0 = Eigen::Map<const Vector>(pt.data(), 3);
    const Matrix Jcam_fd = testutil::finite_difference_jacobian(fcam, c0, 2);
    const Matrix Jpt_fd = testutil::finite_difference_jacobian(fpt, p0, 2);

    const Matrix Jcam_anm = Eigen::Map<const Eigen::Matrix<double, 2, 9, Eigen::RowMajor>>(Jcam_an);
    const Matrix Jcam_autom =
        Eigen::Map<const Eigen::Matrix<double, 2, 9, Eigen::RowMajor>>(Jcam_auto);
    const Matrix Jpt_anm = Eigen::Map<const Eigen::Matrix<double, 2, 3, Eigen::RowMajor>>(Jpt_an);
    const Matrix Jpt_autom = Eigen::Map<const Eigen::Matrix<double, 2, 3, Eigen::RowMajor>>(Jpt_auto);

    CHECK(testutil::relative_error(Jcam_anm, Jcam_fd) < 1e-5);
    CHECK(testutil::relative_error(Jpt_anm, Jpt_fd) < 1e-5);
    CHECK(testutil::relative_error(Jcam_autom, Jcam_fd) < 1e-5);
    CHECK(testutil::relative_error(Jpt_autom, Jpt_fd) < 1e-5);
    CHECK(testutil::relative_error(Jcam_anm, Jcam_autom) < 1e-12);
    CHECK(testutil::relative_error(Jpt_anm, Jpt_autom) < 1e-12);
  }
}

TEST_CASE("jacobians stay accurate through the small-rotation Taylor branch") {
  std::mt19937_64 rng(91);
  std::normal_distribution<double> gauss;
  for (double scale : {0.0, 1e-8, 1e-5, 5e-4, 2e-3}) {
    std::array<double, 9> cam{scale, scale * 0.5, -scale, 0.1, -0.2, -3.0, 700.0, -0.02, 1e-3};
    std::array<double, 3> pt{gauss(rng) * 0.5, gauss(rng) * 0.5, gauss(rng) * 0.5};
    double Jcam[18], Jpt[6];
    gopt::bal::snavely_camera_jacobian(cam.data(), pt.data(), Jcam);
    gopt::bal::snavely_point_jacobian(cam.data(), pt.data(), Jpt);
    auto fcam = [&pt](const Vector& c) {
      double pred[2];
      gopt::bal::snavely_project<double>(c.data(), pt.data(), pred);
      return Vector{{pred[0], pred[1]}};
    };
    auto fpt = [&cam](const Vector& p) {
      double pred[2];
      gopt::bal::snavely_project<double>(cam.data(), p.data(), pred);
      return Vector{{pred[0], pred[1]}};
    };
    const Matrix Jcam_fd =
        testutil::finite_difference_jacobian(fcam, Eigen::Map<const Vector>(cam.data(), 9), 2);
    const Matrix Jpt_fd =
        testutil::finite_difference_jacobian(fpt, Eigen::Map<const Vector>(pt.data(), 3), 2);
    using RM29 = Eigen::Matrix<double, 2, 9, Eigen::RowMajor>;
    using RM23 = Eigen::Matrix<double, 2, 3, Eigen::RowMajor>;
    CHECK(testutil::relative_error(Eigen::Map<const RM29>(Jcam), Jcam_fd) < 1e-6);
    CHECK(testutil::relative_error(Eigen::Map<const RM23>(Jpt), Jpt_fd) < 1e-6);
  }
}

TEST_CASE("build_graph shapes and options") {
  const BALProblem p = gopt::bal::parse_bal_text(kMinimalBal);

  SUBCASE("minimal problem dimensions") {
    BALProblem one;
    one.cameras.push_back(p.cameras[0]);
    one.points.push_back(p.points[0]);
    one.observations.push_back({0, 0, 1.0, 2.0});
    auto bg = gopt::bal::build_graph<double, double>(one, gopt::DifferentiationMode::Analytic);
    auto plan = bg->graph.activate(0);
    CHECK(plan.total_free_dims == 12);
    CHECK(plan.total_residual_dims == 2);
  }

  SUBCASE("descriptor sizes follow the parsed counts") {
    auto bg = gopt::bal::build_graph<double, double>(p, gopt::DifferentiationMode::Auto);
    CHECK(bg->camera_desc->size() == 2);
    CHECK(bg->point_desc->size() == 2);
    CHECK(bg->factor_desc->size() == 2);
  }

  SUBCASE("huber delta applies to every factor") {
    auto bg = gopt::bal::build_graph<double, double>(p, gopt::DifferentiationMode::Auto, 2.5);
    for (std::size_t i = 0; i < bg->factor_desc->size(); ++i) {
      CHECK(bg->factor_desc->loss_at(i).kind == gopt::LossKind::Huber);
      CHECK(bg->factor_desc->loss_at(i).delta == 2.5);
    }
  }
}

TEST_CASE("mse definition") {
  SUBCASE("zero residuals give zero mse") {
    // observations exactly at the projections
    BALProblem p;
    p.cameras.push_back({0, 0, 0, 0, 0, 0, 100, 0, 0});
    p.points.push_back({1, 0, -1});
    double pred[2];
    gopt::bal::snavely_project<double>(p.cameras[0].data(), p.points[0].data(), pred);
    p.observations.push_back({0, 0, pred[0], pred[1]});
    auto bg = gopt::bal::build_graph<double, double>(p, gopt::DifferentiationMode::Auto);
    CHECK(bg->mse() == 0.0);
  }

  SUBCASE("residuals (1,0) and (0,2) give mse 2.5") {
    BALProblem p;
    p.cameras.push_back({0, 0, 0, 0, 0, 0, 100, 0, 0});
    p.points.push_back({1, 0, -1});
    p.points.push_back({0, 1, -1});
    double pred0[2], pred1[2];
    gopt::bal::snavely_project<double>(p.cameras[0].data(), p.points[0].data(), pred0);
    gopt::bal::snavely_project<double>(p.cameras[0].data(), p.points[1].data(), pred1);
    p.observations.push_back({0, 0, pred0[0] - 1.0, pred0[1]});        // residual (1, 0)
    p.observations.push_back({0, 1, pred1[0], pred1[1] - 2.0});        // residual (0, 2)
    auto bg = gopt::bal::build_graph<double, double>(p, gopt::DifferentiationMode::Auto);
    CHECK(bg->mse() == doctest::Approx(2.5).epsilon(1e-14));
  }

  SUBCASE("mse equals total_error / num_observations under default loss") {
    const BALProblem p = gopt::bal::parse_bal_text(kMinimalBal);
    auto bg = gopt::bal::build_graph<double, double>(p, gopt::DifferentiationMode::Auto);
    const double chi = bg->graph.total_error(0);
    CHECK(bg->mse() ==
          doctest::Approx(chi / static_cast<double>(p.num_observations())).epsilon(1e-12));
  }
}

TEST_CASE("projection behind the camera propagates non-finite residuals") {
  // P_z = 0 exactly: x/0 -> inf
  ReprojectionRig rig({0, 0, 0, 0, 0, 0, 100, 0, 0}, {1, 1, 0}, {0, 0});
  double r[2];
  rig.factors.residual_of(0, {r, 2});
  CHECK_FALSE(std::isfinite(r[0]));

  SUBCASE("a non-finite chi^2 at entry aborts the solve with a diagnostic") {
    gopt::Graph<double, double> graph;
    graph.add_vertex_descriptor(&rig.cam_desc);
    graph.add_vertex_descriptor(&rig.pt_desc);
    graph.add_factor_descriptor(&rig.factors);
    CHECK_THROWS_WITH_AS(gopt::levenberg_marquardt(graph, gopt::LMConfig{}),
                         doctest::Contains("non-finite chi^2"), std::runtime_error);
  }
}
