#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "gopt/dual.hpp"

namespace gopt::bal {

/// Branch threshold on theta^2 below which Rodrigues coefficients switch to
/// their Taylor series; shared by the residual (dual) path and the analytic
/// Jacobians so both differentiate the same function.
template <typename FP>
inline constexpr FP kRodriguesTaylorThreshold = sizeof(FP) == 8 ? FP(1e-6) : FP(1e-2);

/// y = R(omega) * x with R the Rodrigues rotation of the angle-axis vector;
/// T may be a dual number.
template <typename FP, typename T>
inline void rotate_angle_axis(const T* omega, const T* x, T* y) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  const T theta2 = omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2];
  T a, s, c;  // cos(theta), sin(theta)/theta, (1 - cos(theta))/theta^2
  if (value_of(theta2) < kRodriguesTaylorThreshold<FP>) {
    const T u = theta2;
    a = FP(1) - u * FP(0.5) + u * u * (FP(1) / FP(24));
    s = FP(1) - u * (FP(1) / FP(6)) + u * u * (FP(1) / FP(120));
    c = FP(0.5) - u * (FP(1) / FP(24)) + u * u * (FP(1) / FP(720));
  } else {
    const T theta = sqrt(theta2);
    a = cos(theta);
    s = sin(theta) / theta;
    c = (FP(1) - a) / theta2;
  }
  const T wx = omega[1] * x[2] - omega[2] * x[1];
  const T wy = omega[2] * x[0] - omega[0] * x[2];
  const T wz = omega[0] * x[1] - omega[1] * x[0];
  const T dot = omega[0] * x[0] + omega[1] * x[1] + omega[2] * x[2];
  y[0] = a * x[0] + s * wx + c * dot * omega[0];
  y[1] = a * x[1] + s * wy + c * dot * omega[1];
  y[2] = a * x[2] + s * wz + c * dot * omega[2];
}

/// Snavely projection: P = R(r)X + t, p = -(P_x, P_y)/P_z, radial distortion
/// d = 1 + k1 |p|^2 + k2 |p|^4, predicted pixel = f * d * p.
/// camera = [r1 r2 r3 t1 t2 t3 f k1 k2].
template <typename FP, typename T>
inline void snavely_project(const T* camera, const T* point, T* predicted) {
  T p[3];
  rotate_angle_axis<FP>(camera, point, p);
  p[0] = p[0] + camera[3];
  p[1] = p[1] + camera[4];
  p[2] = p[2] + camera[5];
  const T xp = -p[0] / p[2];
  const T yp = -p[1] / p[2];
  const T n = xp * xp + yp * yp;
  const T distortion = FP(1) + n * (camera[7] + n * camera[8]);
  predicted[0] = camera[6] * distortion * xp;
  predicted[1] = camera[6] * distortion * yp;
}

namespace detail {

/// Rotation matrix and d(R x)/d omega for the analytic chain rule, sharing
/// the residual path's Taylor branch.
template <typename FP>
inline void rodrigues_with_jacobian(const Eigen::Matrix<FP, 3, 1>& omega,
                                    const Eigen::Matrix<FP, 3, 1>& x,
                                    Eigen::Matrix<FP, 3, 3>& rotation,
                                    Eigen::Matrix<FP, 3, 3>& dy_domega) {
  using Vec3 = Eigen::Matrix<FP, 3, 1>;
  using Mat3 = Eigen::Matrix<FP, 3, 3>;
  const FP theta2 = omega.squaredNorm();
  FP a, s, c, s1, c2;
  if (theta2 < kRodriguesTaylorThreshold<FP>) {
    const FP u = theta2;
    a = FP(1) - u / FP(2) + u * u / FP(24);
    s = FP(1) - u / FP(6) + u * u / FP(120);
    c = FP(0.5) - u / FP(24) + u * u / FP(720);
    s1 = -FP(1) / FP(3) + u / FP(30);
    c2 = -FP(1) / FP(12) + u / FP(180);
  } else {
    const FP theta = std::sqrt(theta2);
    a = std::cos(theta);
    s = std::sin(theta) / theta;
    c = (FP(1) - a) / theta2;
    s1 = (a - s) / theta2;
    c2 = (s - FP(2) * c) / theta2;
  }
  Mat3 skew_omega;
  skew_omega << FP(0), -omega.z(), omega.y(), omega.z(), FP(0), -omega.x(), -omega.y(), omega.x(), FP(0);
  rotation = a * Mat3::Identity() + s * skew_omega + c * omega * omega.transpose();

  Mat3 skew_x;
  skew_x << FP(0), -x.z(), x.y(), x.z(), FP(0), -x.x(), -x.y(), x.x(), FP(0);
  const Vec3 cross = omega.cross(x);
  const FP dot = omega.dot(x);
  dy_domega = -s * x * omega.transpose() + s1 * cross * omega.transpose() - s * skew_x +
              c2 * dot * omega * omega.transpose() + c * (omega * x.transpose() + dot * Mat3::Identity());
}

template <typename FP>
struct SnavelyChain {
  Eigen::Matrix<FP, 3, 3> rotation;
  Eigen::Matrix<FP, 3, 3> dy_domega;
  Eigen::Matrix<FP, 2, 3> du_dP;  // through projection and distortion
  Eigen::Matrix<FP, 2, 1> p;      // normalized image point
  FP n, distortion;

  SnavelyChain(const FP* camera, const FP* point) {
    using Vec3 = Eigen::Matrix<FP, 3, 1>;
    const Vec3 omega(camera[0], camera[1], camera[2]);
    const Vec3 x(point[0], point[1], point[2]);
    rodrigues_with_jacobian(omega, x, rotation, dy_domega);
    const Vec3 P = rotation * x + Vec3(camera[3], camera[4], camera[5]);
    const FP inv_z = FP(1) / P.z();
    p = Eigen::Matrix<FP, 2, 1>(-P.x() * inv_z, -P.y() * inv_z);
    n = p.squaredNorm();
    const FP f = camera[6], k1 = camera[7], k2 = camera[8];
    distortion = FP(1) + n * (k1 + n * k2);
    Eigen::Matrix<FP, 2, 3> dp_dP;
    dp_dP << -inv_z, FP(0), P.x() * inv_z * inv_z, FP(0), -inv_z, P.y() * inv_z * inv_z;
    const Eigen::Matrix<FP, 2, 2> du_dp =
        f * (distortion * Eigen::Matrix<FP, 2, 2>::Identity() +
             FP(2) * (k1 + FP(2) * k2 * n) * p * p.transpose());
    du_dP = du_dp * dp_dP;
  }
};

}  // namespace detail

/// d predicted / d camera, 2x9 row-major.
template <typename FP>
inline void snavely_camera_jacobian(const FP* camera, const FP* point, FP* out) {
  detail::SnavelyChain<FP> chain(camera, point);
  Eigen::Matrix<FP, 2, 9> J;
  J.template block<2, 3>(0, 0) = chain.du_dP * chain.dy_domega;
  J.template block<2, 3>(0, 3) = chain.du_dP;
  J.template block<2, 1>(0, 6) = chain.distortion * chain.p;
  J.template block<2, 1>(0, 7) = camera[6] * chain.n * chain.p;
  J.template block<2, 1>(0, 8) = camera[6] * chain.n * chain.n * chain.p;
  Eigen::Map<Eigen::Matrix<FP, 2, 9, Eigen::RowMajor>> out_map(out);
  out_map = J;
}

/// d predicted / d point, 2x3 row-major.
template <typename FP>
inline void snavely_point_jacobian(const FP* camera, const FP* point, FP* out) {
  detail::SnavelyChain<FP> chain(camera, point);
  Eigen::Map<Eigen::Matrix<FP, 2, 3, Eigen::RowMajor>> out_map(out);
  out_map = chain.du_dP * chain.rotation;
}

}  // namespace gopt::bal
