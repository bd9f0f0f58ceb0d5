// Core value types shared across the coordination stack: vehicle state and
// input, the discretized stochastic linear model, measurement model, and the
// canonical parameter set (defaults mirror the simulation-parameter table).
//
// State ordering is (x, y, theta, v) everywhere. All types are plain value
// types; functions over them are safe to call concurrently.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace dtn {

using Vec2 = Eigen::Vector2d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat4 = Eigen::Matrix4d;
using Mat24 = Eigen::Matrix<double, 2, 4>;  // gain K, injection U
using Mat42 = Eigen::Matrix<double, 4, 2>;  // input matrix B
using Mat6 = Eigen::Matrix<double, 6, 6>;

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a + M_PI, 2.0 * M_PI);
  if (a <= 0.0) a += 2.0 * M_PI;
  return a - M_PI;
}

/// Returns 0.5 (M + M^T); covariance code applies this after every product.
template <typename Derived>
inline Eigen::Matrix<typename Derived::Scalar, Derived::RowsAtCompileTime,
                     Derived::ColsAtCompileTime>
symmetrize(const Eigen::MatrixBase<Derived>& m) {
  return 0.5 * (m + m.transpose());
}

/// Physical state of one vehicle: position (m), heading (rad), speed (m/s).
struct VehicleState {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
  double v = 0.0;

  Vec4 vec() const { return Vec4(x, y, theta, v); }
  static VehicleState from_vec(const Vec4& s) { return {s[0], s[1], s[2], s[3]}; }

  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(theta) &&
           std::isfinite(v);
  }
};

/// Command for one step: acceleration (m/s^2) and steering angle (rad).
struct ControlInput {
  double a = 0.0;
  double delta = 0.0;

  Vec2 vec() const { return Vec2(a, delta); }
  static ControlInput from_vec(const Vec2& u) { return {u[0], u[1]}; }
};

/// Box bounds on states and inputs.
struct Limits {
  double v_max = 10.0;
  double a_min = -5.0;
  double a_max = 5.0;
  double delta_max = 0.78;

  bool contains(const ControlInput& u) const {
    return u.a >= a_min && u.a <= a_max && std::abs(u.delta) <= delta_max;
  }
};

/// One step of the stochastic linear time-variant model
///   x_{k+1} = A x_k + B u_k + r + G w_k,  w ~ N(0, I).
struct LinearDiscreteModel {
  Mat4 A = Mat4::Identity();
  Mat42 B = Mat42::Zero();
  Vec4 r = Vec4::Zero();
  Mat4 G = Mat4::Zero();
};

/// Sensing model y = C x + D v, v ~ N(0, I). D diagonal and nonnegative.
struct MeasurementModel {
  Mat4 C = Mat4::Identity();
  Mat4 D = Mat4::Zero();
};

/// Rigid footprint and kinematic geometry of a vehicle.
struct VehicleGeometry {
  double length = 4.2;     // L_c, bumper to bumper (m)
  double width = 2.1;      // W_c (m)
  double wheelbase = 3.0;  // L_w (m)
};

/// Selector of the position components: p = Gamma * x.
inline Eigen::Matrix<double, 2, 4> position_selector() {
  Eigen::Matrix<double, 2, 4> g = Eigen::Matrix<double, 2, 4>::Zero();
  g(0, 0) = 1.0;
  g(1, 1) = 1.0;
  return g;
}

/// Canonical parameter set; every default mirrors the simulation-parameter
/// table. Tests and the CLI derive their configurations from this struct.
struct Parameters {
  Limits limits{};
  VehicleGeometry geometry{};

  int horizon = 20;   // N
  double tau = 0.1;   // step (s)

  Mat4 Q = Vec4(2.0, 2.0, 1.0, 0.0).asDiagonal();
  Mat2 R = Mat2::Identity();

  Mat4 G_noise = Vec4(0.08, 0.08, M_PI / 180.0, 0.1).asDiagonal();
  Mat4 D_noise = Vec4(0.35, 0.35, M_PI / 150.0, 0.2).asDiagonal();
  Mat4 C_meas = Mat4::Identity();

  Mat4 sigma_hat0 = Vec4(0.4, 0.4, M_PI / 90.0, 0.2).asDiagonal();
  Mat4 sigma_tilde0_prior = Vec4(0.03, 0.03, M_PI / 360.0, 0.02).asDiagonal();
  Mat4 sigma_terminal = Vec4(0.15, 0.15, M_PI / 180.0, 0.1).asDiagonal();

  double xi = 0.1;      // collision probability threshold
  double d_min = 1.1;   // safety distance bounds (normalized units)
  double d_max = 1.5;
  double eta = 15.0;    // l1 safety-distance weight

  // Terminal mean box half-widths around the goal state.
  double terminal_pos_tol = 1.0;
  double terminal_heading_tol = 0.2;
  double terminal_speed_tol = 1.0;
};

}  // namespace dtn
