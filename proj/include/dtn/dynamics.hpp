// Nonlinear bicycle kinematics, successive linearization about a nominal
// point, and second-order Runge-Kutta discretization producing the stochastic
// linear time-variant model
//
//   x_{k+1} = A_k x_k + B_k u_k + r_k + G w_k.
//
// Continuous dynamics (state order x, y, theta, v):
//   xdot = v cos(theta), ydot = v sin(theta),
//   thetadot = v tan(delta) / L_w, vdot = a.
#pragma once

#include "dtn/types.hpp"

namespace dtn {

/// Continuous-time Jacobians and residual at a nominal point:
///   f(x, u) ~= A (x - xbar) + B (u - ubar) + f(xbar, ubar)
///            = A x + B u + r  with  r = f(xbar, ubar) - A xbar - B ubar.
struct ContinuousLinearization {
  Mat4 A = Mat4::Zero();
  Mat42 B = Mat42::Zero();
  Vec4 r = Vec4::Zero();
};

/// Right-hand side of the bicycle ODE.
Vec4 bicycle_ode(const VehicleState& s, const ControlInput& u, double wheelbase);

/// One RK2 (Heun) step of length tau, then additive noise G * w. The heading
/// is renormalized to (-pi, pi]. Pass w = 0 for the deterministic step.
/// Throws std::invalid_argument on a non-finite input state.
VehicleState step_nonlinear(const VehicleState& s, const ControlInput& u,
                            double tau, double wheelbase,
                            const Mat4& G = Mat4::Zero(),
                            const Vec4& noise = Vec4::Zero());

/// Exact continuous-time Jacobians of the bicycle ODE at (nominal, input).
/// Throws std::domain_error when cos(delta) vanishes (|delta| >= pi/2).
ContinuousLinearization linearize(const VehicleState& nominal,
                                  const ControlInput& nominal_input,
                                  double wheelbase);

/// Second-order discretization matching the RK2 stepper on linear systems:
///   A_k = I + tau A + (tau^2/2) A^2,
///   B_k = tau B + (tau^2/2) A B,
///   r_k = tau r + (tau^2/2) A r.
/// The supplied G is copied into the result unchanged (noise is additive in
/// the discrete model, not integrated through the dynamics).
LinearDiscreteModel discretize(const ContinuousLinearization& cont, double tau,
                               const Mat4& G = Mat4::Zero());

/// p = Gamma x: the (x, y) block of the state.
inline Vec2 extract_position(const VehicleState& s) { return Vec2(s.x, s.y); }
inline Vec2 extract_position(const Vec4& s) { return s.head<2>(); }

}  // namespace dtn
