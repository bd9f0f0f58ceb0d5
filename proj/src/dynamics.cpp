#include "dtn/dynamics.hpp"

#include <cmath>

namespace dtn {

Vec4 bicycle_ode(const VehicleState& s, const ControlInput& u, double wheelbase) {
  Vec4 f;
  f << s.v * std::cos(s.theta),
       s.v * std::sin(s.theta),
       s.v * std::tan(u.delta) / wheelbase,
       u.a;
  return f;
}

VehicleState step_nonlinear(const VehicleState& s, const ControlInput& u,
                            double tau, double wheelbase, const Mat4& G,
                            const Vec4& noise) {
  if (!s.finite()) {
    throw std::invalid_argument("step_nonlinear: non-finite state");
  }
  // Heun's method: average of the slope at the endpoint prediction and the
  // slope at the start. On a linear system this reproduces
  // I + tau A + (tau^2/2) A^2 exactly, matching discretize().
  const Vec4 k1 = bicycle_ode(s, u, wheelbase);
  const VehicleState mid = VehicleState::from_vec(s.vec() + tau * k1);
  const Vec4 k2 = bicycle_ode(mid, u, wheelbase);
  Vec4 next = s.vec() + 0.5 * tau * (k1 + k2) + G * noise;
  next[2] = wrap_angle(next[2]);
  return VehicleState::from_vec(next);
}

ContinuousLinearization linearize(const VehicleState& nominal,
                                  const ControlInput& nominal_input,
                                  double wheelbase) {
  const double c = std::cos(nominal_input.delta);
  if (std::abs(c) < 1e-12 || std::abs(nominal_input.delta) >= M_PI / 2.0) {
    throw std::domain_error("linearize: cos(delta) vanishes at nominal input");
  }
  const double st = std::sin(nominal.theta);
  const double ct = std::cos(nominal.theta);

  ContinuousLinearization lin;
  lin.A(0, 2) = -nominal.v * st;
  lin.A(0, 3) = ct;
  lin.A(1, 2) = nominal.v * ct;
  lin.A(1, 3) = st;
  lin.A(3, 3) = 0.0;
  lin.A(2, 3) = std::tan(nominal_input.delta) / wheelbase;

  lin.B(2, 1) = nominal.v / (wheelbase * c * c);
  lin.B(3, 0) = 1.0;

  lin.r = bicycle_ode(nominal, nominal_input, wheelbase) -
          lin.A * nominal.vec() - lin.B * nominal_input.vec();
  return lin;
}

LinearDiscreteModel discretize(const ContinuousLinearization& cont, double tau,
                               const Mat4& G) {
  LinearDiscreteModel m;
  const Mat4 A2 = cont.A * cont.A;
  m.A = Mat4::Identity() + tau * cont.A + 0.5 * tau * tau * A2;
  m.B = tau * cont.B + 0.5 * tau * tau * cont.A * cont.B;
  m.r = tau * cont.r + 0.5 * tau * tau * cont.A * cont.r;
  m.G = G;
  return m;
}

}  // namespace dtn
