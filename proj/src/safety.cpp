#include "dtn/safety.hpp"

#include <cmath>
#include <stdexcept>

#include "dtn/rng.hpp"

namespace dtn {

CollisionEllipse build_collision_ellipse(double Lc, double Wc, double rotation,
                                         double semi_major_override,
                                         double semi_minor_override) {
  if (Lc <= 0.0 || Wc <= 0.0) {
    throw std::invalid_argument("build_collision_ellipse: nonpositive extent");
  }
  const double a = semi_major_override > 0.0 ? semi_major_override : Lc;
  const double b =
      semi_minor_override > 0.0 ? semi_minor_override : 0.5 * Wc + 0.5 * Lc;

  Mat2 rot;
  rot << std::cos(rotation), std::sin(rotation),
        -std::sin(rotation), std::cos(rotation);
  // Omega = R^T diag(1/a^2, 1/b^2) R, so the major axis (longest reach, the
  // vehicle's length direction) lies along `rotation`.
  const Mat2 diag = Vec2(1.0 / (a * a), 1.0 / (b * b)).asDiagonal();
  const Mat2 diag_sqrt = Vec2(1.0 / a, 1.0 / b).asDiagonal();

  CollisionEllipse ell;
  ell.rotation = rotation;
  ell.omega = symmetrize(rot.transpose() * diag * rot);
  ell.omega_sqrt = symmetrize(rot.transpose() * diag_sqrt * rot);
  return ell;
}

Vec2 linearize_halfspace(const Vec2& p_i, const Vec2& p_j,
                         const CollisionEllipse& ell) {
  const Vec2 dp = ell.omega_sqrt * (p_i - p_j);
  const double norm = dp.norm();
  if (norm <= 1e-9) {
    throw std::domain_error("linearize_halfspace: coincident transformed means");
  }
  return dp / norm;
}

double inverse_erf(double y) {
  if (!(std::abs(y) < 1.0)) {
    throw std::domain_error("inverse_erf: |y| must be < 1");
  }
  if (y == 0.0) return 0.0;

  // Winitzki's approximation as the starting point; accurate to ~2e-3
  // everywhere, which Newton then polishes to machine precision.
  const double a = 0.147;
  const double ln1my2 = std::log(1.0 - y * y);
  const double t = 2.0 / (M_PI * a) + 0.5 * ln1my2;
  double x = std::copysign(std::sqrt(std::sqrt(t * t - ln1my2 / a) - t), y);

  // Newton on erf(x) - y = 0: derivative 2/sqrt(pi) exp(-x^2).
  const double two_over_sqrt_pi = 2.0 / std::sqrt(M_PI);
  for (int it = 0; it < 6; ++it) {
    const double err = std::erf(x) - y;
    const double deriv = two_over_sqrt_pi * std::exp(-x * x);
    if (deriv == 0.0) break;
    const double step = err / deriv;
    x -= step;
    if (std::abs(step) < 1e-17) break;
  }
  return x;
}

double chance_constraint_residual(const Vec2& p_i, const Mat2& P_i,
                                  const Vec2& p_j, const Mat2& P_j,
                                  const CollisionEllipse& ell, const Vec2& alpha,
                                  double d, double xi) {
  const Mat2& T = ell.omega_sqrt;
  const double gap = alpha.dot(T * (p_i - p_j));
  const double variance = alpha.dot(T * (P_i + P_j) * T * alpha);
  const double c = inverse_erf(1.0 - 2.0 * xi);
  return gap - d - c * std::sqrt(std::max(0.0, 2.0 * variance));
}

double slack_equality_residual(const Vec2& p_i, const Mat2& Phat_i,
                               const Mat2& Ptil_i, const Vec2& p_j,
                               const Mat2& Phat_j, const Mat2& Ptil_j,
                               const CollisionEllipse& ell, const Vec2& alpha,
                               double d, double Delta, double xi) {
  const Mat2& T = ell.omega_sqrt;
  const double gap = alpha.dot(T * (p_i - p_j));
  const Mat2 P = Phat_i + Phat_j + Ptil_i + Ptil_j;
  const double variance = alpha.dot(T * P * T * alpha);
  const double c = inverse_erf(1.0 - 2.0 * xi);
  return (gap - d) * (gap - d) - 2.0 * c * c * variance - Delta;
}

double l1_distance_penalty(const std::vector<Eigen::VectorXd>& distances,
                           double eta) {
  double total = 0.0;
  for (const auto& d : distances) total += d.sum();
  return -eta * total;
}

double empirical_collision_probability(const Vec2& p_i, const Mat2& P_i,
                                       const Vec2& p_j, const Mat2& P_j,
                                       const CollisionEllipse& ell, double d,
                                       long samples, uint64_t seed) {
  const Vec2 mean = p_i - p_j;
  const Mat2 P = symmetrize(P_i + P_j);
  // Square root via eigendecomposition: tolerates singular sums.
  Eigen::SelfAdjointEigenSolver<Mat2> eig(P);
  const Vec2 clamped = eig.eigenvalues().cwiseMax(0.0);
  const Mat2 sqrt_P = eig.eigenvectors() *
                      clamped.cwiseSqrt().asDiagonal() *
                      eig.eigenvectors().transpose();

  Rng rng = Rng::stream(seed, 0, 0, static_cast<uint64_t>(RngPurpose::test));
  const Mat2& T = ell.omega_sqrt;
  const double d2 = d * d;
  long hits = 0;
  for (long i = 0; i < samples; ++i) {
    const Vec2 dp = mean + sqrt_P * rng.normal2();
    const Vec2 tdp = T * dp;
    if (tdp.squaredNorm() <= d2) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples);
}

}  // namespace dtn
