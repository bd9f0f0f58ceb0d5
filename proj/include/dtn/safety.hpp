// Collision geometry and the probabilistic avoidance machinery: elliptical
// collision regions, the half-space linearization, the deterministic
// reformulation of the pairwise chance constraint, the slack-equality residual
// used by the negotiation penalty, the l1-regularized adaptive safety
// distance, and a Monte Carlo estimator used to validate the bound.
//
// Conventions. With T = Omega^{1/2} (symmetric PD), all projections live in
// the transformed frame: alpha = unit(T (p_i - p_j)), gap = alpha^T T (p_i -
// p_j), and the projected variance is alpha^T T (P_i + P_j) T alpha. The
// collision region is {dp : ||T dp|| <= d}.
#pragma once

#include <Eigen/Dense>

#include "dtn/types.hpp"

namespace dtn {

/// Elliptical collision region of an ordered vehicle pair.
struct CollisionEllipse {
  Mat2 omega = Mat2::Identity();       // Omega = R^T diag(1/a^2, 1/b^2) R
  Mat2 omega_sqrt = Mat2::Identity();  // symmetric PD square root
  double rotation = 0.0;               // angle of the major axis (rad)
};

/// Builds the region from the footprint: semi-axes a = Lc and b = Wc/2 + Lc/2
/// as printed in the source model. Both semi-axes can be overridden (pass a
/// positive value) — the lateral sum in the printed formula is asymmetric and
/// some deployments may prefer a rounder region.
CollisionEllipse build_collision_ellipse(double Lc, double Wc, double rotation,
                                         double semi_major_override = -1.0,
                                         double semi_minor_override = -1.0);

/// alpha = T (p_i - p_j) / ||T (p_i - p_j)||.
/// Throws std::domain_error when the transformed means are closer than 1e-9
/// (the caller substitutes the previous alpha).
Vec2 linearize_halfspace(const Vec2& p_i, const Vec2& p_j,
                         const CollisionEllipse& ell);

/// inverse of the error function on (-1, 1): an initial rational
/// approximation refined by Newton iterations on erf; |erf(x) - y| < 1e-15.
/// Throws std::domain_error for |y| >= 1.
double inverse_erf(double y);

/// Deterministic reformulation of the pairwise chance constraint. Returns
///   alpha^T T (p_i - p_j) - d
///     - erfinv(1 - 2 xi) * sqrt(2 alpha^T T (P_i + P_j) T alpha);
/// >= 0 means the collision probability bound xi holds. P_i and P_j are the
/// 2x2 position covariances (estimated-state plus estimation-error parts).
double chance_constraint_residual(const Vec2& p_i, const Mat2& P_i,
                                  const Vec2& p_j, const Mat2& P_j,
                                  const CollisionEllipse& ell, const Vec2& alpha,
                                  double d, double xi);

/// Slack-equality form consumed by the augmented Lagrangian:
///   I = (alpha^T T (p_i - p_j) - d)^2
///       - 2 erfinv(1-2xi)^2 alpha^T T (Phat_i + Phat_j + Ptil_i + Ptil_j) T alpha
///       - Delta.
double slack_equality_residual(const Vec2& p_i, const Mat2& Phat_i,
                               const Mat2& Ptil_i, const Vec2& p_j,
                               const Mat2& Phat_j, const Mat2& Ptil_j,
                               const CollisionEllipse& ell, const Vec2& alpha,
                               double d, double Delta, double xi);

/// -eta * sum_i sum_k d_i^k (the negative l1 norm of all distance vectors).
double l1_distance_penalty(const std::vector<Eigen::VectorXd>& distances,
                           double eta);

/// Monte Carlo estimate of the collision-region probability: draws
/// dp ~ N(p_i - p_j, P_i + P_j) and returns the fraction with ||T dp|| <= d.
double empirical_collision_probability(const Vec2& p_i, const Mat2& P_i,
                                       const Vec2& p_j, const Mat2& P_j,
                                       const CollisionEllipse& ell, double d,
                                       long samples, uint64_t seed = 12345);

}  // namespace dtn
