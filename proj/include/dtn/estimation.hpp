// Kalman filtering over the linearized model. The estimation-error covariance
// recursion is control-independent, so the whole-horizon sequence
// {prior, posterior, innovation covariance, gain} is precomputed once per MPC
// solve and consumed by the covariance dynamics as constants.
#pragma once

#include <vector>

#include "dtn/types.hpp"

namespace dtn {

/// Filter state around one time instant.
struct StateEstimate {
  Vec4 mean_posterior = Vec4::Zero();  // xhat
  Vec4 mean_prior = Vec4::Zero();      // xhat^-
  Mat4 cov_prior = Mat4::Zero();       // Sigma_tilde^-
  Mat4 cov_posterior = Mat4::Zero();   // Sigma_tilde
};

/// Innovation statistics at one step.
struct InnovationStats {
  Mat4 cov = Mat4::Zero();   // Sigma_xi
  Mat4 gain = Mat4::Zero();  // L
};

/// Sigma_xi = C Sigma_tilde^- C^T + D D^T (symmetrized).
Mat4 innovation_covariance(const Mat4& C, const Mat4& D, const Mat4& cov_prior);

/// L = Sigma_tilde^- C^T Sigma_xi^{-1}.
/// Throws std::runtime_error when Sigma_xi is (numerically) singular.
Mat4 kalman_gain(const Mat4& cov_prior, const Mat4& C, const Mat4& innov_cov);

/// Joseph-form posterior: (I-LC) P (I-LC)^T + L D D^T L^T. Keeps the result
/// symmetric PSD in floating point where the short form (I-LC)P does not.
Mat4 joseph_posterior(const Mat4& cov_prior, const Mat4& gain, const Mat4& C,
                      const Mat4& D);

/// One Riccati step of the prior error covariance:
///   Sigma^-_{k+1} = A Sigma_tilde_k A^T + G G^T,
/// with Sigma_tilde_k the Joseph-form posterior of the supplied prior.
/// Independent of any control decision variable.
Mat4 propagate_error_covariance(const LinearDiscreteModel& model,
                                const MeasurementModel& meas,
                                const Mat4& cov_prior);

/// Whole-horizon filter constants. Index k runs 0..N (N = models.size()):
/// entry k holds the statistics used when the measurement at step k arrives.
struct FilterHorizon {
  std::vector<Mat4> cov_prior;      // Sigma_tilde^-_k
  std::vector<Mat4> cov_posterior;  // Sigma_tilde_k
  std::vector<Mat4> innov_cov;      // Sigma_xi_k
  std::vector<Mat4> gain;           // L_k
  /// Covariance injected into the estimated state at step k+1:
  /// W_k = L_{k+1} Sigma_xi_{k+1} L_{k+1}^T, k = 0..N-1.
  std::vector<Mat4> injected;
};

/// Precomputes the deterministic filter sequence along a linearized horizon,
/// starting from the prior covariance at the current time.
FilterHorizon precompute_filter_horizon(
    const std::vector<LinearDiscreteModel>& models, const MeasurementModel& meas,
    const Mat4& cov_prior0);

/// Full measurement update:
///   xhat^-_{k+1} = A xhat_k + B u_k + r_k,
///   xi           = y - C xhat^-_{k+1},
///   xhat_{k+1}   = xhat^-_{k+1} + L_{k+1} xi,
/// with covariances advanced alongside.
StateEstimate filter_update(const StateEstimate& est,
                            const LinearDiscreteModel& model,
                            const MeasurementModel& meas,
                            const ControlInput& input, const Vec4& measurement);

}  // namespace dtn
