// Moment-space building blocks of the per-vehicle covariance steering MPC:
// mean and relaxed covariance dynamics, the moment cost, the Schur-complement
// LMI, terminal residuals, gain recovery, command synthesis, and dual
// initialization of the MPC initial condition.
//
// Decision variables per step k: feedforward m_k, injection U_k = K_k
// Sigma_hat_k, and auxiliary Y_k (relaxation of K Sigma_hat K^T). The relaxed
// covariance recursion is
//   Sigma_{k+1} = A S A^T + B U A^T + A U^T B^T + B Y B^T
//                 + L_{k+1} Sigma_xi_{k+1} L_{k+1}^T,
// which equals [A B] [[S, U^T], [U, Y]] [A B]^T + W — PSD of the Schur block
// implies PSD of the propagated covariance.
#pragma once

#include <functional>
#include <vector>

#include "dtn/estimation.hpp"
#include "dtn/types.hpp"

namespace dtn {

/// Mean and covariance of the estimated state over the horizon (k = 0..N).
struct MomentTrajectory {
  std::vector<Vec4> means;
  std::vector<Mat4> covs;

  int horizon() const { return static_cast<int>(means.size()) - 1; }
};

/// Affine-feedback policy parameters (k = 0..N-1).
struct PolicyParams {
  std::vector<Vec2> feedforward;   // m_k
  std::vector<Mat24> injection;    // U_k
  std::vector<Mat2> auxiliary;     // Y_k
};

/// Terminal constraint pair: mean box X_f and covariance cap Sigma_f.
struct TerminalSpec {
  Vec4 center = Vec4::Zero();
  Vec4 half_width = Vec4::Ones();  // per-component box half-widths
  Mat4 cov_cap = Mat4::Identity(); // Sigma_f
};

/// Per-step weights and the reference trajectory.
struct CostWeights {
  Mat4 Q = Mat4::Identity();
  Mat2 R = Mat2::Identity();
  std::vector<Vec4> reference;  // x_r_k, k = 0..N
};

/// xbar_{k+1} = A xbar_k + B m_k + r_k.
Vec4 mean_step(const LinearDiscreteModel& model, const Vec4& mean, const Vec2& m);

/// Relaxed covariance recursion (symmetrized).
Mat4 covariance_step(const LinearDiscreteModel& model, const Mat4& cov,
                     const Mat24& U, const Mat2& Y, const Mat4& L_next,
                     const Mat4& innov_cov_next);

/// sum_{k=0}^{N-1} tr(Q S_k) + (xbar_k - x_r)^T Q (xbar_k - x_r)
///                + tr(R Y_k) + m_k^T R m_k.
double moment_cost(const MomentTrajectory& traj, const PolicyParams& policy,
                   const CostWeights& weights);

/// [[S, U^T], [U, Y]] as a 6x6 symmetric matrix.
Mat6 schur_block(const Mat4& cov, const Mat24& U, const Mat2& Y);

struct GainRecovery {
  Mat24 K = Mat24::Zero();
  bool regularized = false;  // eigenvalue floor was active
};

/// K = U S^{-1} via symmetric eigendecomposition with eigenvalue floor 1e-9.
GainRecovery recover_gain(const Mat4& cov, const Mat24& U);

struct CommandResult {
  ControlInput input;
  bool saturated = false;
};

/// u = m + K (xhat - xbar), clamped to the input box.
CommandResult control_command(const Vec2& m, const Mat24& K, const Vec4& xhat,
                              const Vec4& xbar, const Limits& limits);

struct TerminalResiduals {
  Vec4 mean_violation = Vec4::Zero();  // per-component distance outside the box
  double cov_violation = 0.0;          // max eig of S_N - (Sigma_f - Sigma_tilde_N)
};

/// Distance of xbar_N from X_f (componentwise, 0 inside) and the terminal
/// covariance violation. Throws std::runtime_error when
/// Sigma_f - Sigma_tilde_N is not positive definite.
TerminalResiduals terminal_residuals(const MomentTrajectory& traj,
                                     const TerminalSpec& spec,
                                     const Mat4& sigma_tilde_N);

/// Candidate MPC initial condition: mean plus estimated-state covariance.
struct InitialCondition {
  Vec4 mean = Vec4::Zero();
  Mat4 cov = Mat4::Zero();
  bool valid = false;
};

struct EvalOutcome {
  bool feasible = false;
  double cost = 0.0;
};
using ProblemEvaluator = std::function<EvalOutcome(const InitialCondition&)>;

struct InitialChoice {
  InitialCondition chosen;
  bool used_measured = true;
  bool both_infeasible = false;  // caller falls back to slack inflation
};

/// Dual initialization: measured wins when its solve is feasible with cost no
/// worse than the predicted candidate's; the first cycle always measures.
InitialChoice choose_initial_condition(const InitialCondition& measured,
                                       const InitialCondition& predicted,
                                       const ProblemEvaluator& evaluate,
                                       bool first_cycle);

}  // namespace dtn
