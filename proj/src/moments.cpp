#include "dtn/moments.hpp"

#include <stdexcept>

namespace dtn {

Vec4 mean_step(const LinearDiscreteModel& model, const Vec4& mean, const Vec2& m) {
  return model.A * mean + model.B * m + model.r;
}

Mat4 covariance_step(const LinearDiscreteModel& model, const Mat4& cov,
                     const Mat24& U, const Mat2& Y, const Mat4& L_next,
                     const Mat4& innov_cov_next) {
  const Mat4& A = model.A;
  const Mat42& B = model.B;
  Mat4 next = A * cov * A.transpose();
  next += B * U * A.transpose();
  next += A * U.transpose() * B.transpose();
  next += B * Y * B.transpose();
  next += L_next * innov_cov_next * L_next.transpose();
  return symmetrize(next);
}

double moment_cost(const MomentTrajectory& traj, const PolicyParams& policy,
                   const CostWeights& weights) {
  const int n = static_cast<int>(policy.feedforward.size());
  if (traj.horizon() != n || static_cast<int>(weights.reference.size()) < n) {
    throw std::invalid_argument("moment_cost: inconsistent horizon lengths");
  }
  double cost = 0.0;
  for (int k = 0; k < n; ++k) {
    const Vec4 dev = traj.means[k] - weights.reference[k];
    cost += (weights.Q * traj.covs[k]).trace();
    cost += dev.dot(weights.Q * dev);
    cost += (weights.R * policy.auxiliary[k]).trace();
    cost += policy.feedforward[k].dot(weights.R * policy.feedforward[k]);
  }
  return cost;
}

Mat6 schur_block(const Mat4& cov, const Mat24& U, const Mat2& Y) {
  Mat6 block;
  block.topLeftCorner<4, 4>() = symmetrize(cov);
  block.topRightCorner<4, 2>() = U.transpose();
  block.bottomLeftCorner<2, 4>() = U;
  block.bottomRightCorner<2, 2>() = symmetrize(Y);
  return block;
}

GainRecovery recover_gain(const Mat4& cov, const Mat24& U) {
  constexpr double kFloor = 1e-9;
  Eigen::SelfAdjointEigenSolver<Mat4> eig(symmetrize(cov));
  GainRecovery out;
  Vec4 inv;
  for (int i = 0; i < 4; ++i) {
    double lam = eig.eigenvalues()[i];
    if (lam < kFloor) {
      lam = kFloor;
      out.regularized = true;
    }
    inv[i] = 1.0 / lam;
  }
  const Mat4 pinv =
      eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
  out.K = U * pinv;
  return out;
}

CommandResult control_command(const Vec2& m, const Mat24& K, const Vec4& xhat,
                              const Vec4& xbar, const Limits& limits) {
  const Vec2 raw = m + K * (xhat - xbar);
  CommandResult res;
  res.input.a = std::clamp(raw[0], limits.a_min, limits.a_max);
  res.input.delta = std::clamp(raw[1], -limits.delta_max, limits.delta_max);
  res.saturated = (res.input.a != raw[0]) || (res.input.delta != raw[1]);
  return res;
}

TerminalResiduals terminal_residuals(const MomentTrajectory& traj,
                                     const TerminalSpec& spec,
                                     const Mat4& sigma_tilde_N) {
  const Mat4 cap = symmetrize(spec.cov_cap - sigma_tilde_N);
  Eigen::LLT<Mat4> llt(cap);
  if (llt.info() != Eigen::Success) {
    throw std::runtime_error(
        "terminal_residuals: Sigma_f - Sigma_tilde_N is not positive definite");
  }
  TerminalResiduals res;
  const Vec4& xN = traj.means.back();
  for (int i = 0; i < 4; ++i) {
    const double lo = spec.center[i] - spec.half_width[i];
    const double hi = spec.center[i] + spec.half_width[i];
    res.mean_violation[i] = std::max({0.0, lo - xN[i], xN[i] - hi});
  }
  Eigen::SelfAdjointEigenSolver<Mat4> eig(symmetrize(traj.covs.back()) - cap);
  res.cov_violation = eig.eigenvalues().maxCoeff();
  return res;
}

InitialChoice choose_initial_condition(const InitialCondition& measured,
                                       const InitialCondition& predicted,
                                       const ProblemEvaluator& evaluate,
                                       bool first_cycle) {
  InitialChoice choice;
  if (first_cycle || !predicted.valid) {
    choice.chosen = measured;
    choice.used_measured = true;
    return choice;
  }
  const EvalOutcome m_out = evaluate(measured);
  const EvalOutcome p_out = evaluate(predicted);
  if (m_out.feasible && (!p_out.feasible || m_out.cost <= p_out.cost)) {
    choice.chosen = measured;
    choice.used_measured = true;
  } else if (p_out.feasible) {
    choice.chosen = predicted;
    choice.used_measured = false;
  } else {
    // Both infeasible: hand the measured candidate back and let the
    // negotiation layer absorb the violation through slack inflation.
    choice.chosen = measured;
    choice.used_measured = true;
    choice.both_infeasible = true;
  }
  return choice;
}

}  // namespace dtn
