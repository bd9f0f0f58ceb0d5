#include "dtn/estimation.hpp"

#include <stdexcept>

namespace dtn {

Mat4 innovation_covariance(const Mat4& C, const Mat4& D, const Mat4& cov_prior) {
  return symmetrize(C * cov_prior * C.transpose() + D * D.transpose());
}

Mat4 kalman_gain(const Mat4& cov_prior, const Mat4& C, const Mat4& innov_cov) {
  Eigen::LDLT<Mat4> ldlt(innov_cov);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.vectorD().minCoeff() < 1e-14) {
    throw std::runtime_error("kalman_gain: singular innovation covariance");
  }
  // L = P C^T S^{-1}  solved as  S L^T = C P.
  return ldlt.solve(C * cov_prior).transpose();
}

Mat4 joseph_posterior(const Mat4& cov_prior, const Mat4& gain, const Mat4& C,
                      const Mat4& D) {
  const Mat4 ilc = Mat4::Identity() - gain * C;
  return symmetrize(ilc * cov_prior * ilc.transpose() +
                    gain * D * D.transpose() * gain.transpose());
}

Mat4 propagate_error_covariance(const LinearDiscreteModel& model,
                                const MeasurementModel& meas,
                                const Mat4& cov_prior) {
  Mat4 posterior;
  const Mat4 innov = innovation_covariance(meas.C, meas.D, cov_prior);
  // C = 0 (or D overwhelming) can make the innovation singular; the update
  // then carries the prior through unchanged (gain 0), which is the correct
  // no-information limit.
  try {
    const Mat4 gain = kalman_gain(cov_prior, meas.C, innov);
    posterior = joseph_posterior(cov_prior, gain, meas.C, meas.D);
  } catch (const std::runtime_error&) {
    posterior = cov_prior;
  }
  return symmetrize(model.A * posterior * model.A.transpose() +
                    model.G * model.G.transpose());
}

FilterHorizon precompute_filter_horizon(
    const std::vector<LinearDiscreteModel>& models, const MeasurementModel& meas,
    const Mat4& cov_prior0) {
  const int n = static_cast<int>(models.size());
  FilterHorizon fh;
  fh.cov_prior.resize(n + 1);
  fh.cov_posterior.resize(n + 1);
  fh.innov_cov.resize(n + 1);
  fh.gain.resize(n + 1);
  fh.injected.resize(n);

  fh.cov_prior[0] = symmetrize(cov_prior0);
  for (int k = 0; k <= n; ++k) {
    fh.innov_cov[k] = innovation_covariance(meas.C, meas.D, fh.cov_prior[k]);
    fh.gain[k] = kalman_gain(fh.cov_prior[k], meas.C, fh.innov_cov[k]);
    fh.cov_posterior[k] =
        joseph_posterior(fh.cov_prior[k], fh.gain[k], meas.C, meas.D);
    if (k < n) {
      fh.cov_prior[k + 1] =
          symmetrize(models[k].A * fh.cov_posterior[k] * models[k].A.transpose() +
                     models[k].G * models[k].G.transpose());
    }
  }
  for (int k = 0; k < n; ++k) {
    fh.injected[k] = symmetrize(fh.gain[k + 1] * fh.innov_cov[k + 1] *
                                fh.gain[k + 1].transpose());
  }
  return fh;
}

StateEstimate filter_update(const StateEstimate& est,
                            const LinearDiscreteModel& model,
                            const MeasurementModel& meas,
                            const ControlInput& input, const Vec4& measurement) {
  StateEstimate next;
  next.mean_prior = model.A * est.mean_posterior + model.B * input.vec() + model.r;
  next.cov_prior = symmetrize(model.A * est.cov_posterior * model.A.transpose() +
                              model.G * model.G.transpose());
  const Mat4 innov_cov = innovation_covariance(meas.C, meas.D, next.cov_prior);
  const Mat4 gain = kalman_gain(next.cov_prior, meas.C, innov_cov);
  const Vec4 innovation = measurement - meas.C * next.mean_prior;
  next.mean_posterior = next.mean_prior + gain * innovation;
  next.cov_posterior = joseph_posterior(next.cov_prior, gain, meas.C, meas.D);
  return next;
}

}  // namespace dtn
