// Distributed trajectory negotiation. The file is organized as:
//
//   1. Public residual/penalty helpers.
//   2. Internals (anonymous namespace): condensed mean dynamics, covariance
//      sensitivities, restoration, the pair table (directed-row geometry,
//      margins, inflation), reusable solver contexts for the mean QP and the
//      covariance SDP, post-solve gates, and the descent guard quantities.
//   3. negotiate() and the one-shot block wrappers.
//   4. The receding-horizon Coordinator.
//
// Feasibility architecture. Hard rows are enforced with margins sized so that
// a splitting solver at tolerance 1e-4, followed by exact restoration
// (clamping, LMI repair, exact repropagation) and a 5e-4 acceptance gate on
// the true restored row values, leaves every committed decision strictly
// inside the unmargined constraint set. Rows found violated at a round start
// (stale linearization, capped relaxation from a previous round) are relaxed
// by exactly their violation plus a pad, capped below the margin, so the
// chain  margin - cap - gate > 0  keeps true residuals positive; the applied
// relaxation is reported in the round records, never hidden.

#include "dtn/admm_dtn.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>

#include "dtn/dynamics.hpp"

namespace dtn {
namespace {

// Floor of the post-restoration acceptance slack on true row values.
constexpr double kGateTol = 5e-4;
// Initial-condition probe acceptance floor (feasibility of a candidate x0).
constexpr double kProbeTol = 1e-3;
// Fraction of each safety margin the acceptance gates concede to first-order
// solver noise and exact-repropagation drift. The blocks aim at rows shaved
// by the full margin, so accepted rows keep the remaining fraction as a
// strict buffer over the unshaved constraints.
constexpr double kGateFrac = 0.5;
// A plan whose terminal-cap eigenvalue clears this fraction of the terminal
// margin skips the covariance solves for the cycle (drift budget between the
// gate target kGateFrac and this threshold).
constexpr double kCapSkipFrac = 0.25;
// Covariance eigenvalues below this fraction of the largest one count as
// null directions during LMI repair: injection mass there is solver slop,
// and keeping it would blow up the Schur-complement pseudo-inverse.
constexpr double kEigRelCut = 1e-4;
// Pad added to row relaxations so the relaxed row is satisfiable strictly.
constexpr double kInflPad = 1e-9;
// A slack this small marks its row as active for the mean-block penalty.
constexpr double kActiveSlack = 1e-12;
// Floor on the frozen gap used by the Gauss-Newton penalty linearization.
constexpr double kGapFloor = 0.05;
// Eigenvalue floor for pseudo-inverses and range projections.
constexpr double kEigFloor = 1e-9;
// A plan whose worst chance residual is below -kUnsafeTol is discarded.
constexpr double kUnsafeTol = 1e-3;
// Per-vehicle objective increase tolerated by the descent guard.
constexpr double kDescentTol = 1e-9;
// When every own chance row clears this slack (transformed-gap units) and the
// duals are zero, the covariance block reduces to the analytic slack update.
constexpr double kCovSkipSlack = 1.0;
constexpr double kBigBound = 1e9;

double mean_gate_slack(const SafetyParams& s) {
  return std::max(kGateTol, kGateFrac * s.margin_mean);
}
double cov_gate_slack(const SafetyParams& s) {
  return std::max(kGateTol, kGateFrac * s.margin_cov);
}
double state_gate_slack(const SafetyParams& s) {
  return std::max(kGateTol, kGateFrac * s.margin_state);
}
double terminal_gate_slack(const SafetyParams& s) {
  return std::max(kGateTol, kGateFrac * s.margin_terminal);
}

std::vector<Vec2> profile_positions(const LocalDecision& d) {
  std::vector<Vec2> p(d.means.size());
  for (std::size_t k = 0; k < d.means.size(); ++k) p[k] = d.means[k].head<2>();
  return p;
}

double profile_min_distance(const LocalDecision& a, const LocalDecision& b) {
  double best = std::numeric_limits<double>::infinity();
  const std::size_t n = std::min(a.means.size(), b.means.size());
  for (std::size_t k = 0; k < n; ++k)
    best = std::min(best, (a.means[k].head<2>() - b.means[k].head<2>()).norm());
  return best;
}

double profile_min_distance(const LocalDecision& a, const ObstacleTrack& o) {
  double best = std::numeric_limits<double>::infinity();
  const std::size_t n = std::min(a.means.size(), o.position.size());
  for (std::size_t k = 0; k < n; ++k)
    best = std::min(best, (a.means[k].head<2>() - o.position[k]).norm());
  return best;
}

// ---------------------------------------------------------------------------
// Decision packing (solver variable order).

Eigen::VectorXd pack_mean(const LocalDecision& d) {
  const int N = d.horizon();
  Eigen::VectorXd z(3 * N + 1);
  for (int k = 0; k < N; ++k) z.segment<2>(2 * k) = d.feedforward[k];
  z.tail(N + 1) = d.distances;
  return z;
}

void unpack_mean(const Eigen::VectorXd& z, LocalDecision& d) {
  const int N = d.horizon();
  for (int k = 0; k < N; ++k) d.feedforward[k] = z.segment<2>(2 * k);
  d.distances = z.tail(N + 1);
}

// Covariance-block variable order, per step k: U_k row-major (8), then the
// auxiliary entries y00, y01, y11 (3); slacks follow all policy variables,
// one length-N vector per negotiated slot.
int cov_var(int k, int r, int c) { return 11 * k + 4 * r + c; }
int cov_y(int k, int which) { return 11 * k + 8 + which; }

Eigen::VectorXd pack_cov(const LocalDecision& d, const std::vector<int>& slots) {
  const int N = d.horizon();
  Eigen::VectorXd z = Eigen::VectorXd::Zero(11 * N + static_cast<int>(slots.size()) * N);
  for (int k = 0; k < N; ++k) {
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 4; ++c) z(cov_var(k, r, c)) = d.injection[k](r, c);
    z(cov_y(k, 0)) = d.auxiliary[k](0, 0);
    z(cov_y(k, 1)) = d.auxiliary[k](0, 1);
    z(cov_y(k, 2)) = d.auxiliary[k](1, 1);
  }
  for (std::size_t s = 0; s < slots.size(); ++s) {
    auto it = d.slacks.find(slots[s]);
    if (it != d.slacks.end() && it->second.size() == N)
      z.segment(11 * N + static_cast<int>(s) * N, N) = it->second;
  }
  return z;
}

void unpack_cov(const Eigen::VectorXd& z, const std::vector<int>& slots,
                LocalDecision& d) {
  const int N = d.horizon();
  for (int k = 0; k < N; ++k) {
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 4; ++c) d.injection[k](r, c) = z(cov_var(k, r, c));
    d.auxiliary[k](0, 0) = z(cov_y(k, 0));
    d.auxiliary[k](0, 1) = d.auxiliary[k](1, 0) = z(cov_y(k, 1));
    d.auxiliary[k](1, 1) = z(cov_y(k, 2));
  }
  for (std::size_t s = 0; s < slots.size(); ++s)
    d.slacks[slots[s]] = z.segment(11 * N + static_cast<int>(s) * N, N);
}

// ---------------------------------------------------------------------------
// Repropagation and restoration.

void repropagate_means(const std::vector<LinearDiscreteModel>& models,
                       const Vec4& x0, LocalDecision& d) {
  const int N = static_cast<int>(models.size());
  d.means.resize(N + 1);
  d.means[0] = x0;
  for (int k = 0; k < N; ++k)
    d.means[k + 1] = mean_step(models[k], d.means[k], d.feedforward[k]);
}

void repropagate_covs(const std::vector<LinearDiscreteModel>& models,
                      const FilterHorizon& filter, const Mat4& cov0,
                      LocalDecision& d) {
  const int N = static_cast<int>(models.size());
  d.covs.resize(N + 1);
  d.covs[0] = symmetrize(cov0);
  for (int k = 0; k < N; ++k)
    d.covs[k + 1] =
        covariance_step(models[k], d.covs[k], d.injection[k], d.auxiliary[k],
                        filter.gain[k + 1], filter.innov_cov[k + 1]);
}

void restore_mean_profile(const VehicleProblem& prob, const Parameters& params,
                          const Vec4& x0, LocalDecision& d) {
  const int N = static_cast<int>(prob.models.size());
  for (int k = 0; k < N; ++k) {
    d.feedforward[k](0) = std::clamp(d.feedforward[k](0), params.limits.a_min,
                                     params.limits.a_max);
    d.feedforward[k](1) = std::clamp(d.feedforward[k](1),
                                     -params.limits.delta_max,
                                     params.limits.delta_max);
  }
  d.distances = d.distances.cwiseMax(params.d_min).cwiseMin(params.d_max);
  repropagate_means(prob.models, x0, d);
}

// Forward LMI repair. The injections and auxiliary terms are kept exactly as
// extracted -- the covariance recursion is linear in them, so repropagation
// reproduces the solver's internal trajectory, and any repair that re-derives
// gains from the repropagated covariances feeds its own drift back through
// the closed loop and diverges over the horizon. Each step only (a) removes
// injection mass on null directions of the covariance (eigenvalues below a
// relative cut) and (b) lifts the auxiliary term by the smallest multiple of
// the identity that makes the Schur complement hold, which is bounded by the
// solver's cone slop. The repaired profile satisfies the block LMIs and the
// recursion to machine precision while staying within solver tolerance of
// the raw iterate.
void restore_cov_profile(const VehicleProblem& prob, const Mat4& cov0,
                         LocalDecision& d) {
  const int N = static_cast<int>(prob.models.size());
  d.covs.resize(N + 1);
  d.covs[0] = project_psd(cov0);
  for (int k = 0; k < N; ++k) {
    Eigen::SelfAdjointEigenSolver<Mat4> eig(d.covs[k]);
    const double cut =
        std::max(kEigFloor, kEigRelCut * eig.eigenvalues().maxCoeff());
    Mat4 range = Mat4::Zero();
    Mat4 pinv = Mat4::Zero();
    for (int a = 0; a < 4; ++a) {
      if (eig.eigenvalues()(a) > cut) {
        const Vec4 v = eig.eigenvectors().col(a);
        range += v * v.transpose();
        pinv += v * v.transpose() / eig.eigenvalues()(a);
      }
    }
    d.injection[k] = d.injection[k] * range;
    const Mat2 s =
        symmetrize(d.injection[k] * pinv * d.injection[k].transpose());
    d.auxiliary[k] = symmetrize(d.auxiliary[k]);
    const double lift =
        Eigen::SelfAdjointEigenSolver<Mat2>(Mat2(s - d.auxiliary[k]))
            .eigenvalues()
            .maxCoeff();
    if (lift > 0.0) d.auxiliary[k] += lift * Mat2::Identity();
    d.covs[k + 1] = covariance_step(prob.models[k], d.covs[k], d.injection[k],
                                    d.auxiliary[k], prob.filter.gain[k + 1],
                                    prob.filter.innov_cov[k + 1]);
  }
  for (auto& kv : d.slacks) kv.second = kv.second.cwiseMax(0.0);
}

// ---------------------------------------------------------------------------
// Condensed mean dynamics:  xbar_k = phi_k + psi_k m  (m stacked over steps).

struct Condensation {
  std::vector<Vec4> phi;
  std::vector<Eigen::MatrixXd> psi;  // 4 x 2N each
};

Condensation condense(const std::vector<LinearDiscreteModel>& models,
                      const Vec4& x0) {
  const int N = static_cast<int>(models.size());
  Condensation c;
  c.phi.resize(N + 1);
  c.psi.resize(N + 1);
  c.phi[0] = x0;
  c.psi[0] = Eigen::MatrixXd::Zero(4, 2 * N);
  for (int k = 0; k < N; ++k) {
    c.phi[k + 1] = models[k].A * c.phi[k] + models[k].r;
    c.psi[k + 1] = models[k].A * c.psi[k];
    c.psi[k + 1].middleCols(2 * k, 2) += models[k].B;
  }
  return c;
}

// Covariance condensation: S_k(z) = base_k + sum_v sens_k[v] z_v over the
// policy variables with index v < 11k (later policy steps cannot influence
// earlier covariances).
struct CovSens {
  std::vector<Mat4> base;                 // k = 0..N
  std::vector<std::vector<Mat4>> sens;    // [k][v], v < 11k
};

CovSens cov_sensitivities(const std::vector<LinearDiscreteModel>& models,
                          const FilterHorizon& filter, const Mat4& cov0) {
  const int N = static_cast<int>(models.size());
  CovSens s;
  s.base.resize(N + 1);
  s.sens.resize(N + 1);
  s.base[0] = symmetrize(cov0);
  for (int k = 0; k < N; ++k) {
    const Mat4& A = models[k].A;
    const Mat42& B = models[k].B;
    s.base[k + 1] = symmetrize(A * s.base[k] * A.transpose() + filter.injected[k]);
    s.sens[k + 1].assign(11 * (k + 1), Mat4::Zero());
    for (int v = 0; v < 11 * k; ++v)
      s.sens[k + 1][v] = A * s.sens[k][v] * A.transpose();
    for (int r = 0; r < 2; ++r) {
      for (int c = 0; c < 4; ++c) {
        const Mat4 seed = B.col(r) * A.col(c).transpose();
        s.sens[k + 1][cov_var(k, r, c)] = seed + seed.transpose();
      }
    }
    s.sens[k + 1][cov_y(k, 0)] = B.col(0) * B.col(0).transpose();
    s.sens[k + 1][cov_y(k, 1)] = B.col(0) * B.col(1).transpose() +
                                 B.col(1) * B.col(0).transpose();
    s.sens[k + 1][cov_y(k, 2)] = B.col(1) * B.col(1).transpose();
  }
  return s;
}

// ---------------------------------------------------------------------------
// Pair table: directed-row geometry, frozen linearization data, margins.

struct DirGeom {
  std::vector<Vec2> t;       // transformed normals, k = 1..N
  Eigen::VectorXd sigma2;    // projected variance at the freezing point
  Eigen::VectorXd g0;        // frozen gap for the Gauss-Newton penalty
  Eigen::VectorXd gap_sq;    // frozen (gap - d)^2 for the covariance block
  Eigen::VectorXd infl_mean; // current relaxation of the mean row
  Eigen::VectorXd infl_cov;  // current relaxation of the covariance row

  void init(int N) {
    t.assign(N, Vec2(1.0, 0.0));
    sigma2 = Eigen::VectorXd::Zero(N);
    g0 = Eigen::VectorXd::Constant(N, kGapFloor);
    gap_sq = Eigen::VectorXd::Zero(N);
    infl_mean = Eigen::VectorXd::Zero(N);
    infl_cov = Eigen::VectorXd::Zero(N);
  }
};

struct PairTable {
  int V = 0, N = 0;
  std::vector<std::vector<int>> slots;         // negotiated partner indices
  std::vector<std::vector<int>> slot_of;       // [i][j] -> slot index or -1
  std::vector<std::vector<int>> obs;           // coupled obstacle indices
  std::vector<std::vector<DirGeom>> geom;      // [i][slot]
  std::vector<std::vector<DirGeom>> obs_geom;  // [i][obstacle slot]
  std::vector<std::vector<Mat2>> pos_cov;      // total position covariance
};

// Speed/terminal box bounds effective this round: the nominal margined box,
// relaxed (speed: capped; terminal: uncapped, it is a task constraint) just
// enough to contain the current profile.
struct StateBounds {
  Eigen::VectorXd speed_lo, speed_hi;  // k = 1..N
  Vec4 term_lo = Vec4::Zero(), term_hi = Vec4::Zero();
  double inflation = 0.0;
};

struct NegState {
  const std::vector<VehicleProblem>* problems = nullptr;
  const std::vector<ObstacleTrack>* obstacles = nullptr;
  const Parameters* params = nullptr;
  const SafetyParams* safety = nullptr;
  std::vector<LocalDecision> dec;
  std::vector<DualState> duals;
  std::vector<std::vector<std::vector<char>>> active;  // [i][slot][k-1]
  std::vector<StateBounds> bounds;
  PairTable table;
  double c = 0.0, c2 = 0.0, rho = 100.0;
};

const Eigen::VectorXd& dual_of(const NegState& st, int i, int j) {
  static const Eigen::VectorXd kEmpty;
  auto it = st.duals[i].multipliers.find(j);
  return it == st.duals[i].multipliers.end() ? kEmpty : it->second;
}

double dual_at(const NegState& st, int i, int j, int k1) {
  const Eigen::VectorXd& lam = dual_of(st, i, j);
  return lam.size() > k1 ? lam(k1) : 0.0;
}

double slack_at(const LocalDecision& d, int j, int k1) {
  auto it = d.slacks.find(j);
  return (it != d.slacks.end() && it->second.size() > k1) ? it->second(k1) : 0.0;
}

void build_pair_table(NegState& st,
                      const std::vector<std::vector<int>>* neighbor_sets) {
  const auto& problems = *st.problems;
  const int V = static_cast<int>(problems.size());
  const int N = V > 0 ? static_cast<int>(problems[0].models.size()) : 0;
  PairTable& T = st.table;
  T.V = V;
  T.N = N;
  T.slots.assign(V, {});
  T.slot_of.assign(V, std::vector<int>(V, -1));
  T.obs.assign(V, {});
  T.geom.assign(V, {});
  T.obs_geom.assign(V, {});
  T.pos_cov.assign(V, {});
  for (int i = 0; i < V; ++i)
    T.pos_cov[i] = position_covariances(st.dec[i], problems[i].filter);
  auto listed = [](const std::vector<int>& v, int x) {
    return std::find(v.begin(), v.end(), x) != v.end();
  };
  for (int i = 0; i < V; ++i) {
    for (int j = i + 1; j < V; ++j) {
      bool wanted = neighbor_sets == nullptr ||
                    listed((*neighbor_sets)[i], j) ||
                    listed((*neighbor_sets)[j], i);
      if (!wanted) continue;
      if (profile_min_distance(st.dec[i], st.dec[j]) > st.safety->cull_distance)
        continue;
      T.slot_of[i][j] = static_cast<int>(T.slots[i].size());
      T.slots[i].push_back(j);
      T.slot_of[j][i] = static_cast<int>(T.slots[j].size());
      T.slots[j].push_back(i);
    }
  }
  for (int i = 0; i < V; ++i) {
    T.geom[i].resize(T.slots[i].size());
    for (auto& g : T.geom[i]) g.init(N);
    for (std::size_t o = 0; o < st.obstacles->size(); ++o) {
      if (profile_min_distance(st.dec[i], (*st.obstacles)[o]) <=
          st.safety->cull_distance)
        T.obs[i].push_back(static_cast<int>(o));
    }
    T.obs_geom[i].resize(T.obs[i].size());
    for (auto& g : T.obs_geom[i]) g.init(N);
  }
}

double projected_var(const Vec2& t, const Mat2& P) {
  return std::max(t.dot(P * t), 0.0);
}

// Recomputes normals, projected variances, and the frozen penalty gaps from
// the current decisions. Called at the start of every outer iteration.
void refresh_geometry(NegState& st) {
  PairTable& T = st.table;
  const int N = T.N;
  std::vector<std::vector<Vec2>> vpos(T.V);
  for (int i = 0; i < T.V; ++i) vpos[i] = profile_positions(st.dec[i]);
  for (int i = 0; i < T.V; ++i) {
    for (std::size_t s = 0; s < T.slots[i].size(); ++s) {
      const int j = T.slots[i][s];
      DirGeom& g = T.geom[i][s];
      g.t = pair_normals(st.dec[i].means, vpos[j], st.params->geometry,
                         *st.safety);
      for (int k = 1; k <= N; ++k) {
        g.sigma2(k - 1) =
            projected_var(g.t[k - 1], Mat2(T.pos_cov[i][k] + T.pos_cov[j][k]));
        const double gap = g.t[k - 1].dot(vpos[i][k] - vpos[j][k]) -
                           st.dec[i].distances(k);
        g.g0(k - 1) = std::max(gap, kGapFloor);
      }
    }
    for (std::size_t s = 0; s < T.obs[i].size(); ++s) {
      const ObstacleTrack& ob = (*st.obstacles)[T.obs[i][s]];
      DirGeom& g = T.obs_geom[i][s];
      g.t = pair_normals(st.dec[i].means, ob.position, st.params->geometry,
                         *st.safety);
      for (int k = 1; k <= N; ++k) {
        g.sigma2(k - 1) =
            projected_var(g.t[k - 1], Mat2(T.pos_cov[i][k] + ob.position_cov));
        const double gap = g.t[k - 1].dot(vpos[i][k] - ob.position[k]) -
                           st.dec[i].distances(k);
        g.g0(k - 1) = std::max(gap, kGapFloor);
      }
    }
  }
}

// Freezes (gap - d)^2 at the post-mean-block profiles for the covariance rows.
void freeze_gap_sq(NegState& st) {
  PairTable& T = st.table;
  for (int i = 0; i < T.V; ++i) {
    const auto pos_i = profile_positions(st.dec[i]);
    for (std::size_t s = 0; s < T.slots[i].size(); ++s) {
      const int j = T.slots[i][s];
      DirGeom& g = T.geom[i][s];
      for (int k = 1; k <= T.N; ++k) {
        const double gap =
            g.t[k - 1].dot(pos_i[k] - st.dec[j].means[k].head<2>()) -
            st.dec[i].distances(k);
        g.gap_sq(k - 1) = gap * gap;
      }
    }
    for (std::size_t s = 0; s < T.obs[i].size(); ++s) {
      const ObstacleTrack& ob = (*st.obstacles)[T.obs[i][s]];
      DirGeom& g = T.obs_geom[i][s];
      for (int k = 1; k <= T.N; ++k) {
        const double gap =
            g.t[k - 1].dot(pos_i[k] - ob.position[k]) - st.dec[i].distances(k);
        g.gap_sq(k - 1) = gap * gap;
      }
    }
  }
}

// Relaxes each mean hard row by exactly its current violation (plus pad, up
// to the cap); returns the largest relaxation applied.
// Row relaxations are sized to keep the incumbent decision feasible for the
// round's local problem (the Eq.-36 induction); they are reported, not
// capped, and the dual/penalty pressure removes them across rounds.
double compute_mean_inflation(NegState& st) {
  PairTable& T = st.table;
  double worst = 0.0;
  auto one = [&](DirGeom& g, const std::vector<Vec2>& pos_i,
                 const Eigen::VectorXd& d,
                 const std::vector<Vec2>* pos_j, const ObstacleTrack* ob) {
    for (int k = 1; k <= T.N; ++k) {
      const Vec2 pj = pos_j ? (*pos_j)[k] : ob->position[k];
      const double val = g.t[k - 1].dot(pos_i[k] - pj) - d(k);
      const double rhs = st.c * std::sqrt(2.0 * g.sigma2(k - 1)) +
                         st.safety->margin_mean;
      const double need = rhs - val;
      g.infl_mean(k - 1) = need > 0.0 ? need + kInflPad : 0.0;
      worst = std::max(worst, g.infl_mean(k - 1));
    }
  };
  for (int i = 0; i < T.V; ++i) {
    const auto pos_i = profile_positions(st.dec[i]);
    for (std::size_t s = 0; s < T.slots[i].size(); ++s) {
      const auto pos_j = profile_positions(st.dec[T.slots[i][s]]);
      one(T.geom[i][s], pos_i, st.dec[i].distances, &pos_j, nullptr);
    }
    for (std::size_t s = 0; s < T.obs[i].size(); ++s)
      one(T.obs_geom[i][s], pos_i, st.dec[i].distances, nullptr,
          &(*st.obstacles)[T.obs[i][s]]);
  }
  return worst;
}

double compute_cov_inflation(NegState& st) {
  PairTable& T = st.table;
  double worst = 0.0;
  auto one = [&](DirGeom& g, int i, int j, const Mat2* obs_cov) {
    for (int k = 1; k <= T.N; ++k) {
      const Mat2 P = T.pos_cov[i][k] + (obs_cov ? *obs_cov : T.pos_cov[j][k]);
      const double val = g.gap_sq(k - 1) - st.safety->margin_cov -
                         2.0 * st.c2 * projected_var(g.t[k - 1], P);
      g.infl_cov(k - 1) = val < 0.0 ? -val + kInflPad : 0.0;
      worst = std::max(worst, g.infl_cov(k - 1));
    }
  };
  for (int i = 0; i < T.V; ++i) {
    for (std::size_t s = 0; s < T.slots[i].size(); ++s)
      one(T.geom[i][s], i, T.slots[i][s], nullptr);
    for (std::size_t s = 0; s < T.obs[i].size(); ++s)
      one(T.obs_geom[i][s], i, -1,
          &(*st.obstacles)[T.obs[i][s]].position_cov);
  }
  return worst;
}

StateBounds nominal_state_bounds(const VehicleProblem& prob,
                                 const Parameters& params,
                                 const SafetyParams& safety) {
  const int N = static_cast<int>(prob.models.size());
  StateBounds b;
  b.speed_lo = Eigen::VectorXd::Constant(N, safety.margin_state);
  b.speed_hi =
      Eigen::VectorXd::Constant(N, params.limits.v_max - safety.margin_state);
  const Vec4 half =
      (prob.terminal.half_width.array() - safety.margin_state).max(1e-6);
  b.term_lo = prob.terminal.center - half;
  b.term_hi = prob.terminal.center + half;
  return b;
}

StateBounds compute_state_bounds(const NegState& st, int i) {
  const VehicleProblem& prob = (*st.problems)[i];
  const int N = static_cast<int>(prob.models.size());
  StateBounds b = nominal_state_bounds(prob, *st.params, *st.safety);
  const double v_max = st.params->limits.v_max;
  for (int k = 1; k <= N; ++k) {
    const double v = st.dec[i].means[k](3);
    if (v < b.speed_lo(k - 1)) {
      const double lo = std::max(0.0, v - kInflPad);
      b.inflation = std::max(b.inflation, b.speed_lo(k - 1) - lo);
      b.speed_lo(k - 1) = lo;
    }
    if (v > b.speed_hi(k - 1)) {
      const double hi = std::min(v_max, v + kInflPad);
      b.inflation = std::max(b.inflation, hi - b.speed_hi(k - 1));
      b.speed_hi(k - 1) = hi;
    }
  }
  const Vec4& xN = st.dec[i].means[N];
  for (int c = 0; c < 4; ++c) {
    if (xN(c) < b.term_lo(c)) {
      const double r = b.term_lo(c) - xN(c) + kInflPad;
      b.term_lo(c) -= r;
      b.inflation = std::max(b.inflation, r);
    }
    if (xN(c) > b.term_hi(c)) {
      const double r = xN(c) - b.term_hi(c) + kInflPad;
      b.term_hi(c) += r;
      b.inflation = std::max(b.inflation, r);
    }
  }
  return b;
}

void refresh_active(NegState& st) {
  const PairTable& T = st.table;
  st.active.assign(T.V, {});
  for (int i = 0; i < T.V; ++i) {
    st.active[i].assign(T.slots[i].size(), std::vector<char>(T.N, 0));
    for (std::size_t s = 0; s < T.slots[i].size(); ++s)
      for (int k1 = 0; k1 < T.N; ++k1)
        st.active[i][s][k1] =
            slack_at(st.dec[i], T.slots[i][s], k1) <= kActiveSlack;
  }
}

// ---------------------------------------------------------------------------
// Mean-block solver context. Variables z = (m_0..m_{N-1}, d_0..d_N). Cone
// layout: [input box][distance box][speed box][terminal box][own pair rows]
// [cross pair rows][obstacle rows]; the pair-row matrices are refilled each
// outer iteration (frozen normals), their offsets each round.
class MeanCtx {
 public:
  MeanCtx(const NegState& st, int i, const Vec4& x0,
          const SolverSettings& settings)
      : i_(i) {
    const VehicleProblem& prob = (*st.problems)[i];
    const Parameters& par = *st.params;
    N_ = static_cast<int>(prob.models.size());
    nm_ = 2 * N_;
    n_ = 3 * N_ + 1;
    S_ = static_cast<int>(st.table.slots[i].size());
    O_ = static_cast<int>(st.table.obs[i].size());
    cond_ = condense(prob.models, x0);

    P0_ = Eigen::MatrixXd::Zero(n_, n_);
    q0_ = Eigen::VectorXd::Zero(n_);
    for (int k = 0; k < N_; ++k) {
      const Eigen::MatrixXd& psi = cond_.psi[k];
      P0_.topLeftCorner(nm_, nm_).noalias() +=
          2.0 * psi.transpose() * par.Q * psi;
      P0_.block(2 * k, 2 * k, 2, 2) += 2.0 * par.R;
      q0_.head(nm_).noalias() +=
          2.0 * psi.transpose() * (par.Q * (cond_.phi[k] - prob.reference[k]));
    }
    q0_.tail(N_ + 1).setConstant(-par.eta);

    rows_ = nm_ + (N_ + 1) + N_ + 4 + (2 * S_ + O_) * N_;
    H_ = Eigen::MatrixXd::Zero(rows_, n_);
    h_ = Eigen::VectorXd::Zero(rows_);
    H_.block(0, 0, nm_, nm_).setIdentity();
    H_.block(nm_, nm_, N_ + 1, N_ + 1).setIdentity();
    row_speed_ = nm_ + N_ + 1;
    for (int k = 1; k <= N_; ++k) {
      H_.block(row_speed_ + k - 1, 0, 1, nm_) = cond_.psi[k].row(3);
      h_(row_speed_ + k - 1) = cond_.phi[k](3);
    }
    row_term_ = row_speed_ + N_;
    H_.block(row_term_, 0, 4, nm_) = cond_.psi[N_];
    h_.segment<4>(row_term_) = cond_.phi[N_];
    row_own_ = row_term_ + 4;
    row_cross_ = row_own_ + S_ * N_;
    row_obs_ = row_cross_ + S_ * N_;

    ConicProblem cp(n_);
    cp.P = P0_;
    cp.q = q0_;
    Eigen::VectorXd lo_m(nm_), hi_m(nm_);
    for (int k = 0; k < N_; ++k) {
      lo_m(2 * k) = par.limits.a_min;
      hi_m(2 * k) = par.limits.a_max;
      lo_m(2 * k + 1) = -par.limits.delta_max;
      hi_m(2 * k + 1) = par.limits.delta_max;
    }
    cp.add_box(H_.middleRows(0, nm_), h_.head(nm_), lo_m, hi_m);
    cp.add_box(H_.middleRows(nm_, N_ + 1), h_.segment(nm_, N_ + 1),
               Eigen::VectorXd::Constant(N_ + 1, par.d_min),
               Eigen::VectorXd::Constant(N_ + 1, par.d_max));
    cp.add_box(H_.middleRows(row_speed_, N_), h_.segment(row_speed_, N_),
               Eigen::VectorXd::Zero(N_),
               Eigen::VectorXd::Constant(N_, par.limits.v_max));
    cp.add_box(H_.middleRows(row_term_, 4), h_.segment<4>(row_term_),
               Eigen::VectorXd::Constant(4, -kBigBound),
               Eigen::VectorXd::Constant(4, kBigBound));
    if (S_ > 0) {
      cp.add_nonneg(H_.middleRows(row_own_, S_ * N_),
                    Eigen::VectorXd::Zero(S_ * N_));
      cp.add_nonneg(H_.middleRows(row_cross_, S_ * N_),
                    Eigen::VectorXd::Zero(S_ * N_));
    }
    if (O_ > 0)
      cp.add_nonneg(H_.middleRows(row_obs_, O_ * N_),
                    Eigen::VectorXd::Zero(O_ * N_));
    cp.finalize();
    cones_ = cp.cones;
    solver_ = std::make_unique<ConicSolver>(std::move(cp), settings);
    P_ = P0_;
    scale_own_ = Eigen::VectorXd::Ones(S_ * N_);
    scale_cross_ = Eigen::VectorXd::Ones(S_ * N_);
    scale_obs_ = Eigen::VectorXd::Ones(O_ * N_);
  }

  Vec2 phi2(int k) const { return cond_.phi[k].head<2>(); }

  // Pair-row gradients, row scaling, and the Gauss-Newton penalty Hessian for
  // the frozen geometry of this outer iteration.
  void set_outer(const NegState& st) {
    const PairTable& T = st.table;
    P_ = P0_;
    Eigen::RowVectorXd a(n_);
    for (int s = 0; s < S_; ++s) {
      const int j = T.slots[i_][s];
      const DirGeom& g = T.geom[i_][s];
      const DirGeom& gj = T.geom[j][T.slot_of[j][i_]];
      for (int k = 1; k <= N_; ++k) {
        const int idx = s * N_ + (k - 1);
        a.setZero();
        a.head(nm_) = g.t[k - 1].transpose() * cond_.psi[k].topRows(2);
        a(nm_ + k) = -1.0;
        const double sc = 1.0 / std::max(a.norm(), 1e-8);
        H_.row(row_own_ + idx) = sc * a;
        scale_own_(idx) = sc;
        if (st.active[i_][s][k - 1]) {
          const double g0 = g.g0(k - 1);
          P_.noalias() += (st.rho * 4.0 * g0 * g0) * (a.transpose() * a);
        }
        a.setZero();
        a.head(nm_) = -(gj.t[k - 1].transpose() * cond_.psi[k].topRows(2));
        const double scc = 1.0 / std::max(a.norm(), 1e-8);
        H_.row(row_cross_ + idx) = scc * a;
        scale_cross_(idx) = scc;
      }
    }
    for (int s = 0; s < O_; ++s) {
      const DirGeom& g = T.obs_geom[i_][s];
      for (int k = 1; k <= N_; ++k) {
        const int idx = s * N_ + (k - 1);
        a.setZero();
        a.head(nm_) = g.t[k - 1].transpose() * cond_.psi[k].topRows(2);
        a(nm_ + k) = -1.0;
        const double sc = 1.0 / std::max(a.norm(), 1e-8);
        H_.row(row_obs_ + idx) = sc * a;
        scale_obs_(idx) = sc;
      }
    }
    dirty_ = true;
  }

  // Row offsets at the current partner profiles, penalty gradient, and the
  // effective state bounds for this round.
  void refresh_round(const NegState& st) {
    const PairTable& T = st.table;
    q_ = q0_;
    for (int s = 0; s < S_; ++s) {
      const int j = T.slots[i_][s];
      const DirGeom& g = T.geom[i_][s];
      const DirGeom& gj = T.geom[j][T.slot_of[j][i_]];
      for (int k = 1; k <= N_; ++k) {
        const int idx = s * N_ + (k - 1);
        const Vec2 pj = st.dec[j].means[k].head<2>();
        const double rhs = st.c * std::sqrt(2.0 * g.sigma2(k - 1)) +
                           st.safety->margin_mean - g.infl_mean(k - 1);
        h_(row_own_ + idx) =
            scale_own_(idx) * (g.t[k - 1].dot(phi2(k) - pj) - rhs);
        if (st.active[i_][s][k - 1]) {
          const double g0 = g.g0(k - 1);
          const double beta = -g0 * g0 - 2.0 * st.c2 * g.sigma2(k - 1) -
                              slack_at(st.dec[i_], j, k - 1) +
                              dual_at(st, i_, j, k - 1);
          const double bg = g.t[k - 1].dot(phi2(k) - pj);
          q_.noalias() +=
              (st.rho * 2.0 * g0 * (2.0 * g0 * bg + beta) / scale_own_(idx)) *
              H_.row(row_own_ + idx).transpose();
        }
        const double rhsj = st.c * std::sqrt(2.0 * gj.sigma2(k - 1)) +
                            st.safety->margin_mean - gj.infl_mean(k - 1);
        h_(row_cross_ + idx) =
            scale_cross_(idx) * (gj.t[k - 1].dot(pj - phi2(k)) -
                                 st.dec[j].distances(k) - rhsj);
      }
    }
    for (int s = 0; s < O_; ++s) {
      const ObstacleTrack& ob = (*st.obstacles)[T.obs[i_][s]];
      const DirGeom& g = T.obs_geom[i_][s];
      for (int k = 1; k <= N_; ++k) {
        const int idx = s * N_ + (k - 1);
        const double rhs = st.c * std::sqrt(2.0 * g.sigma2(k - 1)) +
                           st.safety->margin_mean - g.infl_mean(k - 1);
        h_(row_obs_ + idx) =
            scale_obs_(idx) * (g.t[k - 1].dot(phi2(k) - ob.position[k]) - rhs);
      }
    }
    cones_[2].lo = st.bounds[i_].speed_lo;
    cones_[2].hi = st.bounds[i_].speed_hi;
    // Terminal rows are centered on the box so their values stay O(1); the
    // solver's per-row relative residual then holds them as tightly as the
    // small-magnitude rows.
    const Vec4 tc =
        0.5 * (st.bounds[i_].term_lo + st.bounds[i_].term_hi);
    h_.segment<4>(row_term_) = cond_.phi[N_] - tc;
    cones_[3].lo = st.bounds[i_].term_lo - tc;
    cones_[3].hi = st.bounds[i_].term_hi - tc;
    if (dirty_) {
      solver_->update_matrices(P_, q_, H_, h_);
      dirty_ = false;
    } else {
      solver_->update_linear_terms(q_, h_);
    }
    solver_->update_cone_bounds(cones_);
  }

  void warm_from(const LocalDecision& d) {
    solver_->warm_start_primal(pack_mean(d));
  }
  SolveReport solve() { return solver_->solve(); }
  void extract(const Eigen::VectorXd& x, LocalDecision& d) const {
    unpack_mean(x, d);
  }

 private:
  int i_ = 0, N_ = 0, nm_ = 0, n_ = 0, S_ = 0, O_ = 0, rows_ = 0;
  int row_speed_ = 0, row_term_ = 0, row_own_ = 0, row_cross_ = 0, row_obs_ = 0;
  Condensation cond_;
  Eigen::MatrixXd P0_, P_, H_;
  Eigen::VectorXd q0_, q_, h_;
  Eigen::VectorXd scale_own_, scale_cross_, scale_obs_;
  std::vector<ConeBlock> cones_;
  std::unique_ptr<ConicSolver> solver_;
  bool dirty_ = true;
};

// ---------------------------------------------------------------------------
// Covariance-block solver context. Variables: per step k the injection U_k
// (8) and auxiliary (3), then one slack vector per negotiated slot. Cone
// layout: [N Schur LMIs (psd 6)][terminal cap (psd 4)][U_0 pin box][slack
// nonneg][own pair rows][cross pair rows][obstacle rows]. The layout depends
// only on (N, S, O), so an instance can be rebound to a fresh problem (the
// coordinator reuses a standalone instance across cycles).
class CovCtx {
 public:
  CovCtx(int N, int S, int O, const SolverSettings& settings)
      : N_(N), S_(S), O_(O) {
    ny_ = 11 * N_;
    n_ = ny_ + S_ * N_;
    row_cap_ = 21 * N_;
    row_u0_ = row_cap_ + 10;
    row_delta_ = row_u0_ + 8;
    row_own_ = row_delta_ + S_ * N_;
    row_cross_ = row_own_ + S_ * N_;
    row_obs_ = row_cross_ + S_ * N_;
    rows_ = row_obs_ + O_ * N_;

    H_ = Eigen::MatrixXd::Zero(rows_, n_);
    h_ = Eigen::VectorXd::Zero(rows_);
    H_.block(row_u0_, 0, 8, 8).setIdentity();
    for (int r = 0; r < S_ * N_; ++r) H_(row_delta_ + r, ny_ + r) = 1.0;

    ConicProblem cp(n_);
    cp.P = Eigen::MatrixXd::Zero(n_, n_);
    cp.q = Eigen::VectorXd::Zero(n_);
    for (int k = 0; k < N_; ++k)
      cp.add_psd(H_.middleRows(21 * k, 21), h_.segment(21 * k, 21), 6);
    cp.add_psd(H_.middleRows(row_cap_, 10), h_.segment(row_cap_, 10), 4);
    cp.add_box(H_.middleRows(row_u0_, 8), h_.segment(row_u0_, 8),
               Eigen::VectorXd::Constant(8, -kBigBound),
               Eigen::VectorXd::Constant(8, kBigBound));
    if (S_ > 0) {
      cp.add_nonneg(H_.middleRows(row_delta_, S_ * N_),
                    Eigen::VectorXd::Zero(S_ * N_));
      cp.add_nonneg(H_.middleRows(row_own_, S_ * N_),
                    Eigen::VectorXd::Zero(S_ * N_));
      cp.add_nonneg(H_.middleRows(row_cross_, S_ * N_),
                    Eigen::VectorXd::Zero(S_ * N_));
    }
    if (O_ > 0)
      cp.add_nonneg(H_.middleRows(row_obs_, O_ * N_),
                    Eigen::VectorXd::Zero(O_ * N_));
    cp.finalize();
    cones_ = cp.cones;
    solver_ = std::make_unique<ConicSolver>(std::move(cp), settings);
    P_ = Eigen::MatrixXd::Zero(n_, n_);
    q0_ = Eigen::VectorXd::Zero(n_);
    scale_own_ = Eigen::VectorXd::Ones(S_ * N_);
    scale_cross_ = Eigen::VectorXd::Ones(S_ * N_);
    scale_obs_ = Eigen::VectorXd::Ones(O_ * N_);
  }

  // Problem-dependent data: covariance sensitivities, LMI and cap blocks, and
  // the linear cost. Everything needed later is copied out of `prob`.
  void bind(const VehicleProblem& prob, const Parameters& params,
            const SafetyParams& safety) {
    sens_ = cov_sensitivities(prob.models, prob.filter, prob.initial_cov);
    cap_mat_ = prob.terminal.cov_cap - prob.filter.cov_posterior[N_];
    post_pos_.resize(N_ + 1);
    for (int k = 0; k <= N_; ++k)
      post_pos_[k] = prob.filter.cov_posterior[k].topLeftCorner<2, 2>();
    margin_terminal_ = safety.margin_terminal;
    margin_cov_ = safety.margin_cov;

    Mat6 z6;
    for (int k = 0; k < N_; ++k) {
      const int r0 = 21 * k;
      H_.middleRows(r0, 21).setZero();
      for (int v = 0; v < 11 * k; ++v) {
        z6.setZero();
        z6.topLeftCorner<4, 4>() = sens_.sens[k][v];
        H_.block(r0, v, 21, 1) = mat_to_svec(z6);
      }
      for (int r = 0; r < 2; ++r) {
        for (int c = 0; c < 4; ++c) {
          z6.setZero();
          z6(c, 4 + r) = z6(4 + r, c) = 1.0;
          H_.block(r0, cov_var(k, r, c), 21, 1) = mat_to_svec(z6);
        }
      }
      z6.setZero();
      z6(4, 4) = 1.0;
      H_.block(r0, cov_y(k, 0), 21, 1) = mat_to_svec(z6);
      z6.setZero();
      z6(4, 5) = z6(5, 4) = 1.0;
      H_.block(r0, cov_y(k, 1), 21, 1) = mat_to_svec(z6);
      z6.setZero();
      z6(5, 5) = 1.0;
      H_.block(r0, cov_y(k, 2), 21, 1) = mat_to_svec(z6);
      z6.setZero();
      z6.topLeftCorner<4, 4>() = sens_.base[k];
      h_.segment(r0, 21) = mat_to_svec(z6);
    }
    H_.middleRows(row_cap_, 10).setZero();
    for (int v = 0; v < ny_; ++v)
      H_.block(row_cap_, v, 10, 1) = mat_to_svec(Mat4(-sens_.sens[N_][v]));
    h_.segment(row_cap_, 10) = mat_to_svec(
        Mat4(cap_mat_ - margin_terminal_ * Mat4::Identity() - sens_.base[N_]));

    q0_.setZero();
    for (int k = 0; k < N_; ++k) {
      for (int v = 0; v < 11 * k; ++v)
        q0_(v) += (params.Q * sens_.sens[k][v]).trace();
      q0_(cov_y(k, 0)) += params.R(0, 0);
      q0_(cov_y(k, 1)) += 2.0 * params.R(0, 1);
      q0_(cov_y(k, 2)) += params.R(1, 1);
    }

    const bool pin = sens_.base[0].trace() <= 1e-10;
    cones_[N_ + 1].lo.setConstant(pin ? 0.0 : -kBigBound);
    cones_[N_ + 1].hi.setConstant(pin ? 0.0 : kBigBound);
    dirty_ = true;
  }

  // Coefficient of variable v in t' Phat_k(z) t: the position block quadratic
  // form of the step-k sensitivity.
  double pos_coef(int k, int v, const Vec2& t) const {
    const auto& m = sens_.sens[k][v];
    return t(0) * (m(0, 0) * t(0) + m(0, 1) * t(1)) +
           t(1) * (m(1, 0) * t(0) + m(1, 1) * t(1));
  }
  double pos_base(int k, const Vec2& t) const {
    return projected_var(t, Mat2(sens_.base[k].topLeftCorner<2, 2>()));
  }

  void set_outer(const NegState& st, int i) {
    const PairTable& T = st.table;
    P_.setZero();
    Eigen::VectorXd a(n_);
    for (int s = 0; s < S_; ++s) {
      const int j = T.slots[i][s];
      const DirGeom& g = T.geom[i][s];
      const DirGeom& gj = T.geom[j][T.slot_of[j][i]];
      for (int k = 1; k <= N_; ++k) {
        const int idx = s * N_ + (k - 1);
        a.setZero();
        for (int v = 0; v < 11 * k; ++v)
          a(v) = -2.0 * st.c2 * pos_coef(k, v, g.t[k - 1]);
        a(ny_ + idx) = 0.0;
        double sc = 1.0 / std::max(a.norm(), 1e-8);
        H_.row(row_own_ + idx) = sc * a.transpose();
        scale_own_(idx) = sc;
        // Penalty on the slack-equality residual (always on in this block;
        // the slack variable is free to absorb whatever the hard rows allow).
        a(ny_ + idx) = -1.0;
        P_.noalias() += st.rho * (a * a.transpose());
        a(ny_ + idx) = 0.0;
        for (int v = 0; v < 11 * k; ++v)
          a(v) = -2.0 * st.c2 * pos_coef(k, v, gj.t[k - 1]);
        sc = 1.0 / std::max(a.norm(), 1e-8);
        H_.row(row_cross_ + idx) = sc * a.transpose();
        scale_cross_(idx) = sc;
      }
    }
    for (int s = 0; s < O_; ++s) {
      const DirGeom& g = T.obs_geom[i][s];
      for (int k = 1; k <= N_; ++k) {
        const int idx = s * N_ + (k - 1);
        a.setZero();
        for (int v = 0; v < 11 * k; ++v)
          a(v) = -2.0 * st.c2 * pos_coef(k, v, g.t[k - 1]);
        const double sc = 1.0 / std::max(a.norm(), 1e-8);
        H_.row(row_obs_ + idx) = sc * a.transpose();
        scale_obs_(idx) = sc;
      }
    }
    dirty_ = true;
  }

  void refresh_round(const NegState& st, int i) {
    const PairTable& T = st.table;
    q_ = q0_;
    for (int s = 0; s < S_; ++s) {
      const int j = T.slots[i][s];
      const DirGeom& g = T.geom[i][s];
      const DirGeom& gj = T.geom[j][T.slot_of[j][i]];
      for (int k = 1; k <= N_; ++k) {
        const int idx = s * N_ + (k - 1);
        const Vec2& t = g.t[k - 1];
        const double base_i = pos_base(k, t) + projected_var(t, post_pos_[k]);
        const double pj = projected_var(t, T.pos_cov[j][k]);
        h_(row_own_ + idx) =
            scale_own_(idx) * (g.gap_sq(k - 1) - margin_cov_ +
                               g.infl_cov(k - 1) -
                               2.0 * st.c2 * (base_i + pj));
        // Penalty linear term: I(z) = c0 + a'z with c0 the constant part of
        // the residual at the frozen gap and current partner covariance.
        const double c0 = g.gap_sq(k - 1) - 2.0 * st.c2 * (base_i + pj);
        const double lam = dual_at(st, i, j, k - 1);
        Eigen::VectorXd a =
            H_.row(row_own_ + idx).transpose() / scale_own_(idx);
        a(ny_ + idx) = -1.0;
        q_.noalias() += (st.rho * (c0 + lam)) * a;
        const Vec2& tj = gj.t[k - 1];
        const double base_ij = pos_base(k, tj) + projected_var(tj, post_pos_[k]);
        const double pjj = projected_var(tj, T.pos_cov[j][k]);
        h_(row_cross_ + idx) =
            scale_cross_(idx) * (gj.gap_sq(k - 1) - margin_cov_ +
                                 gj.infl_cov(k - 1) -
                                 2.0 * st.c2 * (base_ij + pjj));
      }
    }
    for (int s = 0; s < O_; ++s) {
      const ObstacleTrack& ob = (*st.obstacles)[T.obs[i][s]];
      const DirGeom& g = T.obs_geom[i][s];
      for (int k = 1; k <= N_; ++k) {
        const int idx = s * N_ + (k - 1);
        const Vec2& t = g.t[k - 1];
        const double base_i = pos_base(k, t) + projected_var(t, post_pos_[k]);
        h_(row_obs_ + idx) =
            scale_obs_(idx) *
            (g.gap_sq(k - 1) - margin_cov_ + g.infl_cov(k - 1) -
             2.0 * st.c2 * (base_i + projected_var(t, ob.position_cov)));
      }
    }
    if (dirty_) {
      solver_->update_matrices(P_, q_, H_, h_);
      dirty_ = false;
    } else {
      solver_->update_linear_terms(q_, h_);
    }
    solver_->update_cone_bounds(cones_);
  }

  void warm_from(const LocalDecision& d, const std::vector<int>& slots) {
    solver_->warm_start_primal(pack_cov(d, slots));
  }
  SolveReport solve() { return solver_->solve(); }
  SolveReport solve_patient(SolverSettings s, const LocalDecision* wd,
                            const std::vector<int>* slots) const {
    ConicProblem copy = solver_->problem();
    ConicSolver fresh(std::move(copy), s);
    if (wd) fresh.warm_start_primal(pack_cov(*wd, *slots));
    return fresh.solve();
  }
  void extract(const Eigen::VectorXd& x, const std::vector<int>& slots,
               LocalDecision& d) const {
    unpack_cov(x, slots, d);
  }

 private:
  int N_ = 0, S_ = 0, O_ = 0, ny_ = 0, n_ = 0, rows_ = 0;
  int row_cap_ = 0, row_u0_ = 0, row_delta_ = 0;
  int row_own_ = 0, row_cross_ = 0, row_obs_ = 0;
  CovSens sens_;
  Mat4 cap_mat_ = Mat4::Zero();
  std::vector<Mat2> post_pos_;
  double margin_terminal_ = 0.0, margin_cov_ = 0.0;
  Eigen::MatrixXd P_, H_;
  Eigen::VectorXd q0_, q_, h_;
  Eigen::VectorXd scale_own_, scale_cross_, scale_obs_;
  std::vector<ConeBlock> cones_;
  std::unique_ptr<ConicSolver> solver_;
  bool dirty_ = true;
};

// ---------------------------------------------------------------------------
// Post-solve gates on the restored candidate (true row values, partner
// profiles frozen).

bool mean_gate(const NegState& st, int i, const LocalDecision& cand,
               double tol) {
  const PairTable& T = st.table;
  const double row_tol = std::max(tol, mean_gate_slack(*st.safety));
  const double box_tol = std::max(tol, state_gate_slack(*st.safety));
  const auto pos_i = profile_positions(cand);
  for (std::size_t s = 0; s < T.slots[i].size(); ++s) {
    const int j = T.slots[i][s];
    const DirGeom& g = T.geom[i][s];
    const DirGeom& gj = T.geom[j][T.slot_of[j][i]];
    for (int k = 1; k <= T.N; ++k) {
      const Vec2 pj = st.dec[j].means[k].head<2>();
      const double rhs = st.c * std::sqrt(2.0 * g.sigma2(k - 1)) +
                         st.safety->margin_mean - g.infl_mean(k - 1);
      if (g.t[k - 1].dot(pos_i[k] - pj) - cand.distances(k) < rhs - row_tol) {
        if (getenv("DTN_ROUND_DEBUG"))
          fprintf(stderr, "  gate own i=%d j=%d k=%d val=%g rhs=%g\n", i, j, k,
                  g.t[k - 1].dot(pos_i[k] - pj) - cand.distances(k), rhs);
        return false;
      }
      const double rhsj = st.c * std::sqrt(2.0 * gj.sigma2(k - 1)) +
                          st.safety->margin_mean - gj.infl_mean(k - 1);
      if (gj.t[k - 1].dot(pj - pos_i[k]) - st.dec[j].distances(k) <
          rhsj - row_tol) {
        if (getenv("DTN_ROUND_DEBUG"))
          fprintf(stderr, "  gate cross i=%d j=%d k=%d val=%g rhs=%g\n", i, j,
                  k,
                  gj.t[k - 1].dot(pj - pos_i[k]) - st.dec[j].distances(k),
                  rhsj);
        return false;
      }
    }
  }
  for (std::size_t s = 0; s < T.obs[i].size(); ++s) {
    const ObstacleTrack& ob = (*st.obstacles)[T.obs[i][s]];
    const DirGeom& g = T.obs_geom[i][s];
    for (int k = 1; k <= T.N; ++k) {
      const double rhs = st.c * std::sqrt(2.0 * g.sigma2(k - 1)) +
                         st.safety->margin_mean - g.infl_mean(k - 1);
      if (g.t[k - 1].dot(pos_i[k] - ob.position[k]) - cand.distances(k) <
          rhs - row_tol) {
        if (getenv("DTN_ROUND_DEBUG"))
          fprintf(stderr, "  gate obs i=%d k=%d\n", i, k);
        return false;
      }
    }
  }
  const StateBounds& b = st.bounds[i];
  const double v_ceil = st.params->limits.v_max + kGateTol;
  for (int k = 1; k <= T.N; ++k) {
    const double v = cand.means[k](3);
    const double lo = std::max(0.0, b.speed_lo(k - 1) - box_tol);
    const double hi = std::min(v_ceil, b.speed_hi(k - 1) + box_tol);
    if (v < lo || v > hi) {
      if (getenv("DTN_ROUND_DEBUG"))
        fprintf(stderr, "  gate speed i=%d k=%d v=%g lo=%g hi=%g\n", i, k, v,
                lo, hi);
      return false;
    }
  }
  for (int c = 0; c < 4; ++c) {
    if (cand.means[T.N](c) < b.term_lo(c) - box_tol ||
        cand.means[T.N](c) > b.term_hi(c) + box_tol) {
      if (getenv("DTN_ROUND_DEBUG"))
        fprintf(stderr, "  gate term i=%d c=%d val=%g box=[%g,%g]\n", i, c,
                cand.means[T.N](c), b.term_lo(c), b.term_hi(c));
      return false;
    }
  }
  return true;
}

double cap_eig(const VehicleProblem& prob, const LocalDecision& d) {
  const int N = d.horizon();
  const Mat4 cap = prob.terminal.cov_cap - prob.filter.cov_posterior[N];
  return Eigen::SelfAdjointEigenSolver<Mat4>(Mat4(d.covs[N] - cap))
      .eigenvalues()
      .maxCoeff();
}

bool cov_gate(const NegState& st, int i, const LocalDecision& cand,
              const std::vector<Mat2>& cand_pos, double tol) {
  const PairTable& T = st.table;
  const double row_tol = std::max(tol, cov_gate_slack(*st.safety));
  for (std::size_t s = 0; s < T.slots[i].size(); ++s) {
    const int j = T.slots[i][s];
    const DirGeom& g = T.geom[i][s];
    const DirGeom& gj = T.geom[j][T.slot_of[j][i]];
    for (int k = 1; k <= T.N; ++k) {
      const Mat2 P = cand_pos[k] + T.pos_cov[j][k];
      if (g.gap_sq(k - 1) - st.safety->margin_cov + g.infl_cov(k - 1) -
              2.0 * st.c2 * projected_var(g.t[k - 1], P) <
          -row_tol) {
        if (getenv("DTN_ROUND_DEBUG"))
          fprintf(stderr, "  cgate own i=%d j=%d k=%d val=%g\n", i, j, k,
                  g.gap_sq(k - 1) - st.safety->margin_cov + g.infl_cov(k - 1) -
                      2.0 * st.c2 * projected_var(g.t[k - 1], P));
        return false;
      }
      if (gj.gap_sq(k - 1) - st.safety->margin_cov + gj.infl_cov(k - 1) -
              2.0 * st.c2 * projected_var(gj.t[k - 1], P) <
          -row_tol) {
        if (getenv("DTN_ROUND_DEBUG"))
          fprintf(stderr, "  cgate cross i=%d j=%d k=%d val=%g\n", i, j, k,
                  gj.gap_sq(k - 1) - st.safety->margin_cov +
                      gj.infl_cov(k - 1) -
                      2.0 * st.c2 * projected_var(gj.t[k - 1], P));
        return false;
      }
    }
  }
  for (std::size_t s = 0; s < T.obs[i].size(); ++s) {
    const ObstacleTrack& ob = (*st.obstacles)[T.obs[i][s]];
    const DirGeom& g = T.obs_geom[i][s];
    for (int k = 1; k <= T.N; ++k) {
      const Mat2 P = cand_pos[k] + ob.position_cov;
      if (g.gap_sq(k - 1) - st.safety->margin_cov + g.infl_cov(k - 1) -
              2.0 * st.c2 * projected_var(g.t[k - 1], P) <
          -row_tol) {
        if (getenv("DTN_ROUND_DEBUG"))
          fprintf(stderr, "  cgate obs i=%d k=%d\n", i, k);
        return false;
      }
    }
  }
  const double cap = cap_eig((*st.problems)[i], cand);
  if (cap > -terminal_gate_slack(*st.safety)) {
    if (getenv("DTN_ROUND_DEBUG"))
      fprintf(stderr, "  cgate cap i=%d cap=%g need<=%g\n", i, cap,
              -terminal_gate_slack(*st.safety));
    return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Block-consistent local objectives (the quantities the descent guard checks,
// partner profiles frozen at the round start).

double tracking_cost(const NegState& st, int i, const LocalDecision& d) {
  const VehicleProblem& prob = (*st.problems)[i];
  MomentTrajectory traj{d.means, d.covs};
  PolicyParams pol{d.feedforward, d.injection, d.auxiliary};
  CostWeights w{st.params->Q, st.params->R, prob.reference};
  return moment_cost(traj, pol, w) +
         l1_distance_penalty({d.distances}, st.params->eta);
}

double mean_block_cost(const NegState& st, int i, const LocalDecision& d) {
  const PairTable& T = st.table;
  double J = tracking_cost(st, i, d);
  for (std::size_t s = 0; s < T.slots[i].size(); ++s) {
    const int j = T.slots[i][s];
    const DirGeom& g = T.geom[i][s];
    for (int k = 1; k <= T.N; ++k) {
      if (!st.active[i][s][k - 1]) continue;
      const double gap =
          g.t[k - 1].dot(d.means[k].head<2>() - st.dec[j].means[k].head<2>()) -
          d.distances(k);
      const double I = gap * gap - 2.0 * st.c2 * g.sigma2(k - 1) -
                       slack_at(d, j, k - 1);
      const double e = I + dual_at(st, i, j, k - 1);
      J += 0.5 * st.rho * e * e;
    }
  }
  return J;
}

double cov_block_cost(const NegState& st, int i, const LocalDecision& d,
                      const std::vector<Mat2>& pos_i) {
  const PairTable& T = st.table;
  double J = tracking_cost(st, i, d);
  for (std::size_t s = 0; s < T.slots[i].size(); ++s) {
    const int j = T.slots[i][s];
    const DirGeom& g = T.geom[i][s];
    for (int k = 1; k <= T.N; ++k) {
      const double I =
          g.gap_sq(k - 1) -
          2.0 * st.c2 *
              projected_var(g.t[k - 1], Mat2(pos_i[k] + T.pos_cov[j][k])) -
          slack_at(d, j, k - 1);
      const double e = I + dual_at(st, i, j, k - 1);
      J += 0.5 * st.rho * e * e;
    }
  }
  return J;
}

double full_augmented_cost(const NegState& st, int i) {
  const PairTable& T = st.table;
  std::vector<Eigen::VectorXd> residuals, duals;
  const auto pos_j = [&](int j) { return profile_positions(st.dec[j]); };
  for (std::size_t s = 0; s < T.slots[i].size(); ++s) {
    const int j = T.slots[i][s];
    residuals.push_back(directed_residuals(
        T.geom[i][s].t, st.dec[i].means, pos_j(j), T.pos_cov[i], T.pos_cov[j],
        st.dec[i].distances,
        st.dec[i].slacks.count(j) ? st.dec[i].slacks.at(j)
                                  : Eigen::VectorXd::Zero(T.N),
        st.params->xi));
    Eigen::VectorXd lam = dual_of(st, i, j);
    if (lam.size() != T.N) lam = Eigen::VectorXd::Zero(T.N);
    duals.push_back(lam);
  }
  return local_cost((*st.problems)[i], *st.params, st.dec[i], residuals, duals,
                    st.rho);
}

// ---------------------------------------------------------------------------
// Round records.

RoundRecord make_record(const NegState& st, int outer, int round,
                        bool cov_block, bool committed, double total_cost,
                        double max_cost_delta) {
  const PairTable& T = st.table;
  RoundRecord rec;
  rec.outer = outer;
  rec.round = round;
  rec.cov_block = cov_block;
  rec.committed = committed;
  rec.total_cost = total_cost;
  rec.max_cost_delta = max_cost_delta;
  double dyn = 0.0, lmi = kBigBound, cap = -kBigBound;
  double chance = kBigBound, box = kBigBound, infl = 0.0, state_infl = 0.0;
  double local = kBigBound;
  const double row_tol = cov_block ? cov_gate_slack(*st.safety)
                                   : mean_gate_slack(*st.safety);
  const double box_tol = state_gate_slack(*st.safety);
  const double v_ceil = st.params->limits.v_max + kGateTol;
  for (int i = 0; i < T.V; ++i) {
    const VehicleProblem& prob = (*st.problems)[i];
    const LocalDecision& d = st.dec[i];
    for (int k = 0; k < T.N; ++k) {
      dyn = std::max(dyn, (d.means[k + 1] -
                           mean_step(prob.models[k], d.means[k],
                                     d.feedforward[k]))
                              .cwiseAbs()
                              .maxCoeff());
      dyn = std::max(
          dyn, (d.covs[k + 1] -
                covariance_step(prob.models[k], d.covs[k], d.injection[k],
                                d.auxiliary[k], prob.filter.gain[k + 1],
                                prob.filter.innov_cov[k + 1]))
                   .cwiseAbs()
                   .maxCoeff());
      lmi = std::min(
          lmi, Eigen::SelfAdjointEigenSolver<Mat6>(
                   schur_block(d.covs[k], d.injection[k], d.auxiliary[k]))
                   .eigenvalues()
                   .minCoeff());
    }
    cap = std::max(cap, cap_eig(prob, d));
    const auto pos_i = profile_positions(d);
    for (std::size_t s = 0; s < T.slots[i].size(); ++s) {
      const int j = T.slots[i][s];
      const DirGeom& g = T.geom[i][s];
      for (int k = 1; k <= T.N; ++k) {
        const Mat2 P = T.pos_cov[i][k] + T.pos_cov[j][k];
        const double s2 = projected_var(g.t[k - 1], P);
        const double val =
            g.t[k - 1].dot(pos_i[k] - st.dec[j].means[k].head<2>()) -
            d.distances(k);
        chance = std::min(chance, val - st.c * std::sqrt(2.0 * s2));
        infl = std::max(infl, std::max(g.infl_mean(k - 1), g.infl_cov(k - 1)));
        if (cov_block) {
          local = std::min(local, g.gap_sq(k - 1) - st.safety->margin_cov +
                                      g.infl_cov(k - 1) - 2.0 * st.c2 * s2 +
                                      row_tol);
        } else {
          const double rhs = st.c * std::sqrt(2.0 * g.sigma2(k - 1)) +
                             st.safety->margin_mean - g.infl_mean(k - 1);
          local = std::min(local, val - rhs + row_tol);
        }
      }
    }
    for (std::size_t s = 0; s < T.obs[i].size(); ++s) {
      const ObstacleTrack& ob = (*st.obstacles)[T.obs[i][s]];
      const DirGeom& g = T.obs_geom[i][s];
      for (int k = 1; k <= T.N; ++k) {
        const double s2 = projected_var(
            g.t[k - 1], Mat2(T.pos_cov[i][k] + ob.position_cov));
        const double val =
            g.t[k - 1].dot(pos_i[k] - ob.position[k]) - d.distances(k);
        chance = std::min(chance, val - st.c * std::sqrt(2.0 * s2));
        infl = std::max(infl, std::max(g.infl_mean(k - 1), g.infl_cov(k - 1)));
        if (cov_block) {
          local = std::min(local, g.gap_sq(k - 1) - st.safety->margin_cov +
                                      g.infl_cov(k - 1) - 2.0 * st.c2 * s2 +
                                      row_tol);
        } else {
          const double rhs = st.c * std::sqrt(2.0 * g.sigma2(k - 1)) +
                             st.safety->margin_mean - g.infl_mean(k - 1);
          local = std::min(local, val - rhs + row_tol);
        }
      }
    }
    for (int k = 0; k < T.N; ++k) {
      box = std::min(box, d.feedforward[k](0) - st.params->limits.a_min);
      box = std::min(box, st.params->limits.a_max - d.feedforward[k](0));
      box = std::min(box, d.feedforward[k](1) + st.params->limits.delta_max);
      box = std::min(box, st.params->limits.delta_max - d.feedforward[k](1));
    }
    for (int k = 0; k <= T.N; ++k) {
      box = std::min(box, d.distances(k) - st.params->d_min);
      box = std::min(box, st.params->d_max - d.distances(k));
    }
    const StateBounds& b = st.bounds[i];
    for (int k = 1; k <= T.N; ++k) {
      box = std::min(box, d.means[k](3) - b.speed_lo(k - 1));
      box = std::min(box, b.speed_hi(k - 1) - d.means[k](3));
      const double lo = std::max(0.0, b.speed_lo(k - 1) - box_tol);
      const double hi = std::min(v_ceil, b.speed_hi(k - 1) + box_tol);
      local = std::min(local, d.means[k](3) - lo);
      local = std::min(local, hi - d.means[k](3));
    }
    for (int c = 0; c < 4; ++c) {
      box = std::min(box, d.means[T.N](c) - b.term_lo(c));
      box = std::min(box, b.term_hi(c) - d.means[T.N](c));
      local = std::min(local, d.means[T.N](c) - (b.term_lo(c) - box_tol));
      local = std::min(local, (b.term_hi(c) + box_tol) - d.means[T.N](c));
    }
    state_infl = std::max(state_infl, b.inflation);
  }
  rec.max_dynamics_residual = dyn;
  rec.min_lmi_eig = lmi;
  rec.max_terminal_cap_eig = cap;
  rec.min_chance_residual = chance;
  rec.min_box_slack = box;
  rec.max_inflation = infl;
  rec.max_state_inflation = state_infl;
  rec.min_local_residual = outer >= 1 && local < kBigBound ? local : 0.0;
  return rec;
}

// ---------------------------------------------------------------------------
// Validation shared by negotiate() and the one-shot block wrappers.

void validate_common(const std::vector<VehicleProblem>& problems,
                     const std::vector<LocalDecision>& decisions,
                     const std::vector<ObstacleTrack>& obstacles,
                     const Parameters& params, const char* who) {
  auto fail = [&](const std::string& msg) {
    throw std::invalid_argument(std::string(who) + ": " + msg);
  };
  if (decisions.size() != problems.size()) fail("decision count mismatch");
  const int N = params.horizon;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    const VehicleProblem& p = problems[i];
    if (static_cast<int>(p.models.size()) != N) fail("models size");
    if (static_cast<int>(p.reference.size()) != N + 1) fail("reference size");
    if (static_cast<int>(p.filter.gain.size()) != N + 1 ||
        static_cast<int>(p.filter.injected.size()) != N ||
        static_cast<int>(p.filter.cov_posterior.size()) != N + 1)
      fail("filter horizon size");
    const LocalDecision& d = decisions[i];
    if (d.horizon() != N) fail("feedforward size");
    if (d.distances.size() != N + 1) fail("distances size");
    if (static_cast<int>(d.injection.size()) != N ||
        static_cast<int>(d.auxiliary.size()) != N)
      fail("policy size");
  }
  for (const ObstacleTrack& o : obstacles)
    if (static_cast<int>(o.position.size()) != N + 1)
      fail("obstacle track size");
}

void validate_config(const NegotiationConfig& config, const char* who) {
  auto fail = [&](const std::string& msg) {
    throw std::invalid_argument(std::string(who) + ": " + msg);
  };
  if (config.relaxation <= 0.0 || config.relaxation > 1.0)
    fail("relaxation outside (0, 1]");
  if (config.rounds_mean < 1 || config.rounds_cov < 1) fail("rounds < 1");
  if (config.penalty <= 0.0) fail("penalty <= 0");
  if (config.max_outer < 1) fail("max_outer < 1");
}

void init_neg_state(NegState& st, const std::vector<VehicleProblem>& problems,
                    const std::vector<LocalDecision>& initial,
                    const std::vector<ObstacleTrack>& obstacles,
                    const Parameters& params, const SafetyParams& safety,
                    const NegotiationConfig& config,
                    const std::vector<std::vector<int>>* neighbor_sets) {
  st.problems = &problems;
  st.obstacles = &obstacles;
  st.params = &params;
  st.safety = &safety;
  st.c = inverse_erf(1.0 - 2.0 * params.xi);
  st.c2 = st.c * st.c;
  st.rho = config.penalty;
  st.dec = initial;
  build_pair_table(st, neighbor_sets);
}

// The directed-pair slack absorption: Delta = max(V + lambda, 0) with V the
// unslacked residual, the analytic minimizer of the penalty over Delta >= 0.
void absorb_slacks(NegState& st, int i, bool with_duals) {
  const PairTable& T = st.table;
  for (std::size_t s = 0; s < T.slots[i].size(); ++s) {
    const int j = T.slots[i][s];
    Eigen::VectorXd v = directed_residuals(
        T.geom[i][s].t, st.dec[i].means, profile_positions(st.dec[j]),
        T.pos_cov[i], T.pos_cov[j], st.dec[i].distances,
        Eigen::VectorXd::Zero(T.N), st.params->xi);
    if (with_duals) {
      Eigen::VectorXd lam = dual_of(st, i, j);
      if (lam.size() == T.N) v += lam;
    }
    st.dec[i].slacks[j] = v.cwiseMax(0.0);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Public helpers.

bool LocalDecision::finite() const {
  auto ok = [](const auto& m) { return m.allFinite(); };
  for (const auto& m : means)
    if (!ok(m)) return false;
  for (const auto& m : feedforward)
    if (!ok(m)) return false;
  if (!ok(distances)) return false;
  for (const auto& m : covs)
    if (!ok(m)) return false;
  for (const auto& m : injection)
    if (!ok(m)) return false;
  for (const auto& m : auxiliary)
    if (!ok(m)) return false;
  for (const auto& kv : slacks)
    if (!ok(kv.second)) return false;
  return true;
}

double augmented_penalty(const Eigen::VectorXd& residuals,
                         const Eigen::VectorXd& duals, double rho) {
  if (residuals.size() != duals.size())
    throw std::invalid_argument("augmented_penalty: size mismatch");
  return 0.5 * rho * (residuals + duals).squaredNorm();
}

Eigen::VectorXd dual_update(const Eigen::VectorXd& duals,
                            const Eigen::VectorXd& residuals) {
  if (residuals.size() != duals.size())
    throw std::invalid_argument("dual_update: size mismatch");
  return duals + residuals;
}

bool check_termination(const ResidualReport& report, double eps_primal,
                       double eps_dual) {
  return report.primal <= eps_primal && report.dual <= eps_dual;
}

// Worst true chance-constraint residual of vehicle i's current plan against
// all coupled partners and obstacles, at the enforced (frozen) normals.
double audit_worst_residual(const NegState& st,
                            const std::vector<VehicleProblem>& problems,
                            const Parameters& params, int i) {
  const int N = st.table.N;
  double worst = kBigBound;
  for (std::size_t s = 0; s < st.table.slots[i].size(); ++s) {
    const int j = st.table.slots[i][s];
    const Eigen::VectorXd r = chance_residuals(
        st.table.geom[i][s].t, st.dec[i].means, profile_positions(st.dec[j]),
        st.table.pos_cov[i], st.table.pos_cov[j], st.dec[i].distances,
        params.xi);
    worst = std::min(worst, r.minCoeff());
  }
  for (std::size_t s = 0; s < st.table.obs[i].size(); ++s) {
    const ObstacleTrack& ob = (*st.obstacles)[st.table.obs[i][s]];
    std::vector<Mat2> obs_cov(N + 1, ob.position_cov);
    const Eigen::VectorXd r = chance_residuals(
        st.table.obs_geom[i][s].t, st.dec[i].means, ob.position,
        st.table.pos_cov[i], obs_cov, st.dec[i].distances, params.xi);
    worst = std::min(worst, r.minCoeff());
  }
  (void)problems;
  return worst;
}

std::vector<Mat2> position_covariances(const LocalDecision& decision,
                                       const FilterHorizon& filter) {
  const std::size_t n = decision.covs.size();
  if (filter.cov_posterior.size() < n)
    throw std::invalid_argument("position_covariances: filter too short");
  std::vector<Mat2> out(n);
  for (std::size_t k = 0; k < n; ++k)
    out[k] = (decision.covs[k] + filter.cov_posterior[k]).topLeftCorner<2, 2>();
  return out;
}

std::vector<Vec2> pair_normals(const std::vector<Vec4>& own_means,
                               const std::vector<Vec2>& other_position,
                               const VehicleGeometry& geometry,
                               const SafetyParams& safety) {
  if (own_means.size() != other_position.size() || own_means.size() < 2)
    throw std::invalid_argument("pair_normals: size mismatch");
  const int N = static_cast<int>(own_means.size()) - 1;
  std::vector<Vec2> t(N);
  Vec2 alpha(1.0, 0.0);
  for (int k = 1; k <= N; ++k) {
    const CollisionEllipse ell = build_collision_ellipse(
        geometry.length, geometry.width, own_means[k](2),
        safety.semi_major_override, safety.semi_minor_override);
    try {
      alpha = linearize_halfspace(own_means[k].head<2>(), other_position[k], ell);
    } catch (const std::domain_error&) {
      // coincident transformed means: keep the previous direction
    }
    t[k - 1] = ell.omega_sqrt * alpha;
  }
  return t;
}

Eigen::VectorXd directed_residuals(const std::vector<Vec2>& normals,
                                   const std::vector<Vec4>& own_means,
                                   const std::vector<Vec2>& other_position,
                                   const std::vector<Mat2>& own_poscov,
                                   const std::vector<Mat2>& other_poscov,
                                   const Eigen::VectorXd& distances,
                                   const Eigen::VectorXd& slack, double xi) {
  const int N = static_cast<int>(normals.size());
  if (static_cast<int>(own_means.size()) != N + 1 ||
      static_cast<int>(other_position.size()) != N + 1 ||
      static_cast<int>(own_poscov.size()) != N + 1 ||
      static_cast<int>(other_poscov.size()) != N + 1 ||
      distances.size() != N + 1 || slack.size() != N)
    throw std::invalid_argument("directed_residuals: size mismatch");
  const double c = inverse_erf(1.0 - 2.0 * xi);
  Eigen::VectorXd out(N);
  for (int k = 1; k <= N; ++k) {
    const Vec2& t = normals[k - 1];
    const double gap =
        t.dot(own_means[k].head<2>() - other_position[k]) - distances(k);
    const double s2 = projected_var(t, Mat2(own_poscov[k] + other_poscov[k]));
    out(k - 1) = gap * gap - 2.0 * c * c * s2 - slack(k - 1);
  }
  return out;
}

Eigen::VectorXd chance_residuals(const std::vector<Vec2>& normals,
                                 const std::vector<Vec4>& own_means,
                                 const std::vector<Vec2>& other_position,
                                 const std::vector<Mat2>& own_poscov,
                                 const std::vector<Mat2>& other_poscov,
                                 const Eigen::VectorXd& distances, double xi) {
  const int N = static_cast<int>(normals.size());
  if (static_cast<int>(own_means.size()) != N + 1 ||
      static_cast<int>(other_position.size()) != N + 1 ||
      static_cast<int>(own_poscov.size()) != N + 1 ||
      static_cast<int>(other_poscov.size()) != N + 1 ||
      distances.size() != N + 1)
    throw std::invalid_argument("chance_residuals: size mismatch");
  const double c = inverse_erf(1.0 - 2.0 * xi);
  Eigen::VectorXd out(N);
  for (int k = 1; k <= N; ++k) {
    const Vec2& t = normals[k - 1];
    const double gap =
        t.dot(own_means[k].head<2>() - other_position[k]) - distances(k);
    const double s2 = projected_var(t, Mat2(own_poscov[k] + other_poscov[k]));
    out(k - 1) = gap - c * std::sqrt(2.0 * s2);
  }
  return out;
}

double local_cost(const VehicleProblem& problem, const Parameters& params,
                  const LocalDecision& decision,
                  const std::vector<Eigen::VectorXd>& pair_residuals,
                  const std::vector<Eigen::VectorXd>& pair_duals, double rho) {
  if (pair_residuals.size() != pair_duals.size())
    throw std::invalid_argument("local_cost: pair size mismatch");
  MomentTrajectory traj{decision.means, decision.covs};
  PolicyParams pol{decision.feedforward, decision.injection,
                   decision.auxiliary};
  CostWeights w{params.Q, params.R, problem.reference};
  double J = moment_cost(traj, pol, w) +
             l1_distance_penalty({decision.distances}, params.eta);
  for (std::size_t p = 0; p < pair_residuals.size(); ++p)
    J += augmented_penalty(pair_residuals[p], pair_duals[p], rho);
  return J;
}

// ---------------------------------------------------------------------------
// negotiate().

NegotiationResult negotiate(const std::vector<VehicleProblem>& problems,
                            const std::vector<LocalDecision>& initial,
                            const std::vector<std::vector<int>>& neighbor_sets,
                            const std::vector<ObstacleTrack>& obstacles,
                            const Parameters& params,
                            const SafetyParams& safety,
                            const NegotiationConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  validate_config(config, "negotiate");
  validate_common(problems, initial, obstacles, params, "negotiate");
  if (neighbor_sets.size() != problems.size())
    throw std::invalid_argument("negotiate: neighbor_sets size mismatch");
  const int V = static_cast<int>(problems.size());
  const int N = params.horizon;

  NegotiationResult res;
  res.plan_unsafe.assign(V, false);
  if (V == 0) {
    res.converged = true;
    return res;
  }

  NegState st;
  init_neg_state(st, problems, initial, obstacles, params, safety, config,
                 &neighbor_sets);
  for (int i = 0; i < V; ++i) {
    restore_mean_profile(problems[i], params, problems[i].initial_mean,
                         st.dec[i]);
    restore_cov_profile(problems[i], problems[i].initial_cov, st.dec[i]);
    st.table.pos_cov[i] = position_covariances(st.dec[i], problems[i].filter);
  }
  // Keep only the slacks of negotiated slots; duals start at zero.
  st.duals.assign(V, DualState{});
  for (int i = 0; i < V; ++i) {
    st.duals[i].penalty = config.penalty;
    std::map<int, Eigen::VectorXd> kept;
    for (int j : st.table.slots[i]) {
      auto it = st.dec[i].slacks.find(j);
      kept[j] = (it != st.dec[i].slacks.end() && it->second.size() == N)
                    ? Eigen::VectorXd(it->second.cwiseMax(0.0))
                    : Eigen::VectorXd(Eigen::VectorXd::Zero(N));
      st.duals[i].multipliers[j] = Eigen::VectorXd::Zero(N);
    }
    st.dec[i].slacks = std::move(kept);
  }
  refresh_geometry(st);
  // Cold-start absorption: inflate the slacks to the current residuals so the
  // penalty starts from zero and is then driven down by the duals.
  for (int i = 0; i < V; ++i) absorb_slacks(st, i, false);
  st.bounds.resize(V);
  for (int i = 0; i < V; ++i) st.bounds[i] = compute_state_bounds(st, i);
  refresh_active(st);

  std::vector<std::unique_ptr<MeanCtx>> mctx(V);
  std::vector<std::unique_ptr<CovCtx>> cctx(V);
  for (int i = 0; i < V; ++i) {
    mctx[i] = std::make_unique<MeanCtx>(st, i, problems[i].initial_mean,
                                        config.mean_solver);
    mctx[i]->warm_from(st.dec[i]);
    const int S = static_cast<int>(st.table.slots[i].size());
    const int O = static_cast<int>(st.table.obs[i].size());
    if (S + O > 0) {
      cctx[i] = std::make_unique<CovCtx>(N, S, O, config.cov_solver);
      cctx[i]->bind(problems[i], params, safety);
      cctx[i]->warm_from(st.dec[i], st.table.slots[i]);
    }
  }

  double init_cost = 0.0;
  for (int i = 0; i < V; ++i) init_cost += full_augmented_cost(st, i);
  res.rounds.push_back(make_record(st, 0, 0, false, true, init_cost, 0.0));

  for (int outer = 1; outer <= config.max_outer; ++outer) {
    if (outer > 1) refresh_geometry(st);
    refresh_active(st);

    // ---- mean block ----
    for (int i = 0; i < V; ++i) mctx[i]->set_outer(st);
    for (int round = 1; round <= config.rounds_mean; ++round) {
      res.max_inflation = std::max(res.max_inflation, compute_mean_inflation(st));
      for (int i = 0; i < V; ++i) {
        st.bounds[i] = compute_state_bounds(st, i);
        res.max_state_inflation =
            std::max(res.max_state_inflation, st.bounds[i].inflation);
      }
      std::vector<LocalDecision> cand(st.dec);
      std::vector<char> moved(V, 0);
      for (int i = 0; i < V; ++i) {
        mctx[i]->refresh_round(st);
        const SolveReport rep = mctx[i]->solve();
        res.mean_iterations += rep.iterations;
        bool ok = rep.status != SolveStatus::infeasible && rep.x.allFinite();
        const bool solver_ok = ok;
        if (ok) {
          mctx[i]->extract(rep.x, cand[i]);
          restore_mean_profile(problems[i], params, problems[i].initial_mean,
                               cand[i]);
          ok = mean_gate(st, i, cand[i], kGateTol);
        }
        if (!ok) {
          if (getenv("DTN_ROUND_DEBUG"))
            fprintf(stderr,
                    "[mean o%d r%d] i=%d status=%d iters=%d gate=%d\n", outer,
                    round, i, static_cast<int>(rep.status), rep.iterations,
                    solver_ok ? 0 : -1);
          cand[i] = st.dec[i];
          ++res.solver_failures;
        } else {
          moved[i] = 1;
        }
      }
      // Combine with a common relaxation weight, backtracking it when the
      // Gauss-Newton step overshoots the true (quartic) penalty: any common
      // weight at or below 1/2 preserves round feasibility, so halving only
      // dampens the step until the per-vehicle costs actually descend.
      std::vector<LocalDecision> comb(st.dec);
      double max_change = 0.0;
      double max_delta = 0.0;
      bool commit = true;
      const bool any_moved =
          std::any_of(moved.begin(), moved.end(), [](char c) { return c != 0; });
      if (any_moved) {
        commit = false;
        for (const double scale : {1.0, 0.5, 0.25, 0.125}) {
          const double w = config.relaxation * scale;
          comb = st.dec;
          max_change = 0.0;
          for (int i = 0; i < V; ++i) {
            if (!moved[i]) continue;
            for (int k = 0; k < N; ++k)
              comb[i].feedforward[k] = w * cand[i].feedforward[k] +
                                       (1.0 - w) * st.dec[i].feedforward[k];
            comb[i].distances =
                w * cand[i].distances + (1.0 - w) * st.dec[i].distances;
            repropagate_means(problems[i].models, problems[i].initial_mean,
                              comb[i]);
            max_change =
                std::max(max_change, (pack_mean(comb[i]) - pack_mean(st.dec[i]))
                                         .lpNorm<Eigen::Infinity>());
          }
          max_delta = 0.0;
          for (int i = 0; i < V; ++i) {
            if (!moved[i]) continue;
            max_delta = std::max(max_delta, mean_block_cost(st, i, comb[i]) -
                                                mean_block_cost(st, i, st.dec[i]));
          }
          if (max_delta <= kDescentTol) {
            commit = true;
            break;
          }
        }
      }
      if (commit)
        st.dec.swap(comb);
      else
        ++res.guard_trips;
      double tc = 0.0;
      for (int i = 0; i < V; ++i) tc += mean_block_cost(st, i, st.dec[i]);
      res.rounds.push_back(
          make_record(st, outer, round, false, commit, tc, max_delta));
      if (!commit || max_change < config.stop_delta) break;
    }

    // ---- covariance block ----
    freeze_gap_sq(st);
    std::vector<char> solving(V, 0);
    for (int i = 0; i < V; ++i) {
      const int S = static_cast<int>(st.table.slots[i].size());
      const int O = static_cast<int>(st.table.obs[i].size());
      if (S + O == 0) continue;
      bool need = cap_eig(problems[i], st.dec[i]) >
                  -kCapSkipFrac * safety.margin_terminal;
      const auto pos_i = profile_positions(st.dec[i]);
      for (std::size_t s = 0; s < st.table.slots[i].size() && !need; ++s) {
        const int j = st.table.slots[i][s];
        const DirGeom& g = st.table.geom[i][s];
        const Eigen::VectorXd& lam = dual_of(st, i, j);
        if (lam.size() == N && lam.cwiseAbs().maxCoeff() > 1e-9) need = true;
        for (int k = 1; k <= N && !need; ++k) {
          const double s2 = projected_var(
              g.t[k - 1], Mat2(st.table.pos_cov[i][k] + st.table.pos_cov[j][k]));
          if (g.t[k - 1].dot(pos_i[k] - st.dec[j].means[k].head<2>()) -
                  st.dec[i].distances(k) - st.c * std::sqrt(2.0 * s2) <
              kCovSkipSlack)
            need = true;
        }
      }
      for (std::size_t s = 0; s < st.table.obs[i].size() && !need; ++s) {
        const ObstacleTrack& ob = (*st.obstacles)[st.table.obs[i][s]];
        const DirGeom& g = st.table.obs_geom[i][s];
        for (int k = 1; k <= N && !need; ++k) {
          const double s2 = projected_var(
              g.t[k - 1], Mat2(st.table.pos_cov[i][k] + ob.position_cov));
          if (g.t[k - 1].dot(pos_i[k] - ob.position[k]) -
                  st.dec[i].distances(k) - st.c * std::sqrt(2.0 * s2) <
              kCovSkipSlack)
            need = true;
        }
      }
      if (need)
        solving[i] = 1;
      else
        absorb_slacks(st, i, true);  // analytic slack update, policy kept
    }
    bool any = std::any_of(solving.begin(), solving.end(),
                           [](char c) { return c != 0; });
    if (any) {
      for (int i = 0; i < V; ++i)
        if (solving[i]) cctx[i]->set_outer(st, i);
      for (int round = 1; round <= config.rounds_cov; ++round) {
        res.max_inflation =
            std::max(res.max_inflation, compute_cov_inflation(st));
        std::vector<LocalDecision> cand(st.dec);
        std::vector<char> moved(V, 0);
        for (int i = 0; i < V; ++i) {
          if (!solving[i]) continue;
          cctx[i]->refresh_round(st, i);
          const SolveReport rep = cctx[i]->solve();
          res.cov_iterations += rep.iterations;
          bool ok = rep.status != SolveStatus::infeasible && rep.x.allFinite();
          const bool solver_ok = ok;
          if (ok) {
            cctx[i]->extract(rep.x, st.table.slots[i], cand[i]);
            restore_cov_profile(problems[i], problems[i].initial_cov, cand[i]);
            ok = cov_gate(st, i, cand[i],
                          position_covariances(cand[i], problems[i].filter),
                          kGateTol);
          }
          if (!ok) {
            if (getenv("DTN_ROUND_DEBUG"))
              fprintf(stderr, "[cov o%d r%d] i=%d status=%d iters=%d gate=%d\n",
                      outer, round, i, static_cast<int>(rep.status),
                      rep.iterations, solver_ok ? 0 : -1);
            if (getenv("DTN_COV_PATIENT") && !solver_ok) {
              static std::atomic<int> budget{4};
              if (budget-- > 0) {
                SolverSettings ps = config.cov_solver;
                ps.max_iters = 300000;
                ps.stall_window = 1 << 30;
                const SolveReport cold =
                    cctx[i]->solve_patient(ps, nullptr, nullptr);
                const SolveReport warm = cctx[i]->solve_patient(
                    ps, &st.dec[i], &st.table.slots[i]);
                fprintf(stderr,
                        "[patient] i=%d cold: st=%d it=%d rp=%.3g | warm: "
                        "st=%d it=%d rp=%.3g\n",
                        i, static_cast<int>(cold.status), cold.iterations,
                        cold.primal_res, static_cast<int>(warm.status),
                        warm.iterations, warm.primal_res);
              }
            }
            cand[i] = st.dec[i];
            ++res.solver_failures;
          } else {
            moved[i] = 1;
          }
        }
        // Same backtracked combination as the mean block (common weight at or
        // below 1/2 keeps the round feasible; halving recovers descent when
        // the linearized step overshoots).
        std::vector<LocalDecision> comb(st.dec);
        std::vector<std::vector<Mat2>> comb_pos(V);
        double max_change = 0.0;
        double max_delta = 0.0;
        bool commit = true;
        const bool any_moved = std::any_of(moved.begin(), moved.end(),
                                           [](char c) { return c != 0; });
        if (any_moved) {
          commit = false;
          for (const double scale : {1.0, 0.5, 0.25, 0.125}) {
            const double w = config.relaxation * scale;
            comb = st.dec;
            max_change = 0.0;
            for (int i = 0; i < V; ++i) {
              if (!moved[i]) continue;
              for (int k = 0; k < N; ++k) {
                comb[i].injection[k] = w * cand[i].injection[k] +
                                       (1.0 - w) * st.dec[i].injection[k];
                comb[i].auxiliary[k] = w * cand[i].auxiliary[k] +
                                       (1.0 - w) * st.dec[i].auxiliary[k];
              }
              for (auto& kv : comb[i].slacks)
                kv.second = w * cand[i].slacks.at(kv.first) +
                            (1.0 - w) * st.dec[i].slacks.at(kv.first);
              repropagate_covs(problems[i].models, problems[i].filter,
                               problems[i].initial_cov, comb[i]);
              comb_pos[i] = position_covariances(comb[i], problems[i].filter);
              max_change = std::max(max_change,
                                    (pack_cov(comb[i], st.table.slots[i]) -
                                     pack_cov(st.dec[i], st.table.slots[i]))
                                        .lpNorm<Eigen::Infinity>());
            }
            max_delta = 0.0;
            for (int i = 0; i < V; ++i) {
              if (!moved[i]) continue;
              max_delta = std::max(
                  max_delta, cov_block_cost(st, i, comb[i], comb_pos[i]) -
                                 cov_block_cost(st, i, st.dec[i],
                                                st.table.pos_cov[i]));
            }
            if (max_delta <= kDescentTol) {
              commit = true;
              break;
            }
          }
        }
        if (commit) {
          st.dec.swap(comb);
          for (int i = 0; i < V; ++i)
            if (moved[i]) st.table.pos_cov[i] = std::move(comb_pos[i]);
        } else {
          ++res.guard_trips;
        }
        double tc = 0.0;
        for (int i = 0; i < V; ++i)
          tc += cov_block_cost(st, i, st.dec[i], st.table.pos_cov[i]);
        res.rounds.push_back(
            make_record(st, outer, round, true, commit, tc, max_delta));
        if (!commit || max_change < config.stop_delta) break;
      }
    }

    // ---- dual update at the synchronized decisions ----
    ResidualReport rep;
    for (int i = 0; i < V; ++i) {
      for (std::size_t s = 0; s < st.table.slots[i].size(); ++s) {
        const int j = st.table.slots[i][s];
        const Eigen::VectorXd I = directed_residuals(
            st.table.geom[i][s].t, st.dec[i].means,
            profile_positions(st.dec[j]), st.table.pos_cov[i],
            st.table.pos_cov[j], st.dec[i].distances, st.dec[i].slacks.at(j),
            params.xi);
        auto& lam = st.duals[i].multipliers[j];
        lam = dual_update(lam, I);
        rep.per_pair[{i, j}] = I;
        rep.primal += I.squaredNorm();
        rep.dual += I.squaredNorm();
      }
    }
    res.primal_history.push_back(rep.primal);
    res.report = rep;
    res.outer_iterations = outer;
    // Residual consensus alone is not enough to stop: the slack variables can
    // absorb a residual violation exactly (both copies agree on an unsafe
    // plan), so termination additionally requires the plans to pass the true
    // chance-residual audit. Until they do, the accumulated duals keep
    // raising the price of the active slacks.
    if (check_termination(rep, config.eps_primal, config.eps_dual)) {
      bool safe = true;
      for (int i = 0; i < V && safe; ++i)
        safe = st.dec[i].finite() &&
               audit_worst_residual(st, problems, params, i) >= -kUnsafeTol;
      if (safe) {
        res.converged = true;
        break;
      }
    }
  }

  // Safety audit of the final plans at the enforced (frozen) normals.
  res.terminal_cap.assign(V, 0.0);
  for (int i = 0; i < V; ++i) {
    if (!st.dec[i].finite()) {
      res.plan_unsafe[i] = true;
      continue;
    }
    res.terminal_cap[i] = cap_eig(problems[i], st.dec[i]);
    const double worst = audit_worst_residual(st, problems, params, i);
    res.plan_unsafe[i] = worst < -kUnsafeTol;
    if (res.plan_unsafe[i] && getenv("DTN_ROUND_DEBUG"))
      fprintf(stderr, "  audit i=%d worst=%g cap=%g\n", i, worst,
              res.terminal_cap[i]);
  }

  res.decisions = std::move(st.dec);
  res.duals = std::move(st.duals);
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return res;
}

// ---------------------------------------------------------------------------
// One-shot block wrappers.

namespace {

void seed_one_shot(NegState& st, int index,
                   const std::vector<DualState>& duals) {
  const int V = st.table.V;
  st.duals.assign(V, DualState{});
  for (int i = 0; i < V && i < static_cast<int>(duals.size()); ++i)
    st.duals[i] = duals[i];
  // Absorb missing slacks of the solving vehicle only: rows whose slack the
  // caller left unset start at their analytic value instead of pinning the
  // penalty to the (possibly far) slack-equality manifold.
  for (int j : st.table.slots[index]) {
    auto it = st.dec[index].slacks.find(j);
    if (it == st.dec[index].slacks.end() || it->second.size() != st.table.N) {
      Eigen::VectorXd v = directed_residuals(
          st.table.geom[index][st.table.slot_of[index][j]].t,
          st.dec[index].means, profile_positions(st.dec[j]),
          st.table.pos_cov[index], st.table.pos_cov[j],
          st.dec[index].distances, Eigen::VectorXd::Zero(st.table.N),
          st.params->xi);
      st.dec[index].slacks[j] = v.cwiseMax(0.0);
    }
  }
  st.bounds.assign(V, StateBounds{});
  for (int i = 0; i < V; ++i) st.bounds[i] = compute_state_bounds(st, i);
  refresh_active(st);
}

}  // namespace

BlockResult solve_mean_block(int index,
                             const std::vector<VehicleProblem>& problems,
                             const std::vector<LocalDecision>& decisions,
                             const std::vector<DualState>& duals,
                             const std::vector<ObstacleTrack>& obstacles,
                             const Parameters& params,
                             const SafetyParams& safety,
                             const NegotiationConfig& config) {
  validate_config(config, "solve_mean_block");
  validate_common(problems, decisions, obstacles, params, "solve_mean_block");
  if (index < 0 || index >= static_cast<int>(problems.size()))
    throw std::invalid_argument("solve_mean_block: index out of range");
  NegState st;
  init_neg_state(st, problems, decisions, obstacles, params, safety, config,
                 nullptr);
  refresh_geometry(st);
  seed_one_shot(st, index, duals);
  compute_mean_inflation(st);

  MeanCtx ctx(st, index, problems[index].initial_mean, config.mean_solver);
  ctx.set_outer(st);
  ctx.refresh_round(st);
  ctx.warm_from(st.dec[index]);
  const SolveReport rep = ctx.solve();
  BlockResult out{decisions[index], false, rep.iterations};
  if (rep.status == SolveStatus::infeasible || !rep.x.allFinite()) return out;
  LocalDecision cand = st.dec[index];
  ctx.extract(rep.x, cand);
  restore_mean_profile(problems[index], params, problems[index].initial_mean,
                       cand);
  if (!mean_gate(st, index, cand, kGateTol)) return out;
  out.decision = std::move(cand);
  out.solved = true;
  return out;
}

BlockResult solve_covariance_block(int index,
                                   const std::vector<VehicleProblem>& problems,
                                   const std::vector<LocalDecision>& decisions,
                                   const std::vector<DualState>& duals,
                                   const std::vector<ObstacleTrack>& obstacles,
                                   const Parameters& params,
                                   const SafetyParams& safety,
                                   const NegotiationConfig& config) {
  validate_config(config, "solve_covariance_block");
  validate_common(problems, decisions, obstacles, params,
                  "solve_covariance_block");
  if (index < 0 || index >= static_cast<int>(problems.size()))
    throw std::invalid_argument("solve_covariance_block: index out of range");
  NegState st;
  init_neg_state(st, problems, decisions, obstacles, params, safety, config,
                 nullptr);
  refresh_geometry(st);
  seed_one_shot(st, index, duals);
  freeze_gap_sq(st);
  compute_cov_inflation(st);

  const int N = st.table.N;
  const int S = static_cast<int>(st.table.slots[index].size());
  const int O = static_cast<int>(st.table.obs[index].size());
  CovCtx ctx(N, S, O, config.cov_solver);
  ctx.bind(problems[index], params, safety);
  ctx.set_outer(st, index);
  ctx.refresh_round(st, index);
  ctx.warm_from(st.dec[index], st.table.slots[index]);
  const SolveReport rep = ctx.solve();
  BlockResult out{decisions[index], false, rep.iterations};
  if (rep.status == SolveStatus::infeasible || !rep.x.allFinite()) return out;
  LocalDecision cand = st.dec[index];
  ctx.extract(rep.x, st.table.slots[index], cand);
  restore_cov_profile(problems[index], problems[index].initial_cov, cand);
  if (!cov_gate(st, index, cand,
                position_covariances(cand, problems[index].filter), kGateTol))
    return out;
  out.decision = std::move(cand);
  out.solved = true;
  return out;
}

// ---------------------------------------------------------------------------
// Coordinator.

struct Coordinator::Memory {
  LocalDecision plan;
  bool has_plan = false;
  std::unique_ptr<CovCtx> standalone;  // covariance baseline, reused per cycle
};

Coordinator::Coordinator(const Parameters& params, const SafetyParams& safety,
                         const NegotiationConfig& config,
                         const AttentionSettings& attention)
    : params_(params), safety_(safety), config_(config), attention_(attention) {}

Coordinator::~Coordinator() = default;

const LocalDecision* Coordinator::previous_plan(int vehicle_id) const {
  auto it = memory_.find(vehicle_id);
  return (it != memory_.end() && it->second->has_plan) ? &it->second->plan
                                                       : nullptr;
}

void Coordinator::forget(int vehicle_id) { memory_.erase(vehicle_id); }

namespace {

// Feasibility/cost probe of one candidate initial condition: the tracking QP
// with margined hard rows (no relaxation, no penalty) against the provisional
// partner profiles. Used by the dual initialization.
EvalOutcome probe_initial(int i, const std::vector<VehicleProblem>& problems,
                          const std::vector<LocalDecision>& provisional,
                          const std::vector<ObstacleTrack>& obstacles,
                          const InitialCondition& cand,
                          const Parameters& params, const SafetyParams& safety,
                          const NegotiationConfig& config) {
  if (!cand.valid)
    return {false, std::numeric_limits<double>::infinity()};
  NegState st;
  init_neg_state(st, problems, provisional, obstacles, params, safety, config,
                 nullptr);
  restore_mean_profile(problems[i], params, cand.mean, st.dec[i]);
  restore_cov_profile(problems[i], cand.cov, st.dec[i]);
  st.table.pos_cov[i] = position_covariances(st.dec[i], problems[i].filter);
  refresh_geometry(st);
  st.active.assign(st.table.V, {});
  for (int v = 0; v < st.table.V; ++v)
    st.active[v].assign(st.table.slots[v].size(),
                        std::vector<char>(st.table.N, 0));
  st.bounds.assign(st.table.V, StateBounds{});
  st.bounds[i] = nominal_state_bounds(problems[i], params, safety);

  MeanCtx ctx(st, i, cand.mean, config.evaluator_solver);
  ctx.set_outer(st);
  ctx.refresh_round(st);
  ctx.warm_from(st.dec[i]);
  const SolveReport rep = ctx.solve();
  if (rep.status != SolveStatus::optimal || !rep.x.allFinite())
    return {false, std::numeric_limits<double>::infinity()};
  LocalDecision sol = st.dec[i];
  ctx.extract(rep.x, sol);
  restore_mean_profile(problems[i], params, cand.mean, sol);
  const bool feasible = mean_gate(st, i, sol, kProbeTol);
  return {feasible, tracking_cost(st, i, sol)};
}

}  // namespace

CycleResult Coordinator::coordinate_step(
    const std::vector<CycleInput>& vehicles,
    const std::vector<ObstacleTrack>& obstacles) {
  const auto t0 = std::chrono::steady_clock::now();
  const int V = static_cast<int>(vehicles.size());
  const int N = params_.horizon;
  CycleResult out;
  out.commands.resize(V);
  CycleDiagnostics& diag = out.diagnostics;
  diag.neighbor_sets.assign(V, {});
  diag.used_measured.assign(V, true);
  diag.init_infeasible.assign(V, false);
  diag.gain_regularized.assign(V, false);
  diag.presolve_ran.assign(V, false);
  if (V == 0) {
    diag.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    return out;
  }

  std::vector<VehicleProblem> problems(V);
  std::vector<LocalDecision> dec(V);
  std::vector<Memory*> mem(V);
  std::vector<Vec4> measured_mean(V);
  const double tau = params_.tau;
  const double wb = params_.geometry.wheelbase;

  for (int i = 0; i < V; ++i) {
    const CycleInput& in = vehicles[i];
    if (static_cast<int>(in.reference.size()) != N + 1)
      throw std::invalid_argument("coordinate_step: reference size");
    if (!in.estimate.mean_posterior.allFinite())
      throw std::invalid_argument("coordinate_step: non-finite estimate");
    auto& slot = memory_[in.id];
    if (!slot) slot = std::make_unique<Memory>();
    mem[i] = slot.get();

    // Align the estimate's heading branch to the (unwrapped) reference.
    Vec4 xm = in.estimate.mean_posterior;
    xm(2) += 2.0 * M_PI *
             std::round((in.reference[0](2) - xm(2)) / (2.0 * M_PI));
    measured_mean[i] = xm;

    const bool warm = mem[i]->has_plan && mem[i]->plan.horizon() == N;
    std::vector<VehicleState> nom(N + 1);
    std::vector<ControlInput> nomu(N);
    if (warm) {
      const LocalDecision& plan = mem[i]->plan;
      for (int k = 0; k < N; ++k)
        nom[k] = VehicleState::from_vec(plan.means[k + 1]);
      for (int k = 0; k + 1 < N; ++k)
        nomu[k] = ControlInput::from_vec(plan.feedforward[k + 1]);
      ControlInput last = ControlInput::from_vec(plan.feedforward[N - 1]);
      const double v_end = nom[N - 1].v;
      const double lo = (safety_.margin_state - v_end) / tau;
      const double hi = (params_.limits.v_max - safety_.margin_state - v_end) / tau;
      last.a = std::clamp(std::clamp(last.a, lo, hi), params_.limits.a_min,
                          params_.limits.a_max);
      last.delta =
          std::clamp(last.delta, -params_.limits.delta_max, params_.limits.delta_max);
      nomu[N - 1] = last;
      VehicleState app = step_nonlinear(nom[N - 1], last, tau, wb);
      app.theta += 2.0 * M_PI *
                   std::round((nom[N - 1].theta - app.theta) / (2.0 * M_PI));
      nom[N] = app;
    } else {
      if (static_cast<int>(in.cold_nominal.size()) != N + 1 ||
          static_cast<int>(in.cold_inputs.size()) != N)
        throw std::invalid_argument("coordinate_step: cold nominal size");
      nom = in.cold_nominal;
      nomu = in.cold_inputs;
    }

    VehicleProblem& p = problems[i];
    p.models.resize(N);
    for (int k = 0; k < N; ++k)
      p.models[k] = discretize(linearize(nom[k], nomu[k], wb), tau,
                               params_.G_noise);
    p.measurement = MeasurementModel{params_.C_meas, params_.D_noise};
    p.filter = precompute_filter_horizon(p.models, p.measurement,
                                         in.estimate.cov_prior);
    p.reference = in.reference;
    p.terminal = in.terminal;
    p.initial_mean = xm;
    p.initial_cov = Mat4::Zero();

    // Provisional warm decision at the measured initial condition.
    LocalDecision d;
    d.feedforward.resize(N);
    d.distances = Eigen::VectorXd::Constant(N + 1, params_.d_max);
    d.injection.assign(N, Mat24::Zero());
    d.auxiliary.assign(N, Mat2::Zero());
    if (warm) {
      const LocalDecision& plan = mem[i]->plan;
      for (int k = 0; k < N; ++k) {
        d.feedforward[k] = k + 1 < N ? plan.feedforward[k + 1] : nomu[N - 1].vec();
        d.injection[k] = plan.injection[std::min(k + 1, N - 1)];
        d.auxiliary[k] = plan.auxiliary[std::min(k + 1, N - 1)];
      }
      for (int k = 0; k <= N; ++k)
        d.distances(k) = plan.distances(std::min(k + 1, N));
    } else {
      for (int k = 0; k < N; ++k) d.feedforward[k] = nomu[k].vec();
    }
    restore_mean_profile(p, params_, xm, d);
    restore_cov_profile(p, Mat4::Zero(), d);
    dec[i] = std::move(d);
  }

  // Dual initialization: measured vs. previously predicted initial condition.
  for (int i = 0; i < V; ++i) {
    const bool first = !(mem[i]->has_plan && mem[i]->plan.horizon() == N);
    InitialCondition measured{measured_mean[i], Mat4::Zero(), true};
    InitialCondition predicted;
    if (!first) {
      predicted.mean = mem[i]->plan.means[1];
      predicted.cov = mem[i]->plan.covs[1];
      predicted.valid = predicted.mean.allFinite() && predicted.cov.allFinite();
    }
    bool coupled = false;
    for (int j = 0; j < V && !coupled; ++j)
      coupled = j != i && profile_min_distance(dec[i], dec[j]) <=
                              safety_.cull_distance;
    for (const ObstacleTrack& o : obstacles)
      coupled = coupled || profile_min_distance(dec[i], o) <= safety_.cull_distance;

    InitialChoice choice;
    if (first || !coupled) {
      choice.chosen = measured;
      choice.used_measured = true;
    } else {
      ProblemEvaluator eval = [&](const InitialCondition& cand) {
        return probe_initial(i, problems, dec, obstacles, cand, params_,
                             safety_, config_);
      };
      choice = choose_initial_condition(measured, predicted, eval, first);
      diag.init_infeasible[i] = choice.both_infeasible;
    }
    diag.used_measured[i] = choice.used_measured;
    problems[i].initial_mean = choice.chosen.mean;
    problems[i].initial_cov = choice.chosen.cov;
    restore_mean_profile(problems[i], params_, choice.chosen.mean, dec[i]);
    restore_cov_profile(problems[i], choice.chosen.cov, dec[i]);
  }

  // Standalone covariance baseline when the warm policy's terminal cap is
  // tight (first conflict cycle, fresh initial covariance, cold start).
  for (int i = 0; i < V; ++i) {
    if (cap_eig(problems[i], dec[i]) <= -kCapSkipFrac * safety_.margin_terminal)
      continue;
    diag.presolve_ran[i] = true;
    if (!mem[i]->standalone)
      mem[i]->standalone = std::make_unique<CovCtx>(N, 0, 0, config_.cov_solver);
    CovCtx& ctx = *mem[i]->standalone;
    ctx.bind(problems[i], params_, safety_);
    std::vector<VehicleProblem> single{problems[i]};
    std::vector<LocalDecision> single_dec{dec[i]};
    std::vector<ObstacleTrack> none;
    NegState st;
    init_neg_state(st, single, single_dec, none, params_, safety_, config_,
                   nullptr);
    ctx.set_outer(st, 0);
    ctx.refresh_round(st, 0);
    ctx.warm_from(dec[i], {});
    const SolveReport rep = ctx.solve();
    if (rep.status != SolveStatus::infeasible && rep.x.allFinite()) {
      LocalDecision cand = dec[i];
      ctx.extract(rep.x, {}, cand);
      restore_cov_profile(problems[i], problems[i].initial_cov, cand);
      if (cap_eig(problems[i], cand) <= -terminal_gate_slack(safety_))
        dec[i] = std::move(cand);
    }
  }

  // Neighbor selection over vehicles and obstacle pseudo-agents.
  const int O = static_cast<int>(obstacles.size());
  std::vector<AgentSnapshot> agents(V + O);
  std::vector<Vec2> positions(V + O);
  for (int i = 0; i < V; ++i) {
    agents[i] = {VehicleState::from_vec(measured_mean[i]),
                 vehicles[i].intention};
    positions[i] = measured_mean[i].head<2>();
  }
  for (int o = 0; o < O; ++o) {
    const auto& track = obstacles[o].position;
    const Vec2 vel =
        track.size() > 1 ? Vec2((track[1] - track[0]) / params_.tau) : Vec2::Zero();
    VehicleState s;
    s.x = track[0](0);
    s.y = track[0](1);
    s.theta = vel.norm() > 1e-9 ? std::atan2(vel(1), vel(0)) : 0.0;
    s.v = vel.norm();
    agents[V + o] = {s, Intention::straight};
    positions[V + o] = track[0];
  }
  const CommunicationGraph graph = build_graph(positions, attention_.d_cmu);
  std::vector<std::vector<int>> neighbor_idx(V);
  for (int i = 0; i < V; ++i) {
    if (attention_.mode == AttentionSettings::Mode::all_pairs) {
      for (int j = 0; j < V; ++j)
        if (j != i) neighbor_idx[i].push_back(j);
    } else {
      std::vector<int> candidates;
      for (int j = 0; j < V + O; ++j)
        if (j != i) candidates.push_back(j);
      Eigen::VectorXd scores;
      if (attention_.mode == AttentionSettings::Mode::learned) {
        scores = attention_weights(attention_.params,
                                   embed_features(agents, i, attention_.params))
                     .combined;
      } else {
        scores = fallback_scores(agents, i, N * params_.tau);
      }
      const std::vector<int> sel = select_neighbors(
          scores, candidates, graph, i, attention_.k_max, positions,
          safety_floor_radius(params_.limits, params_.tau));
      for (int j : sel)
        if (j < V) neighbor_idx[i].push_back(j);
    }
    for (int j : neighbor_idx[i])
      diag.neighbor_sets[i].push_back(vehicles[j].id);
  }

  diag.negotiation = negotiate(problems, dec, neighbor_idx, obstacles, params_,
                               safety_, config_);

  for (int i = 0; i < V; ++i) {
    const LocalDecision& d = diag.negotiation.decisions[i];
    const bool finite = d.finite();
    if (!finite || diag.negotiation.plan_unsafe[i]) {
      const double v = vehicles[i].estimate.mean_posterior(3);
      const double a = std::max(params_.limits.a_min, -v / params_.tau);
      out.commands[i] = VehicleCommand{ControlInput{a, 0.0}, true, true};
      diag.hard_failure = true;
    } else {
      const GainRecovery gr = recover_gain(d.covs[0], d.injection[0]);
      diag.gain_regularized[i] = gr.regularized;
      const CommandResult cr =
          control_command(d.feedforward[0], gr.K, measured_mean[i], d.means[0],
                          params_.limits);
      out.commands[i] = VehicleCommand{cr.input, cr.saturated, false};
    }
    if (finite) {
      mem[i]->plan = d;
      mem[i]->has_plan = true;
    }
  }
  diag.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return out;
}

}  // namespace dtn
