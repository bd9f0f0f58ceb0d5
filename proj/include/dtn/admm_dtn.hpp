// Fully parallel distributed trajectory negotiation: each vehicle alternates a
// mean block (condensed QP over feedforward inputs and safety distances) and a
// covariance block (SDP over injection/auxiliary policy variables and slack)
// under an augmented Lagrangian on the pairwise slack-equality residuals, with
// Jacobi rounds combined by under-relaxation and duals updated once per outer
// iteration at the freshly combined decisions.
//
// Feasibility bookkeeping. Every pairwise hard row is jointly affine in the
// two condensed decision vectors and carries a margin; each vehicle enforces
// both its own directed row (partner frozen) and the partner's directed row
// (own variables free), so any combination with pair weights summing to one
// keeps every row satisfied round over round. Restoration (exact clamping,
// LMI repair, exact repropagation) runs on every raw solver output before
// combination, a post-solve gate re-checks the true row values of the
// restored candidate, and a descent guard reverts any round that would
// increase some vehicle's local augmented cost. Rows found violated at a
// round start are relaxed by exactly their violation (plus a pad, up to a cap
// below the margin) and the relaxation is reported, never hidden.
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <utility>
#include <vector>

#include "dtn/attention.hpp"
#include "dtn/conic_solver.hpp"
#include "dtn/estimation.hpp"
#include "dtn/moments.hpp"
#include "dtn/safety.hpp"
#include "dtn/types.hpp"

namespace dtn {

/// Formulation internals of the safety rows: ellipse overrides, the margins
/// that let a 1e-4 solver deliver 1e-6 feasibility after restoration, and the
/// pair culling radius.
struct SafetyParams {
  double semi_major_override = -1.0;  // forwarded to build_collision_ellipse
  double semi_minor_override = -1.0;
  /// Margin on the mean hard rows, in transformed-gap units.
  double margin_mean = 0.05;
  /// Margin on the covariance hard rows, in squared-gap units. Must stay at
  /// or below margin_mean^2 so the two row families never contradict.
  double margin_cov = 2.4e-3;
  /// Tightening of the speed bounds and the terminal mean box.
  double margin_state = 5e-3;
  /// Eigenvalue margin on the terminal covariance cap.
  double margin_terminal = 1e-3;
  /// Pairs whose current profiles never come closer than this (Euclidean)
  /// exchange no rows this cycle.
  double cull_distance = 35.0;
};

/// Negotiation schedule and penalty configuration.
struct NegotiationConfig {
  int rounds_mean = 4;       // p_max, mean block
  int rounds_cov = 2;        // p_max, covariance block
  double relaxation = 0.5;   // Jacobi combination weight omega, in (0, 1]
  double stop_delta = 1e-3;  // gamma: block rounds stop early once the largest
                             // per-vehicle decision change drops below this
  double penalty = 100.0;    // augmented-Lagrangian rho
  int max_outer = 10;
  double eps_primal = 0.1;  // sum of squared slack residuals (inclusive)
  double eps_dual = 0.1;    // sum of squared dual increments (inclusive)
  SolverSettings mean_solver;
  SolverSettings cov_solver;
  SolverSettings evaluator_solver;  // dual-initialization probe solves

  NegotiationConfig() {
    mean_solver.tol = 1e-4;
    mean_solver.max_iters = 20000;
    cov_solver.tol = 1e-4;
    cov_solver.max_iters = 15000;
    evaluator_solver.tol = 1e-3;
    evaluator_solver.max_iters = 4000;
  }
};

/// Immutable per-vehicle data for one planning cycle.
struct VehicleProblem {
  std::vector<LinearDiscreteModel> models;  // k = 0..N-1
  MeasurementModel measurement;
  FilterHorizon filter;  // k = 0..N, consistent with `models`
  Vec4 initial_mean = Vec4::Zero();
  Mat4 initial_cov = Mat4::Zero();
  std::vector<Vec4> reference;  // x_r_k, k = 0..N
  TerminalSpec terminal;
};

/// Non-negotiating agent: predicted positions plus a fixed position
/// covariance. Receives hard rows only (no slack, no dual, no penalty).
struct ObstacleTrack {
  std::vector<Vec2> position;  // k = 0..N
  Mat2 position_cov = (Mat2() << 0.5, 0.0, 0.0, 0.5).finished();
};

/// One vehicle's share of the shared negotiation profile:
/// s_i = (xbar, m, Sigma_hat, U, Y, d, Delta).
struct LocalDecision {
  std::vector<Vec4> means;        // xbar_k, k = 0..N
  std::vector<Vec2> feedforward;  // m_k, k = 0..N-1
  Eigen::VectorXd distances;      // d_k, k = 0..N
  std::vector<Mat4> covs;         // Sigma_hat_k, k = 0..N
  std::vector<Mat24> injection;   // U_k, k = 0..N-1
  std::vector<Mat2> auxiliary;    // Y_k, k = 0..N-1
  /// Slack Delta >= 0 per negotiated partner (vehicle index), k = 1..N.
  std::map<int, Eigen::VectorXd> slacks;

  int horizon() const { return static_cast<int>(feedforward.size()); }
  bool finite() const;
};

/// Duals of the directed slack-equality residuals owned by one vehicle,
/// keyed like LocalDecision::slacks, plus the shared penalty rho. In this
/// in-process realization, "mirroring to the partner at synchronization" is
/// the shared read of these values each outer iteration.
struct DualState {
  std::map<int, Eigen::VectorXd> multipliers;
  double penalty = 100.0;
};

/// Primal/dual residual aggregate of one outer iteration.
struct ResidualReport {
  double primal = 0.0;  // sum over directed pairs of ||I_ij||^2
  double dual = 0.0;    // sum over directed pairs of ||lambda^+ - lambda||^2
  std::map<std::pair<int, int>, Eigen::VectorXd> per_pair;
};

/// (rho/2) sum_k (I_k + lambda_k)^2.
double augmented_penalty(const Eigen::VectorXd& residuals,
                         const Eigen::VectorXd& duals, double rho);

/// lambda^+ = lambda + I, evaluated at the post-update decisions.
Eigen::VectorXd dual_update(const Eigen::VectorXd& duals,
                            const Eigen::VectorXd& residuals);

/// Inclusive test: primal <= eps_primal && dual <= eps_dual.
bool check_termination(const ResidualReport& report, double eps_primal,
                       double eps_dual);

/// Total position covariance schedule Gamma (Sigma_hat_k + Sigma_tilde_k)
/// Gamma^T, k = 0..N, with the posterior estimation-error covariance.
std::vector<Mat2> position_covariances(const LocalDecision& decision,
                                       const FilterHorizon& filter);

/// Transformed half-space normals t_k = T_k alpha_k of the owner's directed
/// constraint against one partner, k = 1..N. T_k is built from the owner's
/// profile heading at step k; alpha is the unit transformed separation. When
/// the transformed means (nearly) coincide the previous step's direction is
/// reused (x-axis at k = 1).
std::vector<Vec2> pair_normals(const std::vector<Vec4>& own_means,
                               const std::vector<Vec2>& other_position,
                               const VehicleGeometry& geometry,
                               const SafetyParams& safety);

/// Slack-equality residuals I_k, k = 1..N, of one directed pair:
///   I_k = (t_k.(p_i - p_j) - d_k)^2 - 2 c^2 t_k^T (P_i + P_j) t_k - Delta_k,
/// with c = erfinv(1 - 2 xi) and total position covariances P.
Eigen::VectorXd directed_residuals(const std::vector<Vec2>& normals,
                                   const std::vector<Vec4>& own_means,
                                   const std::vector<Vec2>& other_position,
                                   const std::vector<Mat2>& own_poscov,
                                   const std::vector<Mat2>& other_poscov,
                                   const Eigen::VectorXd& distances,
                                   const Eigen::VectorXd& slack, double xi);

/// Chance-constraint residuals t_k.(p_i - p_j) - d_k - c sqrt(2 sigma_k^2),
/// k = 1..N: the unslacked inequality the acceptance checks gate on.
Eigen::VectorXd chance_residuals(const std::vector<Vec2>& normals,
                                 const std::vector<Vec4>& own_means,
                                 const std::vector<Vec2>& other_position,
                                 const std::vector<Mat2>& own_poscov,
                                 const std::vector<Mat2>& other_poscov,
                                 const Eigen::VectorXd& distances, double xi);

/// Local augmented cost: moment cost + the l1 distance reward + the penalty
/// over the supplied per-pair residual/dual stacks.
double local_cost(const VehicleProblem& problem, const Parameters& params,
                  const LocalDecision& decision,
                  const std::vector<Eigen::VectorXd>& pair_residuals,
                  const std::vector<Eigen::VectorXd>& pair_duals, double rho);

/// One-shot local block solve against frozen partner decisions. `decisions`
/// supplies every vehicle's current profile (index aligned with `problems`);
/// every other vehicle within the culling distance couples to `index`. On
/// solver or gate failure the input decision is returned with solved=false
/// (the keep-the-round rule of Algorithm 1).
struct BlockResult {
  LocalDecision decision;
  bool solved = false;
  int iterations = 0;
};

BlockResult solve_mean_block(int index,
                             const std::vector<VehicleProblem>& problems,
                             const std::vector<LocalDecision>& decisions,
                             const std::vector<DualState>& duals,
                             const std::vector<ObstacleTrack>& obstacles,
                             const Parameters& params,
                             const SafetyParams& safety,
                             const NegotiationConfig& config);

BlockResult solve_covariance_block(int index,
                                   const std::vector<VehicleProblem>& problems,
                                   const std::vector<LocalDecision>& decisions,
                                   const std::vector<DualState>& duals,
                                   const std::vector<ObstacleTrack>& obstacles,
                                   const Parameters& params,
                                   const SafetyParams& safety,
                                   const NegotiationConfig& config);

/// Feasibility and cost snapshot of one committed (or reverted) round.
struct RoundRecord {
  int outer = 0;          // 1-based; 0 marks the restored initial profile
  int round = 0;          // 1-based within the block
  bool cov_block = false;
  bool committed = true;  // false when the descent guard reverted the round
  /// Sum over vehicles of the block-consistent local augmented objective
  /// (mean block: active-slack penalty rows; covariance block: all rows).
  double total_cost = 0.0;
  /// Max over vehicles of the per-vehicle objective change this round
  /// (<= 1e-9 on committed rounds, enforced by the descent guard).
  double max_cost_delta = 0.0;
  double max_dynamics_residual = 0.0;  // mean and covariance recursions
  double min_lmi_eig = 0.0;
  double max_terminal_cap_eig = 0.0;  // max eig of S_N - (Sigma_f - Sigma_tilde_N)
  double min_chance_residual = 0.0;   // active directed pairs + obstacles, k=1..N
  double min_box_slack = 0.0;         // input/distance/speed/terminal boxes
  double max_inflation = 0.0;         // pairwise-row relaxation this round
  double max_state_inflation = 0.0;   // speed/terminal-box relaxation
  /// Worst slack of this round's local problems at the synchronized
  /// decisions: the block's pair/obstacle rows (mean or covariance form,
  /// relaxations and acceptance slacks included) and the effective state
  /// boxes. Nonnegative up to float dust on every round with outer >= 1 —
  /// the Eq.-36 feasibility induction. Zero on the outer-0 baseline record.
  double min_local_residual = 0.0;
};

struct NegotiationResult {
  std::vector<LocalDecision> decisions;
  std::vector<DualState> duals;
  ResidualReport report;  // final outer iteration
  bool converged = false;
  int outer_iterations = 0;
  std::vector<RoundRecord> rounds;     // includes the outer-0 initial record
  std::vector<double> primal_history;  // per outer iteration
  int guard_trips = 0;
  int solver_failures = 0;   // vehicle-rounds that kept the previous decision
  long mean_iterations = 0;  // splitting iterations across all mean solves
  long cov_iterations = 0;
  double max_inflation = 0.0;
  double max_state_inflation = 0.0;
  /// Per vehicle: true when some chance residual < -1e-3 at exit (the caller
  /// discards the plan and brakes).
  std::vector<bool> plan_unsafe;
  /// Per vehicle: largest eigenvalue of Sigma_N - (Sigma_f - posterior_N) at
  /// exit; nonpositive exactly when the plan meets the terminal covariance
  /// cap. Reported separately from plan_unsafe because braking on a missed
  /// cap would only erode controllability further.
  std::vector<double> terminal_cap;
  double wall_seconds = 0.0;
};

/// Runs one full negotiation among `problems` from the supplied initial
/// profiles. `neighbor_sets[i]` lists the vehicle indices i attends to; a
/// pair couples when either side selected the other and the initial profiles
/// come within the culling distance. Obstacles couple by distance alone.
/// Throws std::invalid_argument on inconsistent sizes, relaxation outside
/// (0, 1], rounds < 1, or penalty <= 0.
NegotiationResult negotiate(const std::vector<VehicleProblem>& problems,
                            const std::vector<LocalDecision>& initial,
                            const std::vector<std::vector<int>>& neighbor_sets,
                            const std::vector<ObstacleTrack>& obstacles,
                            const Parameters& params, const SafetyParams& safety,
                            const NegotiationConfig& config);

/// Neighbor-selection configuration of the coordinator.
struct AttentionSettings {
  enum class Mode { learned, fallback, all_pairs };
  Mode mode = Mode::fallback;
  int k_max = 5;
  double d_cmu = 50.0;          // communication radius (m)
  AttentionModelParams params;  // used when mode == learned
};

/// Per-vehicle input of one planning cycle.
struct CycleInput {
  int id = 0;                   // persistent vehicle id
  StateEstimate estimate;       // filtered state at the current time
  std::vector<Vec4> reference;  // route reference, k = 0..N
  TerminalSpec terminal;        // resolved terminal box + covariance cap
  Intention intention = Intention::straight;
  /// Nominal trajectory for the first cycle (no previous plan): states
  /// k = 0..N and inputs k = 0..N-1 along the route at the current speed.
  std::vector<VehicleState> cold_nominal;
  std::vector<ControlInput> cold_inputs;
};

struct VehicleCommand {
  ControlInput input;
  bool saturated = false;
  bool fallback_braking = false;  // negotiation unusable; maximal braking
};

struct CycleDiagnostics {
  NegotiationResult negotiation;
  std::vector<std::vector<int>> neighbor_sets;  // selected vehicle ids
  std::vector<bool> used_measured;              // initial-condition choice
  std::vector<bool> init_infeasible;            // both candidates failed probe
  std::vector<bool> gain_regularized;
  std::vector<bool> presolve_ran;  // standalone covariance baseline was needed
  double wall_seconds = 0.0;
  bool hard_failure = false;  // some vehicle fell back to braking
};

struct CycleResult {
  std::vector<VehicleCommand> commands;  // aligned with the inputs
  CycleDiagnostics diagnostics;
};

/// Receding-horizon coordinator: owns the per-vehicle warm starts, the dual
/// initialization of each cycle (measured vs. predicted initial condition),
/// neighbor selection, and command synthesis. One instance per episode;
/// coordinate_step is deterministic in its inputs.
class Coordinator {
 public:
  Coordinator(const Parameters& params, const SafetyParams& safety,
              const NegotiationConfig& config,
              const AttentionSettings& attention);
  ~Coordinator();

  CycleResult coordinate_step(const std::vector<CycleInput>& vehicles,
                              const std::vector<ObstacleTrack>& obstacles);

  /// Last committed plan, or nullptr before the first cycle.
  const LocalDecision* previous_plan(int vehicle_id) const;
  /// Drops all per-vehicle state (the vehicle exited).
  void forget(int vehicle_id);

  const Parameters& parameters() const { return params_; }

 private:
  struct Memory;
  Parameters params_;
  SafetyParams safety_;
  NegotiationConfig config_;
  AttentionSettings attention_;
  std::map<int, std::unique_ptr<Memory>> memory_;
};

}  // namespace dtn
