// Self-contained convex solver for the two subproblem classes the negotiation
// produces: quadratic programs (mean block) and semidefinite programs with
// small PSD blocks (covariance block).
//
// Standard form:
//   minimize    (1/2) x^T P x + q^T x + c0
//   subject to  H x + h in K,
// where K is a product of {zero, nonnegative, box(lo, hi), psd(n)} cones and
// PSD blocks are carried in scaled-vector (svec) form. Equalities are zero
// cones. The algorithm is alternating-direction operator splitting with
// over-relaxation and adaptive penalty rescaling; one solve is
// single-threaded and deterministic given identical inputs and warm start.
#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

namespace dtn {

enum class ConeTag { zero, nonneg, box, psd };

/// One cone block covering `rows` consecutive rows of H x + h.
struct ConeBlock {
  ConeTag tag = ConeTag::zero;
  int rows = 0;
  Eigen::VectorXd lo;  // box only
  Eigen::VectorXd hi;  // box only
  int psd_n = 0;       // psd only: matrix side, rows == psd_n (psd_n + 1) / 2
};

/// svec size for an n x n symmetric matrix.
inline int svec_size(int n) { return n * (n + 1) / 2; }

/// Symmetric matrix <-> scaled vector (off-diagonals times sqrt(2), so the
/// Frobenius inner product is preserved). Upper triangle, column-major.
Eigen::VectorXd mat_to_svec(const Eigen::MatrixXd& m);
Eigen::MatrixXd svec_to_mat(const Eigen::VectorXd& v, int n);

/// Nearest PSD matrix in Frobenius norm (eigenvalue clamping at zero).
/// The input is symmetrized first.
Eigen::MatrixXd project_psd(const Eigen::MatrixXd& m);

/// Elementwise clamp; throws std::invalid_argument when lo > hi anywhere.
Eigen::VectorXd project_box(const Eigen::VectorXd& v, const Eigen::VectorXd& lo,
                            const Eigen::VectorXd& hi);

/// Problem container with append-style construction. Rows are stacked in the
/// order the add_* calls are made; finalize() assembles the dense H.
struct ConicProblem {
  Eigen::MatrixXd P;  // n x n, symmetric PSD
  Eigen::VectorXd q;  // n
  double c0 = 0.0;    // constant objective offset (reporting only)

  Eigen::MatrixXd H;  // m x n (valid after finalize)
  Eigen::VectorXd h;  // m
  std::vector<ConeBlock> cones;

  explicit ConicProblem(int nvars = 0);

  int num_vars() const { return static_cast<int>(P.rows()); }
  int num_rows() const;

  /// A x + b = 0.
  void add_zero(const Eigen::MatrixXd& A, const Eigen::VectorXd& b);
  /// A x + b >= 0.
  void add_nonneg(const Eigen::MatrixXd& A, const Eigen::VectorXd& b);
  /// lo <= A x + b <= hi.
  void add_box(const Eigen::MatrixXd& A, const Eigen::VectorXd& b,
               const Eigen::VectorXd& lo, const Eigen::VectorXd& hi);
  /// svec rows: mat(A x + b) PSD, n <= 8.
  void add_psd(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, int n);

  /// Stacks the accumulated blocks into H, h. Must be called exactly once
  /// before handing the problem to a solver.
  void finalize();

  /// Plain-text dump (dimensions header + dense row-major blocks) for
  /// offline debugging.
  void dump(const std::string& path) const;

 private:
  void append(ConeTag tag, const Eigen::MatrixXd& A, const Eigen::VectorXd& b,
              const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, int psd_n);
  std::vector<Eigen::MatrixXd> pending_A_;
  std::vector<Eigen::VectorXd> pending_b_;
  bool finalized_ = false;
};

enum class SolveStatus { optimal, max_iters, infeasible };

struct SolveReport {
  SolveStatus status = SolveStatus::max_iters;
  Eigen::VectorXd x;
  double objective = 0.0;
  double primal_res = 0.0;
  double dual_res = 0.0;
  int iterations = 0;
};

struct SolverSettings {
  double tol = 1e-6;
  int max_iters = 50000;
  double sigma = 1e-6;        // proximal regularization
  double alpha = 1.6;         // over-relaxation
  double rho0 = 0.1;          // initial penalty
  double eq_rho_scale = 1e3;  // zero-cone rows get rho0 * this
  bool adaptive_rho = true;
  int rho_interval = 25;      // penalty rescale cadence (iterations)
  int stall_window = 2000;    // infeasibility: stagnation window
};

/// Reusable solver instance. The KKT factorization is cached and reused as
/// long as P, H and the penalty stay unchanged, so sequences of solves that
/// only move q and h (the negotiation's Jacobi rounds) never refactor.
/// Warm state (x, y, s) persists across solve() calls; warm_start() overrides
/// it and reset_warm() clears it.
class ConicSolver {
 public:
  explicit ConicSolver(ConicProblem problem, SolverSettings settings = {});

  /// Replaces the linear terms only; cone layout and matrices must match.
  void update_linear_terms(const Eigen::VectorXd& q, const Eigen::VectorXd& h);
  /// Replaces matrices too (same variable count and cone layout); refactors.
  void update_matrices(const Eigen::MatrixXd& P, const Eigen::VectorXd& q,
                       const Eigen::MatrixXd& H, const Eigen::VectorXd& h);
  /// Replaces box-cone bounds in place (same layout).
  void update_cone_bounds(const std::vector<ConeBlock>& cones);

  void warm_start(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                  const Eigen::VectorXd& s);
  void warm_start_primal(const Eigen::VectorXd& x);
  void reset_warm();

  SolveReport solve();

  const ConicProblem& problem() const { return prob_; }
  const Eigen::VectorXd& dual() const { return y_; }
  const Eigen::VectorXd& slack() const { return s_; }

 private:
  void factorize();
  void equilibrate();
  void refresh_scaled_vectors();
  static void project_cones_scaled(Eigen::VectorXd& s,
                                   const std::vector<ConeBlock>& cones);

  ConicProblem prob_;  // caller-facing, unscaled
  SolverSettings settings_;
  Eigen::VectorXd rho_;  // per-row penalty (scaled space)
  double rho_scalar_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  bool factored_ = false;

  // Ruiz equilibration: iterations run on Hs = D H E, Ps = c E P E with
  // per-row scales d (uniform inside each psd block, so the cone is
  // preserved), per-column scales e, and objective scale c. Residuals are
  // checked and results reported in unscaled units.
  Eigen::MatrixXd Hs_, Ps_;
  Eigen::VectorXd qs_, hs_;
  Eigen::VectorXd d_, e_;
  double cobj_ = 1.0;
  std::vector<ConeBlock> cones_s_;
  bool scaled_valid_ = false;

  Eigen::VectorXd x_, y_, s_;  // unscaled warm state
  bool warm_valid_ = false;
  // Set by warm_start_primal: complete s = proj(Hx + h) at solve() entry so
  // the completion sees the constraint data actually being solved.
  bool warm_primal_pending_ = false;
};

/// One-shot convenience wrapper.
SolveReport solve(const ConicProblem& problem, SolverSettings settings = {});

}  // namespace dtn
