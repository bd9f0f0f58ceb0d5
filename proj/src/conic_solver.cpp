#include "dtn/conic_solver.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace dtn {

namespace {
constexpr double kSqrt2 = 1.4142135623730951;
}  // namespace

Eigen::VectorXd mat_to_svec(const Eigen::MatrixXd& m) {
  const int n = static_cast<int>(m.rows());
  Eigen::VectorXd v(svec_size(n));
  int idx = 0;
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i <= j; ++i) {
      v[idx++] = (i == j) ? m(i, j) : kSqrt2 * 0.5 * (m(i, j) + m(j, i));
    }
  }
  return v;
}

Eigen::MatrixXd svec_to_mat(const Eigen::VectorXd& v, int n) {
  Eigen::MatrixXd m(n, n);
  int idx = 0;
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i <= j; ++i) {
      const double val = (i == j) ? v[idx] : v[idx] / kSqrt2;
      m(i, j) = val;
      m(j, i) = val;
      ++idx;
    }
  }
  return m;
}

Eigen::MatrixXd project_psd(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  const Eigen::VectorXd clamped = eig.eigenvalues().cwiseMax(0.0);
  return eig.eigenvectors() * clamped.asDiagonal() * eig.eigenvectors().transpose();
}

Eigen::VectorXd project_box(const Eigen::VectorXd& v, const Eigen::VectorXd& lo,
                            const Eigen::VectorXd& hi) {
  if ((lo.array() > hi.array()).any()) {
    throw std::invalid_argument("project_box: lo > hi");
  }
  return v.cwiseMax(lo).cwiseMin(hi);
}

ConicProblem::ConicProblem(int nvars) {
  P = Eigen::MatrixXd::Zero(nvars, nvars);
  q = Eigen::VectorXd::Zero(nvars);
}

int ConicProblem::num_rows() const {
  int m = 0;
  for (const auto& c : cones) m += c.rows;
  return m;
}

void ConicProblem::append(ConeTag tag, const Eigen::MatrixXd& A,
                          const Eigen::VectorXd& b, const Eigen::VectorXd& lo,
                          const Eigen::VectorXd& hi, int psd_n) {
  if (finalized_) throw std::logic_error("ConicProblem: append after finalize");
  if (A.rows() != b.size() || A.cols() != num_vars()) {
    throw std::invalid_argument("ConicProblem: dimension mismatch");
  }
  ConeBlock blk;
  blk.tag = tag;
  blk.rows = static_cast<int>(A.rows());
  blk.lo = lo;
  blk.hi = hi;
  blk.psd_n = psd_n;
  cones.push_back(std::move(blk));
  pending_A_.push_back(A);
  pending_b_.push_back(b);
}

void ConicProblem::add_zero(const Eigen::MatrixXd& A, const Eigen::VectorXd& b) {
  append(ConeTag::zero, A, b, {}, {}, 0);
}

void ConicProblem::add_nonneg(const Eigen::MatrixXd& A, const Eigen::VectorXd& b) {
  append(ConeTag::nonneg, A, b, {}, {}, 0);
}

void ConicProblem::add_box(const Eigen::MatrixXd& A, const Eigen::VectorXd& b,
                           const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  if (lo.size() != A.rows() || hi.size() != A.rows()) {
    throw std::invalid_argument("ConicProblem: box bound size mismatch");
  }
  if ((lo.array() > hi.array()).any()) {
    throw std::invalid_argument("ConicProblem: box lo > hi");
  }
  append(ConeTag::box, A, b, lo, hi, 0);
}

void ConicProblem::add_psd(const Eigen::MatrixXd& A, const Eigen::VectorXd& b,
                           int n) {
  if (n < 1 || n > 8) {
    throw std::invalid_argument("ConicProblem: psd block side must be in [1, 8]");
  }
  if (A.rows() != svec_size(n)) {
    throw std::invalid_argument("ConicProblem: psd rows != svec size");
  }
  append(ConeTag::psd, A, b, {}, {}, n);
}

void ConicProblem::finalize() {
  if (finalized_) return;
  const int m = num_rows();
  H = Eigen::MatrixXd::Zero(m, num_vars());
  h = Eigen::VectorXd::Zero(m);
  int row = 0;
  for (size_t i = 0; i < pending_A_.size(); ++i) {
    const int r = static_cast<int>(pending_A_[i].rows());
    H.middleRows(row, r) = pending_A_[i];
    h.segment(row, r) = pending_b_[i];
    row += r;
  }
  pending_A_.clear();
  pending_b_.clear();
  finalized_ = true;
}

void ConicProblem::dump(const std::string& path) const {
  std::ofstream out(path);
  out << "conic_problem n " << num_vars() << " m " << num_rows() << "\n";
  out << "P\n" << P << "\nq\n" << q.transpose() << "\nH\n" << H << "\nh\n"
      << h.transpose() << "\ncones\n";
  for (const auto& c : cones) {
    out << static_cast<int>(c.tag) << " rows " << c.rows << " psd_n " << c.psd_n
        << "\n";
  }
}

ConicSolver::ConicSolver(ConicProblem problem, SolverSettings settings)
    : prob_(std::move(problem)), settings_(settings) {
  prob_.finalize();
  const int m = prob_.num_rows();
  rho_ = Eigen::VectorXd::Constant(m, settings_.rho0);
  rho_scalar_ = settings_.rho0;
  int row = 0;
  for (const auto& c : prob_.cones) {
    if (c.tag == ConeTag::zero) {
      rho_.segment(row, c.rows).setConstant(settings_.rho0 * settings_.eq_rho_scale);
    }
    row += c.rows;
  }
  x_ = Eigen::VectorXd::Zero(prob_.num_vars());
  y_ = Eigen::VectorXd::Zero(m);
  s_ = Eigen::VectorXd::Zero(m);
}

void ConicSolver::update_linear_terms(const Eigen::VectorXd& q,
                                      const Eigen::VectorXd& h) {
  if (q.size() != prob_.q.size() || h.size() != prob_.h.size()) {
    throw std::invalid_argument("update_linear_terms: size mismatch");
  }
  prob_.q = q;
  prob_.h = h;
}

void ConicSolver::update_matrices(const Eigen::MatrixXd& P,
                                  const Eigen::VectorXd& q,
                                  const Eigen::MatrixXd& H,
                                  const Eigen::VectorXd& h) {
  if (P.rows() != prob_.P.rows() || H.rows() != prob_.H.rows() ||
      H.cols() != prob_.H.cols()) {
    throw std::invalid_argument("update_matrices: size mismatch");
  }
  prob_.P = P;
  prob_.q = q;
  prob_.H = H;
  prob_.h = h;
  factored_ = false;
  scaled_valid_ = false;
}

void ConicSolver::update_cone_bounds(const std::vector<ConeBlock>& cones) {
  if (cones.size() != prob_.cones.size()) {
    throw std::invalid_argument("update_cone_bounds: layout mismatch");
  }
  for (size_t i = 0; i < cones.size(); ++i) {
    if (cones[i].tag != prob_.cones[i].tag || cones[i].rows != prob_.cones[i].rows) {
      throw std::invalid_argument("update_cone_bounds: layout mismatch");
    }
  }
  prob_.cones = cones;
}

void ConicSolver::warm_start(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                             const Eigen::VectorXd& s) {
  x_ = x;
  y_ = y;
  s_ = s;
  warm_primal_pending_ = false;
  warm_valid_ = true;
}

void ConicSolver::warm_start_primal(const Eigen::VectorXd& x) {
  // The slack completion s = proj(Hx + h) is deferred to solve() entry:
  // callers stage constraint updates between warm-starting and solving, and a
  // slack completed against stale rows sends the first iterates (and the
  // penalty adaptation they drive) far off course.
  x_ = x;
  y_.setZero();
  warm_primal_pending_ = true;
  warm_valid_ = true;
}

void ConicSolver::reset_warm() {
  x_.setZero();
  y_.setZero();
  s_ = prob_.h;
  project_cones_scaled(s_, prob_.cones);
  warm_primal_pending_ = false;
  warm_valid_ = true;
}

void ConicSolver::factorize() {
  Eigen::MatrixXd M = Ps_;
  M.diagonal().array() += settings_.sigma;
  if (prob_.num_rows() > 0) {
    M.noalias() += Hs_.transpose() * rho_.asDiagonal() * Hs_;
  }
  llt_.compute(M);
  double bump = settings_.sigma;
  while (llt_.info() != Eigen::Success && bump < 1.0) {
    bump *= 100.0;
    Eigen::MatrixXd Mb = M;
    Mb.diagonal().array() += bump;
    llt_.compute(Mb);
  }
  if (llt_.info() != Eigen::Success) {
    throw std::runtime_error("ConicSolver: KKT factorization failed");
  }
  factored_ = true;
}

// Modified Ruiz equilibration. Row scales are kept uniform inside each psd
// block (a uniform positive factor preserves the cone; per-entry factors
// would not), columns use the larger of the constraint and objective
// contributions, and the objective gets its own scalar so the penalty-heavy
// quadratics the negotiation produces cannot drown the constraint geometry.
void ConicSolver::equilibrate() {
  const int n = prob_.num_vars();
  const int m = prob_.num_rows();
  Hs_ = prob_.H;
  Ps_ = prob_.P;
  d_ = Eigen::VectorXd::Ones(m);
  e_ = Eigen::VectorXd::Ones(n);
  cobj_ = 1.0;
  const auto clamp_norm = [](double v) { return std::clamp(v, 1e-8, 1e8); };
  for (int pass = 0; pass < 10; ++pass) {
    Eigen::VectorXd dr = Eigen::VectorXd::Ones(m);
    if (m > 0) {
      int row = 0;
      for (const auto& c : prob_.cones) {
        if (c.tag == ConeTag::psd) {
          double blk = 0.0;
          for (int j = row; j < row + c.rows; ++j)
            blk = std::max(blk, Hs_.row(j).lpNorm<Eigen::Infinity>());
          dr.segment(row, c.rows)
              .setConstant(1.0 / std::sqrt(clamp_norm(blk)));
        } else {
          for (int j = row; j < row + c.rows; ++j)
            dr(j) = 1.0 / std::sqrt(clamp_norm(
                              Hs_.row(j).lpNorm<Eigen::Infinity>()));
        }
        row += c.rows;
      }
    }
    Eigen::VectorXd dc(n);
    for (int j = 0; j < n; ++j) {
      const double hn =
          m > 0 ? Hs_.col(j).lpNorm<Eigen::Infinity>() : 0.0;
      const double pn = Ps_.col(j).lpNorm<Eigen::Infinity>();
      dc(j) = 1.0 / std::sqrt(clamp_norm(std::max(hn, pn)));
    }
    if (m > 0) Hs_ = dr.asDiagonal() * Hs_ * dc.asDiagonal();
    Ps_ = dc.asDiagonal() * Ps_ * dc.asDiagonal();
    d_.array() *= dr.array();
    e_.array() *= dc.array();
  }
  double col_mean = 0.0;
  for (int j = 0; j < n; ++j) col_mean += Ps_.col(j).lpNorm<Eigen::Infinity>();
  col_mean = n > 0 ? col_mean / n : 0.0;
  const double qn = (e_.array() * prob_.q.array()).matrix()
                        .lpNorm<Eigen::Infinity>();
  cobj_ = 1.0 / std::clamp(std::max({1.0, col_mean, qn}), 1e-6, 1e6);
  Ps_ *= cobj_;
  scaled_valid_ = true;
}

void ConicSolver::refresh_scaled_vectors() {
  qs_ = cobj_ * (e_.array() * prob_.q.array()).matrix();
  hs_ = (d_.array() * prob_.h.array()).matrix();
  cones_s_ = prob_.cones;
  int row = 0;
  for (auto& c : cones_s_) {
    if (c.tag == ConeTag::box) {
      c.lo = (c.lo.array() * d_.segment(row, c.rows).array()).matrix();
      c.hi = (c.hi.array() * d_.segment(row, c.rows).array()).matrix();
    }
    row += c.rows;
  }
}

void ConicSolver::project_cones_scaled(Eigen::VectorXd& s,
                                       const std::vector<ConeBlock>& cones) {
  int row = 0;
  for (const auto& c : cones) {
    auto seg = s.segment(row, c.rows);
    switch (c.tag) {
      case ConeTag::zero:
        seg.setZero();
        break;
      case ConeTag::nonneg:
        seg = seg.cwiseMax(0.0);
        break;
      case ConeTag::box:
        seg = seg.cwiseMax(c.lo).cwiseMin(c.hi);
        break;
      case ConeTag::psd: {
        const Eigen::MatrixXd m = svec_to_mat(seg, c.psd_n);
        seg = mat_to_svec(project_psd(m));
        break;
      }
    }
    row += c.rows;
  }
}

SolveReport ConicSolver::solve() {
  const int n = prob_.num_vars();
  const int m = prob_.num_rows();
  SolveReport report;

  if (!scaled_valid_) {
    equilibrate();
    factored_ = false;
  }
  refresh_scaled_vectors();
  if (!warm_valid_) reset_warm();
  if (warm_primal_pending_) {
    s_ = prob_.H * x_ + prob_.h;
    project_cones_scaled(s_, prob_.cones);
    warm_primal_pending_ = false;
  }
  if (!factored_) factorize();

  if (m == 0) {
    // Unconstrained QP: single KKT solve in the scaled metric.
    report.x = (e_.array() * llt_.solve(-qs_).array()).matrix();
    report.status = SolveStatus::optimal;
    report.objective =
        0.5 * report.x.dot(prob_.P * report.x) + prob_.q.dot(report.x) + prob_.c0;
    report.iterations = 1;
    x_ = report.x;
    return report;
  }

  // Iterate on the equilibrated problem (warm state enters scaled, leaves
  // unscaled); residuals and the exit report stay in the original units.
  Eigen::VectorXd z = (x_.array() / e_.array()).matrix();
  Eigen::VectorXd y = cobj_ * (y_.array() / d_.array()).matrix();
  Eigen::VectorXd s = (d_.array() * s_.array()).matrix();
  Eigen::VectorXd w(m), rhs(n), u(m), s_tilde(m);
  Eigen::VectorXd wu(m), su(m);

  // Stagnation bookkeeping: best combined residual seen before the current
  // window vs. within it. Splitting methods plateau for long stretches on
  // feasible semidefinite programs, so a single flat window is not evidence
  // of infeasibility; two consecutive flat windows with the primal residual
  // still far out is.
  double prev_best = std::numeric_limits<double>::infinity();
  double window_best = std::numeric_limits<double>::infinity();
  int window_start = 0;
  int stalled_windows = 0;

  const double tol = settings_.tol;
  int iter = 0;
  bool done = false;

  for (iter = 1; iter <= settings_.max_iters; ++iter) {
    // x-step: (P + sigma I + H^T R H) z = sigma z_prev - q + H^T (R (s - h) - y)
    rhs.noalias() = Hs_.transpose() * (rho_.cwiseProduct(s - hs_) - y);
    rhs += settings_.sigma * z - qs_;
    z = llt_.solve(rhs);

    w.noalias() = Hs_ * z;
    w += hs_;

    s_tilde = settings_.alpha * w + (1.0 - settings_.alpha) * s;
    u = s_tilde + y.cwiseQuotient(rho_);
    Eigen::VectorXd s_next = u;
    project_cones_scaled(s_next, cones_s_);
    y += rho_.cwiseProduct(s_tilde - s_next);
    s = s_next;

    // Residual check: every iteration early on (warm-started resolves must
    // exit fast), every 10 after the transient.
    const bool check = iter <= 25 || (iter % 10 == 0);
    if (!check) continue;

    // Primal residual, measured in original units. Scalar rows (boxes,
    // nonnegativity, equalities) are scaled individually so one
    // large-magnitude row (absolute positions are ~40) cannot loosen the
    // acceptance of small rows such as speed bounds. Semidefinite blocks keep
    // the conventional block-level relative scale: their entries are coupled
    // through the eigenvalue projection, and element-level scaling there only
    // burns iterations without a sharper membership guarantee.
    wu = (w.array() / d_.array()).matrix();
    su = (s.array() / d_.array()).matrix();
    const double r_prim = (wu - su).lpNorm<Eigen::Infinity>();
    double rel_p = 0.0;
    {
      int row = 0;
      for (const auto& c : prob_.cones) {
        if (c.tag == ConeTag::psd) {
          const auto wseg = wu.segment(row, c.rows);
          const auto sseg = su.segment(row, c.rows);
          const double sc =
              1.0 + std::max(wseg.lpNorm<Eigen::Infinity>(),
                             sseg.lpNorm<Eigen::Infinity>());
          rel_p = std::max(rel_p,
                           (wseg - sseg).lpNorm<Eigen::Infinity>() / sc);
        } else {
          for (int j = row; j < row + c.rows; ++j) {
            const double sc = 1.0 + std::max(std::abs(wu(j)), std::abs(su(j)));
            rel_p = std::max(rel_p, std::abs(wu(j) - su(j)) / sc);
          }
        }
        row += c.rows;
      }
    }
    // Unscaled dual residual: P x + q + H^T y = (1/c) E^{-1} (Ps z + qs + Hs^T y~).
    const Eigen::VectorXd pz =
        ((Ps_ * z).array() / (cobj_ * e_.array())).matrix();
    Eigen::VectorXd dual_vec = pz + prob_.q;
    dual_vec.noalias() +=
        prob_.H.transpose() * ((d_.array() * y.array()).matrix() / cobj_);
    const double r_dual = dual_vec.lpNorm<Eigen::Infinity>();
    const double scale_dual = 1.0 + std::max(pz.lpNorm<Eigen::Infinity>(),
                                             prob_.q.lpNorm<Eigen::Infinity>());

    report.primal_res = r_prim;
    report.dual_res = r_dual;

    const double rel_d = r_dual / scale_dual;

    if (rel_p <= tol && r_dual <= tol * scale_dual) {
      report.status = SolveStatus::optimal;
      done = true;
      break;
    }

    const double combined = std::max(rel_p, rel_d);
    window_best = std::min(window_best, combined);

    // Stagnation heuristic: no meaningful progress across two consecutive
    // full windows with the primal residual still far from feasible reads as
    // infeasible.
    if (iter - window_start >= settings_.stall_window) {
      if (window_best > prev_best * 0.99) {
        if (++stalled_windows >= 2 && rel_p > 1e2 * tol) {
          report.status = SolveStatus::infeasible;
          done = true;
          break;
        }
      } else {
        stalled_windows = 0;
      }
      prev_best = std::min(prev_best, window_best);
      window_best = std::numeric_limits<double>::infinity();
      window_start = iter;
    }

    // Penalty rebalancing.
    if (settings_.adaptive_rho && iter % settings_.rho_interval == 0) {
      const double ratio = std::sqrt((rel_p + 1e-12) / (rel_d + 1e-12));
      if (ratio > 5.0 || ratio < 0.2) {
        const double factor = std::clamp(ratio, 0.1, 10.0);
        rho_scalar_ = std::clamp(rho_scalar_ * factor, 1e-6, 1e6);
        int row = 0;
        for (const auto& c : prob_.cones) {
          const double base =
              (c.tag == ConeTag::zero)
                  ? rho_scalar_ * settings_.eq_rho_scale
                  : rho_scalar_;
          rho_.segment(row, c.rows).setConstant(base);
          row += c.rows;
        }
        // Rescale duals so y/rho stays consistent, then refactor.
        factored_ = false;
        factorize();
      }
    }
  }

  if (!done) {
    report.status = SolveStatus::max_iters;
    report.iterations = settings_.max_iters;
  } else {
    report.iterations = iter;
  }

  x_ = (e_.array() * z.array()).matrix();
  y_ = ((d_.array() * y.array()) / cobj_).matrix();
  s_ = (s.array() / d_.array()).matrix();
  warm_valid_ = true;

  report.x = x_;
  report.objective =
      0.5 * x_.dot(prob_.P * x_) + prob_.q.dot(x_) + prob_.c0;
  return report;
}

SolveReport solve(const ConicProblem& problem, SolverSettings settings) {
  ConicProblem copy = problem;
  copy.finalize();
  ConicSolver solver(std::move(copy), settings);
  return solver.solve();
}

}  // namespace dtn
