#pragma once

// Genre-variance diversity operator and the split Bregman solver for
//
//   min_Z |Y - M(Z)|_F^2 + lambda_n |Z|_* + lambda_d |Z F|_F^2
//
// The proxy W carries the diversity term and B is the Bregman variable. Each
// outer pass takes one proximal-gradient (SVT) step in Z on the stacked
// system [M; sqrt(eta) I], solves the W system exactly, then updates B.
// With lambda_d = 0 the same code reduces to plain nuclear-norm completion.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcad/dataset.hpp"
#include "mcad/error.hpp"
#include "mcad/log.hpp"
#include "mcad/lowrank.hpp"
#include "mcad/observations.hpp"

namespace mcad {

struct DiversityOperator {
  Eigen::MatrixXd G_mu;  // G_{i,g} / mu_g
  Eigen::MatrixXd F;     // G_mu (I - J/d): row-centred G_mu
  int d = 0;
  // Optional c^T F for a fixed per-item shift c: the penalty becomes
  // |(Z + 1 c^T) F|_F^2. Empty means no shift.
  Eigen::RowVectorXd offset;

  int num_items() const noexcept { return static_cast<int>(F.rows()); }
  bool has_offset() const noexcept { return offset.size() > 0; }
};

// F = G_mu (I - J/d) where J is the d x d all-ones matrix. For any Z, row u of
// Z G_mu holds user u's average over each genre and Z F removes that row's
// mean, so |Z F|_F^2 sums the per-user spread of genre averages.
inline DiversityOperator build_diversity_operator(const GenreMatrix& genres) {
  DiversityOperator op;
  op.d = genres.num_genres();
  const Eigen::VectorXd mu = genres.G.colwise().sum().transpose();
  for (int g = 0; g < op.d; ++g)
    if (!(mu(g) >= 1.0))
      throw Error("build_diversity_operator: genre column '" +
                  (g < static_cast<int>(genres.names.size()) ? genres.names[g] : std::to_string(g)) +
                  "' has no member items; drop it during ingest");
  op.G_mu = genres.G * mu.cwiseInverse().asDiagonal();
  op.F = op.G_mu;
  if (op.d > 0) op.F.colwise() -= op.G_mu.rowwise().mean();
  return op;
}

// Penalize genre spread of Z plus a per-item shift (e.g. item biases, so the
// spread is measured on predicted ratings rather than on interactions alone).
// Shifts common to a whole row (global mean, user bias) cancel in F.
inline DiversityOperator with_item_offset(DiversityOperator op, const Eigen::VectorXd& item_offset) {
  if (item_offset.size() != op.num_items())
    throw ValidationError("with_item_offset: offset length differs from item count");
  op.offset = item_offset.transpose() * op.F;
  return op;
}

enum class WSolveMode { direct, iterative };

// Solves W (eta I + lambda_d F F^T) = R for all rows of R at once.
//
// Direct mode uses the Woodbury identity
//   (eta I + lambda_d F F^T)^{-1} = (I - F (eta/lambda_d I + F^T F)^{-1} F^T) / eta
// so only the d x d capacitance matrix is factored (once, by Cholesky).
// Iterative mode runs conjugate gradients on each row with the matrix-free
// operator v -> eta v + lambda_d (v F) F^T.
class WSolver {
 public:
  WSolver(const Eigen::MatrixXd& f, double eta, double lambda_d, WSolveMode mode = WSolveMode::direct)
      : f_(f), eta_(eta), lambda_d_(lambda_d), mode_(mode) {
    if (!(eta > 0.0)) throw ValidationError("W sub-problem requires eta > 0");
    if (!(lambda_d >= 0.0)) throw ValidationError("W sub-problem requires lambda_d >= 0");
    if (active()) factor();
  }

  double eta() const noexcept { return eta_; }
  double lambda_d() const noexcept { return lambda_d_; }
  WSolveMode mode() const noexcept { return mode_; }

  // lambda_d = 0 (or no genres) makes the system eta W = R.
  bool active() const noexcept { return lambda_d_ > 0.0 && f_.cols() > 0; }

  Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const {
    if (rhs.cols() != f_.rows()) throw ValidationError("W sub-problem: column count mismatch");
    if (!active()) return rhs / eta_;
    if (mode_ == WSolveMode::iterative) {
      if (auto w = solve_cg(rhs)) return *std::move(w);
      log::warn("W sub-problem: conjugate gradients did not converge, using direct solve");
    }
    return solve_direct(rhs);
  }

  // Solution of W (eta I + lambda_d F F^T) = eta (Z + B).
  Eigen::MatrixXd solve(const Eigen::MatrixXd& z, const Eigen::MatrixXd& b) const {
    if (!active()) return z + b;
    return solve(eta_ * (z + b));
  }

  // W (eta I + lambda_d F F^T)
  Eigen::MatrixXd apply(const Eigen::MatrixXd& w) const {
    Eigen::MatrixXd out = eta_ * w;
    if (active()) out.noalias() += lambda_d_ * ((w * f_) * f_.transpose());
    return out;
  }

  double relative_residual(const Eigen::MatrixXd& w, const Eigen::MatrixXd& rhs) const {
    const double denom = rhs.norm();
    const double r = (apply(w) - rhs).norm();
    return denom > 0.0 ? r / denom : r;
  }

 private:
  void factor() {
    Eigen::MatrixXd cap = f_.transpose() * f_;
    cap.diagonal().array() += eta_ / lambda_d_;
    chol_.compute(cap);
    if (chol_.info() != Eigen::Success)
      throw NumericalError("W sub-problem: capacitance matrix not positive definite");
  }

  Eigen::MatrixXd solve_direct(const Eigen::MatrixXd& rhs) const {
    Eigen::MatrixXd rf = rhs * f_;                  // m x d
    Eigen::MatrixXd coef = chol_.solve(rf.transpose());  // d x m
    Eigen::MatrixXd w = rhs;
    w.noalias() -= coef.transpose() * f_.transpose();
    return w / eta_;
  }

  std::optional<Eigen::MatrixXd> solve_cg(const Eigen::MatrixXd& rhs) const {
    const Eigen::Index m = rhs.rows();
    const Eigen::Index n = rhs.cols();
    Eigen::MatrixXd x = rhs / eta_;  // exact when the row is orthogonal to range(F)
    Eigen::MatrixXd r = rhs - apply(x);
    Eigen::MatrixXd p = r;
    Eigen::VectorXd rr = r.rowwise().squaredNorm();
    const Eigen::VectorXd target = (rhs.rowwise().squaredNorm() * 1e-24).cwiseMax(1e-300);
    const Eigen::Index max_steps = 10 * n;
    for (Eigen::Index step = 0; step < max_steps; ++step) {
      if ((rr.array() <= target.array()).all()) return x;
      Eigen::MatrixXd ap = apply(p);
      for (Eigen::Index u = 0; u < m; ++u) {
        if (rr(u) <= target(u)) continue;
        const double pap = p.row(u).dot(ap.row(u));
        if (!(pap > 0.0)) return std::nullopt;
        const double a = rr(u) / pap;
        x.row(u) += a * p.row(u);
        r.row(u) -= a * ap.row(u);
        const double rr_new = r.row(u).squaredNorm();
        p.row(u) = r.row(u) + (rr_new / rr(u)) * p.row(u);
        rr(u) = rr_new;
      }
    }
    if ((rr.array() <= target.array()).all()) return x;
    return std::nullopt;
  }

  Eigen::MatrixXd f_;
  double eta_;
  double lambda_d_;
  WSolveMode mode_;
  Eigen::LLT<Eigen::MatrixXd> chol_;
};

// Free-function form: W with W (eta I + lambda_d F F^T) = eta (Z + B).
inline Eigen::MatrixXd solve_w_subproblem(const Eigen::MatrixXd& z, const Eigen::MatrixXd& b,
                                          const DiversityOperator& divop, double eta,
                                          double lambda_d, WSolveMode mode = WSolveMode::direct) {
  return WSolver(divop.F, eta, lambda_d, mode).solve(z, b);
}

enum class InitKind { zeros, random };

struct SolverConfig {
  double lambda_n = 10.0;
  double lambda_d = 0.0;
  std::optional<double> eta;  // proxy coupling; defaults to 1
  int max_iter = 500;
  double tol = 1e-7;          // absolute objective-decrease threshold
  double rel_tol = 1e-7;      // ... or this fraction of the starting objective
  double step_tol = 0.0;      // if > 0, also require |Z_k - Z_{k-1}|_F <= step_tol
  WSolveMode inner_linear_solver = WSolveMode::direct;
  SvdBackend svd_backend = SvdBackend::automatic;
  InitKind init = InitKind::zeros;
  std::uint64_t seed = 0;     // used by InitKind::random

  double resolved_eta() const { return eta.value_or(1.0); }

  void validate() const {
    if (!(lambda_n >= 0.0) || !(lambda_d >= 0.0))
      throw ValidationError("solver: lambda_n and lambda_d must be >= 0");
    if (!(resolved_eta() > 0.0)) throw ValidationError("solver: eta must be > 0");
    if (!(tol > 0.0) || !(rel_tol >= 0.0) || !(step_tol >= 0.0)) throw ValidationError("solver: tol must be > 0");
    if (max_iter < 1) throw ValidationError("solver: max_iter must be >= 1");
  }
};

struct SolverState {
  Eigen::MatrixXd Z, W, B;
  double lambda_n = 0.0;
  double lambda_d = 0.0;
  double eta = 0.0;
  double alpha = 1.0;
  int iter = 0;
  bool converged = false;
  std::vector<double> objective_trace;  // objective at Z after each iteration
  double initial_objective = 0.0;       // objective at the starting Z
  double proxy_gap = 0.0;               // |Z - W|_F
  int rank = 0;
  ObjectiveTerms final_terms;

  double final_objective() const {
    return objective_trace.empty() ? initial_objective : objective_trace.back();
  }
  double relative_proxy_gap() const {
    const double nz = Z.norm();
    return nz > 0.0 ? proxy_gap / nz : proxy_gap;
  }
};

// Called after every iteration with (iteration, objective).
using IterationCallback = std::function<void(int, double)>;

namespace detail {

inline void check_problem(const Observations& y, const MaskOperator& mask) {
  if (y.rows != mask.rows() || y.cols != mask.cols() || y.size() != mask.support().size())
    throw ValidationError("solver: observations and mask disagree");
  if (static_cast<double>(y.rows) * static_cast<double>(y.cols) > 1e8)
    throw ValidationError("solver: dense m*n above 1e8 cells is refused");
}

inline Eigen::MatrixXd initial_z(const SolverConfig& cfg, int rows, int cols) {
  if (cfg.init == InitKind::zeros) return Eigen::MatrixXd::Zero(rows, cols);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd z(rows, cols);
  for (Eigen::Index k = 0; k < z.size(); ++k) z.data()[k] = dist(rng);
  return z;
}

inline bool converged(double previous, double current, double start, const SolverConfig& cfg) {
  const double delta = std::abs(previous - current);
  return delta <= cfg.tol || delta <= cfg.rel_tol * std::abs(start);
}

// Shared loop. With divop == nullptr the W/B updates are skipped and alpha = 1.
inline SolverState run_split_bregman(const Observations& y, const MaskOperator& mask,
                                     const DiversityOperator* divop, const SolverConfig& cfg,
                                     const IterationCallback& on_iter) {
  cfg.validate();
  check_problem(y, mask);
  const int m = y.rows;
  const int n = y.cols;
  static const Eigen::MatrixXd kNoGenres;
  const Eigen::MatrixXd& f = divop ? divop->F : kNoGenres;
  if (divop && divop->num_items() != n)
    throw ValidationError("solver: diversity operator item count differs from Y");

  SolverState st;
  st.lambda_n = cfg.lambda_n;
  st.lambda_d = cfg.lambda_d;
  st.eta = divop ? cfg.resolved_eta() : 0.0;
  // [M; sqrt(eta) I]^T [M; sqrt(eta) I] = M + eta I has spectrum in [eta, 1 + eta].
  st.alpha = divop ? 1.0 + st.eta : 1.0;
  st.Z = initial_z(cfg, m, n);
  if (divop) {
    st.W = st.Z;
    st.B = Eigen::MatrixXd::Zero(m, n);
  }

  std::optional<WSolver> wsolver;
  if (divop) wsolver.emplace(f, st.eta, cfg.lambda_d, cfg.inner_linear_solver);
  // With an offset the W system gains a constant row: eta (Z + B) - lambda_d (c^T F) F^T.
  Eigen::RowVectorXd w_shift;
  if (divop && divop->has_offset() && cfg.lambda_d > 0.0) w_shift = cfg.lambda_d * divop->offset * f.transpose();

  const Eigen::MatrixXd empty_f = Eigen::MatrixXd::Zero(n, 0);
  const Eigen::MatrixXd& obj_f = divop ? f : empty_f;
  const Eigen::RowVectorXd* obj_offset = divop && divop->has_offset() ? &divop->offset : nullptr;
  const double start_nuclear = cfg.init == InitKind::zeros ? 0.0 : nuclear_norm(st.Z);
  st.initial_objective =
      mcad_objective_terms(y, st.Z, obj_f, cfg.lambda_n, cfg.lambda_d, start_nuclear, obj_offset).total;

  const double step = 1.0 / st.alpha;
  const double tau = cfg.lambda_n / (2.0 * st.alpha);
  double previous = st.initial_objective;
  Eigen::MatrixXd g(m, n);

  for (int k = 1; k <= cfg.max_iter; ++k) {
    // Gradient step on |Y - M Z|^2 + eta |W - B - Z|^2 (halved), then shrink.
    if (divop) {
      g = st.Z + step * cfg.resolved_eta() * (st.W - st.B - st.Z);
    } else {
      g = st.Z;
    }
    for (const auto& e : y.entries) g(e.row, e.col) += step * (e.value - st.Z(e.row, e.col));
    SvtResult s = svt(g, tau, cfg.svd_backend);
    const double z_step = cfg.step_tol > 0.0 ? (s.matrix - st.Z).norm() : 0.0;
    st.Z = std::move(s.matrix);
    st.rank = s.rank_after;

    if (divop) {
      if (w_shift.size() > 0) {
        Eigen::MatrixXd rhs = st.eta * (st.Z + st.B);
        rhs.rowwise() -= w_shift;
        st.W = wsolver->solve(rhs);
      } else {
        st.W = wsolver->solve(st.Z, st.B);
      }
      st.B += st.Z - st.W;
    }

    st.final_terms =
        mcad_objective_terms(y, st.Z, obj_f, cfg.lambda_n, cfg.lambda_d, s.nuclear_norm, obj_offset);
    const double obj = st.final_terms.total;
    if (!std::isfinite(obj)) throw DivergenceError("split Bregman objective is not finite", k);
    st.objective_trace.push_back(obj);
    st.iter = k;
    if (on_iter) on_iter(k, obj);
    if (converged(previous, obj, st.initial_objective, cfg) && z_step <= cfg.step_tol) {
      st.converged = true;
      break;
    }
    previous = obj;
  }
  st.proxy_gap = divop ? (st.Z - st.W).norm() : 0.0;
  return st;
}

}  // namespace detail

struct SolveResult {
  Eigen::MatrixXd Z;
  SolverState state;
};

// Nuclear-norm completion: Z <- svt(Z + M^T(Y - M Z), lambda_n / 2).
inline SolveResult solve_mc(const Observations& y, const MaskOperator& mask,
                            const SolverConfig& config, const IterationCallback& on_iter = {}) {
  if (config.lambda_d != 0.0) throw ValidationError("solve_mc requires lambda_d = 0");
  auto st = detail::run_split_bregman(y, mask, nullptr, config, on_iter);
  Eigen::MatrixXd z = st.Z;
  return {std::move(z), std::move(st)};
}

inline SolveResult solve_mcad(const Observations& y, const MaskOperator& mask,
                              const DiversityOperator& divop, const SolverConfig& config,
                              const IterationCallback& on_iter = {}) {
  auto st = detail::run_split_bregman(y, mask, &divop, config, on_iter);
  Eigen::MatrixXd z = st.Z;
  return {std::move(z), std::move(st)};
}

}  // namespace mcad
