#pragma once

// Dense kernels shared by the completion solvers: scalar soft thresholding,
// singular value thresholding, the 0/1 sampling mask and objective terms.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#ifndef MCAD_NO_LAPACKE
#include <lapacke.h>
#endif

#include "mcad/error.hpp"
#include "mcad/observations.hpp"

namespace mcad {

// sign(t) * max(0, |t| - u)
inline double soft(double t, double u) {
  const double mag = std::abs(t) - u;
  if (mag <= 0.0) return 0.0;
  return t < 0.0 ? -mag : mag;
}

// Elementwise sampler keeping the observed cells of an m x n matrix.
class MaskOperator {
 public:
  MaskOperator() = default;
  MaskOperator(int rows, int cols, std::vector<std::pair<int, int>> support)
      : rows_(rows), cols_(cols), support_(std::move(support)) {
    for (auto [r, c] : support_)
      if (r < 0 || r >= rows_ || c < 0 || c >= cols_)
        throw ValidationError("mask cell outside matrix shape");
  }

  static MaskOperator from(const Observations& y) {
    std::vector<std::pair<int, int>> s;
    s.reserve(y.size());
    for (const auto& e : y.entries) s.emplace_back(e.row, e.col);
    return MaskOperator(y.rows, y.cols, std::move(s));
  }

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  const std::vector<std::pair<int, int>>& support() const noexcept { return support_; }

  // M(A): copy of A on the support, zero elsewhere. The operator is self-adjoint.
  Eigen::MatrixXd apply(const Eigen::MatrixXd& a) const {
    check_shape(a);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(rows_, cols_);
    for (auto [r, c] : support_) out(r, c) = a(r, c);
    return out;
  }
  Eigen::MatrixXd adjoint(const Eigen::MatrixXd& a) const { return apply(a); }

  void check_shape(const Eigen::MatrixXd& a) const {
    if (a.rows() != rows_ || a.cols() != cols_)
      throw ValidationError("matrix shape " + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " does not match mask " +
                            std::to_string(rows_) + "x" + std::to_string(cols_));
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<std::pair<int, int>> support_;
};

// Singular values at or below this count as zero for rank_after.
inline constexpr double kRankTolerance = 1e-10;

struct SvtResult {
  Eigen::MatrixXd matrix;
  int rank_after = 0;
  double nuclear_norm = 0.0;
  Eigen::VectorXd singular_values;  // retained (thresholded) values, descending
};

enum class SvdBackend {
  automatic,   // dense SVD for small matrices, Gram eigensolver otherwise
  dense_svd,   // Eigen divide-and-conquer SVD of A itself
  gram_eigen,  // eigenpairs of the smaller Gram matrix above tau^2
};

namespace detail {

inline std::string matrix_diagnostics(const Eigen::MatrixXd& a) {
  std::ostringstream os;
  os << a.rows() << "x" << a.cols() << ", |A|_F=" << a.norm()
     << ", max|a_ij|=" << (a.size() ? a.cwiseAbs().maxCoeff() : 0.0)
     << ", finite=" << (a.allFinite() ? "yes" : "no");
  return os.str();
}

inline SvtResult finish_svt(Eigen::MatrixXd matrix, std::vector<double> shrunk) {
  std::sort(shrunk.begin(), shrunk.end(), std::greater<>());
  SvtResult res;
  res.matrix = std::move(matrix);
  std::vector<double> kept;
  for (double s : shrunk)
    if (s > kRankTolerance) kept.push_back(s);
  res.rank_after = static_cast<int>(kept.size());
  res.singular_values = Eigen::Map<const Eigen::VectorXd>(kept.data(), static_cast<Eigen::Index>(kept.size()));
  res.nuclear_norm = res.singular_values.sum();
  return res;
}

inline SvtResult svt_dense(const Eigen::MatrixXd& a, double tau) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success)
    throw NumericalError("SVD did not converge: " + matrix_diagnostics(a));
  const Eigen::VectorXd& sigma = svd.singularValues();
  Eigen::VectorXd shrunk(sigma.size());
  for (Eigen::Index k = 0; k < sigma.size(); ++k) shrunk(k) = soft(sigma(k), tau);
  Eigen::MatrixXd x = svd.matrixU() * shrunk.asDiagonal() * svd.matrixV().transpose();
  return finish_svt(std::move(x), {shrunk.data(), shrunk.data() + shrunk.size()});
}

// Eigenpairs of the symmetric matrix g with eigenvalue > lower, ascending.
inline void eigen_above(Eigen::MatrixXd& g, double lower, Eigen::VectorXd& values,
                        Eigen::MatrixXd& vectors) {
  const auto n = static_cast<int>(g.rows());
#ifndef MCAD_NO_LAPACKE
  const double upper = std::max(g.diagonal().sum(), lower) * 2.0 + 1.0;
  Eigen::VectorXd w(n);
  Eigen::MatrixXd z(n, std::max(n, 1));
  std::vector<lapack_int> isuppz(2 * static_cast<std::size_t>(std::max(n, 1)));
  lapack_int found = 0;
  lapack_int info = LAPACKE_dsyevr(LAPACK_COL_MAJOR, 'V', 'V', 'L', n, g.data(), n, lower, upper,
                                   0, 0, 0.0, &found, w.data(), z.data(), n, isuppz.data());
  if (info != 0)
    throw NumericalError("symmetric eigensolver failed (info=" + std::to_string(info) + ")");
  values = w.head(found);
  vectors = z.leftCols(found);
#else
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
  if (es.info() != Eigen::Success) throw NumericalError("symmetric eigensolver failed");
  Eigen::Index first = 0;
  while (first < n && es.eigenvalues()(first) <= lower) ++first;
  values = es.eigenvalues().tail(n - first);
  vectors = es.eigenvectors().rightCols(n - first);
#endif
}

// Uses A A^T = U S^2 U^T (or A^T A when A is tall). Only singular values above
// tau are resolved, so X = U diag(soft(s)/s) U^T A needs no right vectors.
inline SvtResult svt_gram(const Eigen::MatrixXd& a, double tau) {
  const bool wide = a.rows() <= a.cols();
  const Eigen::Index k = wide ? a.rows() : a.cols();
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(k, k);
  if (wide)
    g.selfadjointView<Eigen::Lower>().rankUpdate(a);
  else
    g.selfadjointView<Eigen::Lower>().rankUpdate(a.transpose());
  Eigen::VectorXd lambda;
  Eigen::MatrixXd vecs;
  try {
    eigen_above(g, tau * tau, lambda, vecs);
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(e.what()) + ": " + matrix_diagnostics(a));
  }
  std::vector<double> shrunk;
  Eigen::VectorXd scale(lambda.size());
  for (Eigen::Index j = 0; j < lambda.size(); ++j) {
    const double sigma = std::sqrt(std::max(lambda(j), 0.0));
    const double s = soft(sigma, tau);
    scale(j) = sigma > 0.0 ? s / sigma : 0.0;
    shrunk.push_back(s);
  }
  Eigen::MatrixXd x;
  if (lambda.size() == 0) {
    x = Eigen::MatrixXd::Zero(a.rows(), a.cols());
  } else if (wide) {
    Eigen::MatrixXd proj = vecs.transpose() * a;  // r x n
    x = (vecs * scale.asDiagonal()) * proj;
  } else {
    Eigen::MatrixXd av = a * vecs;  // m x r
    x = (av * scale.asDiagonal()) * vecs.transpose();
  }
  return finish_svt(std::move(x), std::move(shrunk));
}

}  // namespace detail

// U soft(S, tau) V^T for A = U S V^T.
inline SvtResult svt(const Eigen::MatrixXd& a, double tau, SvdBackend backend = SvdBackend::automatic) {
  if (!(tau >= 0.0)) throw ValidationError("svt: tau must be >= 0");
  if (!a.allFinite())
    throw NumericalError("svt: non-finite input: " + detail::matrix_diagnostics(a));
  if (a.size() == 0) return detail::finish_svt(a, {});
  if (backend == SvdBackend::automatic)
    backend = (std::min(a.rows(), a.cols()) <= 256 || tau == 0.0) ? SvdBackend::dense_svd
                                                                  : SvdBackend::gram_eigen;
  return backend == SvdBackend::dense_svd ? detail::svt_dense(a, tau) : detail::svt_gram(a, tau);
}

inline double nuclear_norm(const Eigen::MatrixXd& a) {
  if (a.size() == 0) return 0.0;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a);
  if (svd.info() != Eigen::Success)
    throw NumericalError("SVD did not converge: " + detail::matrix_diagnostics(a));
  return svd.singularValues().sum();
}

struct MaskedResidual {
  Eigen::MatrixXd residual;  // Y - Z on the support, zero elsewhere
  double value = 0.0;        // squared Frobenius norm of residual
};

inline MaskedResidual masked_residual(const Observations& y, const Eigen::MatrixXd& z,
                                      const MaskOperator& mask) {
  mask.check_shape(z);
  if (y.rows != mask.rows() || y.cols != mask.cols())
    throw ValidationError("masked_residual: observation shape differs from mask");
  MaskedResidual out;
  out.residual = Eigen::MatrixXd::Zero(z.rows(), z.cols());
  for (const auto& e : y.entries) out.residual(e.row, e.col) = e.value;
  for (auto [r, c] : mask.support()) out.residual(r, c) -= z(r, c);
  out.value = out.residual.squaredNorm();
  return out;
}

// Sum over observed cells of (Y - Z)^2 without materializing the residual.
inline double masked_squared_error(const Observations& y, const Eigen::MatrixXd& z) {
  double s = 0.0;
  for (const auto& e : y.entries) {
    const double d = e.value - z(e.row, e.col);
    s += d * d;
  }
  return s;
}

struct ObjectiveTerms {
  double data_fit = 0.0;
  double nuclear = 0.0;    // |Z|_*
  double diversity = 0.0;  // |Z F|_F^2
  double total = 0.0;
};

// |Y - M(Z)|_F^2 + lambda_n |Z|_* + lambda_d |Z F|_F^2 with a known nuclear norm.
inline ObjectiveTerms mcad_objective_terms(const Observations& y, const Eigen::MatrixXd& z,
                                           const Eigen::MatrixXd& f, double lambda_n,
                                           double lambda_d, double nuclear,
                                           const Eigen::RowVectorXd* offset = nullptr) {
  if (f.rows() != z.cols()) throw ValidationError("objective: F rows must equal item count");
  ObjectiveTerms t;
  t.data_fit = masked_squared_error(y, z);
  t.nuclear = nuclear;
  if (lambda_d != 0.0 && f.cols() > 0) {
    Eigen::MatrixXd zf = z * f;
    if (offset) zf.rowwise() += *offset;
    t.diversity = zf.squaredNorm();
  }
  t.total = t.data_fit + lambda_n * t.nuclear + lambda_d * t.diversity;
  return t;
}

inline double mcad_objective(const Observations& y, const Eigen::MatrixXd& z,
                             const MaskOperator& mask, const Eigen::MatrixXd& f, double lambda_n,
                             double lambda_d) {
  mask.check_shape(z);
  const double nuc = lambda_n != 0.0 ? nuclear_norm(z) : 0.0;
  return mcad_objective_terms(y, z, f, lambda_n, lambda_d, nuc).total;
}

}  // namespace mcad
