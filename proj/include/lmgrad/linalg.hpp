#pragma once

// Dense numerics used throughout lmgrad: row-wise softmax, Householder QR
// with column pivoting, one-sided Jacobi singular values, and projections
// onto ker(W^T) and its complement.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lmgrad {

using Index = Eigen::Index;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = Mat<double>;
using Vector = Vec<double>;

/// Default absolute threshold on |R_ii| when counting numerical rank.
inline constexpr double kRankTol = 1e-6;

class LinalgError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const std::string& what) {
  if (!m.allFinite()) throw LinalgError(what + ": matrix has non-finite entries");
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax with per-row max subtraction.
template <typename Derived>
Mat<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  const Vec<Scalar> row_max = m.rowwise().maxCoeff();
  Mat<Scalar> out = (m.colwise() - row_max).array().exp().matrix();
  const Vec<Scalar> sums = out.rowwise().sum();
  out.array().colwise() /= sums.array();
  return out;
}

/// Per-row log-sum-exp, stable for large logits.
template <typename Derived>
Vec<typename Derived::Scalar> logsumexp_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  const Vec<Scalar> row_max = m.rowwise().maxCoeff();
  const Vec<Scalar> sums = (m.colwise() - row_max).array().exp().rowwise().sum();
  return row_max.array() + sums.array().log();
}

template <typename Derived>
Mat<typename Derived::Scalar> log_softmax_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  const Vec<Scalar> row_max = m.rowwise().maxCoeff();
  Mat<Scalar> shifted = m.colwise() - row_max;
  const Vec<Scalar> log_sums = shifted.array().exp().rowwise().sum().log();
  shifted.colwise() -= log_sums;
  return shifted;
}

// ---------------------------------------------------------------------------
// Householder QR with column pivoting
// ---------------------------------------------------------------------------

/// A = Q R P^T. R is stored in the upper triangle of the packed matrix and
/// the Householder vectors (implicit leading 1) below it.
template <typename Scalar>
class PivotedQR {
 public:
  explicit PivotedQR(Mat<Scalar> a) : qr_(std::move(a)) { factorize(); }

  Index rows() const { return qr_.rows(); }
  Index cols() const { return qr_.cols(); }
  Index steps() const { return beta_.size(); }

  /// Diagonal of R, nonincreasing in magnitude up to pivoting round-off.
  Vec<Scalar> r_diagonal() const { return qr_.diagonal().head(steps()); }

  /// Number of |R_ii| strictly greater than tol.
  Index rank(Scalar tol) const {
    Index r = 0;
    for (Index i = 0; i < steps(); ++i)
      if (std::abs(qr_(i, i)) > tol) ++r;
    return r;
  }

  Mat<Scalar> r() const {
    Mat<Scalar> out = Mat<Scalar>::Zero(steps(), cols());
    for (Index i = 0; i < steps(); ++i) out.row(i).tail(cols() - i) = qr_.row(i).tail(cols() - i);
    return out;
  }

  /// Column permutation: column j of A*P is column perm()[j] of A.
  const std::vector<Index>& perm() const { return perm_; }

  /// Full rows x rows orthogonal factor.
  Mat<Scalar> q_full() const {
    const Index m = rows();
    Mat<Scalar> q = Mat<Scalar>::Identity(m, m);
    for (Index k = steps() - 1; k >= 0; --k) apply_reflector(k, q);
    return q;
  }

 private:
  void factorize() {
    const Index m = qr_.rows();
    const Index n = qr_.cols();
    const Index p = std::min(m, n);
    beta_.setZero(p);
    perm_.resize(static_cast<std::size_t>(n));
    for (Index j = 0; j < n; ++j) perm_[static_cast<std::size_t>(j)] = j;

    Vec<Scalar> norms(n), ref(n);
    for (Index j = 0; j < n; ++j) norms(j) = qr_.col(j).squaredNorm();
    ref = norms;
    const Scalar eps = std::numeric_limits<Scalar>::epsilon();

    for (Index k = 0; k < p; ++k) {
      Index best = k;
      norms.segment(k, n - k).maxCoeff(&best);
      best += k;
      if (best != k) {
        qr_.col(k).swap(qr_.col(best));
        std::swap(norms(k), norms(best));
        std::swap(ref(k), ref(best));
        std::swap(perm_[static_cast<std::size_t>(k)], perm_[static_cast<std::size_t>(best)]);
      }

      auto x = qr_.col(k).tail(m - k);
      const Scalar x0 = x(0);
      const Scalar sigma = m - k > 1 ? x.tail(m - k - 1).squaredNorm() : Scalar(0);
      Scalar beta = 0;
      Scalar diag = x0;
      if (sigma == Scalar(0)) {
        // Already upper-triangular in this column; flip sign so R_kk >= 0.
        if (x0 < 0) {
          beta = 2;
          diag = -x0;
        }
        if (m - k > 1) x.tail(m - k - 1).setZero();
      } else {
        const Scalar mu = std::sqrt(x0 * x0 + sigma);
        const Scalar v0 = x0 <= 0 ? x0 - mu : -sigma / (x0 + mu);
        beta = 2 * v0 * v0 / (sigma + v0 * v0);
        x.tail(m - k - 1) /= v0;
        diag = mu;
      }
      qr_(k, k) = diag;
      beta_(k) = beta;

      if (beta != Scalar(0) && k + 1 < n) {
        // A(k:, k+1:) -= beta v (v^T A(k:, k+1:))
        auto block = qr_.block(k, k + 1, m - k, n - k - 1);
        Vec<Scalar> v(m - k);
        v(0) = 1;
        v.tail(m - k - 1) = qr_.col(k).tail(m - k - 1);
        const Vec<Scalar> w = (v.transpose() * block).transpose();
        block.noalias() -= beta * v * w.transpose();
      }

      for (Index j = k + 1; j < n; ++j) {
        const Scalar rkj = qr_(k, j);
        norms(j) -= rkj * rkj;
        // Downdating loses accuracy once most of the norm is gone; recompute.
        if (norms(j) <= Scalar(100) * eps * ref(j) || norms(j) < 0) {
          norms(j) = m - k > 1 ? qr_.col(j).tail(m - k - 1).squaredNorm() : Scalar(0);
          ref(j) = norms(j);
        }
      }
    }
  }

  template <typename Target>
  void apply_reflector(Index k, Target& target) const {
    const Scalar beta = beta_(k);
    if (beta == Scalar(0)) return;
    const Index m = rows();
    Vec<Scalar> v(m - k);
    v(0) = 1;
    v.tail(m - k - 1) = qr_.col(k).tail(m - k - 1);
    auto block = target.bottomRows(m - k);
    const Vec<Scalar> w = (v.transpose() * block).transpose();
    block.noalias() -= beta * v * w.transpose();
  }

  Mat<Scalar> qr_;
  Vec<Scalar> beta_;
  std::vector<Index> perm_;
};

/// Numerical rank: count of |R_ii| > tol in a column-pivoted QR.
template <typename Derived>
Index qr_rank(const Eigen::MatrixBase<Derived>& m, typename Derived::Scalar tol = kRankTol) {
  using Scalar = typename Derived::Scalar;
  if (!(tol > 0)) throw LinalgError("qr_rank: tolerance must be positive");
  if (m.size() == 0) return 0;
  return PivotedQR<Scalar>(m).rank(tol);
}

// ---------------------------------------------------------------------------
// Singular values (one-sided Jacobi)
// ---------------------------------------------------------------------------

namespace detail {

/// Hestenes one-sided Jacobi on the columns of `a` (rows >= cols).
template <typename Scalar>
Vec<Scalar> jacobi_column_norms(Mat<Scalar> a, Index max_sweeps) {
  const Index n = a.cols();
  const Scalar eps = std::numeric_limits<Scalar>::epsilon();
  Vec<Scalar> sq(n);
  for (Index j = 0; j < n; ++j) sq(j) = a.col(j).squaredNorm();
  // Columns below round-off relative to the whole matrix are left alone.
  const Scalar negligible = eps * eps * sq.sum();

  bool converged = n < 2;
  for (Index sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (Index p = 0; p + 1 < n; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const Scalar alpha = sq(p);
        const Scalar beta = sq(q);
        if (alpha <= negligible || beta <= negligible) continue;
        const Scalar gamma = a.col(p).dot(a.col(q));
        if (std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        converged = false;
        const Scalar zeta = (beta - alpha) / (2 * gamma);
        const Scalar t = (zeta >= 0 ? Scalar(1) : Scalar(-1)) / (std::abs(zeta) + std::sqrt(1 + zeta * zeta));
        const Scalar c = 1 / std::sqrt(1 + t * t);
        const Scalar s = c * t;
        for (Index i = 0; i < a.rows(); ++i) {
          const Scalar ap = a(i, p);
          const Scalar aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
        sq(p) = alpha - t * gamma;
        sq(q) = beta + t * gamma;
      }
    }
    // Refresh cached norms once per sweep against drift.
    for (Index j = 0; j < n; ++j) sq(j) = a.col(j).squaredNorm();
  }
  if (!converged) throw LinalgError("singular_values: Jacobi sweeps did not converge");

  Vec<Scalar> sv(n);
  for (Index j = 0; j < n; ++j) sv(j) = a.col(j).norm();
  std::sort(sv.data(), sv.data() + n, [](Scalar x, Scalar y) { return x > y; });
  return sv;
}

}  // namespace detail

/// Singular values in nonincreasing order, length min(rows, cols).
///
/// Tall inputs are first reduced to their square R factor; the Jacobi sweep
/// budget is 100 * min(rows, cols).
template <typename Derived>
Vec<typename Derived::Scalar> singular_values(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  const Index k = std::min(m.rows(), m.cols());
  if (k == 0) return Vec<Scalar>();
  require_finite(m, "singular_values");

  Mat<Scalar> work = m.rows() >= m.cols() ? Mat<Scalar>(m) : Mat<Scalar>(m.transpose());
  if (work.rows() > work.cols()) {
    PivotedQR<Scalar> qr(std::move(work));
    work = qr.r();  // k x k, same singular values
    // Column-oriented Jacobi converges faster on R^T for pivoted R.
    work.transposeInPlace();
  }
  return detail::jacobi_column_norms<Scalar>(std::move(work), 100 * k);
}

/// sqrt(sum_{i>k} s_i^2): Frobenius distance to the best rank-k approximation.
template <typename Derived>
typename Derived::Scalar best_rank_k_residual(const Eigen::MatrixBase<Derived>& m, Index k) {
  using Scalar = typename Derived::Scalar;
  if (k < 0) throw LinalgError("best_rank_k_residual: k must be nonnegative");
  const Vec<Scalar> sv = singular_values(m);
  Scalar tail = 0;
  for (Index i = sv.size() - 1; i >= k; --i) tail += sv(i) * sv(i);
  return std::sqrt(tail);
}

// ---------------------------------------------------------------------------
// Orthonormal bases and projections
// ---------------------------------------------------------------------------

/// Column-orthonormal basis of a subspace of R^ambient_dim.
template <typename Scalar>
struct OrthonormalBasisT {
  Index ambient_dim = 0;
  Mat<Scalar> vectors;  // ambient_dim x size, orthonormal columns

  Index size() const { return vectors.cols(); }
};

using OrthonormalBasis = OrthonormalBasisT<double>;

/// Splits R^V into range(W) and ker(W^T) using pivoted QR of W (V x D).
/// The first `rank` columns of Q span range(W), the trailing V - rank span
/// ker(W^T).
template <typename Scalar>
struct RangeKernelSplit {
  OrthonormalBasisT<Scalar> range;
  OrthonormalBasisT<Scalar> kernel;
};

template <typename Derived>
RangeKernelSplit<typename Derived::Scalar> range_kernel_split(const Eigen::MatrixBase<Derived>& w,
                                                              typename Derived::Scalar tol = kRankTol) {
  using Scalar = typename Derived::Scalar;
  const Index v = w.rows();
  if (v < w.cols()) throw LinalgError("kernel_basis: requires rows >= cols");
  PivotedQR<Scalar> qr{Mat<Scalar>(w)};
  const Index r = qr.rank(tol);
  const Mat<Scalar> q = qr.q_full();
  RangeKernelSplit<Scalar> out;
  out.range.ambient_dim = v;
  out.range.vectors = q.leftCols(r);
  out.kernel.ambient_dim = v;
  out.kernel.vectors = q.rightCols(v - r);
  return out;
}

/// Orthonormal basis of ker(W^T) for W of shape V x D, V >= D.
template <typename Derived>
OrthonormalBasisT<typename Derived::Scalar> kernel_basis(const Eigen::MatrixBase<Derived>& w,
                                                         typename Derived::Scalar tol = kRankTol) {
  return range_kernel_split(w, tol).kernel;
}

/// Replaces each row of G by its orthogonal projection onto span(basis).
template <typename Derived, typename Scalar>
Mat<Scalar> project_rows_onto_span(const Eigen::MatrixBase<Derived>& g, const OrthonormalBasisT<Scalar>& basis) {
  if (g.cols() != basis.ambient_dim)
    throw LinalgError("project_rows_onto_span: gradient has " + std::to_string(g.cols()) +
                      " columns, basis ambient dimension is " + std::to_string(basis.ambient_dim));
  if (basis.size() == 0) return Mat<Scalar>::Zero(g.rows(), g.cols());
  const Mat<Scalar> coeffs = g * basis.vectors;
  return coeffs * basis.vectors.transpose();
}

}  // namespace lmgrad
