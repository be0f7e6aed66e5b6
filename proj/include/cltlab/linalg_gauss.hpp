#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "errors.hpp"
#include "point_cloud.hpp"
#include "rng.hpp"

namespace cltlab {

// Symmetric, numerically positive semidefinite matrix.
inline Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& a) { return 0.5 * (a + a.transpose()); }

class PsdMatrix {
 public:
  PsdMatrix() = default;

  explicit PsdMatrix(const Eigen::MatrixXd& a) {
    require(a.rows() == a.cols() && a.rows() >= 1, ErrorCode::DimMismatch, "covariance must be square");
    require(a.allFinite(), ErrorCode::NotPsd, "covariance has non-finite entries");
    const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
    require((a - a.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * scale, ErrorCode::NotSymmetric,
            "covariance is not symmetric");
    m_ = 0.5 * (a + a.transpose());
    const double d = static_cast<double>(m_.rows());
    const double tol = 1e-10 * std::abs(m_.trace()) / d + 1e-300;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m_, Eigen::EigenvaluesOnly);
    require(es.eigenvalues().minCoeff() >= -tol, ErrorCode::NotPsd, "covariance has a negative eigenvalue");
  }

  static PsdMatrix identity(Eigen::Index d) { return PsdMatrix(Eigen::MatrixXd::Identity(d, d)); }
  static PsdMatrix scalar(Eigen::Index d, double s) { return PsdMatrix(s * Eigen::MatrixXd::Identity(d, d)); }

  Eigen::Index dim() const { return m_.rows(); }
  const Eigen::MatrixXd& matrix() const { return m_; }
  double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }

 private:
  Eigen::MatrixXd m_;
};

struct GaussianSpec {
  Eigen::VectorXd mean;
  PsdMatrix cov;

  GaussianSpec() = default;
  GaussianSpec(Eigen::VectorXd mu, PsdMatrix c) : mean(std::move(mu)), cov(std::move(c)) {
    require(mean.size() == cov.dim(), ErrorCode::DimMismatch, "mean and covariance dimensions differ");
    require(mean.allFinite(), ErrorCode::InvalidConfig, "mean has non-finite entries");
  }

  static GaussianSpec centered(PsdMatrix c) {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(c.dim());
    return GaussianSpec(std::move(mu), std::move(c));
  }

  Eigen::Index dim() const { return mean.size(); }
};

struct CholeskyResult {
  Eigen::MatrixXd lower;    // lower triangular in pivoted order
  std::vector<int> perm;    // row i of the factor corresponds to coordinate perm[i]
  int rank = 0;

  // F with F·Fᵀ = cov in the original coordinate order.
  Eigen::MatrixXd factor() const {
    Eigen::MatrixXd f = Eigen::MatrixXd::Zero(lower.rows(), lower.cols());
    for (Eigen::Index i = 0; i < lower.rows(); ++i) f.row(perm[static_cast<std::size_t>(i)]) = lower.row(i);
    return f;
  }
};

// Plain Cholesky when the matrix is numerically full rank, otherwise a
// diagonally pivoted factorization that stops at the numerical rank.
inline CholeskyResult cholesky_factor(const Eigen::MatrixXd& cov) {
  require(cov.rows() == cov.cols(), ErrorCode::DimMismatch, "covariance must be square");
  const Eigen::Index d = cov.rows();
  const double tr = cov.trace();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
  const double min_eig = es.eigenvalues().minCoeff();
  require(min_eig >= -1e-8 * std::abs(tr), ErrorCode::NotPsd, "eigenvalue below -1e-8 * trace");

  CholeskyResult out;
  out.perm.resize(static_cast<std::size_t>(d));
  std::iota(out.perm.begin(), out.perm.end(), 0);
  const double rank_tol = 1e-12 * std::max(tr, std::numeric_limits<double>::min());

  if (min_eig > rank_tol) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() == Eigen::Success) {
      out.lower = llt.matrixL();
      out.rank = static_cast<int>(d);
      return out;
    }
  }

  Eigen::MatrixXd a = cov;
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(d, d);
  int rank = 0;
  for (Eigen::Index k = 0; k < d; ++k) {
    Eigen::Index piv = k;
    for (Eigen::Index j = k + 1; j < d; ++j)
      if (a(j, j) > a(piv, piv)) piv = j;
    if (a(piv, piv) <= rank_tol) break;
    if (piv != k) {
      a.row(k).swap(a.row(piv));
      a.col(k).swap(a.col(piv));
      l.row(k).swap(l.row(piv));
      std::swap(out.perm[static_cast<std::size_t>(k)], out.perm[static_cast<std::size_t>(piv)]);
    }
    const double pivot = std::sqrt(a(k, k));
    l(k, k) = pivot;
    for (Eigen::Index i = k + 1; i < d; ++i) l(i, k) = a(i, k) / pivot;
    for (Eigen::Index i = k + 1; i < d; ++i)
      for (Eigen::Index j = k + 1; j <= i; ++j) {
        a(i, j) -= l(i, k) * l(j, k);
        a(j, i) = a(i, j);
      }
    ++rank;
  }
  out.lower = l;
  out.rank = rank;
  return out;
}

inline CholeskyResult cholesky_factor(const PsdMatrix& cov) { return cholesky_factor(cov.matrix()); }

// Symmetric square root through the eigendecomposition; tiny negative
// eigenvalues are clamped to zero.
inline Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline PointCloud sample_gaussian(const GaussianSpec& spec, Eigen::Index m, std::uint64_t seed) {
  require(m >= 1, ErrorCode::InsufficientSamples, "sample_gaussian needs m >= 1");
  const Eigen::Index d = spec.dim();
  const Eigen::MatrixXd f = cholesky_factor(spec.cov).factor();
  Engine eng(seed);
  std::normal_distribution<double> normal;
  RowMatrix pts(m, d);
  Eigen::VectorXd z(d);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) z(j) = normal(eng);
    pts.row(i) = (spec.mean + f * z).transpose();
  }
  return PointCloud(std::move(pts));
}

// Exact W2 between N(0, a) and N(0, b). Evaluated as ‖A^½ − B^½·Q‖_F with Q
// the orthogonal polar factor of B^½A^½, which equals
// tr(A + B − 2(A^½BA^½)^½)^½ without the cancellation near a = b.
inline double gaussian_w2_closed_form(const PsdMatrix& a, const PsdMatrix& b) {
  require(a.dim() == b.dim(), ErrorCode::DimMismatch, "covariances have different dimensions");
  const Eigen::MatrixXd ra = sqrtm_psd(a.matrix());
  const Eigen::MatrixXd rb = sqrtm_psd(b.matrix());
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(ra * rb, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::MatrixXd q = svd.matrixV() * svd.matrixU().transpose();
  return (ra - rb * q).norm();
}

}  // namespace cltlab
