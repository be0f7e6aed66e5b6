#include <catch_amalgamated.hpp>

#include <cltlab/linalg_gauss.hpp>

using namespace cltlab;
using Catch::Approx;

namespace {

Eigen::MatrixXd random_psd(Engine& eng, int d, double lo, double hi) {
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(lo, hi);
  Eigen::MatrixXd g(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g(i, j) = nd(eng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  Eigen::VectorXd ev(d);
  for (int i = 0; i < d; ++i) ev(i) = ud(eng);
  Eigen::MatrixXd a = q * ev.asDiagonal() * q.transpose();
  return 0.5 * (a + a.transpose());
}

}  // namespace

TEST_CASE("cholesky factor of simple matrices") {
  auto id = cholesky_factor(PsdMatrix::identity(2));
  CHECK(id.rank == 2);
  CHECK((id.factor() - Eigen::MatrixXd::Identity(2, 2)).norm() == 0.0);

  Eigen::MatrixXd d(2, 2);
  d << 4, 0, 0, 9;
  auto dl = cholesky_factor(PsdMatrix(d));
  CHECK(dl.factor()(0, 0) == Approx(2.0));
  CHECK(dl.factor()(1, 1) == Approx(3.0));
  CHECK(dl.factor()(0, 1) == 0.0);

  Eigen::MatrixXd a(2, 2);
  a << 2, 1, 1, 2;
  auto al = cholesky_factor(PsdMatrix(a));
  Eigen::MatrixXd f = al.factor();
  CHECK(f(0, 1) == 0.0);
  CHECK((f * f.transpose() - a).norm() / a.norm() < 1e-10);
}

TEST_CASE("pivoted factor reports rank of singular covariance") {
  Eigen::VectorXd v(3);
  v << 1, 2, -1;
  Eigen::MatrixXd a = v * v.transpose();
  a(2, 2) += 0.0;
  auto r = cholesky_factor(a);
  CHECK(r.rank == 1);
  Eigen::MatrixXd f = r.factor();
  CHECK((f * f.transpose() - a).norm() / a.norm() < 1e-10);
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index j = i + 1; j < 3; ++j) CHECK(r.lower(i, j) == 0.0);

  Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(2, 2);
  CHECK(cholesky_factor(zero).rank == 0);
}

TEST_CASE("factor reconstructs random covariances") {
  Engine eng(7);
  for (int t = 0; t < 50; ++t) {
    int d = 1 + t % 6;
    Eigen::MatrixXd a = random_psd(eng, d, 0.0, 3.0);
    if (t % 3 == 0) {
      Eigen::MatrixXd b = random_psd(eng, d, 0.5, 1.0);
      a = b.leftCols(std::max(1, d / 2)) * b.leftCols(std::max(1, d / 2)).transpose();
    }
    Eigen::MatrixXd f = cholesky_factor(a).factor();
    CHECK((f * f.transpose() - a).norm() <= 1e-10 * a.norm());
  }
}

TEST_CASE("not PSD and not symmetric are rejected") {
  Eigen::MatrixXd a(2, 2);
  a << 1, 2, 2, 1;
  CHECK_THROWS_AS(cholesky_factor(a), Error);
  try {
    cholesky_factor(a);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NotPsd);
  }
  CHECK_THROWS_AS(PsdMatrix(a), Error);
  Eigen::MatrixXd b(2, 2);
  b << 1, 0.5, 0.4, 1;
  try {
    PsdMatrix bad(b);
    FAIL("asymmetric matrix accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NotSymmetric);
  }
}

TEST_CASE("sample_gaussian degenerate, moments and determinism") {
  auto zero = GaussianSpec::centered(PsdMatrix(Eigen::MatrixXd::Zero(2, 2)));
  PointCloud c = sample_gaussian(zero, 5, 1);
  CHECK(c.size() == 5);
  CHECK(c.points().cwiseAbs().maxCoeff() == 0.0);

  const Eigen::Index m = 100000;
  auto std2 = GaussianSpec::centered(PsdMatrix::identity(2));
  PointCloud s = sample_gaussian(std2, m, 42);
  Eigen::RowVectorXd mean = s.points().colwise().mean();
  RowMatrix centered = s.points().rowwise() - mean;
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(m - 1);
  CHECK((cov - Eigen::MatrixXd::Identity(2, 2)).norm() < 0.02);
  for (int j = 0; j < 2; ++j) CHECK(std::abs(mean(j)) < 4.0 / std::sqrt(static_cast<double>(m)));

  PointCloud s2 = sample_gaussian(std2, m, 42);
  CHECK(s.points() == s2.points());
}

TEST_CASE("sample_gaussian mean check with non-trivial covariance") {
  Eigen::MatrixXd a(2, 2);
  a << 3, 1, 1, 2;
  Eigen::VectorXd mu(2);
  mu << 1, -2;
  GaussianSpec spec(mu, PsdMatrix(a));
  const Eigen::Index m = 100000;
  PointCloud s = sample_gaussian(spec, m, 9);
  const double lmax = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(a).eigenvalues().maxCoeff();
  Eigen::RowVectorXd mean = s.points().colwise().mean();
  for (int j = 0; j < 2; ++j) CHECK(std::abs(mean(j) - mu(j)) < 4.0 / std::sqrt(double(m)) * std::sqrt(lmax));
}

TEST_CASE("gaussian W2 closed form examples") {
  CHECK(gaussian_w2_closed_form(PsdMatrix::identity(2), PsdMatrix::identity(2)) == Approx(0.0).margin(1e-12));
  Eigen::MatrixXd a(1, 1), b(1, 1);
  a << 4;
  b << 1;
  CHECK(gaussian_w2_closed_form(PsdMatrix(a), PsdMatrix(b)) == Approx(1.0));
  Eigen::MatrixXd c = Eigen::Vector2d(1, 4).asDiagonal();
  CHECK(gaussian_w2_closed_form(PsdMatrix(c), PsdMatrix::identity(2)) == Approx(1.0));
  CHECK_THROWS_AS(gaussian_w2_closed_form(PsdMatrix(a), PsdMatrix::identity(2)), Error);
}

TEST_CASE("gaussian W2 is symmetric, vanishes only on equal inputs, and is Hoelder-1/2 in the covariance") {
  Engine eng(11);
  double fitted_c = 0.0;
  for (int t = 0; t < 200; ++t) {
    int d = 1 + t % 4;
    Eigen::MatrixXd a = random_psd(eng, d, 0.5, 2.0);
    Eigen::MatrixXd b = random_psd(eng, d, 0.5, 2.0);
    const double wab = gaussian_w2_closed_form(PsdMatrix(a), PsdMatrix(b));
    const double wba = gaussian_w2_closed_form(PsdMatrix(b), PsdMatrix(a));
    CHECK(std::abs(wab - wba) < 1e-9);
    CHECK(gaussian_w2_closed_form(PsdMatrix(a), PsdMatrix(a)) < 1e-7);
    CHECK(wab > 1e-9);
    // Powers-Stormer: ‖A^½ − B^½‖_F² ≤ trace norm of A − B.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a - b);
    const double trace_norm = es.eigenvalues().cwiseAbs().sum();
    CHECK(wab <= std::sqrt(trace_norm) + 1e-12);
    fitted_c = std::max(fitted_c, wab / std::sqrt((a - b).norm()));
  }
  CHECK(fitted_c <= std::pow(4.0, 0.25) + 1e-12);
}
