#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cltlab/transport.hpp>
#include <numeric>

using namespace cltlab;
using Catch::Approx;

namespace {

PointCloud cloud(std::initializer_list<double> xs) { return PointCloud::from_1d(std::vector<double>(xs)); }

PointCloud random_cloud(Engine& eng, int m, int d) {
  std::normal_distribution<double> nd;
  RowMatrix pts(m, d);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) pts(i, j) = nd(eng);
  return PointCloud(pts);
}

// Independent oracle: enumerate permutations directly.
double brute(const PointCloud& x, const PointCloud& y, double p) {
  std::vector<int> perm(static_cast<std::size_t>(x.size()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = 1e300;
  do {
    double s = 0;
    for (int i = 0; i < x.size(); ++i) s += std::pow((x.row(i) - y.row(perm[i])).norm(), p);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::pow(best / double(x.size()), 1.0 / p);
}

// Independent O(n^3) Hungarian method with potentials, used on larger instances.
double hungarian(const PointCloud& x, const PointCloud& y, double p) {
  const int n = static_cast<int>(x.size());
  auto cost = [&](int i, int j) { return std::pow((x.row(i - 1) - y.row(j - 1)).norm(), p); };
  std::vector<double> u(n + 1), v(n + 1);
  std::vector<int> pm(n + 1), way(n + 1);
  for (int i = 1; i <= n; ++i) {
    pm[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, 1e300);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = pm[j0], j1 = 0;
      double delta = 1e300;
      for (int j = 1; j <= n; ++j)
        if (!used[j]) {
          double cur = cost(i0, j) - u[i0] - v[j];
          if (cur < minv[j]) minv[j] = cur, way[j] = j0;
          if (minv[j] < delta) delta = minv[j], j1 = j;
        }
      for (int j = 0; j <= n; ++j)
        if (used[j]) u[pm[j]] += delta, v[j] -= delta;
        else minv[j] -= delta;
      j0 = j1;
    } while (pm[j0] != 0);
    do {
      int j1 = way[j0];
      pm[j0] = pm[j1];
      j0 = j1;
    } while (j0);
  }
  double s = 0;
  for (int j = 1; j <= n; ++j) s += cost(pm[j], j);
  return std::pow(s / n, 1.0 / p);
}

}  // namespace

TEST_CASE("wp_assignment examples") {
  CHECK(wp_assignment(cloud({0}), cloud({3}), 1) == Approx(3.0));
  CHECK(wp_assignment(cloud({0, 1}), cloud({1, 0}), 2) == Approx(0.0).margin(1e-15));
  CHECK(wp_assignment(cloud({0, 2}), cloud({1, 5}), 2) == Approx(std::sqrt(5.0)));
}

TEST_CASE("wp_assignment errors") {
  try {
    wp_assignment(cloud({0, 1}), cloud({1}), 1);
    FAIL("size mismatch accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SizeMismatch);
  }
  RowMatrix two(1, 2);
  two << 0, 0;
  try {
    wp_assignment(cloud({0}), PointCloud(two), 1);
    FAIL("dim mismatch accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimMismatch);
  }
}

TEST_CASE("wp_sorted_1d examples") {
  CHECK(wp_sorted_1d(cloud({3, 1}), cloud({0, 2}), 1) == Approx(1.0));
  CHECK(wp_sorted_1d(cloud({4, -1, 2}), cloud({4, -1, 2}), 2) == 0.0);
  CHECK(wp_sorted_1d(cloud({0, 0, 0}), cloud({1, 1, 1}), 3) == Approx(1.0));
  CHECK(wp_assignment(cloud({0, 0, 0}), cloud({1, 1, 1}), 3) == Approx(1.0));
  CHECK_THROWS_AS(wp_sorted_1d(cloud({1}), cloud({1, 2}), 1), Error);
}

TEST_CASE("assignment matches exhaustive search on small clouds") {
  Engine eng(2024);
  int checked = 0;
  for (int t = 0; t < 100; ++t) {
    const int d = 1 + t % 3;
    const double p = 1.0 + (t / 3) % 3;
    const int m = 1 + t % 7;
    PointCloud x = random_cloud(eng, m, d);
    PointCloud y = random_cloud(eng, m, d);
    CHECK(wp_assignment(x, y, p) == Approx(brute(x, y, p)).epsilon(0).margin(1e-9));
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("assignment handles ties and integer grids") {
  Engine eng(5);
  std::uniform_int_distribution<int> ud(0, 2);
  for (int t = 0; t < 100; ++t) {
    const int m = 2 + t % 6;
    RowMatrix a(m, 2), b(m, 2);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < 2; ++j) a(i, j) = ud(eng), b(i, j) = ud(eng);
    PointCloud x(a), y(b);
    CHECK(wp_assignment(x, y, 1) == Approx(brute(x, y, 1)).margin(1e-9));
    CHECK(wp_assignment(x, y, 2) == Approx(brute(x, y, 2)).margin(1e-9));
  }
}

TEST_CASE("assignment matches an independent Hungarian solver on larger clouds") {
  Engine eng(99);
  for (int t = 0; t < 12; ++t) {
    const int m = 20 + 25 * t;
    const int d = 1 + t % 3;
    const double p = t % 2 == 0 ? 1.0 : 2.0;
    PointCloud x = random_cloud(eng, m, d);
    PointCloud y = random_cloud(eng, m, d);
    CHECK(wp_assignment(x, y, p) == Approx(hungarian(x, y, p)).epsilon(1e-10));
  }
}

TEST_CASE("assignment stays exact at production size on Gaussian clouds") {
  Eigen::MatrixXd a = Eigen::Vector2d(1.0, 4.0).asDiagonal();
  PointCloud x = sample_gaussian(GaussianSpec::centered(PsdMatrix(a)), 1024, 5);
  PointCloud y = sample_gaussian(GaussianSpec::centered(PsdMatrix::identity(2)), 1024, 6);
  CHECK(wp_assignment(x, y, 2.0) == Approx(hungarian(x, y, 2.0)).epsilon(1e-10));
}

TEST_CASE("sorted coupling equals assignment in 1-D") {
  Engine eng(3);
  for (int t = 0; t < 100; ++t) {
    const int m = 1 + t % 40;
    const double p = 1.0 + (t % 5) * 0.5;
    PointCloud x = random_cloud(eng, m, 1);
    PointCloud y = random_cloud(eng, m, 1);
    CHECK(std::abs(wp_sorted_1d(x, y, p) - wp_assignment(x, y, p)) <= 1e-12 * std::max(1.0, wp_sorted_1d(x, y, p)));
  }
}

TEST_CASE("triangle inequality and monotonicity in p") {
  Engine eng(17);
  for (int t = 0; t < 60; ++t) {
    const int m = 3 + t % 30;
    const int d = 1 + t % 3;
    PointCloud x = random_cloud(eng, m, d), y = random_cloud(eng, m, d), z = random_cloud(eng, m, d);
    for (double p : {1.0, 2.0, 3.0})
      CHECK(wp_assignment(x, z, p) <= wp_assignment(x, y, p) + wp_assignment(y, z, p) + 1e-12);
    CHECK(wp_assignment(x, y, 1) <= wp_assignment(x, y, 2) + 1e-12);
    CHECK(wp_assignment(x, y, 2) <= wp_assignment(x, y, 3) + 1e-12);
    CHECK(wp_assignment(x, y, 1.5) <= wp_assignment(x, y, 2.5) + 1e-12);
  }
}

TEST_CASE("self-consistency: samples from the target give zero after debiasing") {
  auto target = GaussianSpec::centered(PsdMatrix::identity(2));
  PointCloud s = sample_gaussian(target, 4000, 8);
  WpEstimate e = estimate_wp_to_gaussian(s, target, 1, 200, 20, true, 77);
  CHECK(e.debiased);
  CHECK(std::abs(e.raw_value) <= 3 * e.std_error);
  CHECK(e.value >= 0.0);
}

TEST_CASE("translation: shifted target mean recovers the shift") {
  Eigen::VectorXd mu(2);
  mu << 1, 0;
  GaussianSpec shifted(mu, PsdMatrix::identity(2));
  auto std2 = GaussianSpec::centered(PsdMatrix::identity(2));
  PointCloud s = sample_gaussian(std2, 8192, 4);
  double prev_err = 1e9;
  for (Eigen::Index m : {256, 2048}) {
    for (double p : {1.0, 2.0}) {
      WpEstimate e = estimate_wp_to_gaussian(s, shifted, p, m, 2, false, 5);
      CHECK(e.value == Approx(1.0).margin(0.25));
      if (p == 2.0) {
        CHECK(std::abs(e.value - 1.0) < prev_err + 0.02);
        prev_err = std::abs(e.value - 1.0);
      }
    }
  }
}

TEST_CASE("quantile grid against its own quantile reference") {
  auto target = GaussianSpec::centered(PsdMatrix::identity(1));
  const Eigen::Index m = 4096;
  PointCloud q = PointCloud::from_1d(gaussian_quantile_grid(0.0, 1.0, m));
  WpEstimate e = estimate_wp_to_gaussian(q, target, 1, m, 1, false, 1);
  CHECK(e.value < 0.05);
  WpOptions opts;
  opts.reference = GaussianReference::Quantile;
  WpEstimate exact = estimate_wp_to_gaussian(q, target, 1, m, 1, false, 1, opts);
  CHECK(exact.value == Approx(0.0).margin(1e-14));
}

TEST_CASE("debiased Gaussian-vs-Gaussian matches the closed form") {
  Eigen::MatrixXd a(2, 2), b(2, 2);
  a << 2.0, 0.3, 0.3, 1.0;
  b << 1.0, 0.0, 0.0, 1.0;
  auto src = GaussianSpec::centered(PsdMatrix(a));
  auto target = GaussianSpec::centered(PsdMatrix(b));
  const double exact = gaussian_w2_closed_form(PsdMatrix(a), PsdMatrix(b));
  const Eigen::Index m = 2048;
  const int reps = 6;
  PointCloud s = sample_gaussian(src, m * reps, 31);
  WpEstimate e = estimate_wp_to_gaussian(s, target, 2, m, reps, true, 32);
  INFO("estimate " << e.raw_value << " +- " << e.std_error << " exact " << exact);
  CHECK(std::abs(e.raw_value - exact) <= 3 * e.std_error);
}

TEST_CASE("product-marginal estimator agrees with the Gaussian closed form for diagonal laws") {
  Eigen::MatrixXd a = Eigen::Vector2d(4.0, 1.0).asDiagonal();
  auto src = GaussianSpec::centered(PsdMatrix(a));
  auto target = GaussianSpec::centered(PsdMatrix::identity(2));
  PointCloud s = sample_gaussian(src, 200000, 3);
  WpOptions opts;
  opts.method = WpMethod::ProductMarginals;
  WpEstimate e = estimate_wp_to_gaussian(s, target, 2, 50000, 4, false, 4, opts);
  CHECK(e.value == Approx(1.0).margin(0.03));
  CHECK_THROWS_AS(estimate_wp_to_gaussian(s, target, 1, 1000, 1, false, 4, opts), Error);
}

TEST_CASE("insufficient samples") {
  auto target = GaussianSpec::centered(PsdMatrix::identity(1));
  PointCloud s = sample_gaussian(target, 10, 1);
  try {
    estimate_wp_to_gaussian(s, target, 1, 11, 1, false, 1);
    FAIL("accepted m > pool");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InsufficientSamples);
  }
}

TEST_CASE("estimates are reproducible for a fixed seed") {
  auto target = GaussianSpec::centered(PsdMatrix::identity(2));
  PointCloud s = sample_gaussian(target, 600, 2);
  WpEstimate a = estimate_wp_to_gaussian(s, target, 2, 100, 3, true, 9);
  WpEstimate b = estimate_wp_to_gaussian(s, target, 2, 100, 3, true, 9);
  CHECK(a.rep_values == b.rep_values);
}
