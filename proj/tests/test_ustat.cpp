#include <catch_amalgamated.hpp>

#include <cltlab/ustat.hpp>

using namespace cltlab;
using Catch::Approx;

namespace {

RowMatrix column(std::initializer_list<double> v) {
  RowMatrix z(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) z(i++, 0) = x;
  return z;
}

// Symmetric order-3 kernel: (max, sum of pairwise products).
UKernel triple_kernel() {
  UKernel k;
  k.name = "triple";
  k.r = 3;
  k.out_dim = 2;
  k.eval = [](const RowMatrix& z, const Eigen::Index* i, double* out) {
    const double a = z(i[0], 0), b = z(i[1], 0), c = z(i[2], 0);
    out[0] = std::max({a, b, c});
    out[1] = a * b + a * c + b * c;
  };
  return k;
}

Eigen::VectorXd brute_triple(const RowMatrix& z) {
  Eigen::VectorXd s = Eigen::VectorXd::Zero(2);
  double count = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = i + 1; j < z.rows(); ++j)
      for (Eigen::Index k = j + 1; k < z.rows(); ++k) {
        const double a = z(i, 0), b = z(j, 0), c = z(k, 0);
        s(0) += std::max({a, b, c});
        s(1) += a * b + a * c + b * c;
        count += 1;
      }
  return s / count;
}

RowMatrix draw(Eigen::Index n, Eigen::Index p, std::uint64_t seed, MomentProfile prof = MomentProfile::centered_exponential()) {
  Engine eng(seed);
  return profile_sampler(p, prof)(n, eng);
}

}  // namespace

TEST_CASE("u-statistic examples") {
  CHECK(u_statistic(column({0, 2}), variance_kernel())(0) == Approx(2.0));
  CHECK(u_statistic(column({1.5, 1.5, 1.5, 1.5}), variance_kernel())(0) == 0.0);

  UKernel square;
  square.r = 1;
  square.eval = [](const RowMatrix& z, const Eigen::Index* i, double* out) { out[0] = z(i[0], 0) * z(i[0], 0); };
  CHECK(u_statistic(column({1, 2, 3}), square)(0) == Approx(14.0 / 3));

  try {
    u_statistic(column({1}), variance_kernel());
    FAIL("n < r accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InsufficientSamples);
  }
}

TEST_CASE("exact enumeration matches a brute-force triple loop") {
  for (int t = 0; t < 5; ++t) {
    RowMatrix z = draw(20 + 7 * t, 1, 10 + t);
    Eigen::VectorXd u = u_statistic(z, triple_kernel(), 1 + t % 3);
    CHECK((u - brute_triple(z)).cwiseAbs().maxCoeff() <= 1e-12 * (1 + u.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("closed forms agree with enumeration") {
  RowMatrix z = draw(60, 3, 1);
  CHECK((u_statistic_fast(z, variance_kernel(3)) - u_statistic(z, variance_kernel(3))).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((u_statistic_fast(z, mean_pair_kernel(3)) - u_statistic(z, mean_pair_kernel(3))).cwiseAbs().maxCoeff() < 1e-12);
  Engine eng(2);
  RowMatrix xy = regression_sampler(MomentProfile::gaussian())(40, eng);
  CHECK(u_statistic_fast(xy, subbag_mean_kernel(4))(0) == Approx(u_statistic(xy, subbag_mean_kernel(4))(0)).epsilon(1e-12));
  // no closed form: falls back to enumeration
  CHECK(u_statistic_fast(xy, subbag_1nn_kernel(3))(0) == u_statistic(xy, subbag_1nn_kernel(3))(0));
}

TEST_CASE("too many subsets") {
  RowMatrix z = draw(400, 1, 3);
  try {
    u_statistic(z, triple_kernel());
    FAIL("C(400, 3) > 1e7 accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::TooManySubsets);
  }
  Eigen::VectorXd approx = u_statistic_incomplete(z, triple_kernel(), 200000, 4);
  RowMatrix head = z.topRows(120);
  CHECK(u_statistic_incomplete(head, triple_kernel(), 400000, 5)(1) ==
        Approx(u_statistic(head, triple_kernel())(1)).margin(0.05));
  CHECK(std::isfinite(approx(0)));
}

TEST_CASE("u-statistic is exactly invariant under permuting the data") {
  Engine eng(6);
  for (const std::string& name : kernel_names()) {
    const int r = name.rfind("subbag", 0) == 0 ? 3 : 2;
    UKernel k = kernel_by_name(name, r, 2);
    RowMatrix z = name.rfind("subbag", 0) == 0 ? regression_sampler(MomentProfile::gaussian())(35, eng) : draw(35, 2, 7);
    RowMatrix shuffled = z;
    std::vector<Eigen::Index> perm(35);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), eng);
    for (Eigen::Index i = 0; i < 35; ++i) shuffled.row(i) = z.row(perm[static_cast<std::size_t>(i)]);
    CHECK(u_statistic(z, k) == u_statistic(shuffled, k, 3));
    CHECK(u_statistic_fast(z, k) == u_statistic_fast(shuffled, k));
  }
}

TEST_CASE("registered kernels are symmetric") {
  Engine eng(8);
  for (const std::string& name : kernel_names()) {
    const bool sub = name.rfind("subbag", 0) == 0;
    UKernel k = kernel_by_name(name, sub ? 4 : 2, 2);
    for (int t = 0; t < 50; ++t) {
      RowMatrix z = sub ? regression_sampler(MomentProfile::gaussian())(k.r, eng) : profile_sampler(2, MomentProfile::gaussian())(k.r, eng);
      std::vector<Eigen::Index> idx(static_cast<std::size_t>(k.r));
      std::iota(idx.begin(), idx.end(), 0);
      Eigen::VectorXd a(k.out_dim), b(k.out_dim);
      k.eval(z, idx.data(), a.data());
      std::shuffle(idx.begin(), idx.end(), eng);
      k.eval(z, idx.data(), b.data());
      CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-15 * (1 + a.cwiseAbs().maxCoeff()));
    }
  }
  CHECK_THROWS_AS(kernel_by_name("nope"), Error);
}

TEST_CASE("projection variance examples") {
  UKernel constant;
  constant.r = 2;
  constant.eval = [](const RowMatrix&, const Eigen::Index*, double* out) { out[0] = 3.0; };
  ProjectionVariance c = projection_variance(constant, profile_sampler(1, MomentProfile::gaussian()), 100, 10, 1);
  CHECK(c.value(0, 0) == 0.0);

  const std::size_t reps = 20000;
  ProjectionVariance m = projection_variance(mean_pair_kernel(), profile_sampler(1, MomentProfile::gaussian()), reps, 20, 2);
  // the sample variance of Z_0/2 has SE 0.25·√(2/reps)
  CHECK(m.value(0, 0) == Approx(0.25).margin(4 * 0.25 * std::sqrt(2.0 / reps) + 0.01 * 0.25));

  ProjectionVariance v = projection_variance(variance_kernel(), profile_sampler(1, MomentProfile::gaussian()), reps, 20, 3);
  // E[h | Z_0] = (Z_0² + 1)/2; the estimator of Var = 1/2 has SE √(3.5/reps)
  CHECK(v.value(0, 0) == Approx(0.5).margin(4 * std::sqrt(3.5 / reps)));
  CHECK(variance_kernel_projection_exact(1, 3.0)(0, 0) == Approx(0.5));
  CHECK(variance_kernel_projection_exact(1, MomentProfile::centered_exponential().fourth_moment())(0, 0) == Approx(2.0));
  CHECK_FALSE(v.note.empty());
}

TEST_CASE("exact multivariate projection variance matches nested Monte Carlo") {
  const Eigen::MatrixXd exact = variance_kernel_projection_exact(2, MomentProfile::rademacher().fourth_moment()).matrix();
  ProjectionVariance mc = projection_variance(variance_kernel(2), profile_sampler(2, MomentProfile::rademacher()), 20000, 16, 4);
  // Rademacher: E[h | z] = ½(zzᵀ + I); diagonal entries are constant, off-diagonal z_1 z_2 / 2 has variance 1/4
  CHECK(exact(1, 1) == Approx(0.25));
  CHECK(exact(1, 2) == Approx(0.25));
  CHECK(exact(0, 0) == 0.0);
  CHECK((mc.value.matrix() - exact).cwiseAbs().maxCoeff() < 0.02);
}

TEST_CASE("inner-noise correction removes the nested Monte Carlo bias") {
  // mean-pair with inner = 2: the raw estimate carries Var(Z_1/2)/2 = 1/8 of noise
  ProjectionVariance m = projection_variance(mean_pair_kernel(), profile_sampler(1, MomentProfile::gaussian()), 40000, 2, 5);
  CHECK(m.raw(0, 0) == Approx(0.375).margin(0.015));
  CHECK(m.value(0, 0) == Approx(0.25).margin(0.015));
}

TEST_CASE("rescaled variance U-statistic matches the projection variance") {
  const Eigen::Index n = 200;
  const std::size_t reps = 4000;
  for (MomentProfile prof : {MomentProfile::gaussian(), MomentProfile::centered_exponential()}) {
    std::vector<double> vals(reps);
    for (std::size_t i = 0; i < reps; ++i) {
      RowMatrix z = draw(n, 1, derive_seed(9, {std::uint64_t(i)}), prof);
      vals[i] = std::sqrt(double(n)) * (u_statistic_fast(z, variance_kernel())(0) - 1.0) / 2.0;
    }
    double s2 = 0, s4 = 0;
    for (double v : vals) s2 += v * v, s4 += v * v * v * v;
    s2 /= reps;
    s4 /= reps;
    const double se = std::sqrt((s4 - s2 * s2) / reps);
    const double target = variance_kernel_projection_exact(1, prof.fourth_moment())(0, 0);
    INFO(prof.name() << " empirical " << s2 << " target " << target << " se " << se);
    CHECK(std::abs(s2 - target) <= 3 * se);
  }
}

TEST_CASE("combinatorial factor Q(n, r)") {
  CHECK(q_nr_exact(10, 2) == BigRational(32, 9));
  CHECK(q_nr(10, 2) == Approx(3.5556).margin(1e-4));
  for (long long n : {1, 2, 7, 1000}) CHECK(q_nr_exact(n, 1) == 1);
  for (long long n = 3; n <= 300; ++n) {
    CHECK(q_nr_exact(n, 2) == BigRational(4 * (n - 2), n - 1));
    CHECK(q_nr_exact(n + 2, 3) == BigRational(9 * (n - 1) * (n - 2), (n + 1) * n));
  }
  double prev = 0;
  for (long long n = 3; n <= 2000; n += 7) {
    const double q = q_nr(n, 2);
    CHECK(q < 4.0);
    CHECK(q > prev);
    prev = q;
  }
  for (auto bad : {std::pair{4LL, 3LL}, {5LL, 0LL}}) {
    try {
      q_nr(bad.first, bad.second);
      FAIL("domain error expected");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::DomainError);
    }
  }
}

TEST_CASE("Q(n, r) − r² is O(1/n) with one fitted constant") {
  for (long long r : {2, 3}) {
    double c = 0;
    for (long long n = 2 * r - 1; n <= 100; ++n) c = std::max(c, double(n) * std::abs(q_nr(n, r) - double(r * r)));
    for (long long n = 101; n <= 10000; n += 37) CHECK(std::abs(q_nr(n, r) - double(r * r)) <= c / double(n));
  }
}
