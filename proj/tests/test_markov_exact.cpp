#include <catch_amalgamated.hpp>

#include <cltlab/markov_exact.hpp>

using namespace cltlab;
using Catch::Approx;

namespace {

Eigen::MatrixXd two_state_kernel() {
  Eigen::MatrixXd p(2, 2);
  p << 0.9, 0.1, 0.2, 0.8;
  return p;
}

FiniteChain two_state_chain() {
  Eigen::MatrixXd h(2, 1);
  h << 1, -2;
  return FiniteChain(two_state_kernel(), h);
}

FiniteChain three_state_chain() {
  Eigen::MatrixXd p(3, 3);
  p << 0.5, 0.4, 0.1,
       0.1, 0.5, 0.4,
       0.3, 0.1, 0.6;
  Eigen::MatrixXd h(3, 2);
  h << 1, 0,
       0, 2,
      -1, 1;
  return FiniteChain(p, h);
}

Eigen::MatrixXd random_kernel(Engine& eng, int s) {
  std::uniform_real_distribution<double> ud(0.05, 1.0);
  Eigen::MatrixXd p(s, s);
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < s; ++j) p(i, j) = ud(eng);
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

// Enumerates every path of length n from init; exact Var(S_n)/n by brute force.
Eigen::MatrixXd brute_sigma_n(const FiniteChain& c, int n, const Eigen::VectorXd& init, const Eigen::VectorXd& pi) {
  const Eigen::MatrixXd h = centered_obs(c, pi).front();
  const int s = c.s(), d = c.d();
  Eigen::MatrixXd second = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd first = Eigen::VectorXd::Zero(d);
  std::vector<int> path(n, 0);
  long long total = 1;
  for (int i = 0; i < n; ++i) total *= s;
  for (long long code = 0; code < total; ++code) {
    long long c2 = code;
    for (int i = 0; i < n; ++i) path[i] = int(c2 % s), c2 /= s;
    double prob = init(path[0]);
    for (int i = 1; i < n; ++i) prob *= c.kernel(path[i - 1], path[i]);
    if (prob == 0) continue;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
    for (int i = 0; i < n; ++i) sum += h.row(path[i]).transpose();
    second += prob * sum * sum.transpose();
    first += prob * sum;
  }
  return (second - first * first.transpose()) / n;
}

}  // namespace

TEST_CASE("stationary distribution examples") {
  Eigen::MatrixXd u = Eigen::MatrixXd::Constant(4, 4, 0.25);
  FiniteChain uc(u, Eigen::MatrixXd::Ones(4, 1));
  CHECK((stationary_dist(uc) - Eigen::VectorXd::Constant(4, 0.25)).norm() < 1e-12);

  Eigen::VectorXd pi = stationary_dist(two_state_chain());
  CHECK(pi(0) == Approx(2.0 / 3));
  CHECK(pi(1) == Approx(1.0 / 3));

  Eigen::MatrixXd cyc(3, 3);
  cyc << 0, 1, 0, 0, 0, 1, 1, 0, 0;
  FiniteChain cc(cyc, Eigen::MatrixXd::Ones(3, 1));
  CHECK((stationary_dist(cc) - Eigen::VectorXd::Constant(3, 1.0 / 3)).norm() < 1e-12);
  CHECK(analyze_structure(cyc).period == 3);

  Eigen::MatrixXd red(2, 2);
  red << 1, 0, 0, 1;
  try {
    stationary_dist(FiniteChain(red, Eigen::MatrixXd::Ones(2, 1)));
    FAIL("reducible chain accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Reducible);
  }
}

TEST_CASE("stationarity holds for random kernels") {
  Engine eng(3);
  for (int t = 0; t < 20; ++t) {
    FiniteChain c(random_kernel(eng, 2 + t % 5), Eigen::MatrixXd::Ones(2 + t % 5, 1));
    Eigen::VectorXd pi = stationary_dist(c);
    CHECK((pi.transpose() * c.kernel - pi.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(pi.sum() == Approx(1.0));
    CHECK(pi.minCoeff() > 0);
  }
}

TEST_CASE("chain validation") {
  Eigen::MatrixXd bad(2, 2);
  bad << 0.5, 0.4, 0.5, 0.5;
  CHECK_THROWS_AS(FiniteChain(bad, Eigen::MatrixXd::Ones(2, 1)), Error);
  FiniteChain c = two_state_chain();
  c.V(0) = 0.5;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("drift verification examples") {
  FiniteChain c = two_state_chain();
  c.small_set = {0, 1};
  DriftReport r = drift_verify(c, 0.5, 1.0);
  CHECK(r.holds);
  CHECK(r.max_violation == Approx(-0.5));

  c.small_set = {};
  r = drift_verify(c, 0.5, 0.0);
  CHECK_FALSE(r.holds);
  CHECK(r.max_violation == Approx(0.5));
}

TEST_CASE("drift constants from a per-state scan agree with a brute-force check") {
  FiniteChain c = two_state_chain();
  c.V << 1, 2;
  c.small_set = {0};
  DriftConstants k = minimal_drift_constants(c);
  // PV = (1.1, 1.8): λ = 1.8/2, L = 1.1 − 0.9.
  CHECK(k.lambda == Approx(0.9));
  CHECK(k.L == Approx(0.2));
  DriftReport r = drift_verify(c, k.lambda, k.L);
  double brute = -1e300;
  for (int x = 0; x < 2; ++x) {
    double pv = 0;
    for (int y = 0; y < 2; ++y) pv += c.kernel(x, y) * c.V(y);
    brute = std::max(brute, pv - k.lambda * c.V(x) - (x == 0 ? k.L : 0.0));
  }
  CHECK(r.max_violation == Approx(brute).margin(1e-15));
  CHECK(r.holds);
  CHECK_FALSE(drift_verify(c, k.lambda - 0.01, k.L).holds);
}

TEST_CASE("Poisson equation examples") {
  FiniteChain z = two_state_chain();
  z.obs[0].setZero();
  CHECK(poisson_solve(z).g.cwiseAbs().maxCoeff() < 1e-14);

  Eigen::MatrixXd iid(3, 3);
  iid << 0.2, 0.5, 0.3, 0.2, 0.5, 0.3, 0.2, 0.5, 0.3;
  Eigen::MatrixXd h(3, 1);
  h << 1, 2, 4;
  FiniteChain ic(iid, h);
  PoissonSolution s = poisson_solve(ic);
  Eigen::VectorXd pi = stationary_dist(ic);
  CHECK((s.g - centered_obs(ic, pi).front()).cwiseAbs().maxCoeff() < 1e-12);

  FiniteChain c = two_state_chain();
  PoissonSolution sol = poisson_solve(c);
  Eigen::MatrixXd series = Eigen::MatrixXd::Zero(2, 1), term = c.obs[0];
  for (int k = 0; k <= 80; ++k) {
    series += term;
    term = c.kernel * term;
  }
  CHECK((sol.g - series).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(sol.residual < 1e-9);
  CHECK(std::abs(sol.pi.dot(sol.g.col(0))) < 1e-9);
}

TEST_CASE("Poisson solution invariants on random chains") {
  Engine eng(8);
  for (int t = 0; t < 20; ++t) {
    const int s = 2 + t % 6;
    Eigen::MatrixXd h = Eigen::MatrixXd::Random(s, 2);
    FiniteChain c(random_kernel(eng, s), h);
    PoissonSolution sol = poisson_solve(c);
    CHECK(sol.residual <= 1e-9);
    CHECK((sol.pi.transpose() * sol.g).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("time-varying observations: truncated recursion matches the exact periodic solve") {
  FiniteChain c = three_state_chain();
  Eigen::MatrixXd h1(3, 2);
  h1 << 0, 1, 3, -1, 2, 2;
  c.obs.push_back(h1);
  PoissonSequence seq = poisson_sequence(c);
  REQUIRE(seq.g.size() == 2);
  const auto hc = centered_obs(c, seq.pi);
  // g_0 = h_0 + P h_1 + P² g_0  ⇒  (I − P²) g_0 = h_0 + P h_1 with π·g_0 = 0.
  const Eigen::MatrixXd p2 = c.kernel * c.kernel;
  Eigen::MatrixXd a(4, 3);
  a.topRows(3) = Eigen::MatrixXd::Identity(3, 3) - p2;
  a.row(3) = seq.pi.transpose();
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(4, 2);
  b.topRows(3) = hc[0] + c.kernel * hc[1];
  Eigen::MatrixXd g0 = a.colPivHouseholderQr().solve(b);
  CHECK((seq.at(0) - g0).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((seq.at(1) - (hc[1] + c.kernel * g0)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((seq.at(2) - seq.at(0)).norm() == 0.0);
  CHECK(seq.window > 0);
}

TEST_CASE("exact covariances: trivial cases") {
  Eigen::MatrixXd iid(3, 3);
  iid << 0.2, 0.5, 0.3, 0.2, 0.5, 0.3, 0.2, 0.5, 0.3;
  Eigen::MatrixXd h(3, 1);
  h << 1, 2, 4;
  FiniteChain ic(iid, h);
  Eigen::VectorXd pi = stationary_dist(ic);
  const double mean = pi.dot(h.col(0));
  const double var = pi.dot((h.col(0).array() - mean).square().matrix());
  for (long long n : {1, 7, 100}) {
    CovariancePair cp = exact_covariances(ic, n);
    CHECK(cp.sigma_n(0, 0) == Approx(var));
    CHECK(cp.sigma_infty(0, 0) == Approx(var));
  }
  FiniteChain z = two_state_chain();
  z.obs[0].setZero();
  CovariancePair zc = exact_covariances(z, 10);
  CHECK(zc.sigma_n(0, 0) == 0.0);
  CHECK(zc.sigma_infty(0, 0) == Approx(0.0).margin(1e-15));
}

TEST_CASE("exact Σ_n matches path enumeration, from stationarity and from a point mass") {
  FiniteChain c = three_state_chain();
  Eigen::VectorXd pi = stationary_dist(c);
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(3);
  delta(2) = 1.0;
  for (int n : {1, 2, 5, 7}) {
    CHECK((exact_sigma_n(c, n, pi).matrix() - brute_sigma_n(c, n, pi, pi)).norm() < 1e-12);
    CHECK((exact_sigma_n(c, n, pi, delta).matrix() - brute_sigma_n(c, n, delta, pi)).norm() < 1e-12);
  }
}

TEST_CASE("Σ_∞ equals the autocovariance series") {
  FiniteChain c = three_state_chain();
  PoissonSolution sol = poisson_solve(c);
  const Eigen::MatrixXd h = centered_obs(c, sol.pi).front();
  Eigen::MatrixXd series = Eigen::MatrixXd::Zero(2, 2);
  Eigen::MatrixXd pk_h = h;
  for (int k = 0; k < 400; ++k) {
    Eigen::MatrixXd ck = h.transpose() * sol.pi.asDiagonal() * pk_h;
    series += k == 0 ? ck : Eigen::MatrixXd(ck + ck.transpose());
    pk_h = c.kernel * pk_h;
  }
  CHECK((sigma_infinity(c, sol).matrix() - series).norm() < 1e-10);
}

TEST_CASE("Σ_n agrees with simulated Var(S_n)/n at n = 1e5") {
  FiniteChain c = two_state_chain();
  const long long n = 100000;
  CovariancePair cp = exact_covariances(c, n);
  KernelSampler ks(c.kernel);
  Eigen::VectorXd pi = stationary_dist(c);
  const int reps = 400;
  std::vector<double> z(reps);
  for (int r = 0; r < reps; ++r) {
    Engine eng = make_engine(21, {std::uint64_t(r)});
    int x = uniform01(eng) < pi(0) ? 0 : 1;
    double s = 0;
    for (long long t = 0; t < n; ++t) {
      s += c.obs[0](x, 0);
      x = ks.step(x, eng);
    }
    z[r] = s / std::sqrt(double(n));
  }
  double m = 0, v = 0;
  for (double q : z) m += q;
  m /= reps;
  for (double q : z) v += (q - m) * (q - m);
  v /= reps - 1;
  const double se = std::sqrt(2.0 / (reps - 1)) * cp.sigma_n(0, 0);
  INFO("sim " << v << " exact " << cp.sigma_n(0, 0));
  CHECK(std::abs(v - cp.sigma_n(0, 0)) < 3 * se);
}

TEST_CASE("‖Σ_n − Σ_∞‖ decays like 1/n") {
  FiniteChain c = three_state_chain();
  PoissonSolution sol = poisson_solve(c);
  PsdMatrix inf = sigma_infinity(c, sol);
  std::vector<double> lx, ly;
  for (int k = 4; k <= 12; ++k) {
    const long long n = 1LL << k;
    lx.push_back(std::log(double(n)));
    ly.push_back(std::log((exact_sigma_n(c, n, sol.pi).matrix() - inf.matrix()).norm()));
  }
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) mx += lx[i], my += ly[i];
  mx /= lx.size(), my /= ly.size();
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) sxy += (lx[i] - mx) * (ly[i] - my), sxx += (lx[i] - mx) * (lx[i] - mx);
  const double slope = sxy / sxx;
  CHECK(slope >= -1.15);
  CHECK(slope <= -0.85);
}

TEST_CASE("time reversal examples") {
  FiniteChain c = two_state_chain();
  CHECK((time_reversal(c).kernel - c.kernel).norm() < 1e-14);

  Eigen::MatrixXd cyc(3, 3);
  cyc << 0, 1, 0, 0, 0, 1, 1, 0, 0;
  FiniteChain cc(cyc, Eigen::MatrixXd::Ones(3, 1));
  Eigen::MatrixXd rev(3, 3);
  rev << 0, 0, 1, 1, 0, 0, 0, 1, 0;
  CHECK((time_reversal(cc).kernel - rev).norm() < 1e-14);

  Engine eng(4);
  for (int t = 0; t < 10; ++t) {
    FiniteChain rc(random_kernel(eng, 3 + t % 4), Eigen::MatrixXd::Ones(3 + t % 4, 1));
    FiniteChain r1 = time_reversal(rc);
    CHECK((r1.kernel.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    Eigen::VectorXd pi = stationary_dist(rc);
    CHECK((pi.transpose() * r1.kernel - pi.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((time_reversal(r1).kernel - rc.kernel).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("reversal of a drift-satisfying chain is irreducible and aperiodic") {
  FiniteChain c = three_state_chain();
  c.V << 1, 1.5, 1.5;
  c.small_set = {0};
  DriftConstants k = minimal_drift_constants(c);
  REQUIRE(k.lambda < 1.0);
  REQUIRE(drift_verify(c, k.lambda, k.L).holds);
  REQUIRE(analyze_structure(c.kernel).aperiodic());
  CHECK(analyze_structure(time_reversal(c).kernel).aperiodic());
}

TEST_CASE("meeting time trivial cases") {
  FiniteChain c = two_state_chain();
  CHECK(meeting_time_sample(c, 1, 1, 1, 10).time == 0);
  Eigen::MatrixXd iid(3, 3);
  iid << 0.2, 0.5, 0.3, 0.2, 0.5, 0.3, 0.2, 0.5, 0.3;
  FiniteChain ic(iid, Eigen::MatrixXd::Ones(3, 1));
  for (int r = 0; r < 200; ++r) {
    MeetingResult m = meeting_time_sample(ic, 0, 2, std::uint64_t(r), 10);
    CHECK(m.met);
    CHECK(m.time <= 1);
  }
  Eigen::MatrixXd swap(2, 2);
  swap << 0, 1, 1, 0;
  MeetingResult never = meeting_time_sample(FiniteChain(swap, Eigen::MatrixXd::Ones(2, 1)), 0, 1, 3, 50);
  CHECK_FALSE(never.met);
}

TEST_CASE("meeting-time survival matches the absorbing pair chain") {
  FiniteChain c = three_state_chain();
  const int s = 3;
  // Pair chain restricted to off-diagonal states under the one-step maximal coupling.
  std::vector<std::pair<int, int>> pairs;
  for (int a = 0; a < s; ++a)
    for (int b = 0; b < s; ++b)
      if (a != b) pairs.push_back({a, b});
  auto index = [&](int a, int b) {
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (pairs[i] == std::make_pair(a, b)) return int(i);
    return -1;
  };
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(pairs.size(), pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto [a, b] = pairs[i];
    Eigen::RowVectorXd p1 = c.kernel.row(a), p2 = c.kernel.row(b), cm = p1.cwiseMin(p2);
    const double rest = 1 - cm.sum();
    if (rest <= 0) continue;
    Eigen::RowVectorXd r1 = (p1 - cm) / rest, r2 = (p2 - cm) / rest;
    for (int u = 0; u < s; ++u)
      for (int v = 0; v < s; ++v)
        if (u != v && r1(u) * r2(v) > 0) q(i, index(u, v)) += rest * r1(u) * r2(v);
  }
  const int reps = 20000;
  const int kmax = 12;
  std::vector<int> surv(kmax + 1, 0);
  for (int r = 0; r < reps; ++r) {
    MeetingResult m = meeting_time_sample(c, 0, 2, derive_seed(5, {std::uint64_t(r)}), 1000);
    REQUIRE(m.met);
    for (int k = 0; k <= kmax; ++k) surv[k] += m.time > k;
  }
  Eigen::RowVectorXd e = Eigen::RowVectorXd::Zero(pairs.size());
  e(index(0, 2)) = 1.0;
  std::vector<double> lx, ly;
  for (int k = 0; k <= kmax; ++k) {
    const double exact = e.sum();
    const double emp = double(surv[k]) / reps;
    CHECK(std::abs(emp - exact) < 4 * std::sqrt(exact * (1 - exact) / reps) + 1e-12);
    if (surv[k] >= 50) lx.push_back(k), ly.push_back(std::log(emp));
    e = e * q;
  }
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) mx += lx[i], my += ly[i];
  mx /= lx.size(), my /= ly.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < lx.size(); ++i)
    sxy += (lx[i] - mx) * (ly[i] - my), sxx += (lx[i] - mx) * (lx[i] - mx), syy += (ly[i] - my) * (ly[i] - my);
  CHECK(sxy * sxy / (sxx * syy) >= 0.95);
}

TEST_CASE("two-state maximal coupling meets with probability 0.3 per step") {
  FiniteChain c = two_state_chain();
  const int reps = 20000;
  int beyond3 = 0;
  for (int r = 0; r < reps; ++r) beyond3 += meeting_time_sample(c, 0, 1, derive_seed(6, {std::uint64_t(r)}), 1000).time > 3;
  const double exact = std::pow(0.7, 3);
  CHECK(double(beyond3) / reps == Approx(exact).margin(4 * std::sqrt(exact * (1 - exact) / reps)));
}

TEST_CASE("coupled paths have correct marginals and stay together") {
  FiniteChain c = three_state_chain();
  const int reps = 10000;
  const int k = 3;
  Eigen::MatrixXd pk = c.kernel * c.kernel * c.kernel;
  Eigen::VectorXd cx = Eigen::VectorXd::Zero(3), cy = Eigen::VectorXd::Zero(3);
  for (int r = 0; r < reps; ++r) {
    CoupledPaths cp = coupled_paths(c, 0, 2, derive_seed(7, {std::uint64_t(r)}), 8);
    cx(cp.x[k]) += 1;
    cy(cp.y[k]) += 1;
    if (cp.meeting_time) {
      for (std::size_t t = std::size_t(*cp.meeting_time); t < cp.x.size(); ++t) CHECK(cp.x[t] == cp.y[t]);
    }
  }
  cx /= reps, cy /= reps;
  CHECK(0.5 * (cx.transpose() - pk.row(0)).cwiseAbs().sum() < 0.02);
  CHECK(0.5 * (cy.transpose() - pk.row(2)).cwiseAbs().sum() < 0.02);
}

TEST_CASE("chain JSON round trip") {
  FiniteChain c = three_state_chain();
  c.V << 1, 2, 3;
  c.small_set = {0, 2};
  FiniteChain back = chain_from_json(chain_to_json(c));
  CHECK(back.kernel == c.kernel);
  CHECK(back.obs[0] == c.obs[0]);
  CHECK(back.V == c.V);
  CHECK(back.small_set == c.small_set);

  nlohmann::json flat = {{"kernel", {{0.9, 0.1}, {0.2, 0.8}}}, {"obs", {1, -2}}};
  FiniteChain f = chain_from_json(flat);
  CHECK(f.d() == 1);
  CHECK(f.V == Eigen::VectorXd::Ones(2));
  nlohmann::json bad = {{"kernel", {{0.9, 0.2}, {0.2, 0.8}}}, {"obs", {1, -2}}};
  CHECK_THROWS_AS(chain_from_json(bad), Error);
}
