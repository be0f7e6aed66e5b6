#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "generators.hpp"
#include "markov_exact.hpp"
#include "parallel.hpp"
#include "rates.hpp"
#include "rng.hpp"
#include "transport.hpp"

namespace cltlab {

// ---------------------------------------------------------------- discrete 1-D laws

struct DiscreteLaw {
  std::vector<double> atoms;  // strictly increasing
  std::vector<double> probs;

  static DiscreteLaw from_pairs(std::vector<std::pair<double, double>> ap) {
    std::sort(ap.begin(), ap.end());
    DiscreteLaw law;
    for (const auto& [a, w] : ap) {
      if (w <= 0.0) continue;
      if (!law.atoms.empty() && law.atoms.back() == a) law.probs.back() += w;
      else law.atoms.push_back(a), law.probs.push_back(w);
    }
    double total = 0.0;
    for (double w : law.probs) total += w;
    for (double& w : law.probs) w /= total;
    return law;
  }

  DiscreteLaw scaled(double c) const {
    DiscreteLaw out = *this;
    for (double& a : out.atoms) a *= c;
    return out;
  }

  double mean() const {
    double m = 0.0;
    for (std::size_t k = 0; k < atoms.size(); ++k) m += atoms[k] * probs[k];
    return m;
  }

  double variance() const {
    const double m = mean();
    double v = 0.0;
    for (std::size_t k = 0; k < atoms.size(); ++k) v += (atoms[k] - m) * (atoms[k] - m) * probs[k];
    return v;
  }
};

// ∫_0^1 |F^{-1}(u) − G^{-1}(u)|^p du by merging the two quantile step functions.
inline double wp_pow_discrete(const DiscreteLaw& a, const DiscreteLaw& b, double p) {
  std::size_t i = 0, j = 0;
  double ca = a.probs.empty() ? 1.0 : a.probs[0], cb = b.probs.empty() ? 1.0 : b.probs[0], prev = 0.0, total = 0.0;
  while (i < a.atoms.size() && j < b.atoms.size()) {
    const double next = std::min(ca, cb);
    total += (next - prev) * std::pow(std::abs(a.atoms[i] - b.atoms[j]), p);
    prev = next;
    if (ca <= next) {
      if (++i < a.atoms.size()) ca += a.probs[i];
    }
    if (cb <= next) {
      if (++j < b.atoms.size()) cb += b.probs[j];
    }
  }
  return total;
}

// W_1 between a discrete law and N(0, sd²): ∫ |F(x) − Φ(x/sd)| dx in closed form
// on each interval where F is constant, with Ψ(x) = xΦ(x) + φ(x) the antiderivative of Φ.
inline double w1_discrete_to_normal(const DiscreteLaw& law, double sd = 1.0) {
  boost::math::normal_distribution<double> nd;
  auto Phi = [&](double x) { return boost::math::cdf(nd, x); };
  auto phi = [&](double x) { return boost::math::pdf(nd, x); };
  auto Psi = [&](double x) { return x * Phi(x) + phi(x); };
  // |c − Φ| integrated over [a, b] in standardized units
  auto piece = [&](double a, double b, double c) {
    if (b <= a) return 0.0;
    auto signed_int = [&](double lo, double hi) { return c * (hi - lo) - (Psi(hi) - Psi(lo)); };
    if (c <= 0.0) return Psi(b) - Psi(a);
    if (c >= 1.0) return (b - a) - (Psi(b) - Psi(a));
    const double x = boost::math::quantile(nd, c);
    if (x <= a) return -signed_int(a, b);
    if (x >= b) return signed_int(a, b);
    return signed_int(a, x) - signed_int(x, b);
  };
  const std::size_t K = law.atoms.size();
  require(K >= 1, ErrorCode::InvalidConfig, "empty law");
  std::vector<double> z(K);
  for (std::size_t k = 0; k < K; ++k) z[k] = law.atoms[k] / sd;
  double total = Psi(z[0]);  // ∫_{−∞}^{z_0} Φ
  double cum = 0.0;
  for (std::size_t k = 0; k + 1 < K; ++k) {
    cum += law.probs[k];
    total += piece(z[k], z[k + 1], cum);
  }
  total += phi(z[K - 1]) - z[K - 1] * (1.0 - Phi(z[K - 1]));  // ∫_{z_K}^{∞} (1 − Φ)
  return sd * total;
}

// ---------------------------------------------------------------- exact chain laws (d = 1)

namespace detail {

// Dense DP over (state, visit counts of states 0..s−2); the count of state s−1 is implied.
class CountDp {
 public:
  CountDp(const FiniteChain& chain, long long n) : P_(chain.kernel), s_(chain.s()), n_(n) {
    require(chain.homogeneous() && chain.d() == 1, ErrorCode::InvalidConfig, "exact laws need a homogeneous chain with d = 1");
    double c = 1.0;
    for (int k = 0; k + 1 < s_; ++k) c *= static_cast<double>(n + 1);
    require(c * s_ * s_ <= 5e7, ErrorCode::TooLarge, "count space too large for the exact law");
    size_ = static_cast<std::size_t>(c);
    stride_.assign(static_cast<std::size_t>(s_), 0);
    std::size_t st = 1;
    for (int k = 0; k + 1 < s_; ++k) stride_[static_cast<std::size_t>(k)] = st, st *= static_cast<std::size_t>(n + 1);
  }

  using Table = std::vector<std::vector<double>>;  // [state][key]

  Table start(const Eigen::VectorXd& init) const {
    Table f(static_cast<std::size_t>(s_), std::vector<double>(size_, 0.0));
    for (int x = 0; x < s_; ++x) f[static_cast<std::size_t>(x)][stride_[static_cast<std::size_t>(x)]] = init(x);
    return f;
  }

  Table step(const Table& f) const {
    Table g(static_cast<std::size_t>(s_), std::vector<double>(size_, 0.0));
    for (int x = 0; x < s_; ++x) {
      const auto& fx = f[static_cast<std::size_t>(x)];
      for (std::size_t key = 0; key < size_; ++key) {
        const double w = fx[key];
        if (w == 0.0) continue;
        for (int y = 0; y < s_; ++y) {
          const double pxy = P_(x, y);
          if (pxy != 0.0) g[static_cast<std::size_t>(y)][key + stride_[static_cast<std::size_t>(y)]] += w * pxy;
        }
      }
    }
    return g;
  }

  // law of Σ h(x_t) after all n visits
  DiscreteLaw law(const Table& f, const Eigen::VectorXd& h) const {
    std::vector<std::pair<double, double>> ap;
    for (std::size_t key = 0; key < size_; ++key) {
      double w = 0.0;
      for (int x = 0; x < s_; ++x) w += f[static_cast<std::size_t>(x)][key];
      if (w <= 0.0) continue;
      long long rest = n_;
      double v = 0.0;
      std::size_t k = key;
      for (int x = 0; x + 1 < s_; ++x) {
        const long long c = static_cast<long long>(k % static_cast<std::size_t>(n_ + 1));
        k /= static_cast<std::size_t>(n_ + 1);
        v += static_cast<double>(c) * h(x);
        rest -= c;
      }
      v += static_cast<double>(rest) * h(s_ - 1);
      ap.emplace_back(v, w);
    }
    return DiscreteLaw::from_pairs(std::move(ap));
  }

 private:
  Eigen::MatrixXd P_;
  int s_;
  long long n_;
  std::size_t size_ = 0;
  std::vector<std::size_t> stride_;
};

}  // namespace detail

// Exact law of W = S_n / √(n Σ_n) for a stationary homogeneous chain with d = 1.
inline DiscreteLaw chain_normalized_law(const FiniteChain& chain, long long n) {
  const Eigen::VectorXd pi = stationary_dist(chain);
  const Eigen::VectorXd h = centered_obs(chain, pi).front().col(0);
  const double var = exact_sigma_n(chain, n, pi)(0, 0);
  require(var > 0.0, ErrorCode::NotPsd, "Σ_n = 0: the normalized sum is undefined");
  detail::CountDp dp(chain, n);
  auto f = dp.start(pi);
  for (long long t = 1; t < n; ++t) f = dp.step(f);
  return dp.law(f, h).scaled(1.0 / std::sqrt(static_cast<double>(n) * var));
}

inline double chain_w1_exact(const FiniteChain& chain, long long n) {
  return w1_discrete_to_normal(chain_normalized_law(chain, n));
}

struct DependenceFunctional {
  long long n = 0;
  double value = 0.0;   // ≥ 0
  double stderr_ = 0.0;
  double raw = 0.0;     // signed Monte Carlo mean
  std::vector<double> per_index;  // contribution of each i
  std::string note;
};

// Σ_i Σ_x π(x) |U_i(x)| W₂²(L(W), L(W | x_i = x)), all laws computed exactly.
inline DependenceFunctional dependence_functional_chain_exact(const FiniteChain& chain, long long n) {
  require(n >= 1, ErrorCode::InvalidConfig, "n must be >= 1");
  const Eigen::VectorXd pi = stationary_dist(chain);
  const Eigen::VectorXd h = centered_obs(chain, pi).front().col(0);
  DependenceFunctional out;
  out.n = n;
  out.per_index.assign(static_cast<std::size_t>(n), 0.0);
  const double var = exact_sigma_n(chain, n, pi)(0, 0);
  if (h.cwiseAbs().maxCoeff() == 0.0 || var <= 0.0) {
    out.note = "centered observation is identically zero; every U_i vanishes";
    return out;
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(n) * var);
  detail::CountDp dp(chain, n);
  std::vector<detail::CountDp::Table> prefix;
  prefix.push_back(dp.start(pi));
  for (long long t = 1; t < n; ++t) prefix.push_back(dp.step(prefix.back()));
  const DiscreteLaw full = dp.law(prefix.back(), h).scaled(scale);
  for (long long i = 0; i < n; ++i) {
    double contrib = 0.0;
    for (int x = 0; x < chain.s(); ++x) {
      if (pi(x) <= 0.0 || h(x) == 0.0) continue;
      auto f = prefix[static_cast<std::size_t>(i)];
      for (int y = 0; y < chain.s(); ++y)
        for (double& w : f[static_cast<std::size_t>(y)]) w = y == x ? w / pi(x) : 0.0;
      for (long long t = i + 1; t < n; ++t) f = dp.step(f);
      const DiscreteLaw cond = dp.law(f, h).scaled(scale);
      contrib += pi(x) * std::abs(h(x)) * scale * wp_pow_discrete(full, cond, 2.0);
    }
    out.per_index[static_cast<std::size_t>(i)] = contrib;
    out.value += contrib;
  }
  out.raw = out.value;
  return out;
}

// ---------------------------------------------------------------- Monte Carlo functional

namespace detail {

inline Eigen::MatrixXd inverse_sqrt_psd(const Eigen::MatrixXd& a, bool& degenerate) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(a));
  const double top = es.eigenvalues().cwiseAbs().maxCoeff();
  degenerate = top <= 1e-300;
  Eigen::VectorXd inv(es.eigenvalues().size());
  for (Eigen::Index k = 0; k < inv.size(); ++k) {
    const double ev = es.eigenvalues()(k);
    inv(k) = ev > 1e-12 * top ? 1.0 / std::sqrt(ev) : 0.0;
  }
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

inline double w2sq_clouds(const RowMatrix& a, const RowMatrix& b) {
  if (a.cols() == 1) {
    std::vector<double> x(a.data(), a.data() + a.rows()), y(b.data(), b.data() + b.rows());
    return sorted_pow_mean(std::move(x), std::move(y), 2.0);
  }
  return wp_assignment_pow(PointCloud(a), PointCloud(b), 2.0);
}

inline void summarize(DependenceFunctional& out, const std::vector<double>& totals) {
  const double R = static_cast<double>(totals.size());
  double mean = 0.0;
  for (double t : totals) mean += t;
  mean /= R;
  double ss = 0.0;
  for (double t : totals) ss += (t - mean) * (t - mean);
  out.raw = mean;
  out.value = std::max(0.0, mean);
  out.stderr_ = totals.size() > 1 ? std::sqrt(ss / (R - 1.0) / R) : 0.0;
}

}  // namespace detail

struct FunctionalOptions {
  int outer_reps = 4;
  Eigen::Index inner_m = 4096;
  std::uint64_t seed = 1;
  unsigned threads = 0;
  double budget_secs = 0.0;
};

// Chain variant: conditions on x_i. States are enumerated with weights π rather
// than sampled; each conditional cloud runs P* backward and P forward from x_i.
// W₂² estimates are debiased by the distance between two unconditional clouds.
inline DependenceFunctional dependence_functional_chain(const FiniteChain& chain, long long n, const FunctionalOptions& opt) {
  require(n >= 1 && n <= 256, ErrorCode::InvalidConfig, "the nested estimator is meant for n <= 256");
  require(opt.outer_reps >= 2 && opt.inner_m >= 2, ErrorCode::InvalidConfig, "need outer_reps >= 2 and inner_m >= 2");
  if (chain.d() > 1) require(opt.inner_m <= kMaxAssignmentSize, ErrorCode::TooLarge, "inner_m exceeds the assignment cap");
  const Deadline deadline(opt.budget_secs);
  const Eigen::VectorXd pi = stationary_dist(chain);
  const auto hc = centered_obs(chain, pi);
  const Eigen::Index d = chain.d();
  DependenceFunctional out;
  out.n = n;
  out.per_index.assign(static_cast<std::size_t>(n), 0.0);
  bool degenerate = false;
  const Eigen::MatrixXd white = detail::inverse_sqrt_psd(exact_sigma_n(chain, n, pi).matrix(), degenerate) /
                                std::sqrt(static_cast<double>(n));
  if (degenerate) {
    out.note = "Σ_n = 0: every U_i vanishes";
    return out;
  }
  const KernelSampler fwd(chain.kernel), bwd(time_reversal(chain).kernel);
  const long long period = static_cast<long long>(hc.size());
  auto w_of = [&](const std::vector<int>& path) {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(d);
    for (long long t = 0; t < n; ++t) s += hc[static_cast<std::size_t>(t % period)].row(path[static_cast<std::size_t>(t)]).transpose();
    return Eigen::VectorXd(white * s);
  };
  auto cloud = [&](Engine& eng, int pin_state, long long pin_time) {
    RowMatrix c(opt.inner_m, d);
    std::vector<int> path(static_cast<std::size_t>(n));
    for (Eigen::Index k = 0; k < opt.inner_m; ++k) {
      const long long t0 = pin_state < 0 ? 0 : pin_time;
      path[static_cast<std::size_t>(t0)] = pin_state < 0 ? sample_from(pi.transpose(), eng) : pin_state;
      for (long long t = t0 - 1; t >= 0; --t) path[static_cast<std::size_t>(t)] = bwd.step(path[static_cast<std::size_t>(t + 1)], eng);
      for (long long t = t0 + 1; t < n; ++t) path[static_cast<std::size_t>(t)] = fwd.step(path[static_cast<std::size_t>(t - 1)], eng);
      c.row(k) = w_of(path).transpose();
    }
    return c;
  };

  std::vector<double> totals(static_cast<std::size_t>(opt.outer_reps), 0.0);
  for (int r = 0; r < opt.outer_reps; ++r) {
    const auto rr = static_cast<std::uint64_t>(r);
    Engine eb = make_engine(opt.seed, {rr, 0}), eb2 = make_engine(opt.seed, {rr, 1});
    const RowMatrix base = cloud(eb, -1, 0), base2 = cloud(eb2, -1, 0);
    const double bias = detail::w2sq_clouds(base2, base);
    std::vector<double> contrib(static_cast<std::size_t>(n), 0.0);
    parallel_for(static_cast<std::size_t>(n), resolve_threads(opt.threads), [&](std::size_t i) {
      deadline.check("dependence functional");
      for (int x = 0; x < chain.s(); ++x) {
        if (pi(x) <= 0.0) continue;
        const double u = (white * hc[i % static_cast<std::size_t>(period)].row(x).transpose()).norm();
        if (u == 0.0) continue;
        Engine ec = make_engine(opt.seed, {rr, 2, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(x)});
        const RowMatrix cond = cloud(ec, x, static_cast<long long>(i));
        contrib[i] += pi(x) * u * (detail::w2sq_clouds(cond, base) - bias);
      }
    });
    for (long long i = 0; i < n; ++i) {
      totals[static_cast<std::size_t>(r)] += contrib[static_cast<std::size_t>(i)];
      out.per_index[static_cast<std::size_t>(i)] += contrib[static_cast<std::size_t>(i)] / opt.outer_reps;
    }
  }
  detail::summarize(out, totals);
  return out;
}

// MA(M) variant (M = 0 is the i.i.d. case): conditions on the innovation window
// (Z_i, …, Z_{i+M}) that determines X_i. The conditional cloud reuses the base
// draws with the window replaced, so only the window's effect differs.
inline DependenceFunctional dependence_functional_ma(Eigen::Index d, int M, const MomentProfile& prof, long long n,
                                                     const FunctionalOptions& opt) {
  require(n >= 1 && n <= 256, ErrorCode::InvalidConfig, "the nested estimator is meant for n <= 256");
  require(M >= 0 && d >= 1, ErrorCode::InvalidConfig, "need M >= 0 and d >= 1");
  require(opt.outer_reps >= 2 && opt.inner_m >= 2, ErrorCode::InvalidConfig, "need outer_reps >= 2 and inner_m >= 2");
  if (d > 1) require(opt.inner_m <= kMaxAssignmentSize, ErrorCode::TooLarge, "inner_m exceeds the assignment cap");
  prof.validate();
  const Deadline deadline(opt.budget_secs);
  const long long len = n + M;
  std::vector<double> c(static_cast<std::size_t>(len));
  for (long long j = 0; j < len; ++j)
    c[static_cast<std::size_t>(j)] = static_cast<double>(std::min(n - 1, j) - std::max(0LL, j - M) + 1) / std::sqrt(M + 1.0);
  const double norm = std::sqrt(static_cast<double>(n) * exact_sigma_n_ma(n, M, 1.0)(0, 0));
  const Eigen::Index m = opt.inner_m;

  DependenceFunctional out;
  out.n = n;
  out.per_index.assign(static_cast<std::size_t>(n), 0.0);
  std::vector<double> totals(static_cast<std::size_t>(opt.outer_reps), 0.0);
  for (int r = 0; r < opt.outer_reps; ++r) {
    const auto rr = static_cast<std::uint64_t>(r);
    Engine ea = make_engine(opt.seed, {rr, 0}), eb = make_engine(opt.seed, {rr, 1});
    RowMatrix za = detail::draw_innovations(m * len, d, prof, ea);  // row k·len + j holds Z_j of draw k
    RowMatrix wa = RowMatrix::Zero(m, d), wb = RowMatrix::Zero(m, d);
    for (Eigen::Index k = 0; k < m; ++k)
      for (long long j = 0; j < len; ++j) wa.row(k) += c[static_cast<std::size_t>(j)] * za.row(k * len + j);
    for (Eigen::Index k = 0; k < m; ++k)
      for (long long j = 0; j < len; ++j) {
        const double w = c[static_cast<std::size_t>(j)];
        for (Eigen::Index q = 0; q < d; ++q) wb(k, q) += w * prof.draw(eb);
      }
    wa /= norm;
    wb /= norm;
    const double bias = detail::w2sq_clouds(wa, wb);
    std::vector<double> contrib(static_cast<std::size_t>(n), 0.0);
    parallel_for(static_cast<std::size_t>(n), resolve_threads(opt.threads), [&](std::size_t i) {
      deadline.check("dependence functional");
      Engine ez = make_engine(opt.seed, {rr, 2, static_cast<std::uint64_t>(i)});
      const RowMatrix win = detail::draw_innovations(M + 1, d, prof, ez);
      const Eigen::RowVectorXd u = win.colwise().sum() / std::sqrt(M + 1.0) / norm;
      RowMatrix cond = wa;
      for (int j = 0; j <= M; ++j) {
        const long long idx = static_cast<long long>(i) + j;
        const double w = c[static_cast<std::size_t>(idx)] / norm;
        for (Eigen::Index k = 0; k < m; ++k) cond.row(k) += w * (win.row(j) - za.row(k * len + idx));
      }
      contrib[i] = u.norm() * (detail::w2sq_clouds(cond, wb) - bias);
    });
    for (long long i = 0; i < n; ++i) {
      totals[static_cast<std::size_t>(r)] += contrib[static_cast<std::size_t>(i)];
      out.per_index[static_cast<std::size_t>(i)] += contrib[static_cast<std::size_t>(i)] / opt.outer_reps;
    }
  }
  detail::summarize(out, totals);
  return out;
}

}  // namespace cltlab
