#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "errors.hpp"
#include "markov_exact.hpp"
#include "rng.hpp"

namespace cltlab {

// P^m(x,·) ≥ β·ν(·) for every x in the small set, with ν(C̄) = 1.
struct Minorization {
  int m = 1;
  double beta = 0.0;
  Eigen::VectorXd nu;
  std::vector<int> small_set;
  std::string warning;
};

inline Eigen::MatrixXd kernel_power(const Eigen::MatrixXd& p, int m) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Identity(p.rows(), p.cols());
  for (int k = 0; k < m; ++k) out = out * p;
  return out;
}

// ν(z) ∝ min_{x∈C̄} P^m(x, z) on z ∈ C̄; β is the unnormalized mass.
inline Minorization build_minorization(const FiniteChain& chain, std::vector<int> c_bar, int m) {
  require(!c_bar.empty(), ErrorCode::InvalidConfig, "small set must be nonempty");
  require(m >= 1, ErrorCode::InvalidConfig, "skeleton step m must be >= 1");
  std::sort(c_bar.begin(), c_bar.end());
  c_bar.erase(std::unique(c_bar.begin(), c_bar.end()), c_bar.end());
  for (int x : c_bar) require(x >= 0 && x < chain.s(), ErrorCode::InvalidConfig, "small set state out of range");
  const Eigen::MatrixXd pm = kernel_power(chain.kernel, m);
  Minorization mz;
  mz.m = m;
  mz.small_set = c_bar;
  mz.nu = Eigen::VectorXd::Zero(chain.s());
  for (int z : c_bar) {
    double lo = 1.0;
    for (int x : c_bar) lo = std::min(lo, pm(x, z));
    mz.nu(z) = lo;
  }
  mz.beta = mz.nu.sum();
  require(mz.beta > 0.0, ErrorCode::NoOverlap, "no common mass on the small set; try a larger m or another small set");
  mz.nu /= mz.beta;
  mz.beta = std::min(mz.beta, 1.0);
  if (mz.beta < 0.02)
    mz.warning = "beta < 0.02: cycles are long and short horizons may hold too few regenerations";
  return mz;
}

inline void validate_minorization(const FiniteChain& chain, const Minorization& mz) {
  require(mz.beta > 0.0 && mz.beta <= 1.0, ErrorCode::BadMinorization, "beta must lie in (0, 1]");
  require(mz.nu.size() == chain.s() && mz.nu.minCoeff() >= 0.0 && std::abs(mz.nu.sum() - 1.0) < 1e-12,
          ErrorCode::BadMinorization, "nu must be a probability vector");
  double off = 0.0;
  for (int z = 0; z < chain.s(); ++z)
    if (std::find(mz.small_set.begin(), mz.small_set.end(), z) == mz.small_set.end()) off += mz.nu(z);
  require(off <= 1e-12, ErrorCode::BadMinorization, "nu must be supported on the small set");
  const Eigen::MatrixXd pm = kernel_power(chain.kernel, mz.m);
  for (int x : mz.small_set)
    require(((pm.row(x).transpose() - mz.beta * mz.nu).array() >= -1e-12).all(), ErrorCode::BadMinorization,
            "P^m(x,·) >= beta·nu fails for a small-set state");
}

// E[Λ_i], i ≥ 2, by Kac's formula for the atom C̄ × {1} of the split skeleton.
inline double expected_cycle_length(const FiniteChain& chain, const Minorization& mz) {
  const Eigen::VectorXd pi = stationary_dist(chain);
  double pc = 0.0;
  for (int x : mz.small_set) pc += pi(x);
  return static_cast<double>(mz.m) / (mz.beta * pc);
}

inline constexpr std::int8_t kNoLevel = -1;

struct SplitTrace {
  int m = 1;
  long long n = 0;                    // requested horizon
  std::vector<int> states;            // x_0 .. x_N, N = m·⌈n/m⌉
  std::vector<std::int8_t> levels;    // y_{km}; kNoLevel off the small set
  std::vector<long long> regen_times; // T_1 < T_2 < ..., T_i = m·τ_i

  long long horizon() const { return static_cast<long long>(states.size()) - 1; }

  std::vector<long long> cycle_lengths() const {
    std::vector<long long> out;
    long long prev = 0;
    for (long long t : regen_times) {
      out.push_back(t - prev);
      prev = t;
    }
    return out;
  }
};

// Split m-skeleton with bridge-filled interiors. The starting state is drawn
// from init (π when empty).
inline SplitTrace simulate_split_chain(const FiniteChain& chain, const Minorization& mz, long long n, std::uint64_t seed,
                                       const std::optional<Eigen::VectorXd>& init = std::nullopt) {
  validate_minorization(chain, mz);
  require(n >= 1, ErrorCode::InvalidConfig, "horizon must be >= 1");
  const int s = chain.s();
  const int m = mz.m;
  std::vector<Eigen::MatrixXd> pow(static_cast<std::size_t>(m + 1));
  pow[0] = Eigen::MatrixXd::Identity(s, s);
  for (int j = 1; j <= m; ++j) pow[static_cast<std::size_t>(j)] = pow[static_cast<std::size_t>(j - 1)] * chain.kernel;
  const Eigen::MatrixXd& pm = pow[static_cast<std::size_t>(m)];
  std::vector<char> in_c(static_cast<std::size_t>(s), 0);
  for (int x : mz.small_set) in_c[static_cast<std::size_t>(x)] = 1;
  Eigen::MatrixXd residual = Eigen::MatrixXd::Zero(s, s);
  if (mz.beta < 1.0)
    for (int x : mz.small_set)
      residual.row(x) = ((pm.row(x) - mz.beta * mz.nu.transpose()) / (1.0 - mz.beta)).cwiseMax(0.0);

  Engine eng(seed);
  const Eigen::VectorXd start = init ? *init : stationary_dist(chain);
  require(start.size() == s, ErrorCode::DimMismatch, "initial distribution must have one entry per state");
  const long long blocks = (n + m - 1) / m;
  SplitTrace tr;
  tr.m = m;
  tr.n = n;
  tr.states.resize(static_cast<std::size_t>(blocks * m + 1));
  tr.levels.resize(static_cast<std::size_t>(blocks), kNoLevel);
  tr.states[0] = sample_from(start.transpose(), eng);
  Eigen::RowVectorXd w(s);
  for (long long k = 0; k < blocks; ++k) {
    const long long t0 = k * m;
    const int x = tr.states[static_cast<std::size_t>(t0)];
    int z;
    if (in_c[static_cast<std::size_t>(x)]) {
      const bool regen = uniform01(eng) < mz.beta;
      tr.levels[static_cast<std::size_t>(k)] = regen ? 1 : 0;
      if (regen) {
        z = sample_from(mz.nu.transpose(), eng);
        tr.regen_times.push_back(t0 + m);
      } else {
        z = sample_from(residual.row(x), eng);
      }
    } else {
      z = sample_from(pm.row(x), eng);
    }
    tr.states[static_cast<std::size_t>(t0 + m)] = z;
    int prev = x;
    for (int j = 1; j < m; ++j) {
      const Eigen::MatrixXd& ahead = pow[static_cast<std::size_t>(m - j)];
      for (int y = 0; y < s; ++y) w(y) = chain.kernel(prev, y) * ahead(y, z);
      prev = sample_from(w, eng);
      tr.states[static_cast<std::size_t>(t0 + j)] = prev;
    }
  }
  return tr;
}

inline std::string trace_to_csv(const SplitTrace& tr) {
  std::ostringstream os;
  os << "t,state,boundary_level,is_regen\n";
  std::size_t next = 0;
  for (long long t = 0; t <= tr.horizon(); ++t) {
    os << t << ',' << tr.states[static_cast<std::size_t>(t)] << ',';
    if (t % tr.m == 0 && t / tr.m < static_cast<long long>(tr.levels.size())) {
      const auto lv = tr.levels[static_cast<std::size_t>(t / tr.m)];
      if (lv != kNoLevel) os << static_cast<int>(lv);
    }
    bool regen = false;
    while (next < tr.regen_times.size() && tr.regen_times[next] < t) ++next;
    if (next < tr.regen_times.size() && tr.regen_times[next] == t) regen = true;
    os << ',' << (regen ? 1 : 0) << '\n';
  }
  return os.str();
}

struct TailFit {
  double rho_hat = 0.0;
  double b_hat = 0.0;
  double r_squared = 0.0;
  bool degenerate = false;
  std::size_t cycles = 0;
  std::size_t points = 0;
};

// Least squares of log P̂(L > ℓ) on ℓ over the ℓ with at least 50 survivors.
inline TailFit fit_geometric_tail(const std::vector<long long>& lengths) {
  require(lengths.size() >= 1000, ErrorCode::TooFewCycles, "tail fit needs at least 1000 cycles");
  const long long lmax = *std::max_element(lengths.begin(), lengths.end());
  std::vector<long long> exceed(static_cast<std::size_t>(lmax + 1), 0);
  for (long long l : lengths)
    for (long long k = 0; k < l && k <= lmax; ++k) ++exceed[static_cast<std::size_t>(k)];
  const double total = static_cast<double>(lengths.size());
  std::vector<double> xs, ys;
  for (long long k = 0; k <= lmax; ++k) {
    if (exceed[static_cast<std::size_t>(k)] < 50) break;
    xs.push_back(static_cast<double>(k));
    ys.push_back(std::log(static_cast<double>(exceed[static_cast<std::size_t>(k)]) / total));
  }
  TailFit fit;
  fit.cycles = lengths.size();
  fit.points = xs.size();
  if (xs.size() < 2) {
    fit.degenerate = true;
    return fit;
  }
  const double k = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) mx += xs[i], my += ys[i];
  mx /= k;
  my /= k;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  const double slope = sxy / sxx;
  fit.rho_hat = std::exp(slope);
  fit.b_hat = std::exp(my - slope * mx);
  fit.r_squared = syy > 0 ? sxy * sxy / (sxx * syy) : 1.0;
  return fit;
}

// Skeleton-scale cycle lengths L_i = Λ_i / m pooled over traces.
inline std::vector<long long> pooled_cycle_lengths(const std::vector<SplitTrace>& traces, bool include_first) {
  std::vector<long long> out;
  for (const auto& tr : traces) {
    const auto lam = tr.cycle_lengths();
    for (std::size_t i = include_first ? 0 : 1; i < lam.size(); ++i) out.push_back(lam[i] / tr.m);
  }
  return out;
}

inline TailFit cycle_tail_fit(const std::vector<SplitTrace>& traces, bool include_first = false) {
  return fit_geometric_tail(pooled_cycle_lengths(traces, include_first));
}

// Mean of Λ_i over i ≥ 2 pooled across traces.
inline double pooled_mean_cycle(const std::vector<SplitTrace>& traces) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& tr : traces) {
    const auto lam = tr.cycle_lengths();
    for (std::size_t i = 1; i < lam.size(); ++i) sum += static_cast<double>(lam[i]), ++count;
  }
  require(count > 0, ErrorCode::TooFewCycles, "no complete cycles beyond the first");
  return sum / static_cast<double>(count);
}

// K_n = min{i ≥ 1 : T_i > n} + 1, or nothing when no T_i exceeds n.
inline std::optional<long long> k_big(const std::vector<long long>& regen_times, long long n) {
  for (std::size_t i = 0; i < regen_times.size(); ++i)
    if (regen_times[i] > n) return static_cast<long long>(i) + 2;
  return std::nullopt;
}

inline long long k_small(long long n, double mean_cycle) {
  return static_cast<long long>(std::floor(static_cast<double>(n) / mean_cycle));
}

struct CycleIncrements {
  std::vector<Eigen::VectorXd> tilde_M;  // M̃_i over every complete cycle of the trace
  long long K_n = 0;
  long long k_n = 0;
  Eigen::VectorXd remainder_R_n;         // Σ_{t=n}^{T_{K_n}−1} ξ_{t+1}
  Eigen::VectorXd S_n;                   // Σ_{t<n} (h_t(x_t) − π(h_t))
  Eigen::VectorXd M_n;                   // Σ_{t<n} ξ_{t+1}
  Eigen::VectorXd boundary;              // g_0(x_0) − g_n(x_n)
  double identity_error = 0.0;           // |S_n − boundary − M_n|_∞
  double cycle_sum_error = 0.0;          // |Σ_{i≤K_n} M̃_i − R_n − M_n|_∞
};

// ξ_{t+1} = g_{t+1}(x_{t+1}) − P g_{t+1}(x_t) along the trace, split into
// regeneration cycles.
inline CycleIncrements cycle_increments(const FiniteChain& chain, const SplitTrace& tr, const PoissonSequence& g, long long n,
                                        std::optional<double> mean_cycle = std::nullopt) {
  require(n >= 1 && n <= tr.horizon(), ErrorCode::InvalidConfig, "n must lie within the trace horizon");
  const auto kn = k_big(tr.regen_times, n);
  require(kn.has_value() && *kn <= static_cast<long long>(tr.regen_times.size()), ErrorCode::MissingRegens,
          "trace ends before T_{K_n}; extend the simulation");
  const long long t_end = tr.regen_times[static_cast<std::size_t>(*kn - 1)];
  const Eigen::Index d = g.at(0).cols();
  const auto hc = centered_obs(chain, g.pi);

  CycleIncrements out;
  out.K_n = *kn;
  out.k_n = k_small(n, mean_cycle ? *mean_cycle : [&] {
    std::vector<SplitTrace> one{tr};
    return pooled_mean_cycle(one);
  }());
  out.S_n = Eigen::VectorXd::Zero(d);
  out.M_n = Eigen::VectorXd::Zero(d);
  out.remainder_R_n = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd cur = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd upto_kn = Eigen::VectorXd::Zero(d);
  std::size_t next_regen = 0;
  const long long period = static_cast<long long>(hc.size());
  std::vector<Eigen::MatrixXd> pg;
  for (std::size_t i = 0; i < g.g.size(); ++i) pg.push_back(chain.kernel * g.g[i]);
  for (long long t = 0; t < tr.horizon(); ++t) {
    const int x = tr.states[static_cast<std::size_t>(t)];
    const int y = tr.states[static_cast<std::size_t>(t + 1)];
    const std::size_t gi = static_cast<std::size_t>((t + 1) % static_cast<long long>(g.g.size()));
    const Eigen::VectorXd xi = (g.g[gi].row(y) - pg[gi].row(x)).transpose();
    if (t < n) {
      out.M_n += xi;
      out.S_n += hc[static_cast<std::size_t>(t % period)].row(x).transpose();
    } else if (t < t_end) {
      out.remainder_R_n += xi;
    }
    cur += xi;
    if (next_regen < tr.regen_times.size() && t + 1 == tr.regen_times[next_regen]) {
      out.tilde_M.push_back(cur);
      if (static_cast<long long>(next_regen) < *kn) upto_kn += cur;
      cur.setZero();
      ++next_regen;
    }
  }
  out.boundary = (g.at(0).row(tr.states[0]) - g.at(n).row(tr.states[static_cast<std::size_t>(n)])).transpose();
  out.identity_error = (out.S_n - out.boundary - out.M_n).cwiseAbs().maxCoeff();
  out.cycle_sum_error = (upto_kn - out.remainder_R_n - out.M_n).cwiseAbs().maxCoeff();
  return out;
}

inline CycleIncrements cycle_increments(const FiniteChain& chain, const SplitTrace& tr, const PoissonSolution& sol, long long n,
                                        std::optional<double> mean_cycle = std::nullopt) {
  PoissonSequence seq;
  seq.g.push_back(sol.g);
  seq.pi = sol.pi;
  return cycle_increments(chain, tr, seq, n, mean_cycle);
}

struct KnRow {
  long long n = 0;
  double mean_abs = 0.0;
  double mean_abs_se = 0.0;
  double mean_pow = 0.0;  // E|K_n − k_n|^{p/2}
  double mean_pow_se = 0.0;
  double ratio = 0.0;     // E|K_n − k_n| / √n
  long long k_n = 0;
};

struct KnTable {
  double mean_cycle = 0.0;
  double mean_cycle_se = 0.0;
  std::vector<KnRow> rows;
};

inline KnTable kn_concentration(const std::vector<SplitTrace>& traces, const std::vector<long long>& n_grid, double p = 2.0,
                                std::optional<double> mean_cycle = std::nullopt) {
  require(!traces.empty(), ErrorCode::TooFewCycles, "no traces");
  KnTable table;
  {
    double sum = 0, sq = 0;
    std::size_t count = 0;
    for (const auto& tr : traces) {
      const auto lam = tr.cycle_lengths();
      for (std::size_t i = 1; i < lam.size(); ++i) {
        const double v = static_cast<double>(lam[i]);
        sum += v;
        sq += v * v;
        ++count;
      }
    }
    require(count >= 100, ErrorCode::TooFewCycles, "need at least 100 cycles beyond the first");
    const double mean = sum / static_cast<double>(count);
    table.mean_cycle = mean_cycle ? *mean_cycle : mean;
    table.mean_cycle_se = mean_cycle ? 0.0 : std::sqrt(std::max(0.0, sq / static_cast<double>(count) - mean * mean) / static_cast<double>(count));
  }
  for (long long n : n_grid) {
    KnRow row;
    row.n = n;
    row.k_n = k_small(n, table.mean_cycle);
    std::vector<double> a, b;
    for (const auto& tr : traces) {
      const auto kn = k_big(tr.regen_times, n);
      require(kn.has_value(), ErrorCode::MissingRegens, "a trace has no regeneration after n; extend the simulation");
      const double diff = std::abs(static_cast<double>(*kn - row.k_n));
      a.push_back(diff);
      b.push_back(std::pow(diff, p / 2.0));
    }
    auto mean_se = [](const std::vector<double>& v) {
      double m = 0, ss = 0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      for (double x : v) ss += (x - m) * (x - m);
      const double se = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size())) : 0.0;
      return std::pair{m, se};
    };
    std::tie(row.mean_abs, row.mean_abs_se) = mean_se(a);
    std::tie(row.mean_pow, row.mean_pow_se) = mean_se(b);
    row.ratio = row.mean_abs / std::sqrt(static_cast<double>(n));
    table.rows.push_back(row);
  }
  return table;
}

}  // namespace cltlab
