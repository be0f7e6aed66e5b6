#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "errors.hpp"
#include "json.hpp"
#include "linalg_gauss.hpp"
#include "rng.hpp"

namespace cltlab {

// Finite-state chain with observation map h (s × d per time index), Lyapunov
// function V and small set C̄. With more than one obs array, h_t = obs[t mod L].
struct FiniteChain {
  Eigen::MatrixXd kernel;
  std::vector<Eigen::MatrixXd> obs;
  Eigen::VectorXd V;
  std::vector<int> small_set;

  FiniteChain() = default;
  FiniteChain(Eigen::MatrixXd p, Eigen::MatrixXd h) : kernel(std::move(p)) {
    obs.push_back(std::move(h));
    V = Eigen::VectorXd::Ones(kernel.rows());
    validate();
  }

  int s() const { return static_cast<int>(kernel.rows()); }
  int d() const { return obs.empty() ? 0 : static_cast<int>(obs.front().cols()); }
  bool homogeneous() const { return obs.size() == 1; }
  const Eigen::MatrixXd& h(long long t) const { return obs[static_cast<std::size_t>(t % static_cast<long long>(obs.size()))]; }

  bool in_small_set(int x) const { return std::find(small_set.begin(), small_set.end(), x) != small_set.end(); }

  void validate() const {
    const Eigen::Index n = kernel.rows();
    require(n >= 1 && kernel.cols() == n, ErrorCode::NotStochastic, "kernel must be a non-empty square matrix");
    require(kernel.allFinite() && kernel.minCoeff() >= 0.0, ErrorCode::NotStochastic, "kernel entries must be finite and >= 0");
    for (Eigen::Index i = 0; i < n; ++i)
      require(std::abs(kernel.row(i).sum() - 1.0) <= 1e-12, ErrorCode::NotStochastic,
              "kernel row " + std::to_string(i) + " does not sum to 1");
    require(!obs.empty(), ErrorCode::InvalidConfig, "chain needs an observation map");
    for (const auto& h : obs) {
      require(h.rows() == n && h.cols() == obs.front().cols() && h.cols() >= 1, ErrorCode::DimMismatch,
              "observation arrays must be s × d with a common d");
      require(h.allFinite(), ErrorCode::InvalidConfig, "observation map has non-finite entries");
    }
    require(V.size() == n, ErrorCode::DimMismatch, "Lyapunov vector must have one entry per state");
    require(V.minCoeff() >= 1.0, ErrorCode::InvalidConfig, "Lyapunov function must satisfy V >= 1");
    for (int x : small_set) require(x >= 0 && x < n, ErrorCode::InvalidConfig, "small set state out of range");
  }
};

inline nlohmann::json chain_to_json(const FiniteChain& c) {
  auto mat = [](const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      nlohmann::json r = nlohmann::json::array();
      for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
      rows.push_back(r);
    }
    return rows;
  };
  nlohmann::json j;
  j["kernel"] = mat(c.kernel);
  if (c.homogeneous()) {
    j["obs"] = mat(c.obs.front());
  } else {
    j["obs"] = nlohmann::json::array();
    for (const auto& h : c.obs) j["obs"].push_back(mat(h));
  }
  j["V"] = std::vector<double>(c.V.data(), c.V.data() + c.V.size());
  j["small_set"] = c.small_set;
  return j;
}

namespace detail {

inline Eigen::MatrixXd json_matrix(const nlohmann::json& j, const std::string& what) {
  require(j.is_array() && !j.empty() && j.front().is_array(), ErrorCode::InvalidConfig, what + " must be a 2-D array");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j.front().size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& r = j[static_cast<std::size_t>(i)];
    require(r.is_array() && static_cast<Eigen::Index>(r.size()) == cols, ErrorCode::InvalidConfig, what + " rows must have equal length");
    for (Eigen::Index k = 0; k < cols; ++k) {
      require(r[static_cast<std::size_t>(k)].is_number(), ErrorCode::InvalidConfig, what + " entries must be numbers");
      m(i, k) = r[static_cast<std::size_t>(k)].get<double>();
    }
  }
  return m;
}

}  // namespace detail

// Obs may be an s × d array, a flat length-s array (d = 1) or a list of s × d arrays.
inline FiniteChain chain_from_json(const nlohmann::json& j) {
  require(j.is_object() && j.contains("kernel") && j.contains("obs"), ErrorCode::InvalidConfig,
          "chain needs \"kernel\" and \"obs\"");
  FiniteChain c;
  c.kernel = detail::json_matrix(j.at("kernel"), "kernel");
  const auto& o = j.at("obs");
  require(o.is_array() && !o.empty(), ErrorCode::InvalidConfig, "obs must be a non-empty array");
  if (o.front().is_number()) {
    Eigen::MatrixXd h(static_cast<Eigen::Index>(o.size()), 1);
    for (std::size_t i = 0; i < o.size(); ++i) h(static_cast<Eigen::Index>(i), 0) = o[i].get<double>();
    c.obs.push_back(h);
  } else if (o.front().is_array() && !o.front().empty() && o.front().front().is_array()) {
    for (const auto& h : o) c.obs.push_back(detail::json_matrix(h, "obs"));
  } else {
    c.obs.push_back(detail::json_matrix(o, "obs"));
  }
  if (j.contains("V")) {
    const auto v = j.at("V").get<std::vector<double>>();
    c.V = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  } else {
    c.V = Eigen::VectorXd::Ones(c.kernel.rows());
  }
  if (j.contains("small_set")) c.small_set = j.at("small_set").get<std::vector<int>>();
  c.validate();
  return c;
}

inline FiniteChain load_chain(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::IoError, "cannot open chain file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("chain file is not valid JSON: ") + e.what());
  }
  return chain_from_json(j);
}

struct ChainStructure {
  bool irreducible = false;
  int period = 0;  // 0 when reducible
  bool aperiodic() const { return irreducible && period == 1; }
};

// Irreducibility by forward/backward reachability from state 0; the period is
// the gcd of dist(u) + 1 − dist(v) over edges u → v of the BFS layering.
inline ChainStructure analyze_structure(const Eigen::MatrixXd& p) {
  const int s = static_cast<int>(p.rows());
  auto reach = [&](bool forward) {
    std::vector<int> dist(static_cast<std::size_t>(s), -1);
    std::queue<int> q;
    dist[0] = 0;
    q.push(0);
    while (!q.empty()) {
      const int u = q.front();
      q.pop();
      for (int v = 0; v < s; ++v) {
        const double w = forward ? p(u, v) : p(v, u);
        if (w > 0.0 && dist[static_cast<std::size_t>(v)] < 0) {
          dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
          q.push(v);
        }
      }
    }
    return dist;
  };
  const auto fwd = reach(true);
  const auto bwd = reach(false);
  ChainStructure out;
  out.irreducible = std::none_of(fwd.begin(), fwd.end(), [](int d) { return d < 0; }) &&
                    std::none_of(bwd.begin(), bwd.end(), [](int d) { return d < 0; });
  if (!out.irreducible) return out;
  int g = 0;
  for (int u = 0; u < s; ++u)
    for (int v = 0; v < s; ++v)
      if (p(u, v) > 0.0) g = std::gcd(g, std::abs(fwd[static_cast<std::size_t>(u)] + 1 - fwd[static_cast<std::size_t>(v)]));
  out.period = g;
  return out;
}

inline Eigen::VectorXd stationary_dist(const FiniteChain& chain) {
  require(analyze_structure(chain.kernel).irreducible, ErrorCode::Reducible, "chain is not irreducible");
  const Eigen::Index s = chain.kernel.rows();
  Eigen::MatrixXd a(s + 1, s);
  a.topRows(s) = chain.kernel.transpose() - Eigen::MatrixXd::Identity(s, s);
  a.row(s).setOnes();
  Eigen::VectorXd b = Eigen::VectorXd::Zero(s + 1);
  b(s) = 1.0;
  Eigen::VectorXd pi = a.colPivHouseholderQr().solve(b);
  pi = pi.cwiseMax(0.0);
  pi /= pi.sum();
  return pi;
}

struct DriftReport {
  bool holds = false;
  double max_violation = 0.0;  // max_x (PV)(x) − λV(x) − L·1_C̄(x)
  int worst_state = 0;
};

inline DriftReport drift_verify(const FiniteChain& chain, double lambda, double L) {
  const Eigen::VectorXd pv = chain.kernel * chain.V;
  DriftReport r;
  r.max_violation = -std::numeric_limits<double>::infinity();
  for (int x = 0; x < chain.s(); ++x) {
    const double bound = lambda * chain.V(x) + (chain.in_small_set(x) ? L : 0.0);
    const double v = pv(x) - bound;
    if (v > r.max_violation) {
      r.max_violation = v;
      r.worst_state = x;
    }
  }
  r.holds = r.max_violation <= 1e-12 * std::max(1.0, chain.V.maxCoeff());
  return r;
}

struct DriftConstants {
  double lambda = 0.0;
  double L = 0.0;
};

// Smallest λ over states outside C̄, then smallest L making the small-set
// states comply. λ ≥ 1 means no valid drift for this V and C̄.
inline DriftConstants minimal_drift_constants(const FiniteChain& chain) {
  const Eigen::VectorXd pv = chain.kernel * chain.V;
  DriftConstants c;
  for (int x = 0; x < chain.s(); ++x)
    if (!chain.in_small_set(x)) c.lambda = std::max(c.lambda, pv(x) / chain.V(x));
  for (int x = 0; x < chain.s(); ++x)
    if (chain.in_small_set(x)) c.L = std::max(c.L, pv(x) - c.lambda * chain.V(x));
  return c;
}

// h − π(h), one array per time index.
inline std::vector<Eigen::MatrixXd> centered_obs(const FiniteChain& chain, const Eigen::VectorXd& pi) {
  std::vector<Eigen::MatrixXd> out;
  for (const auto& h : chain.obs) {
    const Eigen::RowVectorXd mean = pi.transpose() * h;
    out.push_back(h.rowwise() - mean);
  }
  return out;
}

struct PoissonSolution {
  Eigen::MatrixXd g;  // s × d
  double residual = 0.0;
  Eigen::VectorXd pi;
};

// (I − P)g = h − π(h) with π·g = 0, solved as one stacked least-squares system.
inline PoissonSolution poisson_solve(const FiniteChain& chain) {
  require(chain.homogeneous(), ErrorCode::InvalidConfig, "poisson_solve needs a homogeneous observation map");
  PoissonSolution sol;
  sol.pi = stationary_dist(chain);
  const Eigen::Index s = chain.kernel.rows();
  const Eigen::MatrixXd hc = centered_obs(chain, sol.pi).front();
  Eigen::MatrixXd a(s + 1, s);
  a.topRows(s) = Eigen::MatrixXd::Identity(s, s) - chain.kernel;
  a.row(s) = sol.pi.transpose();
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(s + 1, hc.cols());
  b.topRows(s) = hc;
  sol.g = a.colPivHouseholderQr().solve(b);
  const Eigen::MatrixXd res = (Eigen::MatrixXd::Identity(s, s) - chain.kernel) * sol.g - hc;
  sol.residual = res.cwiseAbs().maxCoeff();
  return sol;
}

// Smallest k with max_x ‖P^k(x,·) − π‖_1 < tol.
inline int mixing_window(const FiniteChain& chain, const Eigen::VectorXd& pi, double tol = 1e-12, int cap = 1000000) {
  const Eigen::Index s = chain.kernel.rows();
  Eigen::MatrixXd pk = Eigen::MatrixXd::Identity(s, s);
  for (int k = 0; k < cap; ++k) {
    double worst = 0.0;
    for (Eigen::Index x = 0; x < s; ++x) worst = std::max(worst, (pk.row(x) - pi.transpose()).cwiseAbs().sum());
    if (worst < tol) return k;
    pk = pk * chain.kernel;
  }
  fail(ErrorCode::NotErgodic, "chain does not mix within the window cap (periodic?)");
}

// g_t = Σ_{k≥0} P^k h_{t+k} (centered h) for t = 0 .. count−1, truncated at
// the mixing window. Homogeneous chains return count copies of one solution.
struct PoissonSequence {
  std::vector<Eigen::MatrixXd> g;  // period-many entries; g_t = g[t mod period]
  Eigen::VectorXd pi;
  int window = 0;

  const Eigen::MatrixXd& at(long long t) const { return g[static_cast<std::size_t>(t % static_cast<long long>(g.size()))]; }
};

inline PoissonSequence poisson_sequence(const FiniteChain& chain) {
  PoissonSequence seq;
  if (chain.homogeneous()) {
    PoissonSolution sol = poisson_solve(chain);
    seq.g.push_back(sol.g);
    seq.pi = sol.pi;
    return seq;
  }
  seq.pi = stationary_dist(chain);
  const auto hc = centered_obs(chain, seq.pi);
  const long long period = static_cast<long long>(hc.size());
  seq.window = mixing_window(chain, seq.pi);
  const long long w = seq.window;
  for (long long t = 0; t < period; ++t) {
    // Backward recursion g ← h_{t+k} + P g from k = window down to 0.
    Eigen::MatrixXd acc = hc[static_cast<std::size_t>((t + w) % period)];
    for (long long k = w - 1; k >= 0; --k) acc = hc[static_cast<std::size_t>((t + k) % period)] + chain.kernel * acc;
    seq.g.push_back(acc);
  }
  return seq;
}

struct CovariancePair {
  PsdMatrix sigma_n;
  PsdMatrix sigma_infty;
  long long n = 0;
};

// Clamps negative eigenvalues that are rounding noise relative to `scale`.
inline Eigen::MatrixXd clamp_rounding(const Eigen::MatrixXd& a, double scale) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(a));
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    if (ev(i) < 0.0 && ev(i) >= -1e-12 * scale) ev(i) = 0.0;
  return symmetrize(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
}

// Σ_∞ = Σ_x π(x)·(Σ_y P(x,y) g(y)g(y)ᵀ − Pg(x)·Pg(x)ᵀ).
inline PsdMatrix sigma_infinity(const FiniteChain& chain, const PoissonSolution& sol) {
  const Eigen::Index d = sol.g.cols();
  const Eigen::MatrixXd pg = chain.kernel * sol.g;
  Eigen::MatrixXd sig = Eigen::MatrixXd::Zero(d, d);
  for (int x = 0; x < chain.s(); ++x) {
    Eigen::MatrixXd hx = -pg.row(x).transpose() * pg.row(x);
    for (int y = 0; y < chain.s(); ++y) hx += chain.kernel(x, y) * sol.g.row(y).transpose() * sol.g.row(y);
    sig += sol.pi(x) * hx;
  }
  return PsdMatrix(clamp_rounding(sig, std::max(sol.g.cwiseAbs().maxCoeff() * sol.g.cwiseAbs().maxCoeff(), 1e-300)));
}

// Var(S_n)/n for S_n = Σ_{t<n} (h(x_t) − π(h)) with x_0 ~ init (π when empty).
// Uses E[h(x_i)h(x_j)ᵀ] = Σ_x (μP^i)(x) h(x) (P^{j−i}h)(x)ᵀ with running sums
// A_r = Σ_{k=1}^{r} P^k h, so the cost is O(n·s²·d).
inline PsdMatrix exact_sigma_n(const FiniteChain& chain, long long n, const Eigen::VectorXd& pi,
                               const std::optional<Eigen::VectorXd>& init = std::nullopt) {
  require(chain.homogeneous(), ErrorCode::InvalidConfig, "exact Σ_n needs a homogeneous observation map");
  require(n >= 1, ErrorCode::InvalidConfig, "horizon n must be >= 1");
  const Eigen::MatrixXd h = centered_obs(chain, pi).front();
  const Eigen::Index s = h.rows();
  const Eigen::Index d = h.cols();
  std::vector<Eigen::MatrixXd> a(static_cast<std::size_t>(n));
  a[0] = Eigen::MatrixXd::Zero(s, d);
  Eigen::MatrixXd pk_h = h;
  for (long long r = 1; r < n; ++r) {
    pk_h = chain.kernel * pk_h;
    a[static_cast<std::size_t>(r)] = a[static_cast<std::size_t>(r - 1)] + pk_h;
  }
  Eigen::RowVectorXd mu = init ? init->transpose() : pi.transpose();
  require(mu.size() == s, ErrorCode::DimMismatch, "initial distribution must have one entry per state");
  Eigen::MatrixXd second = Eigen::MatrixXd::Zero(d, d);
  Eigen::RowVectorXd first = Eigen::RowVectorXd::Zero(d);
  for (long long i = 0; i < n; ++i) {
    const Eigen::MatrixXd& ar = a[static_cast<std::size_t>(n - 1 - i)];
    for (Eigen::Index x = 0; x < s; ++x) {
      if (mu(x) == 0.0) continue;
      const Eigen::RowVectorXd hx = h.row(x);
      const Eigen::MatrixXd cross = hx.transpose() * ar.row(x);
      second += mu(x) * (hx.transpose() * hx + cross + cross.transpose());
      first += mu(x) * hx;
    }
    mu = mu * chain.kernel;
  }
  const Eigen::MatrixXd var = second - first.transpose() * first;
  const double scale = std::max(second.cwiseAbs().maxCoeff(), 1e-300);
  return PsdMatrix(clamp_rounding(var, scale) / static_cast<double>(n));
}

inline CovariancePair exact_covariances(const FiniteChain& chain, long long n,
                                        const std::optional<Eigen::VectorXd>& init = std::nullopt) {
  const PoissonSolution sol = poisson_solve(chain);
  return {exact_sigma_n(chain, n, sol.pi, init), sigma_infinity(chain, sol), n};
}

inline FiniteChain time_reversal(const FiniteChain& chain) {
  const Eigen::VectorXd pi = stationary_dist(chain);
  FiniteChain r = chain;
  for (int y = 0; y < chain.s(); ++y) {
    for (int x = 0; x < chain.s(); ++x) r.kernel(y, x) = pi(x) * chain.kernel(x, y) / pi(y);
    r.kernel.row(y) /= r.kernel.row(y).sum();
  }
  return r;
}

// Inverse-CDF sampling from the rows of a kernel.
class KernelSampler {
 public:
  explicit KernelSampler(const Eigen::MatrixXd& p) : s_(static_cast<int>(p.rows())), cdf_(static_cast<std::size_t>(p.size())) {
    for (int x = 0; x < s_; ++x) {
      double acc = 0.0;
      for (int y = 0; y < s_; ++y) {
        acc += p(x, y);
        cdf_[idx(x, y)] = acc;
      }
      cdf_[idx(x, s_ - 1)] = 2.0;  // absorb rounding in the row sum
    }
  }

  int step(int x, Engine& eng) const {
    const double u = uniform01(eng);
    const double* row = &cdf_[idx(x, 0)];
    int y = 0;
    while (u >= row[y]) ++y;
    return y;
  }

  int states() const { return s_; }

 private:
  std::size_t idx(int x, int y) const { return static_cast<std::size_t>(x) * static_cast<std::size_t>(s_) + static_cast<std::size_t>(y); }
  int s_;
  std::vector<double> cdf_;
};

inline int sample_from(const Eigen::RowVectorXd& prob, Engine& eng) {
  const double u = uniform01(eng) * prob.sum();
  double acc = 0.0;
  int last = 0;
  for (Eigen::Index y = 0; y < prob.size(); ++y) {
    if (prob(y) <= 0.0) continue;
    last = static_cast<int>(y);
    acc += prob(y);
    if (u < acc) return last;
  }
  return last;
}

// x_0 .. x_steps.
inline std::vector<int> simulate_path(const KernelSampler& ks, int x0, long long steps, Engine& eng) {
  std::vector<int> path(static_cast<std::size_t>(steps + 1));
  path[0] = x0;
  for (long long t = 1; t <= steps; ++t) path[static_cast<std::size_t>(t)] = ks.step(path[static_cast<std::size_t>(t - 1)], eng);
  return path;
}

struct CoupledPaths {
  std::vector<int> x, y;
  std::optional<long long> meeting_time;
};

// One-step maximal coupling: with probability Σ_z min(p, q)(z) both move to a
// common draw, otherwise each moves by its normalized residual.
inline CoupledPaths coupled_paths(const FiniteChain& chain, int x0, int y0, std::uint64_t seed, long long steps) {
  require(x0 >= 0 && x0 < chain.s() && y0 >= 0 && y0 < chain.s(), ErrorCode::InvalidConfig, "start state out of range");
  Engine eng(seed);
  CoupledPaths out;
  out.x.push_back(x0);
  out.y.push_back(y0);
  if (x0 == y0) out.meeting_time = 0;
  for (long long t = 1; t <= steps; ++t) {
    const int a = out.x.back();
    const int b = out.y.back();
    if (a == b) {
      const int z = sample_from(chain.kernel.row(a), eng);
      out.x.push_back(z);
      out.y.push_back(z);
      continue;
    }
    const Eigen::RowVectorXd p = chain.kernel.row(a);
    const Eigen::RowVectorXd q = chain.kernel.row(b);
    const Eigen::RowVectorXd common = p.cwiseMin(q);
    const double c = common.sum();
    if (uniform01(eng) < c) {
      const int z = sample_from(common, eng);
      out.x.push_back(z);
      out.y.push_back(z);
      out.meeting_time = t;
    } else {
      out.x.push_back(sample_from(p - common, eng));
      out.y.push_back(sample_from(q - common, eng));
    }
  }
  return out;
}

struct MeetingResult {
  bool met = false;
  long long time = 0;  // T⁺ when met, else the horizon
};

inline MeetingResult meeting_time_sample(const FiniteChain& chain, int x, int y, std::uint64_t seed, long long horizon) {
  require(x >= 0 && x < chain.s() && y >= 0 && y < chain.s(), ErrorCode::InvalidConfig, "start state out of range");
  if (x == y) return {true, 0};
  Engine eng(seed);
  int a = x;
  int b = y;
  for (long long t = 1; t <= horizon; ++t) {
    const Eigen::RowVectorXd p = chain.kernel.row(a);
    const Eigen::RowVectorXd q = chain.kernel.row(b);
    const Eigen::RowVectorXd common = p.cwiseMin(q);
    if (uniform01(eng) < common.sum()) return {true, t};
    a = sample_from(p - common, eng);
    b = sample_from(q - common, eng);
  }
  return {false, horizon};
}

}  // namespace cltlab
