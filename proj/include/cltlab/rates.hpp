#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "generators.hpp"
#include "json.hpp"
#include "linalg_gauss.hpp"
#include "markov_exact.hpp"
#include "parallel.hpp"
#include "point_cloud.hpp"
#include "rng.hpp"
#include "transport.hpp"
#include "ustat.hpp"

namespace cltlab {

// ---------------------------------------------------------------- settings

enum class SettingKind { IndepW1, LocalW1, MdepWp, MarkovW1, MarkovWp, IndepWp, UstatW1 };

struct Setting {
  SettingKind kind = SettingKind::IndepW1;
  double delta = 1.0;
  double p = 2.0;
  double q = 2.0;
};

inline std::string setting_name(SettingKind k) {
  switch (k) {
    case SettingKind::IndepW1: return "indep_w1";
    case SettingKind::LocalW1: return "local_w1";
    case SettingKind::MdepWp: return "mdep_wp";
    case SettingKind::MarkovW1: return "markov_w1";
    case SettingKind::MarkovWp: return "markov_wp";
    case SettingKind::IndepWp: return "indep_wp";
    case SettingKind::UstatW1: return "ustat_w1";
  }
  return "unknown";
}

namespace detail {

inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline bool uses_delta(SettingKind k) {
  return k == SettingKind::IndepW1 || k == SettingKind::LocalW1 || k == SettingKind::MarkovW1;
}

inline bool uses_pq(SettingKind k) {
  return k == SettingKind::MdepWp || k == SettingKind::MarkovWp || k == SettingKind::IndepWp;
}

}  // namespace detail

inline std::string setting_label(const Setting& s) {
  std::string out = setting_name(s.kind);
  if (detail::uses_delta(s.kind)) out += "(delta=" + detail::fmt_num(s.delta) + ")";
  if (detail::uses_pq(s.kind)) out += "(p=" + detail::fmt_num(s.p) + ",q=" + detail::fmt_num(s.q) + ")";
  return out;
}

// Accepts "mdep_wp(p=2,q=2)", "indep_w1(delta=0.5)", "ustat_w1", or a bare name.
inline Setting parse_setting(const std::string& text) {
  const auto open = text.find('(');
  const std::string name = text.substr(0, open);
  Setting s;
  static const std::map<std::string, SettingKind> kinds = {
      {"indep_w1", SettingKind::IndepW1}, {"local_w1", SettingKind::LocalW1}, {"mdep_wp", SettingKind::MdepWp},
      {"markov_w1", SettingKind::MarkovW1}, {"markov_wp", SettingKind::MarkovWp}, {"indep_wp", SettingKind::IndepWp},
      {"ustat_w1", SettingKind::UstatW1}};
  const auto it = kinds.find(name);
  require(it != kinds.end(), ErrorCode::BadSetting, "unknown setting '" + name + "'");
  s.kind = it->second;
  if (open == std::string::npos) return s;
  const auto close = text.find(')', open);
  require(close == text.size() - 1, ErrorCode::BadSetting, "malformed setting '" + text + "'");
  std::stringstream args(text.substr(open + 1, close - open - 1));
  std::string item;
  while (std::getline(args, item, ',')) {
    const auto eq = item.find('=');
    require(eq != std::string::npos, ErrorCode::BadSetting, "setting arguments must be key=value");
    const std::string key = item.substr(0, eq);
    double v;
    try {
      v = std::stod(item.substr(eq + 1));
    } catch (...) {
      fail(ErrorCode::BadSetting, "setting argument '" + item + "' is not a number");
    }
    if (key == "delta") s.delta = v;
    else if (key == "p") s.p = v;
    else if (key == "q") s.q = v;
    else fail(ErrorCode::BadSetting, "unknown setting argument '" + key + "'");
  }
  return s;
}

// Exponent a in the bound O(n^a). δ above 1 gives the δ = 1 rate for the
// independent and local rows; the δ = 1 Markov row carries a log factor that
// an exponent cannot express.
inline double theoretical_exponent(const Setting& s) {
  auto pq_check = [&] {
    require(std::isfinite(s.p) && s.p >= 2.0, ErrorCode::BadSetting, "W_p settings need p >= 2");
    require(s.q > 0.0 && s.q <= 2.0, ErrorCode::BadSetting, "W_p settings need q in (0, 2]");
  };
  switch (s.kind) {
    case SettingKind::IndepW1:
    case SettingKind::LocalW1:
      require(std::isfinite(s.delta) && s.delta > 0.0, ErrorCode::BadSetting, "delta must be > 0");
      return -std::min(s.delta, 1.0) / 2.0;
    case SettingKind::MarkovW1:
      require(std::isfinite(s.delta) && s.delta > 0.0, ErrorCode::BadSetting, "delta must be > 0");
      return s.delta >= 1.0 ? -0.5 : -s.delta / 2.0;
    case SettingKind::MdepWp:
    case SettingKind::MarkovWp:
      pq_check();
      return -(s.p + s.q - 2.0) / (2.0 * (2.0 * s.p + s.q - 2.0));
    case SettingKind::IndepWp:
      pq_check();
      return -(s.p + s.q - 2.0) / (2.0 * s.p);
    case SettingKind::UstatW1: return -0.5;
  }
  fail(ErrorCode::BadSetting, "unknown setting");
}

// ---------------------------------------------------------------- sources

// A law of normalized sums at each n, with the Gaussian it is compared to.
struct SumSource {
  std::string kind;
  std::string description;
  Eigen::Index d = 1;
  std::function<Eigen::VectorXd(long long n, Engine& eng)> draw;
  std::function<PsdMatrix(long long n)> target_cov;
  bool exact_target = true;
  std::function<PsdMatrix()> sigma_infinity;  // set for homogeneous chains
  std::vector<std::string> warnings;
};

// Σ of k i.i.d. profile draws, using exact laws of the sum where one exists.
inline double sum_of_draws(const MomentProfile& prof, long long k, Engine& eng) {
  if (k <= 0) return 0.0;
  switch (prof.family) {
    case ProfileFamily::Gaussian: {
      std::normal_distribution<double> nd;
      return std::sqrt(static_cast<double>(k)) * nd(eng);
    }
    case ProfileFamily::CenteredExponential: {
      std::gamma_distribution<double> g(static_cast<double>(k), 1.0);
      return g(eng) - static_cast<double>(k);
    }
    case ProfileFamily::Rademacher: {
      std::binomial_distribution<long long> b(k, 0.5);
      return 2.0 * static_cast<double>(b(eng)) - static_cast<double>(k);
    }
    case ProfileFamily::SymmetrizedPareto: {
      // same bits-to-draw map as MomentProfile::draw, batched so log/exp vectorize
      constexpr long long kBatch = 512;
      Eigen::ArrayXd u(kBatch), sign(kBatch);
      const double expo = -1.0 / prof.alpha;
      double s = 0.0;
      for (long long done = 0; done < k; done += kBatch) {
        const auto b = static_cast<Eigen::Index>(std::min(kBatch, k - done));
        for (Eigen::Index i = 0; i < b; ++i) {
          const std::uint64_t bits = eng();
          u[i] = 1.0 - static_cast<double>(bits >> 11) * 0x1.0p-53;
          sign[i] = static_cast<double>(bits & 1ULL) * 2.0 - 1.0;
        }
        s += (sign.head(b) * (expo * u.head(b).log()).exp()).sum();
      }
      return prof.pareto_scale() * s;
    }
  }
  return 0.0;
}

inline SumSource iid_source(Eigen::Index d, const MomentProfile& prof) {
  prof.validate();
  SumSource src;
  src.kind = "iid";
  src.description = "iid " + prof.name() + " d=" + std::to_string(d);
  src.d = d;
  src.draw = [d, prof](long long n, Engine& eng) {
    Eigen::VectorXd v(d);
    for (Eigen::Index j = 0; j < d; ++j) v(j) = sum_of_draws(prof, n, eng) / std::sqrt(static_cast<double>(n));
    return v;
  };
  src.target_cov = [d](long long) { return PsdMatrix::identity(d); };
  return src;
}

// MA(M): X_i = Σ_{j=i}^{i+M} Z_j / √(M+1). Innovations in the interior of the
// window range all carry weight √(M+1), so their sum is drawn in one go.
inline SumSource mdep_source(Eigen::Index d, int M, const MomentProfile& prof) {
  prof.validate();
  require(M >= 0, ErrorCode::InvalidConfig, "dependence range M must be >= 0");
  SumSource src;
  src.kind = "m-dependent";
  src.description = "ma(" + std::to_string(M) + ") " + prof.name() + " d=" + std::to_string(d);
  src.d = d;
  src.draw = [d, M, prof](long long n, Engine& eng) {
    require(n > M, ErrorCode::InvalidConfig, "MA source needs n > M");
    const double root = std::sqrt(M + 1.0);
    Eigen::VectorXd v(d);
    for (Eigen::Index c = 0; c < d; ++c) {
      double s = root * sum_of_draws(prof, n - M, eng);
      for (long long j = 0; j < M; ++j) s += static_cast<double>(j + 1) / root * prof.draw(eng);            // head
      for (long long j = n; j < n + M; ++j) s += static_cast<double>(n + M - j) / root * prof.draw(eng);  // tail
      v(c) = s / std::sqrt(static_cast<double>(n));
    }
    return v;
  };
  src.target_cov = [d, M](long long n) { return PsdMatrix::scalar(d, exact_sigma_n_ma(n, M, 1.0)(0, 0)); };
  return src;
}

// Graph family by name, instantiated at each n.
inline DependencyGraph graph_for(const std::string& family, long long n, int k) {
  const int nn = static_cast<int>(n);
  if (family == "edgeless") return DependencyGraph::edgeless(nn);
  if (family == "path") return DependencyGraph::path(nn);
  if (family == "cycle") return DependencyGraph::cycle(nn);
  if (family == "k-neighborhood") return DependencyGraph::k_neighborhood(nn, k);
  if (family == "grid") {
    int rows = static_cast<int>(std::sqrt(static_cast<double>(n)));
    while (rows > 1 && n % rows != 0) --rows;
    return DependencyGraph::grid(rows, nn / rows);
  }
  fail(ErrorCode::InvalidConfig, "unknown graph family '" + family + "'");
}

// X_i = Σ_{j∈N[i]} Z_j / √|N[i]|, so S_n = Σ_j c_j Z_j with c_j = Σ_{i∋j} 1/√|N[i]|.
inline SumSource local_graph_source(Eigen::Index d, const std::string& family, int k, const MomentProfile& prof) {
  prof.validate();
  struct Cache {
    std::mutex mu;
    std::map<long long, std::shared_ptr<const std::vector<double>>> weights;
  };
  auto cache = std::make_shared<Cache>();
  auto weights = [cache, family, k](long long n) {
    std::lock_guard<std::mutex> lk(cache->mu);
    auto& slot = cache->weights[n];
    if (!slot) {
      const DependencyGraph g = graph_for(family, n, k);
      auto w = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), 0.0);
      for (int i = 0; i < g.n(); ++i) {
        const auto nb = g.closed_neighborhood(i);
        const double inv = 1.0 / std::sqrt(static_cast<double>(nb.size()));
        for (int j : nb) (*w)[static_cast<std::size_t>(j)] += inv;
      }
      slot = w;
    }
    return slot;
  };
  SumSource src;
  src.kind = "local-graph";
  src.description = "local-graph " + family + " " + prof.name() + " d=" + std::to_string(d);
  src.d = d;
  src.draw = [d, prof, weights](long long n, Engine& eng) {
    const auto w = weights(n);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
    for (Eigen::Index c = 0; c < d; ++c) {
      double s = 0.0;
      for (double wj : *w) s += wj * prof.draw(eng);
      v(c) = s / std::sqrt(static_cast<double>(n));
    }
    return v;
  };
  src.target_cov = [d, family, k](long long n) {
    return PsdMatrix::scalar(d, exact_sigma_n_local(graph_for(family, n, k), 1.0)(0, 0));
  };
  return src;
}

// Stationary chain; S_n = Σ_{t<n} (h_t(x_t) − π(h_t)).
inline SumSource markov_source(const FiniteChain& chain) {
  chain.validate();
  const Eigen::VectorXd pi = stationary_dist(chain);
  const auto hc = std::make_shared<const std::vector<Eigen::MatrixXd>>(centered_obs(chain, pi));
  const auto ks = std::make_shared<const KernelSampler>(chain.kernel);
  SumSource src;
  src.kind = "markov";
  src.description = "markov s=" + std::to_string(chain.s()) + " d=" + std::to_string(chain.d());
  src.d = chain.d();
  src.draw = [hc, ks, pi](long long n, Engine& eng) {
    const Eigen::Index d = hc->front().cols();
    const long long period = static_cast<long long>(hc->size());
    Eigen::VectorXd s = Eigen::VectorXd::Zero(d);
    int x = sample_from(pi.transpose(), eng);
    for (long long t = 0; t < n; ++t) {
      if (t > 0) x = ks->step(x, eng);
      s += (*hc)[static_cast<std::size_t>(t % period)].row(x).transpose();
    }
    return Eigen::VectorXd(s / std::sqrt(static_cast<double>(n)));
  };
  src.target_cov = [chain, pi](long long n) { return exact_sigma_n(chain, n, pi); };
  if (chain.homogeneous()) src.sigma_infinity = [chain] { return sigma_infinity(chain, poisson_solve(chain)); };
  return src;
}

// √n (U_n − θ) / r against N(0, Var(E[h | Z_0])).
inline SumSource ustat_source(const UKernel& kernel, const MomentProfile& prof, std::uint64_t seed = 0x5eedULL) {
  prof.validate();
  const bool paired = kernel.name.rfind("subbag", 0) == 0;
  const ZSampler sampler = paired ? regression_sampler(prof) : profile_sampler(kernel.z_dim, prof);
  SumSource src;
  src.kind = "ustat";
  src.description = "ustat " + kernel.name + " r=" + std::to_string(kernel.r) + " " + prof.name();
  src.d = kernel.out_dim;
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(kernel.out_dim);
  std::optional<PsdMatrix> target;
  if (kernel.name == "variance") {
    const Eigen::Index p = kernel.z_dim;
    for (Eigen::Index a = 0; a < p; ++a) theta(a * p + a) = 1.0;
    target = variance_kernel_projection_exact(p, prof.fourth_moment());
  } else if (kernel.name == "mean-pair") {
    target = PsdMatrix::scalar(kernel.out_dim, 0.25);
  } else if (kernel.name == "subbag-mean") {
    target = PsdMatrix::scalar(1, 2.0 / (kernel.r * kernel.r));  // E[h | Z_0] = y_0 / r, Var y = 2
  } else {
    theta = estimate_theta(kernel, sampler, 2000000, derive_seed(seed, {1}));
    target = projection_variance(kernel, sampler, 20000, 64, derive_seed(seed, {2})).value;
    src.exact_target = false;
    src.warnings.push_back("theta and projection variance estimated by Monte Carlo for kernel " + kernel.name);
  }
  const PsdMatrix tgt = *target;
  src.draw = [kernel, sampler, theta](long long n, Engine& eng) {
    const RowMatrix z = sampler(n, eng);
    const Eigen::VectorXd u = kernel.closed_form ? kernel.closed_form(z) : u_statistic(z, kernel);
    return Eigen::VectorXd(std::sqrt(static_cast<double>(n)) * (u - theta) / kernel.r);
  };
  src.target_cov = [tgt](long long) { return tgt; };
  return src;
}

// Exact Gaussian draws: the zero-distance control.
inline SumSource gaussian_control_source(const PsdMatrix& cov) {
  SumSource src;
  src.kind = "gaussian-control";
  src.description = "gaussian control d=" + std::to_string(cov.dim());
  src.d = cov.dim();
  const Eigen::MatrixXd f = cholesky_factor(cov).factor();
  src.draw = [f](long long, Engine& eng) {
    std::normal_distribution<double> nd;
    Eigen::VectorXd z(f.cols());
    for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = nd(eng);
    return Eigen::VectorXd(f * z);
  };
  src.target_cov = [cov](long long) { return cov; };
  return src;
}

// ---------------------------------------------------------------- budget

class Deadline {
 public:
  explicit Deadline(double seconds = 0.0) : seconds_(seconds), start_(std::chrono::steady_clock::now()) {}
  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  bool expired() const { return seconds_ > 0.0 && elapsed() > seconds_; }
  void check(const std::string& where) const {
    if (expired())
      fail(ErrorCode::BudgetExceeded, "wall budget of " + detail::fmt_num(seconds_) + " s exceeded during " + where);
  }

 private:
  double seconds_;
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------- fitting

struct RatePoint {
  long long n = 0;
  double estimate = 0.0;  // after flooring
  double stderr_ = 0.0;
  double raw = 0.0;       // signed mean before flooring
  bool floored = false;
  Eigen::Index m = 0;
  std::vector<double> rep_values;
};

struct FitOptions {
  int bootstrap = 1000;
  std::uint64_t seed = 0xF17ULL;
  bool exclude_floored = false;
  long long min_n = 0;
};

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::size_t points_used = 0;
  std::size_t floored = 0;
  bool weighted = false;
};

namespace detail {

inline double floor_estimate(double est, double se, bool& floored) {
  floored = false;
  if (est > 0.0) return est;
  require(se > 0.0, ErrorCode::NonPositiveEstimates, "non-positive estimate with zero standard error");
  floored = true;
  return se / 2.0;
}

inline std::pair<double, double> wls(const std::vector<double>& x, const std::vector<double>& y, const std::vector<double>& w) {
  double sw = 0, mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sw += w[i], mx += w[i] * x[i], my += w[i] * y[i];
  mx /= sw;
  my /= sw;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sxy += w[i] * (x[i] - mx) * (y[i] - my), sxx += w[i] * (x[i] - mx) * (x[i] - mx);
  const double slope = sxy / sxx;
  return {slope, my - slope * mx};
}

inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

// Weighted least squares of log estimate on log n with weights (estimate/stderr)²;
// percentile CI from a bootstrap that resamples each point's replicate values.
inline RateFit fit_rate(const std::vector<RatePoint>& input, const FitOptions& opt = {}) {
  require(opt.bootstrap >= 500, ErrorCode::InvalidConfig, "bootstrap needs at least 500 resamples");
  std::vector<RatePoint> pts;
  std::vector<double> unfloored;
  RateFit fit;
  for (const auto& p : input) {
    if (p.n < opt.min_n) continue;
    RatePoint q = p;
    const double before = p.estimate;
    q.estimate = detail::floor_estimate(p.estimate, p.stderr_, q.floored);
    if (q.floored) {
      ++fit.floored;
      if (opt.exclude_floored) continue;
    }
    pts.push_back(std::move(q));
    unfloored.push_back(before);
  }
  require(pts.size() >= 4, ErrorCode::TooFewPoints, "rate fit needs at least 4 points");
  for (std::size_t i = 1; i < pts.size(); ++i)
    require(pts[i].n > pts[i - 1].n, ErrorCode::InvalidConfig, "n grid must be strictly increasing");
  fit.points_used = pts.size();
  const bool all_se = std::all_of(pts.begin(), pts.end(), [](const RatePoint& p) { return p.stderr_ > 0.0; });
  fit.weighted = all_se;
  std::vector<double> x, y, w;
  for (const auto& p : pts) {
    x.push_back(std::log(static_cast<double>(p.n)));
    y.push_back(std::log(p.estimate));
    w.push_back(all_se ? (p.estimate / p.stderr_) * (p.estimate / p.stderr_) : 1.0);
  }
  std::tie(fit.slope, fit.intercept) = detail::wls(x, y, w);
  fit.ci_lo = fit.ci_hi = fit.slope;
  const bool noisy = std::any_of(pts.begin(), pts.end(), [](const RatePoint& p) { return p.stderr_ > 0.0 || p.rep_values.size() > 1; });
  if (!noisy) return fit;

  Engine eng(opt.seed);
  std::normal_distribution<double> nd;
  std::vector<double> slopes(static_cast<std::size_t>(opt.bootstrap));
  std::vector<double> yb(pts.size());
  for (int b = 0; b < opt.bootstrap; ++b) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto& p = pts[i];
      double est;
      if (p.rep_values.size() > 1) {
        std::uniform_int_distribution<std::size_t> pick(0, p.rep_values.size() - 1);
        double s = 0;
        for (std::size_t k = 0; k < p.rep_values.size(); ++k) s += p.rep_values[pick(eng)];
        est = s / static_cast<double>(p.rep_values.size());
      } else {
        est = unfloored[i] + p.stderr_ * nd(eng);  // no replicates kept: parametric resample
      }
      bool fl;
      yb[i] = std::log(p.stderr_ > 0.0 ? detail::floor_estimate(est, p.stderr_, fl) : std::max(est, p.estimate));
    }
    slopes[static_cast<std::size_t>(b)] = detail::wls(x, yb, w).first;
  }
  fit.ci_lo = std::min(fit.slope, detail::percentile(slopes, 0.025));
  fit.ci_hi = std::max(fit.slope, detail::percentile(slopes, 0.975));
  return fit;
}

// ---------------------------------------------------------------- curves

// Paired cloud size at n: fixed, or ⌈K·n^γ⌉ capped.
struct MSchedule {
  Eigen::Index fixed = 0;
  double K = 0.0;
  double gamma = 1.0;
  Eigen::Index cap = 0;

  Eigen::Index at(long long n) const {
    Eigen::Index m = fixed;
    if (m == 0) m = static_cast<Eigen::Index>(std::ceil(K * std::pow(static_cast<double>(n), gamma)));
    if (cap > 0) m = std::min(m, cap);
    require(m >= 2, ErrorCode::InvalidConfig, "paired cloud size m must be >= 2");
    return m;
  }
};

struct CurveOptions {
  std::optional<Setting> setting;
  double p = 1.0;
  std::vector<long long> n_grid;
  int reps = 20;  // independent paired clouds per n
  MSchedule m;
  GaussianReference reference = GaussianReference::Sampled;
  WpMethod method = WpMethod::Auto;
  bool debias = true;
  std::uint64_t seed = 1;
  unsigned threads = 0;
  double budget_secs = 0.0;
  FitOptions fit{1000, 0xF17ULL, false, 64};
};

struct RateCurve {
  std::string setting;
  std::string source;
  double p = 1.0;
  std::vector<RatePoint> points;
  RateFit fit;
  double theoretical_exponent = std::numeric_limits<double>::quiet_NaN();
  bool exact_target = true;
  std::vector<RatePoint> points_sigma_inf;  // homogeneous chains only
  std::optional<RateFit> fit_sigma_inf;
  std::vector<std::string> warnings;
};

// pool of m·reps draws of the normalized sum at n; per-chunk seeds keep it
// independent of the thread count
inline RowMatrix draw_pool(const SumSource& src, long long n, Eigen::Index count, std::uint64_t seed, unsigned threads,
                           const Deadline& deadline) {
  constexpr Eigen::Index kChunk = 256;
  RowMatrix pool(count, src.d);
  const auto chunks = static_cast<std::size_t>((count + kChunk - 1) / kChunk);
  parallel_for(chunks, resolve_threads(threads), [&](std::size_t c) {
    deadline.check("sampling at n = " + std::to_string(n));
    Engine eng = make_engine(seed, {static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(c)});
    const Eigen::Index lo = static_cast<Eigen::Index>(c) * kChunk, hi = std::min(count, lo + kChunk);
    for (Eigen::Index i = lo; i < hi; ++i) pool.row(i) = src.draw(n, eng).transpose();
  });
  return pool;
}

inline RatePoint to_point(long long n, const WpEstimate& est) {
  RatePoint pt;
  pt.n = n;
  pt.raw = est.raw_value;
  pt.stderr_ = est.std_error;
  pt.m = est.m;
  pt.rep_values = est.rep_values;
  pt.estimate = est.raw_value;
  if (pt.estimate <= 0.0 && pt.stderr_ > 0.0) {
    pt.estimate = pt.stderr_ / 2.0;
    pt.floored = true;
  }
  return pt;
}

inline RateCurve clt_distance_curve(const SumSource& src, const CurveOptions& opt) {
  require(!opt.n_grid.empty(), ErrorCode::InvalidConfig, "n grid is empty");
  for (std::size_t i = 1; i < opt.n_grid.size(); ++i)
    require(opt.n_grid[i] > opt.n_grid[i - 1], ErrorCode::InvalidConfig, "n grid must be strictly increasing");
  require(opt.n_grid.front() >= 1, ErrorCode::InvalidConfig, "n must be >= 1");
  require(opt.reps >= 2, ErrorCode::InvalidConfig, "reps must be >= 2");
  const Deadline deadline(opt.budget_secs);
  RateCurve curve;
  curve.source = src.description;
  curve.p = opt.p;
  curve.exact_target = src.exact_target;
  curve.warnings = src.warnings;
  if (!src.exact_target) curve.warnings.push_back("target covariance is estimated, not exact");
  if (opt.setting) {
    curve.setting = setting_label(*opt.setting);
    curve.theoretical_exponent = theoretical_exponent(*opt.setting);
  }
  WpOptions wo{opt.reference, opt.method};
  std::optional<PsdMatrix> sigma_inf;
  if (src.sigma_infinity) sigma_inf = src.sigma_infinity();
  for (long long n : opt.n_grid) {
    deadline.check("n = " + std::to_string(n));
    const Eigen::Index m = opt.m.at(n);
    const RowMatrix pool = draw_pool(src, n, m * opt.reps, derive_seed(opt.seed, {0x5A}), opt.threads, deadline);
    const PointCloud cloud(pool);
    const GaussianSpec target = GaussianSpec::centered(src.target_cov(n));
    const std::uint64_t est_seed = derive_seed(opt.seed, {0xE5, static_cast<std::uint64_t>(n)});
    curve.points.push_back(to_point(n, estimate_wp_to_gaussian(cloud, target, opt.p, m, opt.reps, opt.debias, est_seed, wo)));
    if (sigma_inf)
      curve.points_sigma_inf.push_back(to_point(
          n, estimate_wp_to_gaussian(cloud, GaussianSpec::centered(*sigma_inf), opt.p, m, opt.reps, opt.debias, est_seed, wo)));
  }
  for (const auto& pt : curve.points)
    if (pt.raw < -3.0 * pt.stderr_)
      curve.warnings.push_back("estimate at n = " + std::to_string(pt.n) + " lies below -3 stderr");
  std::size_t usable = 0;
  for (const auto& pt : curve.points) usable += pt.n >= opt.fit.min_n;
  if (usable >= 4) {
    curve.fit = fit_rate(curve.points, opt.fit);
    if (!curve.points_sigma_inf.empty()) curve.fit_sigma_inf = fit_rate(curve.points_sigma_inf, opt.fit);
  } else {
    curve.warnings.push_back("fewer than 4 points with n >= " + std::to_string(opt.fit.min_n) + "; no slope fitted");
    curve.fit.slope = curve.fit.ci_lo = curve.fit.ci_hi = std::numeric_limits<double>::quiet_NaN();
  }
  return curve;
}

// ---------------------------------------------------------------- checks and output

struct RateCheck {
  std::string setting;
  double slope = 0.0;
  double theory = 0.0;
  double tolerance = 0.12;
  bool two_sided = false;
  bool pass = false;
};

// Theory is an upper bound on the error, so the slope may not exceed it by more
// than the tolerance; two-sided checks also bound it from below.
inline RateCheck check_curve(const RateCurve& c, double tolerance = 0.12, bool two_sided = false) {
  require(std::isfinite(c.theoretical_exponent), ErrorCode::BadSetting, "curve has no theoretical exponent to check");
  RateCheck r{c.setting, c.fit.slope, c.theoretical_exponent, tolerance, two_sided, false};
  r.pass = std::isfinite(c.fit.slope) && c.fit.slope <= c.theoretical_exponent + tolerance &&
           (!two_sided || c.fit.slope >= c.theoretical_exponent - tolerance);
  return r;
}

namespace detail {

inline nlohmann::ordered_json num(double v) {
  return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

inline nlohmann::ordered_json fit_json(const RateFit& f) {
  nlohmann::ordered_json j;
  j["slope"] = num(f.slope);
  j["intercept"] = num(f.intercept);
  j["ci"] = {num(f.ci_lo), num(f.ci_hi)};
  j["points_used"] = f.points_used;
  j["floored"] = f.floored;
  j["weighted"] = f.weighted;
  return j;
}

inline nlohmann::ordered_json points_json(const std::vector<RatePoint>& pts) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& p : pts) {
    nlohmann::ordered_json j;
    j["n"] = p.n;
    j["estimate"] = p.estimate;
    j["stderr"] = p.stderr_;
    j["raw"] = p.raw;
    j["floored"] = p.floored;
    j["m"] = p.m;
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace detail

inline nlohmann::ordered_json curve_to_json(const RateCurve& c) {
  nlohmann::ordered_json j;
  j["setting"] = c.setting;
  j["source"] = c.source;
  j["p"] = c.p;
  j["theoretical_exponent"] = detail::num(c.theoretical_exponent);
  j["exact_target"] = c.exact_target;
  j["points"] = detail::points_json(c.points);
  j["fit"] = detail::fit_json(c.fit);
  if (!c.points_sigma_inf.empty()) {
    j["sigma_infinity"]["points"] = detail::points_json(c.points_sigma_inf);
    if (c.fit_sigma_inf) j["sigma_infinity"]["fit"] = detail::fit_json(*c.fit_sigma_inf);
  }
  j["warnings"] = c.warnings;
  return j;
}

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Header: n,log_n,estimate,log_estimate,stderr,floored,m
inline std::string curve_to_csv(const RateCurve& c) {
  std::ostringstream os;
  os << "n,log_n,estimate,log_estimate,stderr,floored,m\r\n";
  for (const auto& p : c.points)
    os << p.n << ',' << fmt_g17(std::log(static_cast<double>(p.n))) << ',' << fmt_g17(p.estimate) << ','
       << fmt_g17(std::log(p.estimate)) << ',' << fmt_g17(p.stderr_) << ',' << (p.floored ? 1 : 0) << ',' << p.m << "\r\n";
  return os.str();
}

}  // namespace cltlab
