#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "blocks.hpp"
#include "dependence.hpp"
#include "errors.hpp"
#include "linalg_gauss.hpp"
#include "markov_exact.hpp"
#include "rates.hpp"
#include "regeneration.hpp"
#include "transport.hpp"
#include "ustat.hpp"

#ifndef CLTLAB_VERSION
#define CLTLAB_VERSION "0.0.0"
#endif

namespace cltlab::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

enum ExitCode : int { kOk = 0, kFailure = 1, kValidation = 2, kBudget = 3 };

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> budget_secs;
  std::optional<unsigned> threads;
  std::optional<std::string> out_dir;
};

// ---------------------------------------------------------------- field access

namespace cfg {

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

[[noreturn]] inline void bad(const std::string& field, const std::string& why) {
  fail(ErrorCode::InvalidConfig, "field '" + field + "': " + why);
}

inline const json& need(const json& j, const std::string& key, const std::string& path = "") {
  if (!j.is_object() || !j.contains(key)) bad(join(path, key), "is required");
  return j.at(key);
}

inline double number(const json& j, const std::string& key, const std::string& path = "") {
  const json& v = need(j, key, path);
  if (!v.is_number()) bad(join(path, key), "must be a number");
  return v.get<double>();
}

inline double number_or(const json& j, const std::string& key, double fallback, const std::string& path = "") {
  return j.contains(key) ? number(j, key, path) : fallback;
}

inline long long integer(const json& j, const std::string& key, const std::string& path = "") {
  const json& v = need(j, key, path);
  if (!v.is_number_integer()) bad(join(path, key), "must be an integer");
  return v.get<long long>();
}

inline long long integer_or(const json& j, const std::string& key, long long fallback, const std::string& path = "") {
  return j.contains(key) ? integer(j, key, path) : fallback;
}

inline long long positive(const json& j, const std::string& key, const std::string& path = "") {
  const long long v = integer(j, key, path);
  if (v < 1) bad(join(path, key), "must be >= 1");
  return v;
}

inline std::string text(const json& j, const std::string& key, const std::string& path = "") {
  const json& v = need(j, key, path);
  if (!v.is_string()) bad(join(path, key), "must be a string");
  return v.get<std::string>();
}

inline std::string text_or(const json& j, const std::string& key, const std::string& fallback, const std::string& path = "") {
  return j.contains(key) ? text(j, key, path) : fallback;
}

inline bool flag_or(const json& j, const std::string& key, bool fallback, const std::string& path = "") {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_boolean()) bad(join(path, key), "must be true or false");
  return j.at(key).get<bool>();
}

// [64, 128, ...] or {"pow2": [lo, hi]}
inline std::vector<long long> n_grid(const json& j, const std::string& key = "n_grid") {
  const json& v = need(j, key);
  std::vector<long long> out;
  if (v.is_object()) {
    const json& p = need(v, "pow2", key);
    if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() || !p[1].is_number_integer())
      bad(key + ".pow2", "must be [lo, hi] exponents");
    const int lo = p[0].get<int>(), hi = p[1].get<int>();
    if (lo < 0 || hi < lo || hi > 40) bad(key + ".pow2", "needs 0 <= lo <= hi <= 40");
    for (int e = lo; e <= hi; ++e) out.push_back(1LL << e);
  } else if (v.is_array()) {
    for (const auto& x : v) {
      if (!x.is_number_integer() || x.get<long long>() < 1) bad(key, "entries must be positive integers");
      out.push_back(x.get<long long>());
    }
  } else {
    bad(key, "must be an array or {\"pow2\": [lo, hi]}");
  }
  if (out.empty()) bad(key, "is empty");
  for (std::size_t i = 1; i < out.size(); ++i)
    if (out[i] <= out[i - 1]) bad(key, "must be strictly increasing");
  return out;
}

inline MomentProfile profile(const json& j, const std::string& path) {
  if (j.is_string()) {
    const std::string name = j.get<std::string>();
    if (name == "gaussian") return MomentProfile::gaussian();
    if (name == "centered-exponential") return MomentProfile::centered_exponential();
    if (name == "rademacher") return MomentProfile::rademacher();
    bad(path, "unknown profile '" + name + "' (symmetrized-pareto needs an object with alpha or delta)");
  }
  const std::string family = text(j, "family", path);
  if (family == "symmetrized-pareto") {
    if (j.contains("alpha")) return MomentProfile::symmetrized_pareto(number(j, "alpha", path));
    return MomentProfile::pareto_for_delta(number(j, "delta", path));
  }
  return profile(json(family), join(path, "family"));
}

inline MomentProfile profile_or_default(const json& j, const std::string& path) {
  return j.contains("profile") ? profile(j.at("profile"), join(path, "profile")) : MomentProfile::centered_exponential();
}

inline FiniteChain chain(const json& j, const std::string& path, const fs::path& base) {
  if (j.contains("chain_file")) {
    fs::path p = text(j, "chain_file", path);
    if (p.is_relative()) p = base / p;
    return load_chain(p.string());
  }
  return chain_from_json(need(j, "chain", path));
}

inline PsdMatrix matrix(const json& j, const std::string& path) {
  return PsdMatrix(detail::json_matrix(j, path));
}

}  // namespace cfg

// ---------------------------------------------------------------- run context

struct Context {
  json config;               // with overrides applied
  fs::path config_dir;
  std::string kind;
  std::uint64_t seed = 0;
  double budget_secs = 0.0;
  unsigned threads = 0;
  fs::path out_dir;
};

struct Outcome {
  ojson results;
  std::string csv;
  std::vector<std::string> summary;  // human-readable lines for stdout
};

using Runner = std::function<Outcome(const Context&)>;

inline const std::vector<std::string>& experiment_kinds() {
  static const std::vector<std::string> k{"rate", "split-chain", "transport-selftest", "ustat", "blocks", "dependence-functional"};
  return k;
}

// ---------------------------------------------------------------- rate

inline SumSource build_source(const json& s, const fs::path& base, std::uint64_t seed) {
  const std::string path = "source";
  const std::string kind = cfg::text(s, "kind", path);
  if (kind == "iid") return iid_source(cfg::integer_or(s, "d", 1, path), cfg::profile_or_default(s, path));
  if (kind == "mdep")
    return mdep_source(cfg::integer_or(s, "d", 1, path), static_cast<int>(cfg::integer(s, "M", path)), cfg::profile_or_default(s, path));
  if (kind == "local")
    return local_graph_source(cfg::integer_or(s, "d", 1, path), cfg::text(s, "graph", path), static_cast<int>(cfg::integer_or(s, "k", 1, path)),
                              cfg::profile_or_default(s, path));
  if (kind == "markov") return markov_source(cfg::chain(s, path, base));
  if (kind == "ustat") {
    const UKernel k = kernel_by_name(cfg::text(s, "kernel", path), static_cast<int>(cfg::integer_or(s, "r", 2, path)),
                                     cfg::integer_or(s, "z_dim", 1, path), cfg::number_or(s, "x_star", 0.0, path));
    return ustat_source(k, cfg::profile_or_default(s, path), derive_seed(seed, {0x57A7}));
  }
  if (kind == "gaussian-control") {
    if (s.contains("cov")) return gaussian_control_source(cfg::matrix(s.at("cov"), "source.cov"));
    return gaussian_control_source(PsdMatrix::identity(cfg::integer_or(s, "d", 1, path)));
  }
  cfg::bad("source.kind", "unknown source kind '" + kind + "'");
}

inline GaussianReference parse_reference(const std::string& r) {
  if (r == "quantile") return GaussianReference::Quantile;
  if (r == "sampled") return GaussianReference::Sampled;
  cfg::bad("reference", "must be \"quantile\" or \"sampled\"");
}

inline WpMethod parse_method(const std::string& m) {
  if (m == "auto") return WpMethod::Auto;
  if (m == "assignment") return WpMethod::Assignment;
  if (m == "product-marginals") return WpMethod::ProductMarginals;
  if (m == "coordinate-quantile") return WpMethod::CoordinateQuantile;
  cfg::bad("method", "must be auto, assignment, product-marginals or coordinate-quantile");
}

inline MSchedule parse_m(const json& j) {
  const json& v = cfg::need(j, "m");
  MSchedule m;
  if (v.is_number_integer()) {
    m.fixed = v.get<long long>();
    if (m.fixed < 2) cfg::bad("m", "must be >= 2");
  } else if (v.is_object()) {
    m.K = cfg::number(v, "K", "m");
    m.gamma = cfg::number_or(v, "gamma", 1.0, "m");
    m.cap = cfg::integer_or(v, "cap", 0, "m");
    if (!(m.K > 0.0)) cfg::bad("m.K", "must be > 0");
  } else {
    cfg::bad("m", "must be an integer or {\"K\": .., \"gamma\": .., \"cap\": ..}");
  }
  return m;
}

inline Runner prepare_rate(const Context& ctx) {
  const json& c = ctx.config;
  auto src = std::make_shared<SumSource>(build_source(cfg::need(c, "source"), ctx.config_dir, ctx.seed));
  CurveOptions o;
  if (c.contains("setting")) {
    try {
      o.setting = parse_setting(cfg::text(c, "setting"));
      theoretical_exponent(*o.setting);
    } catch (const Error& e) {
      cfg::bad("setting", e.detail());
    }
  }
  o.p = cfg::number_or(c, "p", 1.0);
  if (!(o.p >= 1.0)) cfg::bad("p", "must be >= 1");
  o.n_grid = cfg::n_grid(c);
  o.reps = static_cast<int>(cfg::positive(c, "reps"));
  if (o.reps < 2) cfg::bad("reps", "must be >= 2");
  o.m = parse_m(c);
  o.reference = parse_reference(cfg::text_or(c, "reference", "sampled"));
  o.method = parse_method(cfg::text_or(c, "method", "auto"));
  o.debias = cfg::flag_or(c, "debias", true);
  o.seed = ctx.seed;
  o.threads = ctx.threads;
  o.budget_secs = ctx.budget_secs;
  if (c.contains("fit")) {
    const json& f = c.at("fit");
    o.fit.min_n = cfg::integer_or(f, "min_n", o.fit.min_n, "fit");
    o.fit.bootstrap = static_cast<int>(cfg::integer_or(f, "bootstrap", o.fit.bootstrap, "fit"));
    o.fit.exclude_floored = cfg::flag_or(f, "exclude_floored", false, "fit");
    if (o.fit.bootstrap < 500) cfg::bad("fit.bootstrap", "must be >= 500");
  }
  o.fit.seed = derive_seed(ctx.seed, {0xF17});
  const double tol = cfg::number_or(c, "tolerance", 0.12);
  const bool two_sided = cfg::flag_or(c, "two_sided", false);
  const bool coordinatewise = o.method == WpMethod::ProductMarginals || o.method == WpMethod::CoordinateQuantile;
  if (src->d > 1 && o.reference == GaussianReference::Quantile && !coordinatewise)
    cfg::bad("reference", "a quantile reference in d > 1 needs a coordinatewise method");
  if (o.method == WpMethod::ProductMarginals && o.p != 2.0) cfg::bad("method", "product-marginals is exact only for p = 2");
  for (long long n : o.n_grid) {
    const Eigen::Index m = o.m.at(n);
    if ((o.method == WpMethod::Assignment || (o.method == WpMethod::Auto && src->d > 1)) && m > kMaxAssignmentSize)
      cfg::bad("m", "assignment size " + std::to_string(m) + " at n = " + std::to_string(n) + " exceeds 4096");
  }
  return [src, o, tol, two_sided](const Context&) {
    RateCurve curve = clt_distance_curve(*src, o);
    Outcome out;
    out.results["experiment"] = "rate";
    out.results["curve"] = curve_to_json(curve);
    if (o.setting && std::isfinite(curve.fit.slope)) {
      const RateCheck chk = check_curve(curve, tol, two_sided);
      out.results["check"] = {{"slope", chk.slope}, {"theory", chk.theory}, {"tolerance", chk.tolerance},
                              {"two_sided", chk.two_sided}, {"pass", chk.pass}};
      out.summary.push_back(curve.setting + ": slope " + detail::fmt_num(chk.slope) + " vs theory " + detail::fmt_num(chk.theory) +
                            (chk.pass ? " (within tolerance)" : " (outside tolerance)"));
    } else {
      out.summary.push_back("slope " + detail::fmt_num(curve.fit.slope));
    }
    out.csv = curve_to_csv(curve);
    return out;
  };
}

// ---------------------------------------------------------------- transport self-test

struct SelftestInstance {
  Eigen::Index m;
  Eigen::Index d;
  double p;
  double solver;
  double brute;
};

inline std::vector<SelftestInstance> transport_selftest(int instances, Eigen::Index max_m, std::uint64_t seed) {
  std::vector<SelftestInstance> out;
  for (int k = 0; k < instances; ++k) {
    Engine eng = make_engine(seed, {static_cast<std::uint64_t>(k)});
    std::uniform_int_distribution<Eigen::Index> pick_m(1, max_m), pick_d(1, 3);
    std::uniform_int_distribution<int> pick_p(1, 3);
    std::normal_distribution<double> nd;
    const Eigen::Index m = pick_m(eng), d = pick_d(eng);
    const double p = pick_p(eng);
    RowMatrix a(m, d), b(m, d);
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < d; ++j) a(i, j) = nd(eng), b(i, j) = nd(eng) + 0.5;
    const PointCloud x(a), y(b);
    out.push_back({m, d, p, wp_assignment(x, y, p), wp_exhaustive(x, y, p)});
  }
  return out;
}

inline Runner prepare_transport_selftest(const Context& ctx) {
  const int instances = static_cast<int>(cfg::integer_or(ctx.config, "instances", 100));
  const long long max_m = cfg::integer_or(ctx.config, "max_m", 7);
  if (instances < 1) cfg::bad("instances", "must be >= 1");
  if (max_m < 1 || max_m > 9) cfg::bad("max_m", "must lie in [1, 9]");
  const double tol = cfg::number_or(ctx.config, "tolerance", 1e-9);
  return [instances, max_m, tol](const Context& c) {
    const auto inst = transport_selftest(instances, max_m, c.seed);
    Outcome out;
    std::ostringstream csv;
    csv << "instance,m,d,p,solver,brute,abs_diff\r\n";
    int exact = 0;
    ojson rows = ojson::array();
    for (std::size_t i = 0; i < inst.size(); ++i) {
      const auto& s = inst[i];
      const double diff = std::abs(s.solver - s.brute);
      exact += diff <= tol;
      csv << i << ',' << s.m << ',' << s.d << ',' << fmt_g17(s.p) << ',' << fmt_g17(s.solver) << ',' << fmt_g17(s.brute) << ','
          << fmt_g17(diff) << "\r\n";
      rows.push_back({{"m", s.m}, {"d", s.d}, {"p", s.p}, {"solver", s.solver}, {"brute", s.brute}, {"abs_diff", diff}});
    }
    out.results["experiment"] = "transport-selftest";
    out.results["tolerance"] = tol;
    out.results["exact"] = exact;
    out.results["instances"] = instances;
    out.results["rows"] = rows;
    out.results["check"] = {{"pass", exact == instances}};
    out.summary.push_back(std::to_string(exact) + "/" + std::to_string(instances) + " instances exact");
    out.csv = csv.str();
    return out;
  };
}

// ---------------------------------------------------------------- split chain

inline Runner prepare_split_chain(const Context& ctx) {
  const json& c = ctx.config;
  auto chain = std::make_shared<FiniteChain>(cfg::chain(c, "", ctx.config_dir));
  std::vector<int> small = chain->small_set;
  if (c.contains("small_set")) small = c.at("small_set").get<std::vector<int>>();
  if (small.empty()) cfg::bad("small_set", "is required (in the config or the chain)");
  const int mpow = static_cast<int>(cfg::integer_or(c, "m", 1));
  auto mz = std::make_shared<Minorization>(build_minorization(*chain, small, mpow));
  const long long horizon = cfg::positive(c, "horizon");
  const int traces = static_cast<int>(cfg::integer_or(c, "traces", 1));
  const std::vector<long long> grid = c.contains("n_grid") ? cfg::n_grid(c) : std::vector<long long>{};
  for (long long n : grid)
    if (2 * n > horizon) cfg::bad("n_grid", "entries must not exceed half the horizon (regenerations are needed past n)");
  if (traces < 1) cfg::bad("traces", "must be >= 1");
  return [chain, mz, horizon, traces, grid](const Context& cx) {
    const Deadline deadline(cx.budget_secs);
    std::vector<SplitTrace> tr(static_cast<std::size_t>(traces));
    parallel_for(tr.size(), resolve_threads(cx.threads), [&](std::size_t i) {
      deadline.check("split-chain simulation");
      tr[i] = simulate_split_chain(*chain, *mz, horizon, derive_seed(cx.seed, {static_cast<std::uint64_t>(i)}));
    });
    deadline.check("split-chain diagnostics");
    Outcome out;
    out.results["experiment"] = "split-chain";
    out.results["minorization"] = {{"m", mz->m}, {"beta", mz->beta},
                                   {"nu", std::vector<double>(mz->nu.data(), mz->nu.data() + mz->nu.size())},
                                   {"small_set", mz->small_set}, {"warning", mz->warning}};
    out.results["expected_cycle_length"] = expected_cycle_length(*chain, *mz);
    out.results["pooled_mean_cycle"] = pooled_mean_cycle(tr);
    std::size_t cycles = pooled_cycle_lengths(tr, false).size();
    out.results["cycles"] = cycles;
    if (cycles >= 1000) {
      const TailFit with = cycle_tail_fit(tr, true), without = cycle_tail_fit(tr, false);
      out.results["tail_fit"] = {{"rho_hat", without.rho_hat}, {"b_hat", without.b_hat}, {"r_squared", without.r_squared},
                                 {"degenerate", without.degenerate}, {"rho_hat_with_first_cycle", with.rho_hat}};
      out.summary.push_back("rho_hat " + detail::fmt_num(without.rho_hat) + ", R^2 " + detail::fmt_num(without.r_squared));
    } else {
      out.results["tail_fit"] = nullptr;
      out.summary.push_back("fewer than 1000 cycles: no tail fit");
    }
    const PoissonSolution sol = poisson_solve(*chain);
    // the identity is checked at the last n whose K_n-th regeneration lies inside the trace
    double worst = 0.0, worst_cycle = 0.0;
    for (const auto& t : tr) {
      if (t.regen_times.size() < 3 || !chain->homogeneous()) continue;
      const long long n = std::max(1LL, t.regen_times[t.regen_times.size() - 3]);
      const CycleIncrements ci = cycle_increments(*chain, t, sol, n);
      worst = std::max(worst, ci.identity_error);
      worst_cycle = std::max(worst_cycle, ci.cycle_sum_error);
    }
    out.results["max_identity_error"] = worst;
    out.results["max_cycle_sum_error"] = worst_cycle;
    std::ostringstream csv;
    csv << "n,k_n,mean_abs_dev,mean_abs_dev_se,ratio\r\n";
    if (!grid.empty()) {
      const KnTable tab = kn_concentration(tr, grid);
      ojson rows = ojson::array();
      for (const auto& r : tab.rows) {
        rows.push_back({{"n", r.n}, {"k_n", r.k_n}, {"mean_abs", r.mean_abs}, {"mean_abs_se", r.mean_abs_se}, {"ratio", r.ratio}});
        csv << r.n << ',' << r.k_n << ',' << fmt_g17(r.mean_abs) << ',' << fmt_g17(r.mean_abs_se) << ',' << fmt_g17(r.ratio) << "\r\n";
      }
      out.results["kn_concentration"] = rows;
    }
    out.csv = csv.str();
    return out;
  };
}

// ---------------------------------------------------------------- ustat

inline Runner prepare_ustat(const Context& ctx) {
  const json& c = ctx.config;
  const UKernel kernel = kernel_by_name(cfg::text(c, "kernel"), static_cast<int>(cfg::integer_or(c, "r", 2)), cfg::integer_or(c, "z_dim", 1),
                                        cfg::number_or(c, "x_star", 0.0));
  const MomentProfile prof = cfg::profile_or_default(c, "");
  const std::vector<long long> grid = cfg::n_grid(c);
  for (long long n : grid)
    if (n < 2 * kernel.r - 1) cfg::bad("n_grid", "entries must be >= 2r - 1");
    else if (binomial_double(n, kernel.r) > kMaxSubsets) cfg::bad("n_grid", "C(n, r) exceeds the exact enumeration cap of 1e7");
  return [kernel, prof, grid](const Context& cx) {
    const Deadline deadline(cx.budget_secs);
    const bool paired = kernel.name.rfind("subbag", 0) == 0;
    const ZSampler sampler = paired ? regression_sampler(prof) : profile_sampler(kernel.z_dim, prof);
    Outcome out;
    out.results["experiment"] = "ustat";
    out.results["kernel"] = kernel.name;
    out.results["r"] = kernel.r;
    out.results["profile"] = prof.name();
    const ProjectionVariance pv = projection_variance(kernel, sampler, 20000, 64, derive_seed(cx.seed, {1}), cx.threads);
    ojson pvj = ojson::array();
    for (Eigen::Index i = 0; i < pv.value.dim(); ++i) {
      ojson row = ojson::array();
      for (Eigen::Index j = 0; j < pv.value.dim(); ++j) row.push_back(pv.value(i, j));
      pvj.push_back(row);
    }
    out.results["projection_variance"] = pvj;
    out.results["projection_note"] = pv.note;
    ojson rows = ojson::array();
    std::ostringstream csv;
    csv << "n,q_nr,q_nr_minus_r2,u_0\r\n";
    for (long long n : grid) {
      deadline.check("ustat n = " + std::to_string(n));
      Engine eng = make_engine(cx.seed, {2, static_cast<std::uint64_t>(n)});
      const RowMatrix z = sampler(n, eng);
      const Eigen::VectorXd u = u_statistic(z, kernel, cx.threads);
      const double q = q_nr(n, kernel.r);
      rows.push_back({{"n", n}, {"q_nr", q}, {"u", std::vector<double>(u.data(), u.data() + u.size())}});
      csv << n << ',' << fmt_g17(q) << ',' << fmt_g17(q - double(kernel.r) * kernel.r) << ',' << fmt_g17(u(0)) << "\r\n";
    }
    out.results["rows"] = rows;
    out.summary.push_back(kernel.name + " r=" + std::to_string(kernel.r) + ": " + std::to_string(grid.size()) + " sample sizes");
    out.csv = csv.str();
    return out;
  };
}

// ---------------------------------------------------------------- blocks

inline Runner prepare_blocks(const Context& ctx) {
  const json& c = ctx.config;
  const long long n = cfg::positive(c, "n");
  const int M = static_cast<int>(cfg::integer(c, "M"));
  const double p = cfg::number_or(c, "p", 2.0), q = cfg::number_or(c, "q", 2.0);
  long long ell;
  std::string ell_note;
  if (c.contains("ell")) {
    ell = cfg::integer(c, "ell");
  } else {
    const BlockLength bl = optimal_block_length(n, M, p, q);
    ell = bl.ell;
    ell_note = bl.warning;
  }
  auto part = std::make_shared<BlockPartition>(block_partition(n, M, ell));
  const long long reps = cfg::integer_or(c, "reps", 2000);
  const Eigen::Index d = cfg::integer_or(c, "d", 1);
  const MomentProfile prof = cfg::profile_or_default(c, "");
  if (reps < 2) cfg::bad("reps", "must be >= 2");
  return [part, reps, d, prof, M, p, ell_note](const Context& cx) {
    const SampleSource source = [=](std::uint64_t s) { return gen_m_dependent(part->n, d, M, prof, s); };
    const BlockMonteCarlo mc = block_monte_carlo(source, *part, p, static_cast<std::size_t>(reps), cx.seed, cx.threads);
    Outcome out;
    out.results["experiment"] = "blocks";
    out.results["partition"] = partition_to_json(*part);
    out.results["ell_note"] = ell_note;
    out.results["variance_mismatch_exact"] = variance_mismatch_ma(*part, 1.0);
    out.results["monte_carlo"] = {{"reps", mc.reps}, {"var_A_over_n_00", mc.var_A_over_n(0, 0)}, {"mean_delta_pow", mc.mean_delta_pow},
                                  {"mean_delta_pow_se", mc.mean_delta_pow_se}, {"max_adjacent_corr", mc.max_adjacent_corr},
                                  {"max_reconstruction_error", mc.max_reconstruction_error}};
    const double corr_bound = 4.0 / std::sqrt(static_cast<double>(reps));
    out.results["check"] = {{"pass", mc.max_reconstruction_error <= 1e-9 && mc.max_adjacent_corr <= corr_bound}, {"corr_bound", corr_bound}};
    std::ostringstream csv;
    csv << "block,kind,first,last\r\n";
    auto emit = [&](const std::vector<IndexSet>& sets, const char* kind) {
      for (std::size_t j = 0; j < sets.size(); ++j)
        if (!sets[j].empty()) csv << j << ',' << kind << ',' << sets[j].front() << ',' << sets[j].back() << "\r\n";
    };
    emit(part->big, "big");
    emit(part->small, "small");
    if (!part->remainder.empty()) csv << 0 << ",remainder," << part->remainder.front() << ',' << part->remainder.back() << "\r\n";
    out.summary.push_back("k = " + std::to_string(part->k) + " blocks of length " + std::to_string(part->ell) +
                          ", max |corr(U_j, U_j+1)| " + detail::fmt_num(mc.max_adjacent_corr));
    out.csv = csv.str();
    return out;
  };
}

// ---------------------------------------------------------------- dependence functional

inline Runner prepare_dependence(const Context& ctx) {
  const json& c = ctx.config;
  const json& s = cfg::need(c, "source");
  const std::string kind = cfg::text(s, "kind", "source");
  const std::vector<long long> grid = cfg::n_grid(c);
  FunctionalOptions fo;
  fo.outer_reps = static_cast<int>(cfg::integer_or(c, "outer_reps", 4));
  fo.inner_m = cfg::integer_or(c, "inner_m", 4096);
  if (fo.outer_reps < 2) cfg::bad("outer_reps", "must be >= 2");
  if (fo.inner_m < 2) cfg::bad("inner_m", "must be >= 2");
  for (long long n : grid)
    if (n > 256) cfg::bad("n_grid", "the nested estimator is limited to n <= 256");
  std::shared_ptr<FiniteChain> chain;
  Eigen::Index d = 1;
  int M = 0;
  MomentProfile prof = MomentProfile::centered_exponential();
  if (kind == "markov") {
    chain = std::make_shared<FiniteChain>(cfg::chain(s, "source", ctx.config_dir));
    d = chain->d();
  } else if (kind == "mdep" || kind == "iid") {
    d = cfg::integer_or(s, "d", 1, "source");
    M = kind == "iid" ? 0 : static_cast<int>(cfg::integer(s, "M", "source"));
    prof = cfg::profile_or_default(s, "source");
  } else {
    cfg::bad("source.kind", "must be markov, mdep or iid");
  }
  if (d > 1 && fo.inner_m > kMaxAssignmentSize) cfg::bad("inner_m", "exceeds the assignment cap of 4096 for d > 1");
  const bool exact = chain && chain->homogeneous() && chain->d() == 1 && cfg::flag_or(c, "exact", true);
  return [chain, d, M, prof, grid, fo, exact](const Context& cx) {
    Outcome out;
    out.results["experiment"] = "dependence-functional";
    ojson rows = ojson::array();
    std::ostringstream csv;
    csv << "n,value,stderr,raw,exact_value,exact_w1\r\n";
    const Deadline deadline(cx.budget_secs);
    for (long long n : grid) {
      FunctionalOptions o = fo;
      o.seed = derive_seed(cx.seed, {static_cast<std::uint64_t>(n)});
      o.threads = cx.threads;
      o.budget_secs = cx.budget_secs > 0 ? std::max(1e-3, cx.budget_secs - deadline.elapsed()) : 0.0;
      const DependenceFunctional f = chain ? dependence_functional_chain(*chain, n, o) : dependence_functional_ma(d, M, prof, n, o);
      ojson row{{"n", n}, {"value", f.value}, {"stderr", f.stderr_}, {"raw", f.raw}};
      std::string ev, ew;
      if (exact) {
        const double fe = dependence_functional_chain_exact(*chain, n).value, we = chain_w1_exact(*chain, n);
        row["exact_value"] = fe;
        row["exact_w1"] = we;
        ev = fmt_g17(fe);
        ew = fmt_g17(we);
      }
      if (!f.note.empty()) row["note"] = f.note;
      rows.push_back(row);
      csv << n << ',' << fmt_g17(f.value) << ',' << fmt_g17(f.stderr_) << ',' << fmt_g17(f.raw) << ',' << ev << ',' << ew << "\r\n";
    }
    out.results["rows"] = rows;
    out.summary.push_back("functional at " + std::to_string(grid.size()) + " horizons");
    out.csv = csv.str();
    return out;
  };
}

// ---------------------------------------------------------------- run

inline Context make_context(const json& config, const fs::path& config_dir, const Overrides& ov) {
  if (!config.is_object()) fail(ErrorCode::InvalidConfig, "config must be a JSON object");
  Context ctx;
  ctx.config = config;
  ctx.config_dir = config_dir;
  ctx.kind = cfg::text(config, "experiment");
  if (std::find(experiment_kinds().begin(), experiment_kinds().end(), ctx.kind) == experiment_kinds().end())
    cfg::bad("experiment", "unknown kind '" + ctx.kind + "'");
  if (ov.seed) ctx.config["seed"] = *ov.seed;
  const json& seed = cfg::need(ctx.config, "seed");
  if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<long long>() >= 0)) cfg::bad("seed", "must be a non-negative integer");
  ctx.seed = seed.get<std::uint64_t>();
  if (ov.budget_secs) ctx.config["budget_secs"] = *ov.budget_secs;
  ctx.budget_secs = cfg::number_or(ctx.config, "budget_secs", 0.0);
  if (ctx.budget_secs < 0) cfg::bad("budget_secs", "must be >= 0");
  if (ov.threads) ctx.config["threads"] = *ov.threads;
  const long long th = cfg::integer_or(ctx.config, "threads", 0);
  if (th < 0) cfg::bad("threads", "must be >= 0");
  ctx.threads = static_cast<unsigned>(th);
  if (ov.out_dir) ctx.config["output"] = *ov.out_dir;
  ctx.out_dir = cfg::text(ctx.config, "output");
  return ctx;
}

inline Runner prepare(const Context& ctx) {
  if (ctx.kind == "rate") return prepare_rate(ctx);
  if (ctx.kind == "split-chain") return prepare_split_chain(ctx);
  if (ctx.kind == "transport-selftest") return prepare_transport_selftest(ctx);
  if (ctx.kind == "ustat") return prepare_ustat(ctx);
  if (ctx.kind == "blocks") return prepare_blocks(ctx);
  return prepare_dependence(ctx);
}

inline void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + p.string());
  out << content;
  require(static_cast<bool>(out), ErrorCode::IoError, "write failed for " + p.string());
}

inline std::string error_json(const Error& e, int exit_code) {
  ojson j{{"error", to_string(e.code())}, {"message", e.detail()}, {"exit_code", exit_code}};
  return j.dump();
}

inline json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  require(static_cast<bool>(in), ErrorCode::IoError, "cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::InvalidConfig, p.string() + ": " + e.what());
  }
}

// Validation failures exit 2, an exhausted budget 3, anything else 1.
inline int run(const fs::path& config_path, const Overrides& ov, std::ostream& out, std::ostream& err) {
  const auto start = std::chrono::steady_clock::now();
  Context ctx;
  Runner runner;
  try {
    const json config = read_json_file(config_path);
    ctx = make_context(config, config_path.parent_path(), ov);
    runner = prepare(ctx);
  } catch (const Error& e) {
    const int code = e.code() == ErrorCode::IoError ? kFailure : kValidation;
    err << error_json(e, code) << "\n";
    return code;
  }
  try {
    Outcome res = runner(ctx);
    ojson results;
    results["experiment"] = ctx.kind;
    results["seed"] = ctx.seed;
    for (auto it = res.results.begin(); it != res.results.end(); ++it)
      if (it.key() != "experiment") results[it.key()] = it.value();
    fs::create_directories(ctx.out_dir);
    write_file(ctx.out_dir / "results.json", results.dump(2) + "\n");
    write_file(ctx.out_dir / "results.csv", res.csv);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    ojson manifest;
    manifest["version"] = CLTLAB_VERSION;
    manifest["config_path"] = fs::absolute(config_path).string();
    manifest["config"] = ojson::parse(ctx.config.dump());
    manifest["threads"] = resolve_threads(ctx.threads);
    manifest["wall_secs"] = wall;
    manifest["outputs"] = {"results.json", "results.csv"};
    write_file(ctx.out_dir / "manifest.json", manifest.dump(2) + "\n");
    for (const auto& line : res.summary) out << line << "\n";
    out << "wrote " << (ctx.out_dir / "results.json").string() << "\n";
    return kOk;
  } catch (const Error& e) {
    const int code = e.code() == ErrorCode::BudgetExceeded ? kBudget : kFailure;
    err << error_json(e, code) << "\n";
    return code;
  }
}

// ---------------------------------------------------------------- report

struct ReportRow {
  std::string path;
  std::string setting;
  std::string source;
  double p = 1.0;
  double slope = 0.0, ci_lo = 0.0, ci_hi = 0.0;
  double theory = 0.0, tolerance = 0.12;
  bool two_sided = false;
  bool pass = false;
};

inline std::vector<fs::path> result_files(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::MissingResults, "no such directory " + dir.string());
  std::vector<fs::path> files;
  if (fs::exists(dir / "results.json")) files.push_back(dir / "results.json");
  std::vector<fs::path> subs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "results.json")) subs.push_back(e.path() / "results.json");
  std::sort(subs.begin(), subs.end());
  files.insert(files.end(), subs.begin(), subs.end());
  require(!files.empty(), ErrorCode::MissingResults, "no results.json in " + dir.string() + " or its subdirectories");
  return files;
}

inline std::string fixed(double v, int digits = 3) {
  if (!std::isfinite(v)) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Markdown table of rate results; other experiment kinds are listed with their check.
inline int report(const fs::path& dir, std::ostream& out, std::ostream& err) {
  try {
    const auto files = result_files(dir);
    std::vector<ReportRow> rows;
    std::vector<std::pair<std::string, std::optional<bool>>> others;
    for (const auto& f : files) {
      const json j = read_json_file(f);
      const std::string rel = fs::relative(f.parent_path(), dir).string();
      const std::string kind = j.value("experiment", "");
      if (kind == "rate" && j.contains("check")) {
        ReportRow r;
        r.path = rel;
        const auto& c = j.at("curve");
        r.setting = c.value("setting", "");
        r.source = c.value("source", "");
        r.p = c.value("p", 1.0);
        const auto& fit = c.at("fit");
        r.slope = fit.at("slope").is_number() ? fit.at("slope").get<double>() : NAN;
        r.ci_lo = fit.at("ci")[0].is_number() ? fit.at("ci")[0].get<double>() : NAN;
        r.ci_hi = fit.at("ci")[1].is_number() ? fit.at("ci")[1].get<double>() : NAN;
        const auto& chk = j.at("check");
        r.theory = chk.at("theory").get<double>();
        r.tolerance = chk.at("tolerance").get<double>();
        r.two_sided = chk.at("two_sided").get<bool>();
        r.pass = chk.at("pass").get<bool>();
        rows.push_back(r);
      } else {
        std::optional<bool> pass;
        if (j.contains("check") && j.at("check").contains("pass")) pass = j.at("check").at("pass").get<bool>();
        others.emplace_back(rel + " (" + kind + ")", pass);
      }
    }
    bool any_fail = false;
    if (!rows.empty()) {
      out << "| result | setting | source | p | slope | 95% CI | theory | rule | status |\n";
      out << "|---|---|---|---|---|---|---|---|---|\n";
      for (const auto& r : rows) {
        const std::string rule = (r.two_sided ? "|slope - theory| <= " : "slope <= theory + ") + fixed(r.tolerance, 2);
        out << "| " << r.path << " | " << r.setting << " | " << r.source << " | " << fixed(r.p, 0) << " | " << fixed(r.slope) << " | ["
            << fixed(r.ci_lo) << ", " << fixed(r.ci_hi) << "] | " << fixed(r.theory) << " | " << rule << " | "
            << (r.pass ? "✓" : "✗") << " |\n";
        any_fail |= !r.pass;
      }
    }
    if (!others.empty()) {
      if (!rows.empty()) out << "\n";
      for (const auto& [name, pass] : others) {
        out << "- " << name << ": " << (pass ? (*pass ? "✓" : "✗") : "no check") << "\n";
        any_fail |= pass && !*pass;
      }
    }
    return any_fail ? kFailure : kOk;
  } catch (const Error& e) {
    err << error_json(e, kFailure) << "\n";
    return kFailure;
  }
}

// ---------------------------------------------------------------- selftest

// Quick internal consistency suite: exact transport, Gaussian closed form, Q(n, r) and exponents.
inline int selftest(std::uint64_t seed, std::ostream& out) {
  int failures = 0;
  auto line = [&](bool ok, const std::string& what) {
    out << (ok ? "ok   " : "FAIL ") << what << "\n";
    failures += !ok;
  };
  const auto inst = transport_selftest(100, 7, seed);
  int exact = 0;
  for (const auto& s : inst) exact += std::abs(s.solver - s.brute) <= 1e-9;
  line(exact == 100, "transport: " + std::to_string(exact) + "/100 instances exact");
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(2, 2);
  a(1, 1) = 4;
  line(std::abs(gaussian_w2_closed_form(PsdMatrix(a), PsdMatrix::identity(2)) - 1.0) <= 1e-12, "gaussian W2 closed form: diag(1,4) vs I = 1");
  line(q_nr_exact(10, 2) == BigRational(32, 9), "Q(10, 2) = 32/9");
  line(theoretical_exponent(parse_setting("mdep_wp(p=2,q=2)")) == -0.25, "mdep_wp(p=2,q=2) exponent = -1/4");
  Eigen::MatrixXd p(2, 2);
  p << 0.9, 0.1, 0.2, 0.8;
  Eigen::MatrixXd h(2, 1);
  h << 1, -2;
  const Eigen::VectorXd pi = stationary_dist(FiniteChain(p, h));
  line(std::abs(pi(0) - 2.0 / 3.0) <= 1e-12, "stationary law of the 2-state chain = (2/3, 1/3)");
  return failures == 0 ? kOk : kFailure;
}

}  // namespace cltlab::harness
