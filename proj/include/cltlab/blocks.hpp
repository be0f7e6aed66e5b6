#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "generators.hpp"
#include "json.hpp"
#include "linalg_gauss.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace cltlab {

using IndexSet = std::vector<Eigen::Index>;

// Big blocks of length ℓ separated by gaps of length M, then a remainder.
struct BlockPartition {
  Eigen::Index n = 0;
  int M = 0;
  Eigen::Index ell = 0;
  Eigen::Index k = 0;
  std::vector<IndexSet> big;
  std::vector<IndexSet> small;
  IndexSet remainder;
  std::string warning;
};

inline BlockPartition block_partition(Eigen::Index n, int M, Eigen::Index ell) {
  require(M >= 0 && ell >= 1 && ell >= M, ErrorCode::BadLengths, "block lengths need ell >= M >= 0 and ell >= 1");
  require(n >= 1, ErrorCode::BadLengths, "n must be >= 1");
  BlockPartition part;
  part.n = n;
  part.M = M;
  part.ell = ell;
  part.k = n / (ell + M);
  if (part.k == 0)
    part.warning = "n < ell + M: every index falls in the remainder";
  for (Eigen::Index j = 0; j < part.k; ++j) {
    const Eigen::Index b0 = j * (ell + M);
    IndexSet b(static_cast<std::size_t>(ell)), g(static_cast<std::size_t>(M));
    for (Eigen::Index i = 0; i < ell; ++i) b[static_cast<std::size_t>(i)] = b0 + i;
    for (int i = 0; i < M; ++i) g[static_cast<std::size_t>(i)] = b0 + ell + i;
    part.big.push_back(std::move(b));
    part.small.push_back(std::move(g));
  }
  for (Eigen::Index i = part.k * (ell + M); i < n; ++i) part.remainder.push_back(i);
  return part;
}

struct BlockLength {
  Eigen::Index ell = 0;
  double formula = 0.0;  // unfloored value of the rate-optimal formula
  std::string warning;
};

// ℓ = ⌊(2M+1)^{2p/(2p+q−2)} · n^{(p+q−2)/(2p+q−2)}⌋, clamped into [max(M,1), n − M].
inline BlockLength optimal_block_length(Eigen::Index n, int M, double p, double q) {
  require(p >= 2.0 && std::isfinite(p), ErrorCode::BadParams, "p must be >= 2");
  require(q > 0.0 && q <= 2.0, ErrorCode::BadParams, "q must lie in (0, 2]");
  require(n >= 1 && M >= 0, ErrorCode::BadParams, "need n >= 1 and M >= 0");
  const double den = 2.0 * p + q - 2.0;
  BlockLength out;
  out.formula = std::pow(2.0 * M + 1.0, 2.0 * p / den) * std::pow(static_cast<double>(n), (p + q - 2.0) / den);
  // guard against pow landing a hair under an exact integer
  auto ell = static_cast<Eigen::Index>(std::floor(out.formula * (1.0 + 1e-12)));
  const Eigen::Index lo = std::max<Eigen::Index>(M, 1);
  const Eigen::Index hi = std::max<Eigen::Index>(lo, n - M);
  if (ell < lo) {
    ell = lo;
    out.warning = "formula below max(M, 1); clamped up";
  } else if (ell > hi) {
    ell = hi;
    out.warning = "formula exceeds n - M; clamped to a single big block";
  }
  out.ell = ell;
  return out;
}

struct BlockSums {
  Eigen::VectorXd A;      // Σ over big blocks
  Eigen::VectorXd Delta;  // S_n − A
  Eigen::VectorXd S_n;
  std::vector<Eigen::VectorXd> U;  // per big block
  double reconstruction_error = 0.0;  // ‖(S_n − A) − (Σ_j V_j + R)‖_∞
};

inline BlockSums block_sums(const SequenceSample& sample, const BlockPartition& part) {
  require(sample.n() == part.n, ErrorCode::LengthMismatch, "partition length differs from sample length");
  const Eigen::Index d = sample.d();
  BlockSums out;
  out.A = Eigen::VectorXd::Zero(d);
  out.S_n = sample.sum();
  Eigen::VectorXd direct = Eigen::VectorXd::Zero(d);
  for (const auto& b : part.big) {
    Eigen::VectorXd u = Eigen::VectorXd::Zero(d);
    for (Eigen::Index i : b) u += sample.data.row(i).transpose();
    out.A += u;
    out.U.push_back(std::move(u));
  }
  for (const auto& g : part.small)
    for (Eigen::Index i : g) direct += sample.data.row(i).transpose();
  for (Eigen::Index i : part.remainder) direct += sample.data.row(i).transpose();
  out.Delta = out.S_n - out.A;
  out.reconstruction_error = d > 0 ? (out.Delta - direct).cwiseAbs().maxCoeff() : 0.0;
  return out;
}

// Var(Σ_{i∈S} X_i) per coordinate for the moving average with Cov(X_i, X_j) =
// σ²(M+1−|i−j|)/(M+1) when |i−j| ≤ M. Indices must be sorted.
inline double ma_set_variance(const IndexSet& idx, int M, double innovation_var) {
  double total = 0.0;
  for (std::size_t a = 0; a < idx.size(); ++a) {
    total += innovation_var;
    for (std::size_t b = a + 1; b < idx.size() && idx[b] - idx[a] <= M; ++b)
      total += 2.0 * innovation_var * static_cast<double>(M + 1 - (idx[b] - idx[a])) / (M + 1.0);
  }
  return total;
}

// Var(A)/n exactly for the moving average: big blocks are M apart, hence independent.
inline double exact_block_variance_ma(const BlockPartition& part, double innovation_var) {
  double total = 0.0;
  for (const auto& b : part.big) total += ma_set_variance(b, part.M, innovation_var);
  return total / static_cast<double>(part.n);
}

inline double exact_remainder_variance_ma(const BlockPartition& part, double innovation_var) {
  IndexSet rest;
  for (const auto& g : part.small) rest.insert(rest.end(), g.begin(), g.end());
  rest.insert(rest.end(), part.remainder.begin(), part.remainder.end());
  std::sort(rest.begin(), rest.end());
  return ma_set_variance(rest, part.M, innovation_var);
}

// |Var(A)/n − Σ_n| for the moving average, per coordinate.
inline double variance_mismatch_ma(const BlockPartition& part, double innovation_var) {
  return std::abs(exact_block_variance_ma(part, innovation_var) -
                  exact_sigma_n_ma(part.n, part.M, innovation_var)(0, 0));
}

struct BlockMonteCarlo {
  std::size_t reps = 0;
  Eigen::MatrixXd var_A_over_n;    // sample covariance of A, divided by n
  double mean_delta_pow = 0.0;     // E‖Δ‖^p
  double mean_delta_pow_se = 0.0;
  double max_adjacent_corr = 0.0;  // max_j |corr(U_j, U_{j+1})| on coordinate 0
  double max_reconstruction_error = 0.0;
};

using SampleSource = std::function<SequenceSample(std::uint64_t seed)>;

inline BlockMonteCarlo block_monte_carlo(const SampleSource& source, const BlockPartition& part, double p, std::size_t reps,
                                         std::uint64_t seed, unsigned threads = 0) {
  require(reps >= 2, ErrorCode::InsufficientSamples, "need at least 2 repetitions");
  std::vector<BlockSums> sums(reps);
  parallel_for(reps, resolve_threads(threads), [&](std::size_t r) {
    sums[r] = block_sums(source(derive_seed(seed, {static_cast<std::uint64_t>(r)})), part);
  });
  const double R = static_cast<double>(reps);
  const Eigen::Index d = sums.front().A.size();
  BlockMonteCarlo out;
  out.reps = reps;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (const auto& s : sums) mean += s.A;
  mean /= R;
  out.var_A_over_n = Eigen::MatrixXd::Zero(d, d);
  for (const auto& s : sums) out.var_A_over_n += (s.A - mean) * (s.A - mean).transpose();
  out.var_A_over_n /= (R - 1.0) * static_cast<double>(part.n);

  double sum = 0, sq = 0;
  for (const auto& s : sums) {
    const double v = std::pow(s.Delta.norm(), p);
    sum += v;
    sq += v * v;
    out.max_reconstruction_error = std::max(out.max_reconstruction_error, s.reconstruction_error);
  }
  out.mean_delta_pow = sum / R;
  out.mean_delta_pow_se = std::sqrt(std::max(0.0, sq / R - out.mean_delta_pow * out.mean_delta_pow) / R);

  for (Eigen::Index j = 0; j + 1 < part.k; ++j) {
    double ma = 0, mb = 0;
    for (const auto& s : sums) ma += s.U[static_cast<std::size_t>(j)](0), mb += s.U[static_cast<std::size_t>(j + 1)](0);
    ma /= R;
    mb /= R;
    double sab = 0, saa = 0, sbb = 0;
    for (const auto& s : sums) {
      const double a = s.U[static_cast<std::size_t>(j)](0) - ma, b = s.U[static_cast<std::size_t>(j + 1)](0) - mb;
      sab += a * b;
      saa += a * a;
      sbb += b * b;
    }
    if (saa > 0 && sbb > 0) out.max_adjacent_corr = std::max(out.max_adjacent_corr, std::abs(sab / std::sqrt(saa * sbb)));
  }
  return out;
}

// Blocks are exported as inclusive [first, last] ranges; they are contiguous by construction.
inline nlohmann::json partition_to_json(const BlockPartition& part) {
  auto range = [](const IndexSet& s) {
    return s.empty() ? nlohmann::json::array() : nlohmann::json::array({s.front(), s.back()});
  };
  nlohmann::json j;
  j["n"] = part.n;
  j["M"] = part.M;
  j["ell"] = part.ell;
  j["k"] = part.k;
  j["big"] = nlohmann::json::array();
  j["small"] = nlohmann::json::array();
  for (const auto& b : part.big) j["big"].push_back(range(b));
  for (const auto& g : part.small) j["small"].push_back(range(g));
  j["remainder"] = range(part.remainder);
  if (!part.warning.empty()) j["warning"] = part.warning;
  return j;
}

}  // namespace cltlab
