#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "errors.hpp"
#include "generators.hpp"
#include "linalg_gauss.hpp"
#include "parallel.hpp"
#include "point_cloud.hpp"
#include "rng.hpp"

namespace cltlab {

// Symmetric kernel h: Z^r → R^out_dim. eval reads rows idx[0..r) of z.
struct UKernel {
  std::string name;
  int r = 2;
  Eigen::Index z_dim = 1;
  Eigen::Index out_dim = 1;
  std::function<void(const RowMatrix& z, const Eigen::Index* idx, double* out)> eval;
  // Closed form of U_n over the full data set, when one exists.
  std::function<Eigen::VectorXd(const RowMatrix& z)> closed_form;
};

// h(z, z') = ½(z − z')(z − z')ᵀ, flattened row-major; U_n is the sample covariance.
inline UKernel variance_kernel(Eigen::Index p = 1) {
  UKernel k;
  k.name = "variance";
  k.r = 2;
  k.z_dim = p;
  k.out_dim = p * p;
  k.eval = [p](const RowMatrix& z, const Eigen::Index* idx, double* out) {
    for (Eigen::Index a = 0; a < p; ++a) {
      const double da = z(idx[0], a) - z(idx[1], a);
      for (Eigen::Index b = 0; b < p; ++b) out[a * p + b] = 0.5 * da * (z(idx[0], b) - z(idx[1], b));
    }
  };
  k.closed_form = [p](const RowMatrix& z) {
    const Eigen::RowVectorXd mean = z.colwise().mean();
    const Eigen::MatrixXd c = z.rowwise() - mean;
    Eigen::MatrixXd cov = c.transpose() * c / static_cast<double>(z.rows() - 1);
    Eigen::VectorXd out(p * p);
    for (Eigen::Index a = 0; a < p; ++a)
      for (Eigen::Index b = 0; b < p; ++b) out(a * p + b) = cov(a, b);
    return out;
  };
  return k;
}

// h(z, z') = (z + z')/2; U_n is the sample mean.
inline UKernel mean_pair_kernel(Eigen::Index p = 1) {
  UKernel k;
  k.name = "mean-pair";
  k.r = 2;
  k.z_dim = p;
  k.out_dim = p;
  k.eval = [p](const RowMatrix& z, const Eigen::Index* idx, double* out) {
    for (Eigen::Index a = 0; a < p; ++a) out[a] = 0.5 * (z(idx[0], a) + z(idx[1], a));
  };
  k.closed_form = [](const RowMatrix& z) { return Eigen::VectorXd(z.colwise().mean().transpose()); };
  return k;
}

// Subbagging with Z = (x, y): the base learner predicts the subsample mean of y.
inline UKernel subbag_mean_kernel(int r) {
  require(r >= 1, ErrorCode::InvalidConfig, "kernel order must be >= 1");
  UKernel k;
  k.name = "subbag-mean";
  k.r = r;
  k.z_dim = 2;
  k.out_dim = 1;
  k.eval = [r](const RowMatrix& z, const Eigen::Index* idx, double* out) {
    double s = 0;
    for (int i = 0; i < r; ++i) s += z(idx[i], 1);
    out[0] = s / r;
  };
  k.closed_form = [](const RowMatrix& z) { return Eigen::VectorXd::Constant(1, z.col(1).mean()); };
  return k;
}

// Subbagging with a 1-nearest-neighbour base learner at x*; ties average their y.
inline UKernel subbag_1nn_kernel(int r, double x_star = 0.0) {
  require(r >= 1, ErrorCode::InvalidConfig, "kernel order must be >= 1");
  UKernel k;
  k.name = "subbag-1nn";
  k.r = r;
  k.z_dim = 2;
  k.out_dim = 1;
  k.eval = [r, x_star](const RowMatrix& z, const Eigen::Index* idx, double* out) {
    double best = std::numeric_limits<double>::infinity(), sum = 0;
    int ties = 0;
    for (int i = 0; i < r; ++i) {
      const double dist = std::abs(z(idx[i], 0) - x_star);
      if (dist < best) best = dist, sum = z(idx[i], 1), ties = 1;
      else if (dist == best) sum += z(idx[i], 1), ++ties;
    }
    out[0] = sum / ties;
  };
  return k;
}

inline std::vector<std::string> kernel_names() { return {"variance", "mean-pair", "subbag-mean", "subbag-1nn"}; }

inline UKernel kernel_by_name(const std::string& name, int r = 2, Eigen::Index p = 1, double x_star = 0.0) {
  if (name == "variance") {
    require(r == 2, ErrorCode::InvalidConfig, "variance kernel has order 2");
    return variance_kernel(p);
  }
  if (name == "mean-pair") {
    require(r == 2, ErrorCode::InvalidConfig, "mean-pair kernel has order 2");
    return mean_pair_kernel(p);
  }
  if (name == "subbag-mean") return subbag_mean_kernel(r);
  if (name == "subbag-1nn") return subbag_1nn_kernel(r, x_star);
  fail(ErrorCode::InvalidConfig, "unknown kernel '" + name + "'");
}

inline constexpr double kMaxSubsets = 1e7;

inline double binomial_double(Eigen::Index n, int r) {
  if (r < 0 || r > n) return 0.0;
  double c = 1.0;
  for (int i = 1; i <= r; ++i) c = c * static_cast<double>(n - r + i) / i;
  return std::round(c);
}

namespace detail {

// Rows in lexicographic order, so the enumeration (and its rounding) does not
// depend on how the input happened to be ordered.
inline RowMatrix canonical_rows(const RowMatrix& z) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(z.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      if (z(a, j) != z(b, j)) return z(a, j) < z(b, j);
    return false;
  });
  RowMatrix out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) out.row(i) = z.row(order[static_cast<std::size_t>(i)]);
  return out;
}

inline void check_kernel_input(const RowMatrix& z, const UKernel& k) {
  require(k.r >= 1, ErrorCode::InvalidConfig, "kernel order must be >= 1");
  require(z.cols() == k.z_dim, ErrorCode::DimMismatch, "data dimension differs from the kernel's Z dimension");
  require(z.rows() >= k.r, ErrorCode::InsufficientSamples, "need n >= r");
}

}  // namespace detail

// Exact U_n: the average of h over all C(n, r) index subsets.
inline Eigen::VectorXd u_statistic(const RowMatrix& data, const UKernel& kernel, unsigned threads = 1) {
  detail::check_kernel_input(data, kernel);
  const Eigen::Index n = data.rows();
  const int r = kernel.r;
  const double total = binomial_double(n, r);
  require(r <= 2 || total <= kMaxSubsets, ErrorCode::TooManySubsets,
          "C(n, r) exceeds 1e7; use u_statistic_incomplete for a subsampled estimate");
  const RowMatrix z = detail::canonical_rows(data);
  const Eigen::Index d = kernel.out_dim;
  // one partial sum per leading index, added in index order
  std::vector<Eigen::VectorXd> partial(static_cast<std::size_t>(n), Eigen::VectorXd::Zero(d));
  parallel_for(static_cast<std::size_t>(n - r + 1), resolve_threads(threads), [&](std::size_t lead) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(r));
    for (int j = 0; j < r; ++j) idx[static_cast<std::size_t>(j)] = static_cast<Eigen::Index>(lead) + j;
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(d), h(d);
    for (;;) {
      kernel.eval(z, idx.data(), h.data());
      acc += h;
      // advance positions 1..r−1 lexicographically, keeping idx[0] fixed
      int pos = r - 1;
      while (pos >= 1 && idx[static_cast<std::size_t>(pos)] == n - r + pos) --pos;
      if (pos < 1) break;
      ++idx[static_cast<std::size_t>(pos)];
      for (int j = pos + 1; j < r; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
    }
    partial[lead] = acc;
  });
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
  for (const auto& p : partial) sum += p;
  return sum / total;
}

// Closed form when the kernel has one, exact enumeration otherwise.
inline Eigen::VectorXd u_statistic_fast(const RowMatrix& data, const UKernel& kernel, unsigned threads = 1) {
  if (!kernel.closed_form) return u_statistic(data, kernel, threads);
  detail::check_kernel_input(data, kernel);
  return kernel.closed_form(detail::canonical_rows(data));
}

// Average of h over `subsets` uniformly drawn r-subsets (with replacement across draws).
inline Eigen::VectorXd u_statistic_incomplete(const RowMatrix& data, const UKernel& kernel, std::size_t subsets,
                                              std::uint64_t seed) {
  detail::check_kernel_input(data, kernel);
  require(subsets >= 1, ErrorCode::InvalidConfig, "need at least one subset");
  const Eigen::Index n = data.rows();
  Engine eng(seed);
  std::vector<Eigen::Index> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(kernel.out_dim), h(kernel.out_dim);
  for (std::size_t s = 0; s < subsets; ++s) {
    for (int j = 0; j < kernel.r; ++j) {
      std::uniform_int_distribution<Eigen::Index> pick(j, n - 1);
      std::swap(pool[static_cast<std::size_t>(j)], pool[static_cast<std::size_t>(pick(eng))]);
    }
    kernel.eval(data, pool.data(), h.data());
    sum += h;
  }
  return sum / static_cast<double>(subsets);
}

using ZSampler = std::function<RowMatrix(Eigen::Index count, Engine& eng)>;

// Z with i.i.d. coordinates from a moment profile.
inline ZSampler profile_sampler(Eigen::Index p, const MomentProfile& profile) {
  profile.validate();
  return [p, profile](Eigen::Index count, Engine& eng) { return detail::draw_innovations(count, p, profile, eng); };
}

// Z = (x, y) with y = x + ε, x and ε i.i.d. from the profile.
inline ZSampler regression_sampler(const MomentProfile& profile) {
  profile.validate();
  return [profile](Eigen::Index count, Engine& eng) {
    RowMatrix z(count, 2);
    for (Eigen::Index i = 0; i < count; ++i) {
      z(i, 0) = profile.draw(eng);
      z(i, 1) = z(i, 0) + profile.draw(eng);
    }
    return z;
  };
}

struct ProjectionVariance {
  PsdMatrix value = PsdMatrix::scalar(1, 0.0);  // raw − correction, negative eigenvalues clipped
  Eigen::MatrixXd raw;         // outer sample covariance of the inner means
  Eigen::MatrixXd correction;  // mean within-variance / inner
  std::string note;
};

// Nested Monte Carlo for Var(E[h(Z_0, …, Z_{r−1}) | Z_0]).
inline ProjectionVariance projection_variance(const UKernel& kernel, const ZSampler& sampler, std::size_t reps,
                                              std::size_t inner, std::uint64_t seed, unsigned threads = 0) {
  require(reps >= 2 && inner >= 1, ErrorCode::InvalidConfig, "projection variance needs reps >= 2 and inner >= 1");
  const Eigen::Index d = kernel.out_dim;
  const int r = kernel.r;
  std::vector<Eigen::VectorXd> means(reps);
  std::vector<Eigen::MatrixXd> within(reps);
  parallel_for(reps, resolve_threads(threads), [&](std::size_t o) {
    Engine eng = make_engine(derive_seed(seed, {static_cast<std::uint64_t>(o)}));
    RowMatrix z(r, kernel.z_dim);
    z.row(0) = sampler(1, eng).row(0);
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(r));
    std::iota(idx.begin(), idx.end(), 0);
    const std::size_t draws = r == 1 ? 1 : inner;
    Eigen::VectorXd h(d), m = Eigen::VectorXd::Zero(d);
    Eigen::MatrixXd ss = Eigen::MatrixXd::Zero(d, d);
    std::vector<Eigen::VectorXd> vals;
    vals.reserve(draws);
    for (std::size_t j = 0; j < draws; ++j) {
      if (r > 1) z.bottomRows(r - 1) = sampler(r - 1, eng);
      kernel.eval(z, idx.data(), h.data());
      vals.push_back(h);
      m += h;
    }
    m /= static_cast<double>(draws);
    if (draws > 1) {
      for (const auto& v : vals) ss += (v - m) * (v - m).transpose();
      ss /= static_cast<double>(draws - 1);
    }
    means[o] = m;
    within[o] = ss;
  });
  const double R = static_cast<double>(reps);
  Eigen::VectorXd grand = Eigen::VectorXd::Zero(d);
  for (const auto& m : means) grand += m;
  grand /= R;
  ProjectionVariance out;
  out.raw = Eigen::MatrixXd::Zero(d, d);
  for (const auto& m : means) out.raw += (m - grand) * (m - grand).transpose();
  out.raw /= R - 1.0;
  out.correction = Eigen::MatrixXd::Zero(d, d);
  if (r > 1 && inner > 1) {
    for (const auto& w : within) out.correction += w;
    out.correction /= R * static_cast<double>(inner);
    out.note = "inner-mean noise removed by subtracting E[within variance]/inner";
  } else if (r > 1) {
    out.note = "inner = 1: estimate is biased upward by E[Var(h | Z_0)]";
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(out.raw - out.correction));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
  if (es.eigenvalues().minCoeff() < 0.0) out.note += out.note.empty() ? "negative eigenvalues clipped" : "; negative eigenvalues clipped";
  out.value = PsdMatrix(symmetrize(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose()));
  return out;
}

// Var(E[h | Z_0]) for the variance kernel when Z has i.i.d. centred unit-variance
// coordinates with fourth moment μ4: E[h | z] = ½(zzᵀ + I).
inline PsdMatrix variance_kernel_projection_exact(Eigen::Index p, double mu4) {
  require(std::isfinite(mu4), ErrorCode::DomainError, "fourth moment must be finite");
  auto e4 = [&](Eigen::Index a, Eigen::Index b, Eigen::Index c, Eigen::Index d) {
    if (a == b && b == c && c == d) return mu4;
    if ((a == b && c == d) || (a == c && b == d) || (a == d && b == c)) return 1.0;
    return 0.0;
  };
  Eigen::MatrixXd v(p * p, p * p);
  for (Eigen::Index a = 0; a < p; ++a)
    for (Eigen::Index b = 0; b < p; ++b)
      for (Eigen::Index c = 0; c < p; ++c)
        for (Eigen::Index d = 0; d < p; ++d)
          v(a * p + b, c * p + d) = 0.25 * (e4(a, b, c, d) - (a == b && c == d ? 1.0 : 0.0));
  return PsdMatrix(v);
}

// θ = E h by plain Monte Carlo over independent r-tuples.
inline Eigen::VectorXd estimate_theta(const UKernel& kernel, const ZSampler& sampler, std::size_t reps, std::uint64_t seed) {
  Engine eng(seed);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(kernel.r));
  std::iota(idx.begin(), idx.end(), 0);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(kernel.out_dim), h(kernel.out_dim);
  for (std::size_t i = 0; i < reps; ++i) {
    kernel.eval(sampler(kernel.r, eng), idx.data(), h.data());
    sum += h;
  }
  return sum / static_cast<double>(reps);
}

using BigRational = boost::multiprecision::cpp_rational;
using BigInt = boost::multiprecision::cpp_int;

inline BigInt binomial_exact(long long n, long long r) {
  if (r < 0 || r > n) return 0;
  r = std::min(r, n - r);
  BigInt c = 1;
  for (long long i = 1; i <= r; ++i) c = c * (n - r + i) / i;  // exact at each step
  return c;
}

// Q(n, r) = n² · C(n, r)^{−2} · C(n−1, r−1) · C(n−r, r−1), evaluated exactly.
inline BigRational q_nr_exact(long long n, long long r) {
  require(r >= 1 && n >= 2 * r - 1, ErrorCode::DomainError, "Q(n, r) needs r >= 1 and n >= 2r - 1");
  const BigInt c = binomial_exact(n, r);
  BigRational q(BigInt(n) * n * binomial_exact(n - 1, r - 1) * binomial_exact(n - r, r - 1), c * c);
  return q;
}

inline double q_nr(long long n, long long r) { return static_cast<double>(q_nr_exact(n, r)); }

}  // namespace cltlab
