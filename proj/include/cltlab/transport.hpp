#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "errors.hpp"
#include "linalg_gauss.hpp"
#include "point_cloud.hpp"
#include "rng.hpp"

namespace cltlab {

inline constexpr Eigen::Index kMaxAssignmentSize = 4096;

namespace detail {

inline double pow_cost(double sq_dist, double p) {
  if (p == 2.0) return sq_dist;
  const double r = std::sqrt(sq_dist);
  if (p == 1.0) return r;
  return std::pow(r, p);
}

inline void check_pair(const PointCloud& x, const PointCloud& y, double p) {
  require(x.size() == y.size(), ErrorCode::SizeMismatch, "clouds have different sizes");
  require(x.dim() == y.dim(), ErrorCode::DimMismatch, "clouds have different dimensions");
  require(p >= 1.0 && std::isfinite(p), ErrorCode::BadOrder, "transport order p must be >= 1");
}

// Dense linear assignment by shortest augmenting paths with the column
// reduction and augmenting row reduction passes of Jonker and Volgenant.
// cost is n×n row-major; returns row -> column.
class LapSolver {
 public:
  std::vector<int> solve(const std::vector<double>& cost, int n) {
    n_ = n;
    c_ = cost.data();
    x_.assign(static_cast<std::size_t>(n), -1);
    y_.assign(static_cast<std::size_t>(n), -1);
    v_.assign(static_cast<std::size_t>(n), 0.0);
    if (n == 1) {
      x_[0] = 0;
      return x_;
    }
    std::vector<int> free_rows(static_cast<std::size_t>(n));
    int n_free = column_reduction(free_rows);
    for (int pass = 0; pass < 2 && n_free > 0; ++pass) n_free = row_reduction(free_rows, n_free);
    if (n_free > 0) augment(free_rows, n_free);
    return x_;
  }

 private:
  double c(int i, int j) const { return c_[static_cast<std::size_t>(i) * static_cast<std::size_t>(n_) + static_cast<std::size_t>(j)]; }

  int column_reduction(std::vector<int>& free_rows) {
    const double big = std::numeric_limits<double>::infinity();
    std::fill(v_.begin(), v_.end(), big);
    std::fill(y_.begin(), y_.end(), 0);
    for (int i = 0; i < n_; ++i)
      for (int j = 0; j < n_; ++j) {
        const double cij = c(i, j);
        if (cij < v_[j]) {
          v_[j] = cij;
          y_[j] = i;
        }
      }
    std::vector<char> unique(static_cast<std::size_t>(n_), 1);
    for (int j = n_ - 1; j >= 0; --j) {
      const int i = y_[j];
      if (x_[i] < 0) {
        x_[i] = j;
      } else {
        unique[i] = 0;
        y_[j] = -1;
      }
    }
    int n_free = 0;
    for (int i = 0; i < n_; ++i) {
      if (x_[i] < 0) {
        free_rows[n_free++] = i;
      } else if (unique[i]) {
        const int j = x_[i];
        double mn = big;
        for (int j2 = 0; j2 < n_; ++j2) {
          if (j2 == j) continue;
          mn = std::min(mn, c(i, j2) - v_[j2]);
        }
        v_[j] -= mn;
      }
    }
    return n_free;
  }

  int row_reduction(std::vector<int>& free_rows, int n_free) {
    const double big = std::numeric_limits<double>::infinity();
    int current = 0;
    int new_free = 0;
    long long rr_cnt = 0;
    while (current < n_free) {
      ++rr_cnt;
      const int free_i = free_rows[current++];
      int j1 = 0;
      double v1 = c(free_i, 0) - v_[0];
      int j2 = -1;
      double v2 = big;
      for (int j = 1; j < n_; ++j) {
        const double h = c(free_i, j) - v_[j];
        if (h < v2) {
          if (h >= v1) {
            v2 = h;
            j2 = j;
          } else {
            v2 = v1;
            v1 = h;
            j2 = j1;
            j1 = j;
          }
        }
      }
      int i0 = y_[j1];
      const double v1_new = v_[j1] - (v2 - v1);
      const bool lowers = v1_new < v_[j1];
      // On geometric costs the reduction can bounce between rows for ~n² steps;
      // past 4n steps displaced rows are left to the exact augmentation phase.
      if (rr_cnt < static_cast<long long>(current) * n_ && rr_cnt < 4LL * n_) {
        if (lowers) {
          v_[j1] = v1_new;
        } else if (i0 >= 0 && j2 >= 0) {
          j1 = j2;
          i0 = y_[j2];
        }
        if (i0 >= 0) {
          if (lowers) {
            free_rows[--current] = i0;
          } else {
            free_rows[new_free++] = i0;
          }
        }
      } else if (i0 >= 0) {
        free_rows[new_free++] = i0;
      }
      x_[free_i] = j1;
      y_[j1] = free_i;
    }
    return new_free;
  }

  int find_min_columns(int lo) {
    int hi = lo + 1;
    double mind = d_[cols_[lo]];
    for (int k = hi; k < n_; ++k) {
      const int j = cols_[k];
      if (d_[j] <= mind) {
        if (d_[j] < mind) {
          hi = lo;
          mind = d_[j];
        }
        cols_[k] = cols_[hi];
        cols_[hi++] = j;
      }
    }
    return hi;
  }

  int scan(int& plo, int& phi) {
    int lo = plo;
    int hi = phi;
    while (lo != hi) {
      int j = cols_[lo++];
      const int i = y_[j];
      const double mind = d_[j];
      const double h = c(i, j) - v_[j] - mind;
      for (int k = hi; k < n_; ++k) {
        j = cols_[k];
        const double red = c(i, j) - v_[j] - h;
        if (red < d_[j]) {
          d_[j] = red;
          pred_[j] = i;
          if (red == mind) {
            if (y_[j] < 0) return j;
            cols_[k] = cols_[hi];
            cols_[hi++] = j;
          }
        }
      }
    }
    plo = lo;
    phi = hi;
    return -1;
  }

  int find_path(int start_i) {
    int lo = 0;
    int hi = 0;
    int final_j = -1;
    int n_ready = 0;
    cols_.resize(static_cast<std::size_t>(n_));
    d_.resize(static_cast<std::size_t>(n_));
    std::iota(cols_.begin(), cols_.end(), 0);
    for (int j = 0; j < n_; ++j) {
      d_[j] = c(start_i, j) - v_[j];
      pred_[j] = start_i;
    }
    while (final_j == -1) {
      if (lo == hi) {
        n_ready = lo;
        hi = find_min_columns(lo);
        for (int k = lo; k < hi; ++k) {
          const int j = cols_[k];
          if (y_[j] < 0) final_j = j;
        }
      }
      if (final_j == -1) final_j = scan(lo, hi);
    }
    const double mind = d_[cols_[lo]];
    for (int k = 0; k < n_ready; ++k) {
      const int j = cols_[k];
      v_[j] += d_[j] - mind;
    }
    return final_j;
  }

  void augment(const std::vector<int>& free_rows, int n_free) {
    pred_.assign(static_cast<std::size_t>(n_), 0);
    for (int f = 0; f < n_free; ++f) {
      const int free_i = free_rows[f];
      int i = -1;
      int j = find_path(free_i);
      while (i != free_i) {
        i = pred_[j];
        y_[j] = i;
        std::swap(j, x_[i]);
      }
    }
  }

  int n_ = 0;
  const double* c_ = nullptr;
  std::vector<int> x_, y_, cols_, pred_;
  std::vector<double> v_, d_;
};

}  // namespace detail

// Optimal permutation for the cost ‖x_i − y_j‖^p; element i is the column matched to row i.
inline std::vector<int> optimal_assignment(const PointCloud& x, const PointCloud& y, double p) {
  detail::check_pair(x, y, p);
  const Eigen::Index m = x.size();
  require(m <= kMaxAssignmentSize, ErrorCode::TooLarge, "assignment size exceeds 4096");
  std::vector<double> cost(static_cast<std::size_t>(m * m));
  const RowMatrix& a = x.points();
  const RowMatrix& b = y.points();
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      cost[static_cast<std::size_t>(i * m + j)] = detail::pow_cost((a.row(i) - b.row(j)).squaredNorm(), p);
  return detail::LapSolver().solve(cost, static_cast<int>(m));
}

// Mean of ‖x_i − y_σ(i)‖^p at the optimal σ, i.e. W_p^p.
inline double wp_assignment_pow(const PointCloud& x, const PointCloud& y, double p) {
  const std::vector<int> sigma = optimal_assignment(x, y, p);
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    total += detail::pow_cost((x.row(i) - y.row(sigma[static_cast<std::size_t>(i)])).squaredNorm(), p);
  return total / static_cast<double>(x.size());
}

inline double wp_assignment(const PointCloud& x, const PointCloud& y, double p) {
  return std::pow(wp_assignment_pow(x, y, p), 1.0 / p);
}

namespace detail {

inline double sorted_pow_mean(std::vector<double> a, std::vector<double> b, double p) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += pow_cost((a[i] - b[i]) * (a[i] - b[i]), p);
  return total / static_cast<double>(a.size());
}

inline std::vector<double> column(const PointCloud& x, Eigen::Index j) {
  std::vector<double> v(static_cast<std::size_t>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i) v[static_cast<std::size_t>(i)] = x(i, j);
  return v;
}

}  // namespace detail

inline double wp_sorted_1d_pow(const PointCloud& x, const PointCloud& y, double p) {
  detail::check_pair(x, y, p);
  require(x.dim() == 1, ErrorCode::DimMismatch, "wp_sorted_1d needs d = 1");
  return detail::sorted_pow_mean(detail::column(x, 0), detail::column(y, 0), p);
}

inline double wp_sorted_1d(const PointCloud& x, const PointCloud& y, double p) {
  return std::pow(wp_sorted_1d_pow(x, y, p), 1.0 / p);
}

// Brute force over all m! permutations; only for small clouds.
inline double wp_exhaustive(const PointCloud& x, const PointCloud& y, double p) {
  detail::check_pair(x, y, p);
  require(x.size() <= 9, ErrorCode::TooLarge, "exhaustive search is limited to m <= 9");
  std::vector<int> perm(static_cast<std::size_t>(x.size()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i)
      total += detail::pow_cost((x.row(i) - y.row(perm[static_cast<std::size_t>(i)])).squaredNorm(), p);
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::pow(best / static_cast<double>(x.size()), 1.0 / p);
}

struct WpEstimate {
  double value = 0.0;      // clamped at 0
  double raw_value = 0.0;  // may be negative when debiased
  double std_error = 0.0;
  double p = 1.0;
  Eigen::Index m = 0;
  bool debiased = false;
  std::vector<double> rep_values;  // per-rep estimates in W_p units (signed root when debiased)
};

enum class GaussianReference {
  Sampled,   // fresh Gaussian m-cloud per rep
  Quantile,  // exact quantiles at (i - 1/2)/m; per coordinate when d > 1 (diagonal target)
};

enum class WpMethod {
  Auto,              // sorted coupling when d = 1, assignment otherwise
  Assignment,
  ProductMarginals,  // p = 2, diagonal target, sample law with independent coordinates
  // Cost of the coupling that moves each coordinate by its own monotone map.
  // Any p; an upper bound on W_p and at least the largest marginal W_p.
  CoordinateQuantile,
};

struct WpOptions {
  GaussianReference reference = GaussianReference::Sampled;
  WpMethod method = WpMethod::Auto;
};

inline std::vector<double> gaussian_quantile_grid(double mean, double sd, Eigen::Index m) {
  boost::math::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> q(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i)
    q[static_cast<std::size_t>(i)] = mean + sd * boost::math::quantile(nd, (static_cast<double>(i) + 0.5) / static_cast<double>(m));
  return q;
}

namespace detail {

inline double signed_root(double v, double p) {
  return v >= 0.0 ? std::pow(v, 1.0 / p) : -std::pow(-v, 1.0 / p);
}

inline bool is_diagonal(const Eigen::MatrixXd& a) {
  const double scale = std::max(1e-300, a.diagonal().cwiseAbs().maxCoeff());
  Eigen::MatrixXd off = a;
  off.diagonal().setZero();
  return off.cwiseAbs().maxCoeff() <= 1e-12 * scale;
}

// W_p^p between two equal-size clouds under the chosen method.
inline double cloud_pow(const PointCloud& a, const PointCloud& b, double p, WpMethod method) {
  if (method == WpMethod::ProductMarginals) {
    double total = 0.0;
    for (Eigen::Index j = 0; j < a.dim(); ++j) total += sorted_pow_mean(column(a, j), column(b, j), 2.0);
    return total;
  }
  if (method == WpMethod::CoordinateQuantile) {
    const Eigen::Index m = a.size();
    Eigen::MatrixXd diff(m, a.dim());
    std::vector<Eigen::Index> ia(static_cast<std::size_t>(m)), ib(static_cast<std::size_t>(m));
    for (Eigen::Index j = 0; j < a.dim(); ++j) {
      std::iota(ia.begin(), ia.end(), Eigen::Index{0});
      ib = ia;
      std::sort(ia.begin(), ia.end(), [&](Eigen::Index u, Eigen::Index v) { return a.row(u)(j) < a.row(v)(j); });
      std::sort(ib.begin(), ib.end(), [&](Eigen::Index u, Eigen::Index v) { return b.row(u)(j) < b.row(v)(j); });
      for (Eigen::Index k = 0; k < m; ++k)
        diff(ia[static_cast<std::size_t>(k)], j) = a.row(ia[static_cast<std::size_t>(k)])(j) - b.row(ib[static_cast<std::size_t>(k)])(j);
    }
    double total = 0.0;
    for (Eigen::Index k = 0; k < m; ++k) total += pow_cost(diff.row(k).squaredNorm(), p);
    return total / static_cast<double>(m);
  }
  if (a.dim() == 1 && method == WpMethod::Auto) return wp_sorted_1d_pow(a, b, p);
  return wp_assignment_pow(a, b, p);
}

}  // namespace detail

inline WpEstimate estimate_wp_to_gaussian(const PointCloud& samples, const GaussianSpec& target, double p,
                                          Eigen::Index m, int reps, bool debias, std::uint64_t seed,
                                          const WpOptions& opts = {}) {
  require(p >= 1.0, ErrorCode::BadOrder, "transport order p must be >= 1");
  require(reps >= 1, ErrorCode::InsufficientSamples, "reps must be >= 1");
  require(m >= 1 && samples.size() >= m, ErrorCode::InsufficientSamples, "fewer samples than the paired size m");
  require(samples.dim() == target.dim(), ErrorCode::DimMismatch, "samples and target dimensions differ");
  const Eigen::Index d = samples.dim();
  if (opts.reference == GaussianReference::Quantile && d > 1) {
    require(detail::is_diagonal(target.cov.matrix()), ErrorCode::InvalidConfig,
            "a multivariate quantile reference needs a diagonal target covariance");
    require(opts.method == WpMethod::ProductMarginals || opts.method == WpMethod::CoordinateQuantile,
            ErrorCode::InvalidConfig, "a multivariate quantile reference needs a coordinatewise method");
  }
  if (opts.method == WpMethod::CoordinateQuantile)
    require(detail::is_diagonal(target.cov.matrix()), ErrorCode::InvalidConfig,
            "coordinatewise coupling needs a diagonal target covariance");
  if (opts.method == WpMethod::ProductMarginals) {
    require(p == 2.0, ErrorCode::BadOrder, "product-marginal estimator is exact only for p = 2");
    require(detail::is_diagonal(target.cov.matrix()), ErrorCode::InvalidConfig,
            "product-marginal estimator needs a diagonal target covariance");
  }
  if ((opts.method == WpMethod::Auto && d > 1) || opts.method == WpMethod::Assignment)
    require(m <= kMaxAssignmentSize, ErrorCode::TooLarge, "assignment size exceeds 4096");

  const Eigen::Index pool = samples.size();
  const bool disjoint = pool >= m * reps;
  Engine perm_eng = make_engine(seed, {0xC0FFEEULL});
  std::vector<Eigen::Index> order(static_cast<std::size_t>(pool));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  if (disjoint) std::shuffle(order.begin(), order.end(), perm_eng);

  PointCloud quantile_ref;
  if (opts.reference == GaussianReference::Quantile) {
    RowMatrix grid(m, d);
    for (Eigen::Index j = 0; j < d; ++j) {
      const auto q = gaussian_quantile_grid(target.mean(j), std::sqrt(target.cov(j, j)), m);
      for (Eigen::Index i = 0; i < m; ++i) grid(i, j) = q[static_cast<std::size_t>(i)];
    }
    quantile_ref = PointCloud(std::move(grid));
  }

  WpEstimate est;
  est.p = p;
  est.m = m;
  est.debiased = debias;
  est.rep_values.resize(static_cast<std::size_t>(reps));
  for (int r = 0; r < reps; ++r) {
    RowMatrix sub(m, d);
    if (disjoint) {
      for (Eigen::Index i = 0; i < m; ++i) sub.row(i) = samples.row(order[static_cast<std::size_t>(r * m + i)]);
    } else {
      Engine eng = make_engine(seed, {static_cast<std::uint64_t>(r), 0});
      for (Eigen::Index i = 0; i < m; ++i) {
        std::uniform_int_distribution<Eigen::Index> pick(i, pool - 1);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(eng))]);
        sub.row(i) = samples.row(order[static_cast<std::size_t>(i)]);
      }
    }
    const PointCloud x(std::move(sub));
    const std::uint64_t rs = static_cast<std::uint64_t>(r);
    double v;
    if (opts.reference == GaussianReference::Quantile) {
      v = detail::cloud_pow(x, quantile_ref, p, opts.method);
      if (debias) {
        const PointCloud g = sample_gaussian(target, m, derive_seed(seed, {rs, 1}));
        v -= detail::cloud_pow(g, quantile_ref, p, opts.method);
      }
    } else {
      const PointCloud g = sample_gaussian(target, m, derive_seed(seed, {rs, 1}));
      v = detail::cloud_pow(x, g, p, opts.method);
      if (debias) {
        const PointCloud g2 = sample_gaussian(target, m, derive_seed(seed, {rs, 2}));
        v -= detail::cloud_pow(g2, g, p, opts.method);
      }
    }
    est.rep_values[static_cast<std::size_t>(r)] = detail::signed_root(v, p);
  }
  const double n = static_cast<double>(reps);
  const double mean = std::accumulate(est.rep_values.begin(), est.rep_values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : est.rep_values) ss += (v - mean) * (v - mean);
  est.raw_value = mean;
  est.value = std::max(0.0, mean);
  est.std_error = reps > 1 ? std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0;
  return est;
}

}  // namespace cltlab
