#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "linalg_gauss.hpp"
#include "point_cloud.hpp"
#include "rng.hpp"

namespace cltlab {

// Undirected simple graph on {0, ..., n-1}.
class DependencyGraph {
 public:
  explicit DependencyGraph(int n) : adj_(static_cast<std::size_t>(std::max(n, 0))) {
    require(n >= 1, ErrorCode::BadGraph, "graph needs at least one vertex");
  }

  DependencyGraph(int n, const std::vector<std::pair<int, int>>& edges) : DependencyGraph(n) {
    for (auto [a, b] : edges) add_edge(a, b);
  }

  void add_edge(int a, int b) {
    require(a >= 0 && b >= 0 && a < n() && b < n(), ErrorCode::BadGraph, "edge endpoint out of range");
    require(a != b, ErrorCode::BadGraph, "self-loops are not allowed");
    adj_[static_cast<std::size_t>(a)].insert(b);
    adj_[static_cast<std::size_t>(b)].insert(a);
  }

  static DependencyGraph edgeless(int n) { return DependencyGraph(n); }

  static DependencyGraph path(int n) {
    DependencyGraph g(n);
    for (int i = 0; i + 1 < n; ++i) g.add_edge(i, i + 1);
    return g;
  }

  static DependencyGraph cycle(int n) {
    require(n >= 3, ErrorCode::BadGraph, "cycle needs at least 3 vertices");
    DependencyGraph g = path(n);
    g.add_edge(n - 1, 0);
    return g;
  }

  static DependencyGraph grid(int rows, int cols) {
    require(rows >= 1 && cols >= 1, ErrorCode::BadGraph, "grid needs positive sides");
    DependencyGraph g(rows * cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const int v = r * cols + c;
        if (c + 1 < cols) g.add_edge(v, v + 1);
        if (r + 1 < rows) g.add_edge(v, v + cols);
      }
    return g;
  }

  // i ~ j iff 0 < |i − j| ≤ k: the graph of an index-k-dependent sequence.
  static DependencyGraph k_neighborhood(int n, int k) {
    require(k >= 0, ErrorCode::BadGraph, "neighborhood width must be >= 0");
    DependencyGraph g(n);
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j <= std::min(n - 1, i + k); ++j) g.add_edge(i, j);
    return g;
  }

  int n() const { return static_cast<int>(adj_.size()); }
  const std::set<int>& neighbors(int v) const { return adj_[static_cast<std::size_t>(v)]; }
  bool adjacent(int a, int b) const { return adj_[static_cast<std::size_t>(a)].count(b) > 0; }

  // Closed neighborhood N[v] in increasing order.
  std::vector<int> closed_neighborhood(int v) const {
    std::vector<int> out(neighbors(v).begin(), neighbors(v).end());
    out.insert(std::lower_bound(out.begin(), out.end(), v), v);
    return out;
  }

  int max_degree_plus_one() const {
    std::size_t deg = 0;
    for (const auto& s : adj_) deg = std::max(deg, s.size());
    return static_cast<int>(deg) + 1;
  }

  // Vertices at distance 1 or 2 become adjacent. Variables built from shared
  // closed neighborhoods are dependent exactly along this graph.
  DependencyGraph square() const {
    DependencyGraph g(n());
    for (int v = 0; v < n(); ++v)
      for (int u : closed_neighborhood(v))
        for (int w : closed_neighborhood(u))
          if (w > v) g.add_edge(v, w);
    return g;
  }

 private:
  std::vector<std::set<int>> adj_;
};

enum class ProfileFamily { Gaussian, CenteredExponential, SymmetrizedPareto, Rademacher };

// Centered, unit-variance innovation law.
struct MomentProfile {
  ProfileFamily family = ProfileFamily::Gaussian;
  double alpha = 0.0;  // symmetrized Pareto tail index

  static MomentProfile gaussian() { return {ProfileFamily::Gaussian, 0.0}; }
  static MomentProfile centered_exponential() { return {ProfileFamily::CenteredExponential, 0.0}; }
  static MomentProfile rademacher() { return {ProfileFamily::Rademacher, 0.0}; }
  static MomentProfile symmetrized_pareto(double alpha) {
    MomentProfile p{ProfileFamily::SymmetrizedPareto, alpha};
    p.validate();
    return p;
  }
  // Tail index 2 + δ + 0.05: E|X|^{2+δ} finite, E|X|^3 infinite when δ < 0.95.
  static MomentProfile pareto_for_delta(double delta) { return symmetrized_pareto(2.0 + delta + 0.05); }

  void validate() const {
    if (family == ProfileFamily::SymmetrizedPareto)
      require(std::isfinite(alpha) && alpha > 2.0, ErrorCode::BadProfileParams,
              "symmetrized Pareto needs tail index alpha > 2 for a finite variance");
  }

  std::string name() const {
    switch (family) {
      case ProfileFamily::Gaussian: return "gaussian";
      case ProfileFamily::CenteredExponential: return "centered-exponential";
      case ProfileFamily::SymmetrizedPareto: return "symmetrized-pareto";
      case ProfileFamily::Rademacher: return "rademacher";
    }
    return "unknown";
  }

  // |X| = s·U^{-1/α} with s chosen for unit variance.
  double pareto_scale() const { return std::sqrt((alpha - 2.0) / alpha); }

  double draw(Engine& eng) const {
    switch (family) {
      case ProfileFamily::Gaussian: {
        std::normal_distribution<double> nd;
        return nd(eng);
      }
      case ProfileFamily::CenteredExponential: return -std::log(uniform_open0(eng)) - 1.0;
      case ProfileFamily::SymmetrizedPareto: {
        const std::uint64_t bits = eng();
        const double u = 1.0 - static_cast<double>(bits >> 11) * 0x1.0p-53;
        const double mag = pareto_scale() * std::pow(u, -1.0 / alpha);
        return (bits & 1ULL) ? mag : -mag;
      }
      case ProfileFamily::Rademacher: return (eng() >> 63) ? 1.0 : -1.0;
    }
    return 0.0;
  }

  // E X^4, infinite when it does not exist.
  double fourth_moment() const {
    switch (family) {
      case ProfileFamily::Gaussian: return 3.0;
      case ProfileFamily::CenteredExponential: return 9.0;
      case ProfileFamily::Rademacher: return 1.0;
      case ProfileFamily::SymmetrizedPareto: {
        if (alpha <= 4.0) return std::numeric_limits<double>::infinity();
        const double s = pareto_scale();
        return s * s * s * s * alpha / (alpha - 4.0);
      }
    }
    return 0.0;
  }

  // Largest s with E|X|^s < ∞ (exclusive for Pareto).
  double moment_index() const {
    return family == ProfileFamily::SymmetrizedPareto ? alpha : std::numeric_limits<double>::infinity();
  }
};

inline constexpr int kGraphDependence = -1;

struct SequenceSample {
  RowMatrix data;    // n × d
  int M = 0;         // index dependence range; kGraphDependence for graph constructions
  std::string meta;

  Eigen::Index n() const { return data.rows(); }
  Eigen::Index d() const { return data.cols(); }
  Eigen::VectorXd sum() const { return data.colwise().sum().transpose(); }
};

namespace detail {

inline RowMatrix draw_innovations(Eigen::Index rows, Eigen::Index d, const MomentProfile& profile, Engine& eng) {
  RowMatrix z(rows, d);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < d; ++j) z(i, j) = profile.draw(eng);
  return z;
}

}  // namespace detail

inline SequenceSample gen_iid(Eigen::Index n, Eigen::Index d, const MomentProfile& profile, std::uint64_t seed) {
  require(n >= 1 && d >= 1, ErrorCode::InvalidConfig, "gen_iid needs n >= 1 and d >= 1");
  profile.validate();
  Engine eng(seed);
  return {detail::draw_innovations(n, d, profile, eng), 0, "iid " + profile.name()};
}

// X_i = (Z_i + ... + Z_{i+M}) / √(M+1).
inline SequenceSample gen_m_dependent(Eigen::Index n, Eigen::Index d, int M, const MomentProfile& profile,
                                      std::uint64_t seed) {
  require(n >= 1 && d >= 1, ErrorCode::InvalidConfig, "gen_m_dependent needs n >= 1 and d >= 1");
  require(M >= 0, ErrorCode::InvalidConfig, "dependence range M must be >= 0");
  profile.validate();
  Engine eng(seed);
  const RowMatrix z = detail::draw_innovations(n + M, d, profile, eng);
  const double scale = 1.0 / std::sqrt(static_cast<double>(M + 1));
  RowMatrix x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = z.middleRows(i, M + 1).colwise().sum() * scale;
  return {std::move(x), M, "ma(" + std::to_string(M) + ") " + profile.name()};
}

// X_i = Σ_{j∈N[i]} Z_j / √|N[i]| over i.i.d. vertex innovations.
inline SequenceSample gen_local_graph(const DependencyGraph& graph, Eigen::Index d, const MomentProfile& profile,
                                      std::uint64_t seed) {
  require(d >= 1, ErrorCode::InvalidConfig, "gen_local_graph needs d >= 1");
  profile.validate();
  Engine eng(seed);
  const RowMatrix z = detail::draw_innovations(graph.n(), d, profile, eng);
  RowMatrix x(graph.n(), d);
  for (int i = 0; i < graph.n(); ++i) {
    const std::vector<int> nb = graph.closed_neighborhood(i);
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(d);
    for (int j : nb) acc += z.row(j);
    x.row(i) = acc / std::sqrt(static_cast<double>(nb.size()));
  }
  return {std::move(x), kGraphDependence, "local-graph D=" + std::to_string(graph.max_degree_plus_one()) + " " + profile.name()};
}

// Optional cross-coordinate correlation: every row becomes A·X_i.
inline void apply_coordinate_mixing(SequenceSample& s, const Eigen::MatrixXd& a) {
  require(a.rows() == s.d() && a.cols() == s.d(), ErrorCode::DimMismatch, "mixing matrix must be d × d");
  s.data = s.data * a.transpose();
}

// Var(S_n)/n for the moving-average construction (per coordinate).
inline PsdMatrix exact_sigma_n_ma(Eigen::Index n, int M, double innovation_var) {
  require(n >= 1 && M >= 0, ErrorCode::InvalidConfig, "exact_sigma_n_ma needs n >= 1 and M >= 0");
  require(innovation_var >= 0.0, ErrorCode::InvalidConfig, "innovation variance must be >= 0");
  const double nn = static_cast<double>(n);
  double total = nn * innovation_var;
  for (int h = 1; h <= M && h < n; ++h) {
    const double gamma = innovation_var * static_cast<double>(M + 1 - h) / static_cast<double>(M + 1);
    total += 2.0 * (nn - h) * gamma;
  }
  Eigen::MatrixXd s(1, 1);
  s(0, 0) = total / nn;
  return PsdMatrix(s);
}

// Var(S_n)/n for gen_local_graph (per coordinate): S_n = Σ_j c_j Z_j with
// c_j = Σ_{i∈N[j]} |N[i]|^{-1/2}.
inline PsdMatrix exact_sigma_n_local(const DependencyGraph& graph, double innovation_var) {
  std::vector<double> inv_root(static_cast<std::size_t>(graph.n()));
  for (int i = 0; i < graph.n(); ++i)
    inv_root[static_cast<std::size_t>(i)] = 1.0 / std::sqrt(static_cast<double>(graph.neighbors(i).size() + 1));
  double total = 0.0;
  for (int j = 0; j < graph.n(); ++j) {
    double c = 0.0;
    for (int i : graph.closed_neighborhood(j)) c += inv_root[static_cast<std::size_t>(i)];
    total += c * c;
  }
  Eigen::MatrixXd s(1, 1);
  s(0, 0) = innovation_var * total / graph.n();
  return PsdMatrix(s);
}

}  // namespace cltlab
