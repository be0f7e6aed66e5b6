#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace cltlab {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// m points in R^d, each with weight 1/m. One point per row.
class PointCloud {
 public:
  PointCloud() = default;

  explicit PointCloud(RowMatrix points) : pts_(std::move(points)) {
    require(pts_.rows() >= 1 && pts_.cols() >= 1, ErrorCode::InsufficientSamples,
            "point cloud needs at least one point of positive dimension");
    require(pts_.allFinite(), ErrorCode::InvalidConfig, "point cloud has non-finite coordinates");
  }

  static PointCloud from_1d(const std::vector<double>& xs) {
    RowMatrix m(static_cast<Eigen::Index>(xs.size()), 1);
    for (std::size_t i = 0; i < xs.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = xs[i];
    return PointCloud(std::move(m));
  }

  Eigen::Index size() const { return pts_.rows(); }
  Eigen::Index dim() const { return pts_.cols(); }
  const RowMatrix& points() const { return pts_; }
  auto row(Eigen::Index i) const { return pts_.row(i); }
  double operator()(Eigen::Index i, Eigen::Index j) const { return pts_(i, j); }

 private:
  RowMatrix pts_;
};

}  // namespace cltlab
