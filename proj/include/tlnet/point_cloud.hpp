#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tlnet/error.hpp"
#include "tlnet/tensor.hpp"

namespace tlnet {

inline constexpr std::int32_t kIgnoreLabel = -1;

/// P = (G, F): m x d positions, m x f_d features, optional labels and a pose
/// into the common frame.
struct PointCloud {
  Mat<double> positions;
  Mat<double> features;
  std::vector<std::int32_t> labels;
  Eigen::Matrix4d pose = Eigen::Matrix4d::Identity();

  std::size_t size() const { return std::size_t(positions.rows()); }
  int dim() const { return static_cast<int>(positions.cols()); }
  int feature_dim() const { return static_cast<int>(features.cols()); }
  bool has_labels() const { return !labels.empty(); }

  /// Throws on non-finite positions, shape mismatches, or labels outside
  /// [0, num_classes) other than kIgnoreLabel. num_classes <= 0 skips the label range check.
  void validate(int num_classes = 0) const {
    if (features.rows() != positions.rows() && !(features.size() == 0 && features.cols() == 0)) {
      throw ShapeError("point cloud: feature rows differ from position rows");
    }
    if (!positions.allFinite()) throw UserError("point cloud: non-finite position");
    if (!labels.empty()) {
      if (labels.size() != size()) throw ShapeError("point cloud: label count differs from point count");
      if (num_classes > 0) {
        for (std::size_t i = 0; i < labels.size(); ++i) {
          const auto y = labels[i];
          if (y != kIgnoreLabel && (y < 0 || y >= num_classes)) {
            throw UserError("point cloud: label " + std::to_string(y) + " at point " + std::to_string(i) +
                            " outside the class set");
          }
        }
      }
    }
  }
};

}  // namespace tlnet
