#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

namespace dpmpb::pca {

struct Projection {
  std::vector<std::string> names;
  Eigen::MatrixXd points;       // rows aligned with names, 2 columns
  Eigen::MatrixXd components;   // input_dim x 2, sign-fixed
  Eigen::VectorXd mean;
};

// 2-D principal component projection with a deterministic sign convention:
// each component's largest-magnitude loading is made positive. Inputs with
// fewer than 2 dimensions pad the second coordinate with zero.
Projection project_2d(const std::vector<std::pair<std::string, Eigen::VectorXd>>& rows);

// Project an extra vector with an existing projection.
Eigen::Vector2d apply(const Projection& projection, const Eigen::VectorXd& v);

}  // namespace dpmpb::pca
