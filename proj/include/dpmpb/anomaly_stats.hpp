#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>

namespace dpmpb::anomaly {

// Calibration statistics for prediction-error scoring. Errors are measured in
// normalized signal space over the kept sensor outputs (or one signal's block
// when `signal` is set).
struct AnomalyStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;      // regularized covariance
  Eigen::MatrixXd sigma_inv;  // cached inverse of the regularized covariance
  double epsilon = 0.0;       // ridge added to sigma's diagonal
  double d_mean = 0.0;
  double d_std = 0.0;
  double threshold = 0.0;  // d_mean + 3 * d_std unless overridden
  std::optional<std::string> signal;  // per-signal mode
};

}  // namespace dpmpb::anomaly
