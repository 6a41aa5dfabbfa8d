#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "dpmpb/anomaly_stats.hpp"
#include "dpmpb/model.hpp"
#include "dpmpb/trainer.hpp"

namespace dpmpb::anomaly {

struct CalibrateOptions {
  // Restrict the error to one kept sensor signal's block.
  std::optional<std::string> signal;
  // Override for the 3-sigma threshold.
  std::optional<double> threshold;
};

// One-step teacher-forced prediction errors (normalized space) of the bundle
// at its current PB over the normal dataset; fits mu, Sigma, and the
// d_mean + 3 d_std threshold.
AnomalyStats calibrate(const model::ModelBundle& bundle, const trainer::Dataset& normal_data,
                       const CalibrateOptions& options = {});

double score(const AnomalyStats& stats, const Eigen::VectorXd& error);

struct Detection {
  bool anomalous = false;  // strict: d must exceed the threshold
  double d = 0.0;
};

Detection detect(const AnomalyStats& stats, const Eigen::VectorXd& error);

// Streaming scorer: feeds live (s, u) steps, compares each prediction with
// the next observation, optionally smoothing d with a moving average.
class ErrorStream {
 public:
  ErrorStream(const model::ModelBundle& bundle, const AnomalyStats& stats,
              int smoothing_window = 1);

  // Returns a detection once a prediction is pending (from the second step).
  std::optional<Detection> step(const Eigen::VectorXd& s_phys, const Eigen::VectorXd& u_phys);

 private:
  const model::ModelBundle& bundle_;
  const AnomalyStats& stats_;
  model::OutputLayout layout_;
  int smoothing_;
  std::vector<double> recent_;
  netcore::RecurrentState state_;
  std::optional<Eigen::VectorXd> pending_;  // normalized prediction of the next s
  bool has_state_ = false;
};

// Normalized kept-sensor error slice used by calibrate/score, exposed for
// building errors from raw step pairs.
Eigen::VectorXd prediction_error(const model::ModelBundle& bundle,
                                 const Eigen::VectorXd& predicted_norm,
                                 const Eigen::VectorXd& s_actual_phys,
                                 const std::optional<std::string>& signal);

}  // namespace dpmpb::anomaly
