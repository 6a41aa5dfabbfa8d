#pragma once

#include <Eigen/Core>
#include <deque>
#include <string>
#include <vector>

#include "dpmpb/model.hpp"
#include "dpmpb/netcore.hpp"

namespace dpmpb::adapter {

// Bounded FIFO of live (s, u) steps in physical units.
class AdaptBuffer {
 public:
  AdaptBuffer(int capacity, int warmup_threshold);

  void push(const Eigen::VectorXd& s, const Eigen::VectorXd& u);
  int count() const { return static_cast<int>(steps_.size()); }
  int capacity() const { return capacity_; }
  bool warmed_up() const { return count() >= warmup_; }
  int warmup_threshold() const { return warmup_; }

  const Eigen::VectorXd& s(int i) const { return steps_[i].first; }
  const Eigen::VectorXd& u(int i) const { return steps_[i].second; }

 private:
  int capacity_;
  int warmup_;
  std::deque<std::pair<Eigen::VectorXd, Eigen::VectorXd>> steps_;
};

enum class AdaptObjective { kPredictionError, kStyle };

struct AdaptConfig {
  int n_online_batch = 8;
  int n_online_epoch = 3;
  int window_len = 20;  // contiguous sub-window length for prediction-error updates
  netcore::MsgdHyper msgd{0.05, 0.9};
  AdaptObjective objective = AdaptObjective::kPredictionError;
  double style_w1 = -0.1;  // negative maximizes predicted control velocity

  void validate() const;
};

enum class AdaptStatus { kWarmingUp, kUpdated };

struct AdaptResult {
  AdaptStatus status = AdaptStatus::kWarmingUp;
  Eigen::VectorXd pb;                   // value after the update
  std::vector<double> objective_trace;  // per-epoch objective
};

// Holds the MomentumSGD velocity between calls so consecutive updates behave
// like one continuing descent on the drifting buffer objective.
class PbUpdater {
 public:
  PbUpdater(const AdaptConfig& cfg, int pb_dim);

  // Teacher-forced buffer replay; updates bundle.current_pb in place (whole
  // value swap), never touches network weights or the PB table.
  AdaptResult update(model::ModelBundle& bundle, const AdaptBuffer& buffer);

  // Eq.-style objective on an autoregressive replay from the buffer's first
  // step; CTM only.
  AdaptResult update_style(model::ModelBundle& bundle, const AdaptBuffer& buffer);

  void reset_velocity();

 private:
  AdaptConfig cfg_;
  Eigen::VectorXd velocity_;
};

// Single-call conveniences used by tests and the CLI.
AdaptResult update_pb(model::ModelBundle& bundle, const AdaptBuffer& buffer,
                      const AdaptConfig& cfg);
AdaptResult update_pb_style(model::ModelBundle& bundle, const AdaptBuffer& buffer,
                            const AdaptConfig& cfg);

// Teacher-forced mean squared prediction error of the whole buffer at `pb`,
// LSTM state zeroed at the buffer start. Also the per-epoch objective trace.
double buffer_prediction_mse(const model::ModelBundle& bundle, const AdaptBuffer& buffer,
                             const Eigen::VectorXd& pb);

}  // namespace dpmpb::adapter
