#include "dpmpb/anomaly.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <iostream>

namespace dpmpb::anomaly {

namespace {

// Offset and width of a signal inside the kept-sensor output block.
std::pair<int, int> signal_slice(const model::ModelBundle& bundle,
                                 const model::OutputLayout& layout,
                                 const std::optional<std::string>& signal) {
  int n_sensor = 0;
  for (const auto& name : layout.kept_sensors) n_sensor += bundle.signals.at(name).dim;
  if (!signal) return {0, n_sensor};
  int at = 0;
  for (const auto& name : layout.kept_sensors) {
    const int dim = bundle.signals.at(name).dim;
    if (name == *signal) return {at, dim};
    at += dim;
  }
  throw ConfigError("anomaly: signal '" + *signal + "' is not a kept sensor output");
}

}  // namespace

Eigen::VectorXd prediction_error(const model::ModelBundle& bundle,
                                 const Eigen::VectorXd& predicted_norm,
                                 const Eigen::VectorXd& s_actual_phys,
                                 const std::optional<std::string>& signal) {
  const auto layout = bundle.output_layout();
  const auto [off, dim] = signal_slice(bundle, layout, signal);
  Eigen::VectorXd err(dim);
  int at = 0;
  for (const auto& name : layout.kept_sensors) {
    const auto& spec = bundle.signals.at(name);
    for (int i = 0; i < spec.dim; ++i) {
      const int pos = at + i;
      if (pos < off || pos >= off + dim) continue;
      const auto& stats = bundle.norm_stats.at(name);
      const double actual =
          (s_actual_phys(bundle.signals.block_offset(name) + i) - stats.mean(i)) / stats.std(i);
      err(pos - off) = predicted_norm(pos) - actual;
    }
    at += spec.dim;
  }
  return err;
}

AnomalyStats calibrate(const model::ModelBundle& bundle, const trainer::Dataset& normal_data,
                       const CalibrateOptions& options) {
  normal_data.validate(bundle.signals);
  const auto layout = bundle.output_layout();
  const auto [off, dim] = signal_slice(bundle, layout, options.signal);

  std::vector<Eigen::VectorXd> errors;
  for (const auto& ep : normal_data.episodes) {
    auto state = netcore::RecurrentState::zero(bundle.shape.hidden);
    for (int t = 0; t + 1 < ep.length(); ++t) {
      const Eigen::VectorXd input =
          bundle.assemble_input(ep.s[t], ep.u[t], bundle.current_pb);
      auto step = netcore::forward_step(bundle.params, input, state);
      state = std::move(step.state);
      errors.push_back(
          prediction_error(bundle, step.output.head(layout.dim), ep.s[t + 1], options.signal));
    }
  }
  if (errors.empty()) throw DataError("anomaly calibrate: no transitions in dataset");

  AnomalyStats stats;
  stats.signal = options.signal;
  stats.mu = Eigen::VectorXd::Zero(dim);
  for (const auto& e : errors) stats.mu += e;
  stats.mu /= static_cast<double>(errors.size());

  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(dim, dim);
  for (const auto& e : errors) {
    const Eigen::VectorXd c = e - stats.mu;
    sigma.noalias() += c * c.transpose();
  }
  sigma /= static_cast<double>(errors.size());

  double eps = std::max(1e-6 * sigma.trace() / dim, 1e-9);
  if (static_cast<int>(errors.size()) < dim) {
    std::cerr << "anomaly calibrate: only " << errors.size() << " samples for dimension " << dim
              << "; raising regularization\n";
    eps = 1e-3;
  }
  stats.epsilon = eps;
  stats.sigma = sigma + eps * Eigen::MatrixXd::Identity(dim, dim);
  stats.sigma_inv = stats.sigma.llt().solve(Eigen::MatrixXd::Identity(dim, dim));

  double sum = 0.0, sum_sq = 0.0;
  for (const auto& e : errors) {
    const double d = score(stats, e);
    sum += d;
    sum_sq += d * d;
  }
  stats.d_mean = sum / static_cast<double>(errors.size());
  const double var = sum_sq / static_cast<double>(errors.size()) - stats.d_mean * stats.d_mean;
  stats.d_std = std::sqrt(std::max(0.0, var));
  stats.threshold = options.threshold ? *options.threshold : stats.d_mean + 3.0 * stats.d_std;
  return stats;
}

double score(const AnomalyStats& stats, const Eigen::VectorXd& error) {
  if (error.size() != stats.mu.size()) throw ConfigError("anomaly score: dimension mismatch");
  const Eigen::VectorXd c = error - stats.mu;
  const double sq = c.dot(stats.sigma_inv * c);
  return std::sqrt(std::max(0.0, sq));
}

Detection detect(const AnomalyStats& stats, const Eigen::VectorXd& error) {
  const double d = score(stats, error);
  return {d > stats.threshold, d};
}

ErrorStream::ErrorStream(const model::ModelBundle& bundle, const AnomalyStats& stats,
                         int smoothing_window)
    : bundle_(bundle),
      stats_(stats),
      layout_(bundle.output_layout()),
      smoothing_(smoothing_window),
      state_(netcore::RecurrentState::zero(bundle.shape.hidden)) {
  if (smoothing_ < 1) throw ConfigError("anomaly stream: smoothing window must be >= 1");
}

std::optional<Detection> ErrorStream::step(const Eigen::VectorXd& s_phys,
                                           const Eigen::VectorXd& u_phys) {
  std::optional<Detection> detection;
  if (pending_) {
    const Eigen::VectorXd err =
        prediction_error(bundle_, *pending_, s_phys, stats_.signal);
    double d = score(stats_, err);
    recent_.push_back(d);
    if (static_cast<int>(recent_.size()) > smoothing_) recent_.erase(recent_.begin());
    if (smoothing_ > 1) {
      double sum = 0.0;
      for (const double x : recent_) sum += x;
      d = sum / static_cast<double>(recent_.size());
    }
    detection = Detection{d > stats_.threshold, d};
  }
  const Eigen::VectorXd input = bundle_.assemble_input(s_phys, u_phys, bundle_.current_pb);
  auto stepped = netcore::forward_step(bundle_.params, input, state_);
  state_ = std::move(stepped.state);
  pending_ = stepped.output.head(layout_.dim);
  return detection;
}

}  // namespace dpmpb::anomaly
