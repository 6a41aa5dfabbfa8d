#include "dpmpb/adapter.hpp"

#include <algorithm>
#include <cmath>

namespace dpmpb::adapter {

AdaptBuffer::AdaptBuffer(int capacity, int warmup_threshold)
    : capacity_(capacity), warmup_(warmup_threshold) {
  if (capacity < 1) throw ConfigError("adapt buffer: capacity must be >= 1");
  if (warmup_threshold < 2)
    throw ConfigError("adapt buffer: warmup threshold must be >= 2");
}

void AdaptBuffer::push(const Eigen::VectorXd& s, const Eigen::VectorXd& u) {
  steps_.emplace_back(s, u);
  while (static_cast<int>(steps_.size()) > capacity_) steps_.pop_front();
}

void AdaptConfig::validate() const {
  if (n_online_batch < 1) throw ConfigError("adapt config: n_online_batch must be >= 1");
  if (n_online_epoch < 1) throw ConfigError("adapt config: n_online_epoch must be >= 1");
  if (window_len < 2) throw ConfigError("adapt config: window_len must be >= 2");
}

namespace {

// Normalized target over the kept outputs for the transition into (s, u).
Eigen::VectorXd kept_target(const model::ModelBundle& bundle, const model::OutputLayout& layout,
                            const Eigen::VectorXd& s_phys, const Eigen::VectorXd& u_phys) {
  Eigen::VectorXd target(layout.dim);
  int at = 0;
  for (const auto& name : layout.kept_sensors) {
    const auto& spec = bundle.signals.at(name);
    target.segment(at, spec.dim) = bundle.norm_stats.at(name).normalize(
        s_phys.segment(bundle.signals.block_offset(name), spec.dim));
    at += spec.dim;
  }
  for (const auto& name : layout.kept_controls) {
    const auto& spec = bundle.signals.at(name);
    target.segment(at, spec.dim) = bundle.norm_stats.at(name).normalize(
        u_phys.segment(bundle.signals.block_offset(name), spec.dim));
    at += spec.dim;
  }
  return target;
}

// Gradient of the teacher-forced window mse w.r.t. pb.
struct WindowGrad {
  double loss = 0.0;
  Eigen::VectorXd grad_pb;
};

WindowGrad window_pb_gradient(const model::ModelBundle& bundle,
                              const model::OutputLayout& layout, const AdaptBuffer& buffer,
                              int start, int len, const Eigen::VectorXd& pb) {
  const int pb_offset = bundle.signals.sensor_dim() + bundle.signals.control_dim();
  std::vector<Eigen::VectorXd> inputs(len), targets(len);
  for (int t = 0; t < len; ++t) {
    inputs[t] = bundle.assemble_input(buffer.s(start + t), buffer.u(start + t), pb);
    targets[t] = kept_target(bundle, layout, buffer.s(start + t + 1), buffer.u(start + t + 1));
  }
  auto res = netcore::bptt(bundle.params, inputs, targets, netcore::LossKind::kMse);
  WindowGrad out;
  out.loss = res.loss;
  out.grad_pb = Eigen::VectorXd::Zero(bundle.pb_dim());
  for (const auto& gi : res.grad_inputs) out.grad_pb += gi.segment(pb_offset, bundle.pb_dim());
  return out;
}

}  // namespace

double buffer_prediction_mse(const model::ModelBundle& bundle, const AdaptBuffer& buffer,
                             const Eigen::VectorXd& pb) {
  if (buffer.count() < 2) throw DataError("buffer_prediction_mse: need at least 2 steps");
  const auto layout = bundle.output_layout();
  auto state = netcore::RecurrentState::zero(bundle.shape.hidden);
  double sum = 0.0;
  const int transitions = buffer.count() - 1;
  for (int t = 0; t < transitions; ++t) {
    auto step = netcore::forward_step(
        bundle.params, bundle.assemble_input(buffer.s(t), buffer.u(t), pb), state);
    state = std::move(step.state);
    const Eigen::VectorXd target = kept_target(bundle, layout, buffer.s(t + 1), buffer.u(t + 1));
    sum += (step.output.head(layout.dim) - target).squaredNorm();
  }
  return sum / (static_cast<double>(transitions) * layout.dim);
}

PbUpdater::PbUpdater(const AdaptConfig& cfg, int pb_dim) : cfg_(cfg) {
  cfg_.validate();
  velocity_ = Eigen::VectorXd::Zero(pb_dim);
}

void PbUpdater::reset_velocity() { velocity_.setZero(); }

AdaptResult PbUpdater::update(model::ModelBundle& bundle, const AdaptBuffer& buffer) {
  AdaptResult result;
  result.pb = bundle.current_pb;
  if (!buffer.warmed_up()) return result;

  const auto layout = bundle.output_layout();
  const int transitions = buffer.count() - 1;
  const int len = std::min(cfg_.window_len, transitions);
  const int n_starts = transitions - len + 1;

  Eigen::VectorXd pb = bundle.current_pb;
  for (int epoch = 0; epoch < cfg_.n_online_epoch; ++epoch) {
    // Evenly spaced contiguous windows; deterministic for a given buffer.
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(bundle.pb_dim());
    double mean_loss = 0.0;
    for (int b = 0; b < cfg_.n_online_batch; ++b) {
      const int start =
          cfg_.n_online_batch == 1
              ? (n_starts - 1) / 2
              : static_cast<int>((static_cast<long>(b) * (n_starts - 1)) /
                                 (cfg_.n_online_batch - 1));
      auto wg = window_pb_gradient(bundle, layout, buffer, start, len, pb);
      grad += wg.grad_pb;
      mean_loss += wg.loss;
    }
    grad /= static_cast<double>(cfg_.n_online_batch);
    result.objective_trace.push_back(mean_loss / cfg_.n_online_batch);
    netcore::msgd_step(pb, grad, velocity_, cfg_.msgd);
  }
  bundle.current_pb = pb;  // whole-value swap
  result.status = AdaptStatus::kUpdated;
  result.pb = pb;
  return result;
}

AdaptResult PbUpdater::update_style(model::ModelBundle& bundle, const AdaptBuffer& buffer) {
  if (bundle.structure != model::Structure::kCtm)
    throw ConfigError("update_pb_style: requires a CTM bundle (controls in the output)");
  if (buffer.count() < 2) throw DataError("update_pb_style: need at least 2 buffered steps");

  const auto layout = bundle.output_layout();
  const auto& signals = bundle.signals;
  const int pb_offset = signals.sensor_dim() + signals.control_dim();
  const int hidden = bundle.shape.hidden;
  const int t_steps = buffer.count() - 1;  // predictions for buffer indices 1..T-1

  // Output position -> input position for autoregressive feedback.
  struct Route {
    int out_pos, in_pos;
  };
  std::vector<Route> routes;
  {
    int at = 0;
    for (const auto& name : layout.kept_sensors) {
      const auto& spec = signals.at(name);
      for (int i = 0; i < spec.dim; ++i)
        routes.push_back({at + i, signals.block_offset(name) + i});
      at += spec.dim;
    }
    for (const auto& name : layout.kept_controls) {
      const auto& spec = signals.at(name);
      for (int i = 0; i < spec.dim; ++i)
        routes.push_back({at + i, signals.sensor_dim() + signals.block_offset(name) + i});
      at += spec.dim;
    }
  }
  int n_sensor_out = 0;
  for (const auto& name : layout.kept_sensors) n_sensor_out += signals.at(name).dim;

  AdaptResult result;
  Eigen::VectorXd pb = bundle.current_pb;

  for (int epoch = 0; epoch < cfg_.n_online_epoch; ++epoch) {
    // Autoregressive replay seeded with the first measured step.
    std::vector<netcore::StepTrace> traces(t_steps);
    std::vector<Eigen::VectorXd> inputs(t_steps), outputs(t_steps);
    auto state = netcore::RecurrentState::zero(hidden);
    for (int t = 0; t < t_steps; ++t) {
      // Start from measured data, then overwrite fed-back positions.
      Eigen::VectorXd input = bundle.assemble_input(buffer.s(t), buffer.u(t), pb);
      if (t > 0)
        for (const auto& r : routes) input(r.in_pos) = outputs[t - 1](r.out_pos);
      auto step = netcore::forward_step_traced(bundle.params, input, state, traces[t]);
      inputs[t] = std::move(input);
      outputs[t] = step.output;
      state = std::move(step.state);
    }

    // L = ||s_data - s_pred||_2 + w1 * ||u_pred velocity||_2, both unsquared.
    double s_sq = 0.0;
    std::vector<Eigen::VectorXd> s_err(t_steps);
    for (int t = 0; t < t_steps; ++t) {
      const Eigen::VectorXd target =
          kept_target(bundle, layout, buffer.s(t + 1), buffer.u(t + 1));
      s_err[t] = outputs[t].head(n_sensor_out) - target.head(n_sensor_out);
      s_sq += s_err[t].squaredNorm();
    }
    const double s_norm = std::sqrt(s_sq);

    double v_sq = 0.0;
    std::vector<Eigen::VectorXd> v_err(t_steps);
    for (int t = 1; t < t_steps; ++t) {
      v_err[t] = outputs[t].segment(n_sensor_out, layout.dim - n_sensor_out) -
                 outputs[t - 1].segment(n_sensor_out, layout.dim - n_sensor_out);
      v_sq += v_err[t].squaredNorm();
    }
    const double v_norm = std::sqrt(v_sq);
    result.objective_trace.push_back(s_norm + cfg_.style_w1 * v_norm);

    std::vector<Eigen::VectorXd> d_out(
        t_steps, Eigen::VectorXd::Zero(bundle.shape.output_dim));
    for (int t = 0; t < t_steps; ++t)
      if (s_norm > 0.0) d_out[t].head(n_sensor_out) = s_err[t] / s_norm;
    for (int t = 1; t < t_steps; ++t) {
      if (v_norm > 0.0) {
        const Eigen::VectorXd g = cfg_.style_w1 * v_err[t] / v_norm;
        d_out[t].segment(n_sensor_out, layout.dim - n_sensor_out) += g;
        d_out[t - 1].segment(n_sensor_out, layout.dim - n_sensor_out) -= g;
      }
    }

    Eigen::VectorXd grad_pb = Eigen::VectorXd::Zero(bundle.pb_dim());
    auto grad_sink = netcore::NetworkParams::zeros(bundle.shape);
    auto d_state = netcore::RecurrentState::zero(hidden);
    Eigen::VectorXd d_feedback;  // gradient routed into the previous output
    for (int t = t_steps - 1; t >= 0; --t) {
      Eigen::VectorXd d_total = d_out[t];
      if (t + 1 < t_steps && d_feedback.size() > 0) d_total += d_feedback;
      auto back = netcore::backward_step(bundle.params, traces[t], d_total, d_state, grad_sink);
      grad_pb += back.d_input.segment(pb_offset, bundle.pb_dim());
      d_state = std::move(back.d_state);
      d_feedback = Eigen::VectorXd::Zero(bundle.shape.output_dim);
      if (t > 0)
        for (const auto& r : routes) d_feedback(r.out_pos) += back.d_input(r.in_pos);
    }
    netcore::msgd_step(pb, grad_pb, velocity_, cfg_.msgd);
  }

  bundle.current_pb = pb;
  result.status = AdaptStatus::kUpdated;
  result.pb = pb;
  return result;
}

AdaptResult update_pb(model::ModelBundle& bundle, const AdaptBuffer& buffer,
                      const AdaptConfig& cfg) {
  PbUpdater updater(cfg, bundle.pb_dim());
  return updater.update(bundle, buffer);
}

AdaptResult update_pb_style(model::ModelBundle& bundle, const AdaptBuffer& buffer,
                            const AdaptConfig& cfg) {
  PbUpdater updater(cfg, bundle.pb_dim());
  return updater.update_style(bundle, buffer);
}

}  // namespace dpmpb::adapter
