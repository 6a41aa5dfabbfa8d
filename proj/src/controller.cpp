#include "dpmpb/controller.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace dpmpb::controller {

using nlohmann::json;

void ControlConfig::validate() const {
  if (n_control_step < 1) throw ConfigError("control config: horizon must be >= 1");
  if (n_control_batch < 1) throw ConfigError("control config: gamma grid size must be >= 1");
  if (n_control_epoch < 1) throw ConfigError("control config: epochs must be >= 1");
  if (!(gamma_max > 0.0)) throw ConfigError("control config: gamma_max must be > 0");
  if (n_control_periodic && *n_control_periodic < 1)
    throw ConfigError("control config: periodic mask period must be >= 1");
}

std::string to_string(TermKind kind) {
  switch (kind) {
    case TermKind::kTrackTarget: return "track";
    case TermKind::kMinimizeValue: return "minimize";
    case TermKind::kMaximizeValue: return "maximize";
    case TermKind::kMinimizeVelocity: return "min_velocity";
    case TermKind::kMinimizeVariance: return "min_variance";
    case TermKind::kAnisotropicHold: return "hold_initial";
    case TermKind::kMinimizeControl: return "min_control";
  }
  return "?";
}

namespace {

TermKind term_kind_from(const std::string& s) {
  if (s == "track") return TermKind::kTrackTarget;
  if (s == "minimize") return TermKind::kMinimizeValue;
  if (s == "maximize") return TermKind::kMaximizeValue;
  if (s == "min_velocity") return TermKind::kMinimizeVelocity;
  if (s == "min_variance") return TermKind::kMinimizeVariance;
  if (s == "hold_initial") return TermKind::kAnisotropicHold;
  if (s == "min_control") return TermKind::kMinimizeControl;
  throw ConfigError("loss spec: unknown term kind '" + s + "'");
}

std::vector<Eigen::VectorXd> parse_target(const json& t) {
  std::vector<Eigen::VectorXd> out;
  if (t.is_number()) {
    out.push_back(Eigen::VectorXd::Constant(1, t.get<double>()));
    return out;
  }
  if (!t.is_array() || t.empty()) throw ConfigError("loss spec: target must be number or array");
  if (t[0].is_number()) {
    Eigen::VectorXd v(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) v(i) = t[i].get<double>();
    out.push_back(std::move(v));
    return out;
  }
  for (const auto& row : t) {
    Eigen::VectorXd v(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) v(i) = row[i].get<double>();
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace

LossSpec loss_spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("loss spec: malformed JSON: ") + e.what());
  }
  if (!j.contains("terms") || !j["terms"].is_array() || j["terms"].empty())
    throw ConfigError("loss spec: terms must be a non-empty array");
  LossSpec spec;
  for (const auto& t : j["terms"]) {
    LossTerm term;
    if (!t.contains("kind")) throw ConfigError("loss spec: term lacks kind");
    term.kind = term_kind_from(t["kind"].get<std::string>());
    if (t.contains("signal")) term.signal = t["signal"].get<std::string>();
    if (t.contains("weight")) term.weight = t["weight"].get<double>();
    if (t.contains("target")) term.target = parse_target(t["target"]);
    if (t.contains("w4")) term.w4 = t["w4"].get<double>();
    if (t.contains("mask") && t["mask"].get<bool>()) term.use_mask = true;
    spec.terms.push_back(std::move(term));
  }
  return spec;
}

LossSpec load_loss_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("loss spec: cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return loss_spec_from_json(buf.str());
}

LossEvaluator::LossEvaluator(const model::ModelBundle& bundle, const LossSpec& spec,
                             const ControlConfig& cfg)
    : mask_period_(cfg.n_control_periodic) {
  if (spec.terms.empty()) throw ConfigError("loss spec: at least one term required");
  const auto layout = bundle.output_layout();
  auto sensor_offset = [&](const std::string& name) {
    int at = 0;
    for (const auto& kept : layout.kept_sensors) {
      if (kept == name) return at;
      at += bundle.signals.at(kept).dim;
    }
    throw ConfigError("loss spec: signal '" + name + "' is not a kept sensor output");
  };

  for (const auto& term : spec.terms) {
    Resolved r;
    r.term = term;
    if (term.kind == TermKind::kMinimizeControl) {
      r.on_control = true;
      r.offset = 0;
      r.dim = bundle.signals.control_dim();
    } else {
      const auto& sig = bundle.signals.at(term.signal);
      r.dim = sig.dim;
      if (sig.kind == model::SignalKind::kControl) {
        if (term.kind == TermKind::kMinimizeVariance || term.kind == TermKind::kAnisotropicHold)
          throw ConfigError("loss spec: " + to_string(term.kind) +
                            " applies to sensor signals only");
        r.on_control = true;
        r.offset = bundle.signals.block_offset(term.signal);
      } else {
        r.offset = sensor_offset(term.signal);
        if (term.kind == TermKind::kMinimizeVariance) {
          if (!bundle.shape.variance_mode)
            throw ConfigError("loss spec: min_variance requires a variance-mode model");
          r.on_variance = true;
        }
      }
      // Normalize targets once. Variance targets are not a thing; tracking
      // and hold terms carry physical-unit values.
      const auto& stats = bundle.norm_stats.at(term.signal);
      for (const auto& t : term.target) {
        if (t.size() != sig.dim)
          throw ConfigError("loss spec: target dimension mismatch for '" + term.signal + "'");
        r.target_norm.push_back(stats.normalize(t));
      }
      if (term.kind == TermKind::kTrackTarget || term.kind == TermKind::kAnisotropicHold) {
        if (r.target_norm.empty())
          throw ConfigError("loss spec: " + to_string(term.kind) + " on '" + term.signal +
                            "' needs a target");
      }
      if (term.kind == TermKind::kAnisotropicHold && !(term.w4 > 1.0))
        throw ConfigError("loss spec: hold_initial needs w4 > 1");
      if (term.use_mask && !mask_period_)
        throw ConfigError("loss spec: mask requested without a periodic mask period");
    }
    if (!std::isfinite(r.term.weight)) throw ConfigError("loss spec: non-finite weight");
    resolved_.push_back(std::move(r));
  }
}

double LossEvaluator::term_value(const Resolved& r, const std::vector<Eigen::VectorXd>& s_pred,
                                 const std::vector<Eigen::VectorXd>* v_pred,
                                 const std::vector<Eigen::VectorXd>& u, long step_counter,
                                 Gradients* grads) const {
  const auto& seq = r.on_control ? u : (r.on_variance ? *v_pred : s_pred);
  const int horizon = static_cast<int>(seq.size());
  auto slice = [&](int t) { return seq[t].segment(r.offset, r.dim); };
  auto add_grad = [&](int t, const Eigen::VectorXd& g) {
    if (!grads) return;
    auto& store = r.on_control ? grads->d_u : (r.on_variance ? grads->d_v : grads->d_s);
    store[t].segment(r.offset, r.dim) += g;
  };
  const double w = r.term.kind == TermKind::kMaximizeValue ? -r.term.weight : r.term.weight;

  double value = 0.0;
  switch (r.term.kind) {
    case TermKind::kTrackTarget:
    case TermKind::kAnisotropicHold: {
      for (int t = 0; t < horizon; ++t) {
        double mask = 1.0;
        if (r.term.use_mask) {
          const long global = step_counter + t + 1;
          mask = (global % *mask_period_ == 0) ? 1.0 : 0.0;
          if (mask == 0.0) continue;
        }
        const Eigen::VectorXd& ref =
            r.target_norm.size() == 1
                ? r.target_norm[0]
                : r.target_norm[std::min<std::size_t>(t, r.target_norm.size() - 1)];
        Eigen::VectorXd res = slice(t) - ref;
        if (r.term.kind == TermKind::kAnisotropicHold)
          for (int i = 0; i < r.dim; ++i)
            if (res(i) < 0.0) res(i) *= r.term.w4;
        value += w * mask * res.squaredNorm();
        if (grads) {
          Eigen::VectorXd g = 2.0 * w * mask * res;
          if (r.term.kind == TermKind::kAnisotropicHold)
            for (int i = 0; i < r.dim; ++i)
              if (slice(t)(i) - ref(i) < 0.0) g(i) *= r.term.w4;
          add_grad(t, g);
        }
      }
      break;
    }
    case TermKind::kMinimizeValue:
    case TermKind::kMaximizeValue:
    case TermKind::kMinimizeControl: {
      for (int t = 0; t < horizon; ++t) {
        value += w * slice(t).squaredNorm();
        if (grads) add_grad(t, (2.0 * w * slice(t)).eval());
      }
      break;
    }
    case TermKind::kMinimizeVariance: {
      // Linear in the predicted variance, i.e. the squared L2 norm of the
      // predicted standard deviations: together with a tracking term this is
      // the variance half of E[(s - ref)^2] = (mean - ref)^2 + v.
      for (int t = 0; t < horizon; ++t) {
        value += w * slice(t).sum();
        if (grads) add_grad(t, Eigen::VectorXd::Constant(r.dim, w));
      }
      break;
    }
    case TermKind::kMinimizeVelocity: {
      // Differences 3:T minus 2:T-1 in one-based terms: the first difference
      // is excluded, vacuous below horizon 3.
      for (int t = 2; t < horizon; ++t) {
        Eigen::VectorXd diff = slice(t) - slice(t - 1);
        value += w * diff.squaredNorm();
        if (grads) {
          add_grad(t, (2.0 * w * diff).eval());
          add_grad(t - 1, (-2.0 * w * diff).eval());
        }
      }
      break;
    }
  }
  return value;
}

double LossEvaluator::eval(const std::vector<Eigen::VectorXd>& s_pred,
                           const std::vector<Eigen::VectorXd>* v_pred,
                           const std::vector<Eigen::VectorXd>& u, long step_counter) const {
  double total = 0.0;
  for (const auto& r : resolved_) total += term_value(r, s_pred, v_pred, u, step_counter, nullptr);
  return total;
}

LossEvaluator::Gradients LossEvaluator::eval_with_grad(
    const std::vector<Eigen::VectorXd>& s_pred, const std::vector<Eigen::VectorXd>* v_pred,
    const std::vector<Eigen::VectorXd>& u, long step_counter) const {
  Gradients grads;
  grads.d_s.assign(s_pred.size(), Eigen::VectorXd::Zero(s_pred.empty() ? 0 : s_pred[0].size()));
  if (v_pred)
    grads.d_v.assign(v_pred->size(),
                     Eigen::VectorXd::Zero(v_pred->empty() ? 0 : (*v_pred)[0].size()));
  grads.d_u.assign(u.size(), Eigen::VectorXd::Zero(u.empty() ? 0 : u[0].size()));
  for (const auto& r : resolved_)
    grads.loss += term_value(r, s_pred, v_pred, u, step_counter, &grads);
  return grads;
}

std::string LossEvaluator::nonfinite_term(const std::vector<Eigen::VectorXd>& s_pred,
                                          const std::vector<Eigen::VectorXd>* v_pred,
                                          const std::vector<Eigen::VectorXd>& u,
                                          long step_counter) const {
  for (const auto& r : resolved_) {
    const double v = term_value(r, s_pred, v_pred, u, step_counter, nullptr);
    if (!std::isfinite(v)) {
      std::string name = to_string(r.term.kind);
      if (!r.term.signal.empty()) name += "(" + r.term.signal + ")";
      return name;
    }
  }
  return "rollout";
}

std::vector<Eigen::VectorXd> warm_start(const std::vector<Eigen::VectorXd>& u_prev_seq) {
  if (u_prev_seq.empty()) throw ConfigError("warm_start: empty sequence");
  std::vector<Eigen::VectorXd> out(u_prev_seq.begin() + 1, u_prev_seq.end());
  out.push_back(u_prev_seq.back());
  return out;
}

std::vector<double> gamma_grid(double gamma_max, int n) {
  if (!(gamma_max > 0.0)) throw ConfigError("gamma_grid: gamma_max must be > 0");
  if (n < 1) throw ConfigError("gamma_grid: n must be >= 1");
  std::vector<double> grid{0.0};
  for (int i = n - 1; i >= 0; --i) grid.push_back(gamma_max * std::pow(10.0, -i));
  return grid;
}

CtmResult ctm_step(const model::ModelBundle& bundle, const Eigen::VectorXd& s_prev,
                   const Eigen::VectorXd& u_prev, const netcore::RecurrentState& state) {
  if (bundle.structure != model::Structure::kCtm)
    throw ConfigError("ctm_step: requires a CTM bundle");
  auto res = model::predict(bundle, s_prev, u_prev, bundle.current_pb, state);

  Eigen::VectorXd u = u_prev;  // dropped control dims hold their previous value
  for (const auto& [name, value] : res.prediction.controls)
    u.segment(bundle.signals.block_offset(name), value.size()) = value;

  for (const auto& spec : bundle.signals.specs()) {
    if (spec.kind != model::SignalKind::kControl) continue;
    const int off = bundle.signals.block_offset(spec.name);
    const auto& stats = bundle.norm_stats.at(spec.name);
    for (int i = 0; i < spec.dim; ++i) {
      double lo, hi;
      if (!spec.bounds.empty()) {
        lo = spec.bounds[i].first;
        hi = spec.bounds[i].second;
      } else {
        lo = stats.mean(i) - stats.std(i);
        hi = stats.mean(i) + stats.std(i);
      }
      u(off + i) = std::clamp(u(off + i), lo, hi);
    }
  }
  return {std::move(u), std::move(res.state)};
}

BundleDynamics::BundleDynamics(const model::ModelBundle& bundle, const Eigen::VectorXd& s_phys,
                               const netcore::RecurrentState& live_state)
    : bundle_(bundle), layout_(bundle.output_layout()), snapshot_(live_state) {
  if (bundle_.structure != model::Structure::kStm)
    throw ConfigError("stm_optimize: requires an STM bundle");
  s0_norm_ = bundle_.normalize_block(model::SignalKind::kSensor, s_phys);
  int at = 0;
  for (const auto& name : layout_.kept_sensors) {
    const auto& spec = bundle_.signals.at(name);
    for (int i = 0; i < spec.dim; ++i)
      feedback_.emplace_back(at + i, bundle_.signals.block_offset(name) + i);
    at += spec.dim;
  }
  state_dim_ = at;
}

void BundleDynamics::rollout(const std::vector<Eigen::VectorXd>& u_seq,
                             std::vector<Eigen::VectorXd>& s_pred,
                             std::vector<Eigen::VectorXd>& v_pred) {
  const int horizon = static_cast<int>(u_seq.size());
  const int pb_offset = bundle_.signals.sensor_dim() + bundle_.signals.control_dim();
  traces_.assign(horizon, netcore::StepTrace{});
  s_pred.assign(horizon, Eigen::VectorXd());
  v_pred.clear();
  if (variance()) v_pred.assign(horizon, Eigen::VectorXd());

  netcore::RecurrentState state = snapshot_;
  Eigen::VectorXd sensors = s0_norm_;  // dropped sensor inputs stay at the live values
  for (int t = 0; t < horizon; ++t) {
    Eigen::VectorXd input(bundle_.shape.input_dim);
    input.segment(0, sensors.size()) = sensors;
    input.segment(sensors.size(), u_seq[t].size()) = u_seq[t];
    input.segment(pb_offset, bundle_.pb_dim()) = bundle_.current_pb;
    auto step = netcore::forward_step_traced(bundle_.params, input, state, traces_[t]);
    state = std::move(step.state);
    s_pred[t] = step.output.head(state_dim_);
    if (variance())
      v_pred[t] = netcore::variance_from_raw(
          Eigen::VectorXd(step.output.segment(state_dim_, state_dim_)));
    for (const auto& [out_pos, in_pos] : feedback_) sensors(in_pos) = s_pred[t](out_pos);
  }
}

void BundleDynamics::backward(const std::vector<Eigen::VectorXd>& d_s,
                              const std::vector<Eigen::VectorXd>& d_v,
                              std::vector<Eigen::VectorXd>& d_u) {
  const int horizon = static_cast<int>(traces_.size());
  const int sensor_dim = bundle_.signals.sensor_dim();
  const int control_dim = bundle_.signals.control_dim();
  d_u.assign(horizon, Eigen::VectorXd::Zero(control_dim));

  auto grad_sink = netcore::NetworkParams::zeros(bundle_.shape);
  auto d_state = netcore::RecurrentState::zero(bundle_.shape.hidden);
  Eigen::VectorXd d_next_sensors = Eigen::VectorXd::Zero(sensor_dim);
  for (int t = horizon - 1; t >= 0; --t) {
    Eigen::VectorXd d_out = Eigen::VectorXd::Zero(bundle_.shape.output_dim);
    d_out.head(state_dim_) = d_s[t];
    if (variance() && !d_v.empty()) {
      // Through the softplus variance head.
      const auto raw = traces_[t].fc_out_act[3].segment(state_dim_, state_dim_);
      for (int i = 0; i < state_dim_; ++i)
        d_out(state_dim_ + i) += d_v[t](i) * netcore::sigmoid(raw(i));
    }
    // Gradient routed back from the next step's sensor input.
    for (const auto& [out_pos, in_pos] : feedback_) d_out(out_pos) += d_next_sensors(in_pos);
    auto back = netcore::backward_step(bundle_.params, traces_[t], d_out, d_state, grad_sink);
    d_u[t] = back.d_input.segment(sensor_dim, control_dim);
    d_next_sensors = back.d_input.head(sensor_dim);
    d_state = std::move(back.d_state);
  }
}

NormalizedControlResult optimize_horizon(HorizonDynamics& dynamics,
                                         const LossEvaluator& evaluator,
                                         const ControlConfig& cfg,
                                         std::vector<Eigen::VectorXd> u_init,
                                         const Eigen::VectorXd& u_lo,
                                         const Eigen::VectorXd& u_hi, long step_counter) {
  cfg.validate();
  const int horizon = static_cast<int>(u_init.size());
  if (horizon != cfg.n_control_step)
    throw ConfigError("optimize_horizon: u_init length must equal the horizon");
  auto clamp_seq = [&](std::vector<Eigen::VectorXd>& seq) {
    for (auto& u : seq) u = u.cwiseMax(u_lo).cwiseMin(u_hi);
  };
  clamp_seq(u_init);

  NormalizedControlResult result;
  result.u_seq = std::move(u_init);
  const auto grid = gamma_grid(cfg.gamma_max, cfg.n_control_batch);

  std::vector<Eigen::VectorXd> s_pred, v_pred;
  for (int epoch = 0; epoch < cfg.n_control_epoch; ++epoch) {
    // Fresh incumbent rollout so the cached trace matches the point the
    // gradient is taken at.
    dynamics.rollout(result.u_seq, s_pred, v_pred);
    const std::vector<Eigen::VectorXd>* v_ptr = dynamics.variance() ? &v_pred : nullptr;
    auto grads = evaluator.eval_with_grad(s_pred, v_ptr, result.u_seq, step_counter);
    if (!std::isfinite(grads.loss))
      throw NumericalError("stm_optimize: non-finite loss from term " +
                           evaluator.nonfinite_term(s_pred, v_ptr, result.u_seq, step_counter));
    std::vector<Eigen::VectorXd> d_u;
    dynamics.backward(grads.d_s, grads.d_v, d_u);
    for (std::size_t t = 0; t < d_u.size(); ++t) d_u[t] += grads.d_u[t];

    double best_loss = grads.loss;  // the gamma = 0 candidate
    double best_gamma = 0.0;
    std::vector<Eigen::VectorXd> best_u = result.u_seq;
    std::vector<Eigen::VectorXd> best_s = s_pred, best_v = v_pred;
    for (const double gamma : grid) {
      if (gamma == 0.0) continue;
      std::vector<Eigen::VectorXd> cand(result.u_seq.size());
      for (std::size_t t = 0; t < cand.size(); ++t) cand[t] = result.u_seq[t] - gamma * d_u[t];
      clamp_seq(cand);
      std::vector<Eigen::VectorXd> s_cand, v_cand;
      dynamics.rollout(cand, s_cand, v_cand);
      const std::vector<Eigen::VectorXd>* vc = dynamics.variance() ? &v_cand : nullptr;
      const double loss = evaluator.eval(s_cand, vc, cand, step_counter);
      if (!std::isfinite(loss))
        throw NumericalError("stm_optimize: non-finite loss from term " +
                             evaluator.nonfinite_term(s_cand, vc, cand, step_counter));
      if (loss < best_loss) {  // ties keep the smaller gamma
        best_loss = loss;
        best_gamma = gamma;
        best_u = std::move(cand);
        best_s = std::move(s_cand);
        best_v = std::move(v_cand);
      }
    }
    result.u_seq = std::move(best_u);
    s_pred = std::move(best_s);
    v_pred = std::move(best_v);
    result.loss_trace.push_back(best_loss);
    result.chosen_gamma.push_back(best_gamma);
  }
  result.s_pred = std::move(s_pred);
  result.v_pred = std::move(v_pred);
  return result;
}

void control_bounds(const model::ModelBundle& bundle, Eigen::VectorXd& lo, Eigen::VectorXd& hi) {
  const int dim = bundle.signals.control_dim();
  lo.resize(dim);
  hi.resize(dim);
  for (const auto& spec : bundle.signals.specs()) {
    if (spec.kind != model::SignalKind::kControl) continue;
    const int off = bundle.signals.block_offset(spec.name);
    const auto& stats = bundle.norm_stats.at(spec.name);
    for (int i = 0; i < spec.dim; ++i) {
      if (!spec.bounds.empty()) {
        lo(off + i) = (spec.bounds[i].first - stats.mean(i)) / stats.std(i);
        hi(off + i) = (spec.bounds[i].second - stats.mean(i)) / stats.std(i);
      } else {
        lo(off + i) = -1.0;
        hi(off + i) = 1.0;
      }
    }
  }
}

ControlResult stm_optimize(const model::ModelBundle& bundle, const Eigen::VectorXd& s_phys,
                           const netcore::RecurrentState& live_state,
                           const std::vector<Eigen::VectorXd>& u_prev_seq_phys,
                           const LossSpec& loss_spec, const ControlConfig& cfg,
                           long step_counter) {
  cfg.validate();
  if (static_cast<int>(u_prev_seq_phys.size()) != cfg.n_control_step)
    throw ConfigError("stm_optimize: u_prev_seq length must equal the horizon");

  LossEvaluator evaluator(bundle, loss_spec, cfg);
  BundleDynamics dynamics(bundle, s_phys, live_state);

  std::vector<Eigen::VectorXd> u_init_phys = warm_start(u_prev_seq_phys);
  std::vector<Eigen::VectorXd> u_init(u_init_phys.size());
  for (std::size_t t = 0; t < u_init_phys.size(); ++t)
    u_init[t] = bundle.normalize_block(model::SignalKind::kControl, u_init_phys[t]);

  Eigen::VectorXd lo, hi;
  control_bounds(bundle, lo, hi);
  auto norm_result =
      optimize_horizon(dynamics, evaluator, cfg, std::move(u_init), lo, hi, step_counter);

  ControlResult result;
  result.loss_trace = std::move(norm_result.loss_trace);
  result.chosen_gamma = std::move(norm_result.chosen_gamma);
  const auto layout = bundle.output_layout();
  for (const auto& u : norm_result.u_seq) {
    Eigen::VectorXd u_phys(u.size());
    for (const auto& spec : bundle.signals.specs()) {
      if (spec.kind != model::SignalKind::kControl) continue;
      const int off = bundle.signals.block_offset(spec.name);
      u_phys.segment(off, spec.dim) =
          bundle.norm_stats.at(spec.name).denormalize(u.segment(off, spec.dim));
    }
    result.u_opt_seq.push_back(std::move(u_phys));
  }
  for (const auto& s : norm_result.s_pred)
    result.s_pred_seq.push_back(bundle.denormalize_block_sensors(s, layout));
  return result;
}

}  // namespace dpmpb::controller
