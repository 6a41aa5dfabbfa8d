#include "dpmpb/netcore.hpp"

#include <cmath>
#include <string>

namespace dpmpb::netcore {

namespace {

constexpr double kLn2Pi = 1.8378770664093453;

void check(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

Eigen::MatrixXd glorot_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.uniform(-bound, bound);
  return m;
}

}  // namespace

void NetworkShape::validate() const {
  check(input_dim >= 1, "network shape: input_dim must be >= 1");
  check(output_dim >= 1, "network shape: output_dim must be >= 1");
  check(hidden >= 1, "network shape: hidden must be >= 1");
  if (variance_mode)
    check(output_dim % 2 == 0, "network shape: variance mode needs an even output_dim");
}

NetworkParams NetworkParams::zeros(const NetworkShape& shape) {
  shape.validate();
  NetworkParams p;
  p.shape = shape;
  const int h = shape.hidden;
  auto fc = [](int out, int in) {
    return FcLayer{Eigen::MatrixXd::Zero(out, in), Eigen::VectorXd::Zero(out)};
  };
  p.fc_in[0] = fc(h, shape.input_dim);
  for (int i = 1; i < 4; ++i) p.fc_in[i] = fc(h, h);
  for (auto& layer : p.lstm) {
    layer.wx = Eigen::MatrixXd::Zero(4 * h, h);
    layer.wh = Eigen::MatrixXd::Zero(4 * h, h);
    layer.b = Eigen::VectorXd::Zero(4 * h);
  }
  for (int i = 0; i < 3; ++i) p.fc_out[i] = fc(h, h);
  p.fc_out[3] = fc(shape.output_dim, h);
  return p;
}

NetworkParams NetworkParams::glorot(const NetworkShape& shape, std::uint64_t seed) {
  NetworkParams p = zeros(shape);
  Rng rng(seed);
  for (auto& layer : p.fc_in) layer.w = glorot_matrix(layer.w.rows(), layer.w.cols(), rng);
  for (auto& layer : p.lstm) {
    layer.wx = glorot_matrix(layer.wx.rows(), layer.wx.cols(), rng);
    layer.wh = glorot_matrix(layer.wh.rows(), layer.wh.cols(), rng);
  }
  for (auto& layer : p.fc_out) layer.w = glorot_matrix(layer.w.rows(), layer.w.cols(), rng);
  return p;
}

Eigen::Index NetworkParams::size() const {
  Eigen::Index n = 0;
  for (const auto& layer : fc_in) n += layer.w.size() + layer.b.size();
  for (const auto& layer : lstm) n += layer.wx.size() + layer.wh.size() + layer.b.size();
  for (const auto& layer : fc_out) n += layer.w.size() + layer.b.size();
  return n;
}

Eigen::VectorXd NetworkParams::flatten() const {
  Eigen::VectorXd flat(size());
  Eigen::Index at = 0;
  auto put = [&](const Eigen::MatrixXd& m) {
    flat.segment(at, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    at += m.size();
  };
  for (const auto& layer : fc_in) {
    put(layer.w);
    put(layer.b);
  }
  for (const auto& layer : lstm) {
    put(layer.wx);
    put(layer.wh);
    put(layer.b);
  }
  for (const auto& layer : fc_out) {
    put(layer.w);
    put(layer.b);
  }
  return flat;
}

void NetworkParams::assign_flat(const Eigen::VectorXd& flat) {
  check(flat.size() == size(), "assign_flat: length mismatch");
  Eigen::Index at = 0;
  auto take = [&](Eigen::MatrixXd& m) {
    Eigen::Map<Eigen::VectorXd>(m.data(), m.size()) = flat.segment(at, m.size());
    at += m.size();
  };
  auto take_v = [&](Eigen::VectorXd& v) {
    v = flat.segment(at, v.size());
    at += v.size();
  };
  for (auto& layer : fc_in) {
    take(layer.w);
    take_v(layer.b);
  }
  for (auto& layer : lstm) {
    take(layer.wx);
    take(layer.wh);
    take_v(layer.b);
  }
  for (auto& layer : fc_out) {
    take(layer.w);
    take_v(layer.b);
  }
}

RecurrentState RecurrentState::zero(int hidden) {
  RecurrentState s;
  for (auto& v : s.h) v = Eigen::VectorXd::Zero(hidden);
  for (auto& v : s.c) v = Eigen::VectorXd::Zero(hidden);
  return s;
}

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Eigen::VectorXd variance_from_raw(const Eigen::VectorXd& raw) {
  return raw.unaryExpr([](double r) { return variance_from_raw(r); });
}

namespace {

struct LstmStepOut {
  Eigen::VectorXd h, c;
};

LstmStepOut lstm_forward(const LstmLayer& layer, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& h_prev, const Eigen::VectorXd& c_prev,
                         StepTrace::LstmTrace* trace) {
  const int h = static_cast<int>(h_prev.size());
  Eigen::VectorXd z = layer.wx * x + layer.wh * h_prev + layer.b;
  Eigen::VectorXd gi = z.segment(0, h).unaryExpr([](double v) { return sigmoid(v); });
  Eigen::VectorXd gf = z.segment(h, h).unaryExpr([](double v) { return sigmoid(v); });
  Eigen::VectorXd gg = z.segment(2 * h, h).array().tanh();
  Eigen::VectorXd go = z.segment(3 * h, h).unaryExpr([](double v) { return sigmoid(v); });
  Eigen::VectorXd c = gf.cwiseProduct(c_prev) + gi.cwiseProduct(gg);
  Eigen::VectorXd tanh_c = c.array().tanh();
  Eigen::VectorXd out_h = go.cwiseProduct(tanh_c);
  if (trace) {
    trace->i = gi;
    trace->f = gf;
    trace->g = gg;
    trace->o = go;
    trace->c_prev = c_prev;
    trace->h_prev = h_prev;
    trace->c = c;
    trace->tanh_c = tanh_c;
    trace->h = out_h;
  }
  return {std::move(out_h), std::move(c)};
}

StepResult run_step(const NetworkParams& params, const Eigen::VectorXd& input,
                    const RecurrentState& state, StepTrace* trace) {
  check(input.size() == params.shape.input_dim, "forward_step: input dimension mismatch");
  check(state.h[0].size() == params.shape.hidden, "forward_step: state dimension mismatch");

  Eigen::VectorXd a = input;
  for (int i = 0; i < 4; ++i) {
    a = (params.fc_in[i].w * a + params.fc_in[i].b).array().tanh();
    if (trace) trace->fc_in_act[i] = a;
  }

  StepResult result;
  result.state = state;
  for (int l = 0; l < 2; ++l) {
    auto out = lstm_forward(params.lstm[l], a, state.h[l], state.c[l],
                            trace ? &trace->lstm[l] : nullptr);
    result.state.h[l] = out.h;
    result.state.c[l] = out.c;
    a = std::move(out.h);
  }

  for (int i = 0; i < 3; ++i) {
    a = (params.fc_out[i].w * a + params.fc_out[i].b).array().tanh();
    if (trace) trace->fc_out_act[i] = a;
  }
  result.output = params.fc_out[3].w * a + params.fc_out[3].b;
  if (trace) {
    trace->fc_out_act[3] = result.output;
    trace->input = input;
  }
  return result;
}

}  // namespace

StepResult forward_step(const NetworkParams& params, const Eigen::VectorXd& input,
                        const RecurrentState& state) {
  return run_step(params, input, state, nullptr);
}

StepResult forward_step_traced(const NetworkParams& params, const Eigen::VectorXd& input,
                               const RecurrentState& state, StepTrace& trace) {
  return run_step(params, input, state, &trace);
}

StepBackward backward_step(const NetworkParams& params, const StepTrace& trace,
                           const Eigen::VectorXd& d_output,
                           const RecurrentState& d_state_out, NetworkParams& grad_accum) {
  const int h = params.shape.hidden;

  // Output head, linear last layer first.
  Eigen::VectorXd d = d_output;
  grad_accum.fc_out[3].w.noalias() += d * trace.fc_out_act[2].transpose();
  grad_accum.fc_out[3].b += d;
  d = params.fc_out[3].w.transpose() * d;
  for (int i = 2; i >= 0; --i) {
    const Eigen::VectorXd& act = trace.fc_out_act[i];
    Eigen::VectorXd d_pre = d.cwiseProduct((1.0 - act.array().square()).matrix());
    const Eigen::VectorXd& below = (i == 0) ? trace.lstm[1].h : trace.fc_out_act[i - 1];
    grad_accum.fc_out[i].w.noalias() += d_pre * below.transpose();
    grad_accum.fc_out[i].b += d_pre;
    d = params.fc_out[i].w.transpose() * d_pre;
  }

  StepBackward back;
  back.d_state = RecurrentState::zero(h);

  for (int l = 1; l >= 0; --l) {
    const auto& lt = trace.lstm[l];
    const auto& layer = params.lstm[l];
    Eigen::VectorXd dh = d + d_state_out.h[l];
    Eigen::VectorXd dc = d_state_out.c[l] +
                         dh.cwiseProduct(lt.o).cwiseProduct(
                             (1.0 - lt.tanh_c.array().square()).matrix());
    Eigen::VectorXd d_o = dh.cwiseProduct(lt.tanh_c);
    Eigen::VectorXd d_i = dc.cwiseProduct(lt.g);
    Eigen::VectorXd d_g = dc.cwiseProduct(lt.i);
    Eigen::VectorXd d_f = dc.cwiseProduct(lt.c_prev);

    Eigen::VectorXd dz(4 * h);
    dz.segment(0, h) = d_i.cwiseProduct(lt.i).cwiseProduct((1.0 - lt.i.array()).matrix());
    dz.segment(h, h) = d_f.cwiseProduct(lt.f).cwiseProduct((1.0 - lt.f.array()).matrix());
    dz.segment(2 * h, h) = d_g.cwiseProduct((1.0 - lt.g.array().square()).matrix());
    dz.segment(3 * h, h) = d_o.cwiseProduct(lt.o).cwiseProduct((1.0 - lt.o.array()).matrix());

    const Eigen::VectorXd& x = (l == 0) ? trace.fc_in_act[3] : trace.lstm[0].h;
    grad_accum.lstm[l].wx.noalias() += dz * x.transpose();
    grad_accum.lstm[l].wh.noalias() += dz * lt.h_prev.transpose();
    grad_accum.lstm[l].b += dz;

    back.d_state.h[l] = layer.wh.transpose() * dz;
    back.d_state.c[l] = dc.cwiseProduct(lt.f);
    d = layer.wx.transpose() * dz;
  }

  for (int i = 3; i >= 0; --i) {
    const Eigen::VectorXd& act = trace.fc_in_act[i];
    Eigen::VectorXd d_pre = d.cwiseProduct((1.0 - act.array().square()).matrix());
    const Eigen::VectorXd& below = (i == 0) ? trace.input : trace.fc_in_act[i - 1];
    grad_accum.fc_in[i].w.noalias() += d_pre * below.transpose();
    grad_accum.fc_in[i].b += d_pre;
    d = params.fc_in[i].w.transpose() * d_pre;
  }
  back.d_input = std::move(d);
  return back;
}

BpttResult bptt(const NetworkParams& params, const std::vector<Eigen::VectorXd>& inputs,
                const std::vector<Eigen::VectorXd>& targets, LossKind loss_kind) {
  check(!inputs.empty() && inputs.size() == targets.size(),
        "bptt: inputs and targets must be non-empty and equal length");
  if (loss_kind == LossKind::kNll)
    check(params.shape.variance_mode, "bptt: nll loss requires variance mode");

  const auto n_steps = inputs.size();
  const int t_dim = params.shape.target_dim();
  const double scale = 1.0 / (static_cast<double>(n_steps) * t_dim);

  std::vector<StepTrace> traces(n_steps);
  std::vector<Eigen::VectorXd> outputs(n_steps);
  RecurrentState state = RecurrentState::zero(params.shape.hidden);
  for (std::size_t t = 0; t < n_steps; ++t) {
    auto step = forward_step_traced(params, inputs[t], state, traces[t]);
    outputs[t] = std::move(step.output);
    state = std::move(step.state);
  }

  BpttResult result;
  result.grad_params = NetworkParams::zeros(params.shape);
  result.grad_inputs.resize(n_steps);

  double loss = 0.0;
  std::vector<Eigen::VectorXd> d_outputs(n_steps);
  for (std::size_t t = 0; t < n_steps; ++t) {
    check(targets[t].size() == t_dim, "bptt: target dimension mismatch");
    Eigen::VectorXd d_out = Eigen::VectorXd::Zero(params.shape.output_dim);
    if (loss_kind == LossKind::kMse) {
      // In variance mode the mse is taken on the mean head only.
      Eigen::VectorXd err = outputs[t].head(t_dim) - targets[t];
      loss += err.squaredNorm() * scale;
      d_out.head(t_dim) = 2.0 * scale * err;
    } else {
      for (int i = 0; i < t_dim; ++i) {
        const double mean = outputs[t](i);
        const double raw = outputs[t](t_dim + i);
        const double var = variance_from_raw(raw);
        const double err = mean - targets[t](i);
        loss += scale * (0.5 * (kLn2Pi + std::log(var)) + err * err / (2.0 * var));
        d_out(i) = scale * err / var;
        const double d_var = scale * (0.5 / var - err * err / (2.0 * var * var));
        d_out(t_dim + i) = d_var * sigmoid(raw);
      }
    }
    d_outputs[t] = std::move(d_out);
  }
  result.loss = loss;

  RecurrentState d_state = RecurrentState::zero(params.shape.hidden);
  for (std::size_t t = n_steps; t-- > 0;) {
    auto back = backward_step(params, traces[t], d_outputs[t], d_state, result.grad_params);
    result.grad_inputs[t] = std::move(back.d_input);
    d_state = std::move(back.d_state);
  }
  return result;
}

AdamState AdamState::zero(Eigen::Index n) {
  return AdamState{Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), 0};
}

void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamState& state,
               const AdamHyper& hyper) {
  check(params.size() == grad.size() && params.size() == state.m.size(),
        "adam_step: shape mismatch");
  state.step += 1;
  state.m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad;
  state.v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grad.cwiseProduct(grad);
  const double m_corr = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double v_corr = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  params.array() -= hyper.lr * (state.m.array() / m_corr) /
                    ((state.v.array() / v_corr).sqrt() + hyper.eps);
}

void msgd_step(Eigen::VectorXd& vec, const Eigen::VectorXd& grad, Eigen::VectorXd& velocity,
               const MsgdHyper& hyper) {
  check(vec.size() == grad.size() && vec.size() == velocity.size(), "msgd_step: shape mismatch");
  velocity = hyper.momentum * velocity + grad;
  vec -= hyper.lr * velocity;
}

}  // namespace dpmpb::netcore
