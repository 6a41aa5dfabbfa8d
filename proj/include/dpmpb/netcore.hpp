#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <vector>

#include "dpmpb/common.hpp"

namespace dpmpb::netcore {

// Fixed 10-layer recurrent stack: FC(in->H) tanh, 3x FC(H->H) tanh,
// 2x LSTM(H->H), 3x FC(H->H) tanh, FC(H->out) linear.
struct NetworkShape {
  int input_dim = 0;
  int output_dim = 0;
  int hidden = 64;
  bool variance_mode = false;  // output = [means, raw variances]

  void validate() const;
  // Number of predicted quantities (half the output width in variance mode).
  int target_dim() const { return variance_mode ? output_dim / 2 : output_dim; }
  bool operator==(const NetworkShape&) const = default;
};

struct FcLayer {
  Eigen::MatrixXd w;  // out x in
  Eigen::VectorXd b;
};

// Gate rows stacked [i; f; g; o], each block `hidden` tall.
struct LstmLayer {
  Eigen::MatrixXd wx;  // 4H x in
  Eigen::MatrixXd wh;  // 4H x H
  Eigen::VectorXd b;   // 4H
};

struct NetworkParams {
  NetworkShape shape;
  std::array<FcLayer, 4> fc_in;
  std::array<LstmLayer, 2> lstm;
  std::array<FcLayer, 4> fc_out;

  static NetworkParams zeros(const NetworkShape& shape);
  static NetworkParams glorot(const NetworkShape& shape, std::uint64_t seed);

  Eigen::Index size() const;
  Eigen::VectorXd flatten() const;
  void assign_flat(const Eigen::VectorXd& flat);
};

struct RecurrentState {
  std::array<Eigen::VectorXd, 2> h;
  std::array<Eigen::VectorXd, 2> c;

  static RecurrentState zero(int hidden);
};

struct StepResult {
  Eigen::VectorXd output;
  RecurrentState state;
};

// Intermediates cached by one traced step, consumed by backward_step.
struct StepTrace {
  Eigen::VectorXd input;
  std::array<Eigen::VectorXd, 4> fc_in_act;   // post-tanh
  struct LstmTrace {
    Eigen::VectorXd i, f, g, o;  // gate activations
    Eigen::VectorXd c_prev, h_prev, c, tanh_c, h;
  };
  std::array<LstmTrace, 2> lstm;
  std::array<Eigen::VectorXd, 4> fc_out_act;  // last entry is the raw output
};

StepResult forward_step(const NetworkParams& params, const Eigen::VectorXd& input,
                        const RecurrentState& state);

StepResult forward_step_traced(const NetworkParams& params, const Eigen::VectorXd& input,
                               const RecurrentState& state, StepTrace& trace);

struct StepBackward {
  Eigen::VectorXd d_input;
  RecurrentState d_state;  // gradient w.r.t. the state consumed by the step
};

// d_output: dL/dy for this step; d_state_out: dL/d(state produced by this
// step). Parameter gradients accumulate into grad_accum.
StepBackward backward_step(const NetworkParams& params, const StepTrace& trace,
                           const Eigen::VectorXd& d_output,
                           const RecurrentState& d_state_out, NetworkParams& grad_accum);

enum class LossKind { kMse, kNll };

struct BpttResult {
  double loss = 0.0;
  NetworkParams grad_params;
  std::vector<Eigen::VectorXd> grad_inputs;
};

// Teacher-forced sequence loss (mean over steps and dims) with gradients
// w.r.t. parameters and every input, recurrent paths included. State is
// zero-initialized at the sequence start.
BpttResult bptt(const NetworkParams& params, const std::vector<Eigen::VectorXd>& inputs,
                const std::vector<Eigen::VectorXd>& targets, LossKind loss_kind);

double softplus(double x);
double sigmoid(double x);

// raw variance head -> strictly positive variance
inline double variance_from_raw(double raw) { return softplus(raw) + 1e-6; }
Eigen::VectorXd variance_from_raw(const Eigen::VectorXd& raw);

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;

  static AdamState zero(Eigen::Index n);
};

void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamState& state,
               const AdamHyper& hyper);

struct MsgdHyper {
  double lr = 1e-2;
  double momentum = 0.9;
};

// velocity' = momentum * velocity + grad; vec' = vec - lr * velocity'
void msgd_step(Eigen::VectorXd& vec, const Eigen::VectorXd& grad, Eigen::VectorXd& velocity,
               const MsgdHyper& hyper);

}  // namespace dpmpb::netcore
