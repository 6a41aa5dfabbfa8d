#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "dpmpb/model.hpp"
#include "dpmpb/netcore.hpp"

namespace dpmpb::controller {

struct ControlConfig {
  int n_control_step = 8;   // horizon
  int n_control_batch = 4;  // learning-rate grid size
  int n_control_epoch = 3;
  double gamma_max = 1.0;
  std::optional<int> n_control_periodic;  // periodic target-mask period

  void validate() const;
};

enum class TermKind {
  kTrackTarget,
  kMinimizeValue,
  kMaximizeValue,
  kMinimizeVelocity,
  kMinimizeVariance,
  kAnisotropicHold,
  kMinimizeControl,
};

std::string to_string(TermKind kind);

struct LossTerm {
  TermKind kind = TermKind::kTrackTarget;
  std::string signal;  // unused for kMinimizeControl
  double weight = 1.0;
  // Physical units; one entry = constant target, horizon entries = sequence.
  // Doubles as the initial value of kAnisotropicHold.
  std::vector<Eigen::VectorXd> target;
  double w4 = 1.0;        // anisotropic over-weight, > 1
  bool use_mask = false;  // periodic mask on tracking residuals
};

struct LossSpec {
  std::vector<LossTerm> terms;
};

LossSpec loss_spec_from_json(const std::string& text);
LossSpec load_loss_spec(const std::string& path);

// Terms resolved against a bundle: slices into the normalized prediction /
// control sequences plus normalized targets. Construction validates that
// referenced signals exist, are kept outputs, and that variance terms only
// appear in variance mode.
class LossEvaluator {
 public:
  LossEvaluator(const model::ModelBundle& bundle, const LossSpec& spec,
                const ControlConfig& cfg);

  // Sequences in normalized space: s_pred over kept sensor dims, v_pred raw
  // variance head (may be null), u over the full control block.
  double eval(const std::vector<Eigen::VectorXd>& s_pred,
              const std::vector<Eigen::VectorXd>* v_pred,
              const std::vector<Eigen::VectorXd>& u, long step_counter) const;

  struct Gradients {
    double loss = 0.0;
    std::vector<Eigen::VectorXd> d_s;
    std::vector<Eigen::VectorXd> d_v;
    std::vector<Eigen::VectorXd> d_u;
  };
  Gradients eval_with_grad(const std::vector<Eigen::VectorXd>& s_pred,
                           const std::vector<Eigen::VectorXd>* v_pred,
                           const std::vector<Eigen::VectorXd>& u, long step_counter) const;

  // Name of the first term evaluating non-finite, for diagnostics.
  std::string nonfinite_term(const std::vector<Eigen::VectorXd>& s_pred,
                             const std::vector<Eigen::VectorXd>* v_pred,
                             const std::vector<Eigen::VectorXd>& u, long step_counter) const;

 private:
  struct Resolved {
    LossTerm term;
    bool on_control = false;
    bool on_variance = false;
    int offset = 0;  // within the owning sequence vector
    int dim = 0;
    std::vector<Eigen::VectorXd> target_norm;
  };
  double term_value(const Resolved& r, const std::vector<Eigen::VectorXd>& s_pred,
                    const std::vector<Eigen::VectorXd>* v_pred,
                    const std::vector<Eigen::VectorXd>& u, long step_counter,
                    Gradients* grads) const;

  std::vector<Resolved> resolved_;
  std::optional<int> mask_period_;
};

// [b, c, c] from [a, b, c]: shift left one step, duplicate the last entry.
std::vector<Eigen::VectorXd> warm_start(const std::vector<Eigen::VectorXd>& u_prev_seq);

// {0} plus gamma_max * 10^-i for i = 0..n-1, ascending.
std::vector<double> gamma_grid(double gamma_max, int n);

struct CtmResult {
  Eigen::VectorXd u;  // physical, clamped to bounds
  netcore::RecurrentState state;
};

// One forward pass: u_t from (s_{t-1}, u_{t-1}). Dropped control dims are
// held at their previous values.
CtmResult ctm_step(const model::ModelBundle& bundle, const Eigen::VectorXd& s_prev,
                   const Eigen::VectorXd& u_prev, const netcore::RecurrentState& state);

// Seam between the optimizer and the predictive model so analytic dynamics
// can stand in for a trained bundle in tests. backward() refers to the most
// recent rollout().
class HorizonDynamics {
 public:
  virtual ~HorizonDynamics() = default;
  virtual int state_dim() const = 0;
  virtual int control_dim() const = 0;
  virtual bool variance() const = 0;
  virtual void rollout(const std::vector<Eigen::VectorXd>& u_seq,
                       std::vector<Eigen::VectorXd>& s_pred,
                       std::vector<Eigen::VectorXd>& v_pred) = 0;
  virtual void backward(const std::vector<Eigen::VectorXd>& d_s,
                        const std::vector<Eigen::VectorXd>& d_v,
                        std::vector<Eigen::VectorXd>& d_u) = 0;
};

// Bundle-backed rollout: feeds predicted sensors forward over the horizon,
// holds dropped sensor inputs at the live observation, all candidates branch
// from one state snapshot.
class BundleDynamics : public HorizonDynamics {
 public:
  BundleDynamics(const model::ModelBundle& bundle, const Eigen::VectorXd& s_phys,
                 const netcore::RecurrentState& live_state);

  int state_dim() const override { return state_dim_; }
  int control_dim() const override { return bundle_.signals.control_dim(); }
  bool variance() const override { return bundle_.shape.variance_mode; }
  void rollout(const std::vector<Eigen::VectorXd>& u_seq, std::vector<Eigen::VectorXd>& s_pred,
               std::vector<Eigen::VectorXd>& v_pred) override;
  void backward(const std::vector<Eigen::VectorXd>& d_s, const std::vector<Eigen::VectorXd>& d_v,
                std::vector<Eigen::VectorXd>& d_u) override;

 private:
  const model::ModelBundle& bundle_;
  model::OutputLayout layout_;
  netcore::RecurrentState snapshot_;
  Eigen::VectorXd s0_norm_;  // full sensor block, normalized
  std::vector<std::pair<int, int>> feedback_;  // output pos -> sensor input pos
  int state_dim_ = 0;
  std::vector<netcore::StepTrace> traces_;
};

struct ControlResult {
  std::vector<Eigen::VectorXd> u_opt_seq;   // physical units, within bounds
  std::vector<Eigen::VectorXd> s_pred_seq;  // physical units, kept sensors
  std::vector<double> loss_trace;           // best loss per epoch, non-increasing
  std::vector<double> chosen_gamma;
};

struct NormalizedControlResult {
  std::vector<Eigen::VectorXd> u_seq;
  std::vector<Eigen::VectorXd> s_pred;
  std::vector<Eigen::VectorXd> v_pred;
  std::vector<double> loss_trace;
  std::vector<double> chosen_gamma;
};

// Core loop shared by the production path and injected-dynamics tests.
// Everything in normalized space; u_lo/u_hi are per-dim clamps.
NormalizedControlResult optimize_horizon(HorizonDynamics& dynamics,
                                         const LossEvaluator& evaluator,
                                         const ControlConfig& cfg,
                                         std::vector<Eigen::VectorXd> u_init,
                                         const Eigen::VectorXd& u_lo,
                                         const Eigen::VectorXd& u_hi, long step_counter);

// Gradient-descent MPC through the bundle: warm start, exponential gamma
// grid, argmin over candidates per epoch.
ControlResult stm_optimize(const model::ModelBundle& bundle, const Eigen::VectorXd& s_phys,
                           const netcore::RecurrentState& live_state,
                           const std::vector<Eigen::VectorXd>& u_prev_seq_phys,
                           const LossSpec& loss_spec, const ControlConfig& cfg,
                           long step_counter = 0);

// Normalized control clamp range for a bundle: physical bounds when declared,
// otherwise [-1, 1].
void control_bounds(const model::ModelBundle& bundle, Eigen::VectorXd& lo, Eigen::VectorXd& hi);

}  // namespace dpmpb::controller
