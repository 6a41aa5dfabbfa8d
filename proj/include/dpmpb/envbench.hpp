#pragma once

#include <Eigen/Core>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dpmpb/common.hpp"
#include "dpmpb/trainer.hpp"

namespace dpmpb::envbench {

enum class EnvFamily { kPointMassDamped, kStickySlider, kTwoLinkElastic };

EnvFamily family_from(const std::string& name);
std::string to_string(EnvFamily family);

// Latent dynamics parameters; unused entries are ignored per family.
struct EnvParams {
  // point_mass_damped: mass, damping, gain
  double mass = 1.0;
  double damping = 0.5;
  double gain = 1.0;
  // sticky_slider: first-order lags, stick probability, alignment dynamics
  double tau_trans = 0.4;
  double tau_rot = 0.4;
  double p_stick = 0.9;
  double stick_jitter = 0.25;  // shudder of the jammed base, fraction of command scale
  double misalign_gain = 1.5;
  double realign_gain = 2.5;
  // two_link_elastic: per-joint spring stiffness and damping
  double stiffness1 = 6.0;
  double stiffness2 = 6.0;
  double joint_damping = 1.5;
};

struct EnvSpec {
  EnvFamily family = EnvFamily::kPointMassDamped;
  std::string class_name = "default";
  EnvParams params;
  double noise = 0.0;  // observation noise std
  double dt = 0.2;
  std::uint64_t seed = 0;
  double position_bound = 5.0;  // reflecting walls for positional families

  void validate() const;
  int sensor_dim() const;
  int control_dim() const;
};

struct EnvState {
  Eigen::VectorXd values;   // family-specific
  double misalignment = 0.0;  // sticky_slider caster state
};

class Environment {
 public:
  explicit Environment(const EnvSpec& spec);

  const EnvSpec& spec() const { return spec_; }
  const EnvState& state() const { return state_; }
  void reset();
  // Direct access for scenario setup in tests and the CLI.
  void set_misalignment(double m);

  // Advances one tick and returns the observation (physical units, noisy).
  Eigen::VectorXd step(const Eigen::VectorXd& u);
  Eigen::VectorXd observe();  // observation of the current state, fresh noise

  int clamp_warnings() const { return clamp_warnings_; }
  // True when the last sticky_slider step jammed the casters.
  bool last_stuck() const { return last_stuck_; }

 private:
  EnvSpec spec_;
  EnvState state_;
  Rng rng_;
  int clamp_warnings_ = 0;
  bool last_stuck_ = false;
};

// Piecewise-constant uniform random controls held hold_steps ticks.
trainer::Episode collect_random(Environment& env, int n_steps,
                                const std::vector<std::pair<double, double>>& u_bounds,
                                int hold_steps, std::uint64_t seed);

using TeacherPolicy = std::function<Eigen::VectorXd(const Eigen::VectorXd& s)>;

trainer::Episode collect_teacher(Environment& env, const TeacherPolicy& policy, int n_steps,
                                 std::uint64_t seed);

// Proportional reach teachers used by the CLI and fixtures.
TeacherPolicy point_mass_reach_policy(double target, double kp, double kd, double u_limit);
TeacherPolicy two_link_reach_policy(const Eigen::Vector2d& target, double kp, double u_limit);

}  // namespace dpmpb::envbench
