#include "dpmpb/envbench.hpp"

#include <algorithm>
#include <cmath>

namespace dpmpb::envbench {

EnvFamily family_from(const std::string& name) {
  if (name == "point_mass_damped") return EnvFamily::kPointMassDamped;
  if (name == "sticky_slider") return EnvFamily::kStickySlider;
  if (name == "two_link_elastic") return EnvFamily::kTwoLinkElastic;
  throw ConfigError("env: unknown family '" + name + "'");
}

std::string to_string(EnvFamily family) {
  switch (family) {
    case EnvFamily::kPointMassDamped: return "point_mass_damped";
    case EnvFamily::kStickySlider: return "sticky_slider";
    case EnvFamily::kTwoLinkElastic: return "two_link_elastic";
  }
  return "?";
}

void EnvSpec::validate() const {
  if (!(dt > 0.0)) throw ConfigError("env: dt must be > 0");
  if (noise < 0.0) throw ConfigError("env: noise must be >= 0");
  if (params.mass <= 0.0) throw ConfigError("env: mass must be > 0");
  if (params.tau_trans <= 0.0 || params.tau_rot <= 0.0)
    throw ConfigError("env: velocity lags must be > 0");
  if (params.p_stick < 0.0 || params.p_stick > 1.0)
    throw ConfigError("env: p_stick must be in [0, 1]");
  if (position_bound <= 0.0) throw ConfigError("env: position_bound must be > 0");
}

int EnvSpec::sensor_dim() const {
  switch (family) {
    case EnvFamily::kPointMassDamped: return 2;  // position, velocity
    case EnvFamily::kStickySlider: return 2;     // realized (v_trans, v_rot)
    case EnvFamily::kTwoLinkElastic: return 4;   // angles and angular velocities
  }
  return 0;
}

int EnvSpec::control_dim() const {
  switch (family) {
    case EnvFamily::kPointMassDamped: return 1;
    case EnvFamily::kStickySlider: return 2;
    case EnvFamily::kTwoLinkElastic: return 2;
  }
  return 0;
}

Environment::Environment(const EnvSpec& spec) : spec_(spec), rng_(spec.seed) {
  spec_.validate();
  reset();
}

void Environment::reset() {
  rng_ = Rng(spec_.seed);
  switch (spec_.family) {
    case EnvFamily::kPointMassDamped:
      state_.values = Eigen::VectorXd::Zero(2);
      state_.values(0) = rng_.uniform(-0.5, 0.5);
      break;
    case EnvFamily::kStickySlider:
      // x, heading, v_trans, v_rot
      state_.values = Eigen::VectorXd::Zero(4);
      state_.misalignment = 0.0;
      break;
    case EnvFamily::kTwoLinkElastic:
      state_.values = Eigen::VectorXd::Zero(4);
      state_.values(0) = rng_.uniform(-0.3, 0.3);
      state_.values(1) = rng_.uniform(-0.3, 0.3);
      break;
  }
}

void Environment::set_misalignment(double m) {
  state_.misalignment = std::clamp(m, 0.0, 1.0);
}

Eigen::VectorXd Environment::observe() {
  Eigen::VectorXd obs;
  switch (spec_.family) {
    case EnvFamily::kPointMassDamped:
      obs = state_.values;
      break;
    case EnvFamily::kStickySlider:
      obs = state_.values.segment(2, 2);
      break;
    case EnvFamily::kTwoLinkElastic:
      obs = state_.values;
      break;
  }
  if (spec_.noise > 0.0)
    for (Eigen::Index i = 0; i < obs.size(); ++i) obs(i) += rng_.normal(0.0, spec_.noise);
  return obs;
}

Eigen::VectorXd Environment::step(const Eigen::VectorXd& u_in) {
  if (u_in.size() != spec_.control_dim()) throw ConfigError("env step: control dim mismatch");
  Eigen::VectorXd u = u_in;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    const double clamped = std::clamp(u(i), -10.0, 10.0);
    if (clamped != u(i)) ++clamp_warnings_;
    u(i) = clamped;
  }
  const double dt = spec_.dt;
  const auto& p = spec_.params;

  switch (spec_.family) {
    case EnvFamily::kPointMassDamped: {
      double& x = state_.values(0);
      double& v = state_.values(1);
      v += dt * (p.gain * u(0) - p.damping * v) / p.mass;
      x += dt * v;
      if (x > spec_.position_bound) {
        x = 2.0 * spec_.position_bound - x;
        v = -v;
      } else if (x < -spec_.position_bound) {
        x = -2.0 * spec_.position_bound - x;
        v = -v;
      }
      break;
    }
    case EnvFamily::kStickySlider: {
      double& x = state_.values(0);
      double& heading = state_.values(1);
      double& v_trans = state_.values(2);
      double& v_rot = state_.values(3);
      double cmd_trans = u(0);
      last_stuck_ = false;
      if (cmd_trans < -1e-2) {
        const double p_stick = p.p_stick * state_.misalignment;
        if (rng_.uniform() < p_stick) {
          // Casters jammed this tick: no net response, just shudder.
          cmd_trans = p.stick_jitter * rng_.uniform(-1.0, 1.0);
          last_stuck_ = true;
        }
      }
      v_trans += dt / p.tau_trans * (cmd_trans - v_trans);
      v_rot += dt / p.tau_rot * (u(1) - v_rot);
      double& m = state_.misalignment;
      // Jammed casters do not roll, so a stuck tick cannot realign them.
      const double realign = last_stuck_ ? 0.0 : p.realign_gain * std::abs(v_trans);
      m += dt * (p.misalign_gain * std::abs(v_rot) * (1.0 - m) - realign * m);
      m = std::clamp(m, 0.0, 1.0);
      x += dt * v_trans;
      heading += dt * v_rot;
      break;
    }
    case EnvFamily::kTwoLinkElastic: {
      double& th1 = state_.values(0);
      double& th2 = state_.values(1);
      double& w1 = state_.values(2);
      double& w2 = state_.values(3);
      w1 += dt * (p.stiffness1 * (u(0) - th1) - p.joint_damping * w1);
      w2 += dt * (p.stiffness2 * (u(1) - th2) - p.joint_damping * w2);
      th1 += dt * w1;
      th2 += dt * w2;
      break;
    }
  }
  return observe();
}

trainer::Episode collect_random(Environment& env, int n_steps,
                                const std::vector<std::pair<double, double>>& u_bounds,
                                int hold_steps, std::uint64_t seed) {
  if (n_steps < 2) throw ConfigError("collect_random: need at least 2 steps");
  if (hold_steps < 1) throw ConfigError("collect_random: hold_steps must be >= 1");
  if (static_cast<int>(u_bounds.size()) != env.spec().control_dim())
    throw ConfigError("collect_random: u_bounds size must match the control dimension");

  trainer::Episode ep;
  ep.class_name = env.spec().class_name;
  Rng rng(seed);
  EnvSpec reseeded = env.spec();
  reseeded.seed = seed ^ (env.spec().seed * 0x9e3779b97f4a7c15ULL + 1);
  env = Environment(reseeded);

  Eigen::VectorXd s = env.observe();
  Eigen::VectorXd u(env.spec().control_dim());
  for (int t = 0; t < n_steps; ++t) {
    if (t % hold_steps == 0)
      for (Eigen::Index i = 0; i < u.size(); ++i)
        u(i) = rng.uniform(u_bounds[i].first, u_bounds[i].second);
    ep.s.push_back(s);
    ep.u.push_back(u);
    s = env.step(u);
  }
  return ep;
}

trainer::Episode collect_teacher(Environment& env, const TeacherPolicy& policy, int n_steps,
                                 std::uint64_t seed) {
  if (n_steps < 2) throw ConfigError("collect_teacher: need at least 2 steps");
  trainer::Episode ep;
  ep.class_name = env.spec().class_name;
  EnvSpec reseeded = env.spec();
  reseeded.seed = seed ^ (env.spec().seed * 0x9e3779b97f4a7c15ULL + 1);
  env = Environment(reseeded);

  Eigen::VectorXd s = env.observe();
  for (int t = 0; t < n_steps; ++t) {
    const Eigen::VectorXd u = policy(s);
    ep.s.push_back(s);
    ep.u.push_back(u);
    s = env.step(u);
  }
  return ep;
}

TeacherPolicy point_mass_reach_policy(double target, double kp, double kd, double u_limit) {
  return [=](const Eigen::VectorXd& s) {
    Eigen::VectorXd u(1);
    u(0) = std::clamp(kp * (target - s(0)) - kd * s(1), -u_limit, u_limit);
    return u;
  };
}

TeacherPolicy two_link_reach_policy(const Eigen::Vector2d& target, double kp, double u_limit) {
  return [=](const Eigen::VectorXd& s) {
    Eigen::VectorXd u(2);
    u(0) = std::clamp(target(0) + kp * (target(0) - s(0)), -u_limit, u_limit);
    u(1) = std::clamp(target(1) + kp * (target(1) - s(1)), -u_limit, u_limit);
    return u;
  };
}

}  // namespace dpmpb::envbench
