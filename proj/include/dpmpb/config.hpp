#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dpmpb/adapter.hpp"
#include "dpmpb/controller.hpp"
#include "dpmpb/envbench.hpp"
#include "dpmpb/model.hpp"
#include "dpmpb/trainer.hpp"

namespace dpmpb::config {

struct AdaptSettings {
  int warmup = 30;     // N_online_thre
  int capacity = 300;  // N_online_max
  adapter::AdaptConfig cfg;
};

struct AnomalySettings {
  int smoothing = 1;  // moving-average window over d; 1 = raw
  std::optional<double> threshold;
  std::optional<std::string> signal;
};

struct TeacherSettings {
  std::string type;  // point_mass_reach | two_link_reach
  std::vector<double> target{0.0};
  double kp = 1.2;
  double kd = 0.4;
  double limit = 1.0;
};

struct EnvClass {
  std::string name;
  envbench::EnvParams params;
};

struct EnvSettings {
  envbench::EnvFamily family = envbench::EnvFamily::kPointMassDamped;
  double dt = 0.2;
  double noise = 0.0;
  std::uint64_t seed = 0;
  double position_bound = 5.0;
  std::vector<std::pair<double, double>> u_bounds;
  int hold_steps = 5;
  std::vector<EnvClass> classes;
  std::optional<TeacherSettings> teacher;

  envbench::EnvSpec spec_for(const EnvClass& cls) const;
  envbench::TeacherPolicy teacher_policy() const;
};

struct RunConfig {
  std::vector<model::SignalSpec> signals;
  int pb_dim = 2;
  int hidden = 64;
  std::string model_path;
  trainer::TrainConfig train;
  AdaptSettings adapt;
  controller::ControlConfig control;
  AnomalySettings anomaly;
  std::optional<EnvSettings> env;

  model::SignalRegistry registry() const { return model::SignalRegistry(signals); }
  trainer::ModelSpec model_spec() const { return {hidden, pb_dim}; }
  const EnvSettings& require_env() const;
};

RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);

}  // namespace dpmpb::config
