#include "fixtures.hpp"

#include <cmath>

#include "dpmpb/netcore.hpp"

namespace fixtures {

using namespace dpmpb;

model::SignalRegistry pm_registry() {
  std::vector<model::SignalSpec> specs;
  specs.push_back({"pos", model::SignalKind::kSensor, 1, {}});
  specs.push_back({"vel", model::SignalKind::kSensor, 1, {}});
  specs.push_back({"force", model::SignalKind::kControl, 1, {{-1.0, 1.0}}});
  return model::SignalRegistry(specs);
}

envbench::EnvSpec pm_spec(const std::string& class_name, double gain, double damping,
                          std::uint64_t seed, double noise) {
  envbench::EnvSpec spec;
  spec.family = envbench::EnvFamily::kPointMassDamped;
  spec.class_name = class_name;
  spec.params.mass = 1.0;
  spec.params.damping = damping;
  spec.params.gain = gain;
  spec.noise = noise;
  spec.dt = 0.2;
  spec.seed = seed;
  return spec;
}

trainer::Dataset two_class_dataset(std::uint64_t seed, int episodes_per_class, int steps) {
  trainer::Dataset dataset;
  const std::vector<std::pair<std::string, double>> classes{{"gain_pos", 1.0},
                                                            {"gain_neg", -1.0}};
  const std::vector<std::pair<double, double>> u_bounds{{-1.0, 1.0}};
  for (std::size_t c = 0; c < classes.size(); ++c) {
    for (int e = 0; e < episodes_per_class; ++e) {
      envbench::Environment env(
          pm_spec(classes[c].first, classes[c].second, 0.5, seed + c, 0.01));
      // Per-step random pushes keep the control unpredictable, which both
      // drives the structure choice toward STM and keeps the class
      // difference in the PB instead of the recurrent state.
      auto ep = envbench::collect_random(env, steps, u_bounds, 1,
                                         seed * 1000 + c * 100 + static_cast<std::uint64_t>(e));
      ep.class_name = classes[c].first + "#" + std::to_string(e);
      dataset.episodes.push_back(std::move(ep));
    }
  }
  return dataset;
}

const TrainedFixture& two_class_stm() {
  static const TrainedFixture fixture = [] {
    auto dataset = two_class_dataset(17, 4, 200);
    trainer::TrainConfig cfg;
    cfg.n_train_step = 20;
    cfg.n_train_batch = 16;
    cfg.n_train_epoch = 160;
    cfg.l_thre = 0.3;
    cfg.seed = 5;
    auto result = trainer::auto_fit(dataset, pm_registry(), {24, 2}, cfg);
    return TrainedFixture{std::move(result.bundle), std::move(result.phase1_losses),
                          std::move(result.loss_history)};
  }();
  return fixture;
}

trainer::Dataset teacher_dataset(std::uint64_t seed, int episodes_per_class, int steps) {
  trainer::Dataset dataset;
  // One shared reach policy; the classes differ in plant damping, so the
  // pace of the motion is only visible over time and lands in the PB space.
  const std::vector<std::pair<std::string, double>> classes{{"brisk", 0.25}, {"viscous", 2.2}};
  for (std::size_t c = 0; c < classes.size(); ++c) {
    for (int e = 0; e < episodes_per_class; ++e) {
      envbench::Environment env(
          pm_spec(classes[c].first, 1.0, classes[c].second, seed + c, 0.01));
      auto policy = envbench::point_mass_reach_policy(1.0, 1.1, 0.3, 1.0);
      auto ep = envbench::collect_teacher(env, policy, steps,
                                          seed * 909 + c * 100 + static_cast<std::uint64_t>(e));
      ep.class_name = classes[c].first + "#" + std::to_string(e);
      dataset.episodes.push_back(std::move(ep));
    }
  }
  return dataset;
}

const TrainedFixture& teacher_ctm() {
  static const TrainedFixture fixture = [] {
    auto dataset = teacher_dataset(23, 8, 60);
    trainer::TrainConfig cfg;
    cfg.n_train_step = 15;
    cfg.n_train_batch = 16;
    cfg.n_train_epoch = 260;
    cfg.l_thre = 0.3;
    cfg.seed = 9;
    auto result = trainer::auto_fit(dataset, pm_registry(), {24, 2}, cfg);
    return TrainedFixture{std::move(result.bundle), std::move(result.phase1_losses),
                          std::move(result.loss_history)};
  }();
  return fixture;
}

std::string group_of(const std::string& class_name) {
  const auto pos = class_name.find('#');
  return pos == std::string::npos ? class_name : class_name.substr(0, pos);
}

Eigen::VectorXd group_centroid(const model::PBTable& table, const std::string& group) {
  Eigen::VectorXd sum;
  int n = 0;
  for (const auto& [name, pb] : table) {
    if (group_of(name) != group) continue;
    if (n == 0) sum = Eigen::VectorXd::Zero(pb.size());
    sum += pb;
    ++n;
  }
  if (n == 0) throw DataError("fixture: no PB entries for group '" + group + "'");
  return sum / static_cast<double>(n);
}

double mean_within_group_spread(const model::PBTable& table) {
  std::map<std::string, std::vector<Eigen::VectorXd>> groups;
  for (const auto& [name, pb] : table) groups[group_of(name)].push_back(pb);
  double total = 0.0;
  int n = 0;
  for (const auto& [group, members] : groups) {
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(members.front().size());
    for (const auto& pb : members) centroid += pb;
    centroid /= static_cast<double>(members.size());
    for (const auto& pb : members) {
      total += (pb - centroid).norm();
      ++n;
    }
  }
  return total / std::max(1, n);
}

double closed_loop_tracking_error(const model::ModelBundle& bundle,
                                  const envbench::EnvSpec& env_spec, const Eigen::VectorXd& pb,
                                  double target_position, int ticks,
                                  const controller::ControlConfig& cfg) {
  model::ModelBundle local = bundle;
  local.current_pb = pb;

  controller::LossSpec loss;
  controller::LossTerm term;
  term.kind = controller::TermKind::kTrackTarget;
  term.signal = "pos";
  term.weight = 1.0;
  term.target.push_back(Eigen::VectorXd::Constant(1, target_position));
  loss.terms.push_back(std::move(term));
  controller::LossTerm damp;
  damp.kind = controller::TermKind::kMinimizeValue;
  damp.signal = "vel";
  damp.weight = 0.08;
  loss.terms.push_back(std::move(damp));

  envbench::Environment env(env_spec);
  auto state = netcore::RecurrentState::zero(local.shape.hidden);
  Eigen::VectorXd s = env.observe();
  std::vector<Eigen::VectorXd> u_prev(cfg.n_control_step, Eigen::VectorXd::Zero(1));

  double err_sum = 0.0;
  int err_n = 0;
  for (int t = 0; t < ticks; ++t) {
    auto res = controller::stm_optimize(local, s, state, u_prev, loss, cfg, t);
    const Eigen::VectorXd u = res.u_opt_seq.front();
    state = netcore::forward_step(local.params, local.assemble_input(s, u, pb), state).state;
    s = env.step(u);
    u_prev = res.u_opt_seq;
    if (t >= ticks / 2) {
      err_sum += std::abs(s(0) - target_position);
      ++err_n;
    }
  }
  return err_sum / std::max(1, err_n);
}

}  // namespace fixtures
