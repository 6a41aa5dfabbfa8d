#pragma once

#include <Eigen/Core>
#include <map>
#include <string>
#include <vector>

#include "dpmpb/controller.hpp"
#include "dpmpb/envbench.hpp"
#include "dpmpb/model.hpp"
#include "dpmpb/trainer.hpp"

namespace fixtures {

// Point-mass world: sensor "state" = (position, velocity), control "force".
dpmpb::model::SignalRegistry pm_registry();

dpmpb::envbench::EnvSpec pm_spec(const std::string& class_name, double gain, double damping,
                                 std::uint64_t seed, double noise);

// Two dynamics classes distinguished by the sign of the control gain.
// Episode class names follow the "<group>#<episode>" convention so each
// episode carries its own parametric bias.
dpmpb::trainer::Dataset two_class_dataset(std::uint64_t seed, int episodes_per_class,
                                          int steps);

struct TrainedFixture {
  dpmpb::model::ModelBundle bundle;
  std::map<std::string, double> phase1_losses;
  std::vector<double> loss_history;
};

// Trained STM on the two-class dataset (cached across tests).
const TrainedFixture& two_class_stm();

// Teacher-driven CTM fixture; classes "slow" and "fast" differ in the reach
// gain so the motion style lives in the PB space.
dpmpb::trainer::Dataset teacher_dataset(std::uint64_t seed, int episodes_per_class, int steps);
const TrainedFixture& teacher_ctm();

// "<group>#<k>" -> "<group>"
std::string group_of(const std::string& class_name);
Eigen::VectorXd group_centroid(const dpmpb::model::PBTable& table, const std::string& group);
double mean_within_group_spread(const dpmpb::model::PBTable& table);

// Closed-loop STM tracking from a fresh environment; returns the mean
// absolute position error over the trailing half of the run.
double closed_loop_tracking_error(const dpmpb::model::ModelBundle& bundle,
                                  const dpmpb::envbench::EnvSpec& env_spec,
                                  const Eigen::VectorXd& pb, double target_position, int ticks,
                                  const dpmpb::controller::ControlConfig& cfg);

}  // namespace fixtures
