#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dpmpb/adapter.hpp"
#include "dpmpb/envbench.hpp"
#include "fixtures.hpp"

using namespace dpmpb;
using namespace dpmpb::adapter;

namespace {

// Bundle whose predictions are exactly the training mean (zero parameters),
// with stats centered on a chosen constant step.
model::ModelBundle mean_bundle(double s_mean, double u_mean) {
  model::ModelBundle b;
  b.signals = fixtures::pm_registry();
  b.dropped_outputs = {"force"};
  b.shape = {5, 2, 4, false};
  b.params = netcore::NetworkParams::zeros(b.shape);
  for (const auto& spec : b.signals.specs()) {
    model::NormStats stats;
    stats.mean = Eigen::VectorXd::Constant(
        spec.dim, spec.kind == model::SignalKind::kSensor ? s_mean : u_mean);
    stats.std = Eigen::VectorXd::Ones(spec.dim);
    b.norm_stats[spec.name] = stats;
  }
  b.pb_table["base#0"] = Eigen::VectorXd::Zero(2);
  b.current_pb = Eigen::VectorXd::Zero(2);
  b.structure = model::Structure::kStm;
  b.validate();
  return b;
}

AdaptBuffer buffer_from_episode(const trainer::Episode& ep, int capacity, int warmup) {
  AdaptBuffer buffer(capacity, warmup);
  for (int t = 0; t < ep.length(); ++t) buffer.push(ep.s[t], ep.u[t]);
  return buffer;
}

}  // namespace

TEST_CASE("buffer: strict FIFO eviction preserving order and values") {
  AdaptBuffer buffer(3, 2);
  for (int i = 0; i < 4; ++i)
    buffer.push(Eigen::VectorXd::Constant(2, 1.5 * i), Eigen::VectorXd::Constant(1, -i));
  REQUIRE(buffer.count() == 3);
  CHECK(buffer.s(0)(0) == 1.5);  // step 0 evicted
  CHECK(buffer.s(1)(0) == 3.0);
  CHECK(buffer.s(2)(0) == 4.5);
  CHECK(buffer.u(2)(0) == -3.0);
}

TEST_CASE("update_pb: warming up is a no-op with status") {
  auto bundle = mean_bundle(0.2, -0.1);
  AdaptBuffer buffer(100, 30);
  for (int i = 0; i < 10; ++i)
    buffer.push(Eigen::VectorXd::Constant(2, 0.2), Eigen::VectorXd::Constant(1, -0.1));
  const Eigen::VectorXd before = bundle.current_pb;
  auto res = update_pb(bundle, buffer, {});
  CHECK(res.status == AdaptStatus::kWarmingUp);
  CHECK(bundle.current_pb == before);
  CHECK(res.objective_trace.empty());
}

TEST_CASE("update_pb: a perfectly reproduced buffer is a stationary point") {
  auto bundle = mean_bundle(0.35, 0.05);
  bundle.current_pb = (Eigen::VectorXd(2) << 0.4, -0.7).finished();
  AdaptBuffer buffer(100, 30);
  for (int i = 0; i < 50; ++i)
    buffer.push(Eigen::VectorXd::Constant(2, 0.35), Eigen::VectorXd::Constant(1, 0.05));
  const Eigen::VectorXd before = bundle.current_pb;
  auto res = update_pb(bundle, buffer, {});
  CHECK(res.status == AdaptStatus::kUpdated);
  CHECK(bundle.current_pb == before);  // zero gradient, zero velocity
  CHECK(res.objective_trace.back() == doctest::Approx(0.0));
}

TEST_CASE("update_pb: only the current PB moves, weights stay bitwise equal") {
  const auto& fx = fixtures::two_class_stm();
  model::ModelBundle bundle = fx.bundle;
  bundle.current_pb = Eigen::VectorXd::Zero(2);

  envbench::Environment env(fixtures::pm_spec("gain_pos", 1.0, 0.5, 41, 0.01));
  auto ep = envbench::collect_random(env, 60, {{-1.0, 1.0}}, 1, 77);
  auto buffer = buffer_from_episode(ep, 300, 30);

  const Eigen::VectorXd w_before = bundle.params.flatten();
  const auto pb_table_before = bundle.pb_table;
  const auto stats_before = bundle.norm_stats.at("pos").mean;

  AdaptConfig cfg;
  cfg.n_online_epoch = 5;
  auto res = update_pb(bundle, buffer, cfg);
  CHECK(res.status == AdaptStatus::kUpdated);
  CHECK(bundle.current_pb != Eigen::VectorXd::Zero(2));
  CHECK(bundle.params.flatten() == w_before);
  CHECK(bundle.norm_stats.at("pos").mean == stats_before);
  for (const auto& [name, pb] : bundle.pb_table) CHECK(pb == pb_table_before.at(name));
}

TEST_CASE("update_pb: adaptation approaches the active class's PB region") {
  const auto& fx = fixtures::two_class_stm();
  const Eigen::VectorXd c_pos = fixtures::group_centroid(fx.bundle.pb_table, "gain_pos");
  const Eigen::VectorXd c_neg = fixtures::group_centroid(fx.bundle.pb_table, "gain_neg");

  for (const std::uint64_t seed : {1001ull, 1002ull}) {
    model::ModelBundle bundle = fx.bundle;
    bundle.current_pb = c_neg;  // wrong class start
    envbench::Environment env(fixtures::pm_spec("gain_pos", 1.0, 0.5, seed, 0.01));
    auto ep = envbench::collect_random(env, 120, {{-1.0, 1.0}}, 1, seed * 3 + 1);

    AdaptBuffer buffer(300, 30);
    PbUpdater updater(AdaptConfig{}, bundle.pb_dim());
    for (int t = 0; t < ep.length(); ++t) {
      buffer.push(ep.s[t], ep.u[t]);
      updater.update(bundle, buffer);
    }
    CHECK((bundle.current_pb - c_pos).norm() < (bundle.current_pb - c_neg).norm());
  }
}

TEST_CASE("update_pb: median buffer mse improves over 10 seeds") {
  const auto& fx = fixtures::two_class_stm();
  const Eigen::VectorXd wrong = fixtures::group_centroid(fx.bundle.pb_table, "gain_neg");
  std::vector<double> before, after;
  for (int seed = 0; seed < 10; ++seed) {
    model::ModelBundle bundle = fx.bundle;
    bundle.current_pb = wrong;
    envbench::Environment env(fixtures::pm_spec("gain_pos", 1.0, 0.5, 500 + seed, 0.01));
    auto ep = envbench::collect_random(env, 60, {{-1.0, 1.0}}, 1, 800 + seed);
    auto buffer = buffer_from_episode(ep, 300, 30);
    before.push_back(buffer_prediction_mse(bundle, buffer, bundle.current_pb));
    AdaptConfig cfg;
    cfg.n_online_epoch = 30;
    update_pb(bundle, buffer, cfg);
    after.push_back(buffer_prediction_mse(bundle, buffer, bundle.current_pb));
  }
  std::sort(before.begin(), before.end());
  std::sort(after.begin(), after.end());
  CHECK(after[5] < before[5]);
}

TEST_CASE("update_pb: divergence guard over many calls") {
  auto bundle = mean_bundle(0.0, 0.0);
  bundle.params = netcore::NetworkParams::glorot(bundle.shape, 3);
  bundle.pb_table["base#0"] = (Eigen::VectorXd(2) << 0.2, -0.3).finished();
  double max_trained = 0.0;
  for (const auto& [name, pb] : bundle.pb_table) max_trained = std::max(max_trained, pb.norm());

  Rng rng(77);
  AdaptBuffer buffer(40, 10);
  for (int i = 0; i < 40; ++i) {
    Eigen::VectorXd s(2), u(1);
    s << rng.uniform(-1, 1), rng.uniform(-1, 1);
    u << rng.uniform(-1, 1);
    buffer.push(s, u);
  }
  AdaptConfig cfg;
  cfg.n_online_batch = 2;
  cfg.n_online_epoch = 1;
  PbUpdater updater(cfg, bundle.pb_dim());
  for (int call = 0; call < 1000; ++call) updater.update(bundle, buffer);
  CHECK(bundle.current_pb.norm() <= 10.0 * std::max(max_trained, 1.0));
}

TEST_CASE("update_pb_style: rejects STM bundles") {
  const auto& fx = fixtures::two_class_stm();
  model::ModelBundle bundle = fx.bundle;
  AdaptBuffer buffer(50, 5);
  for (int i = 0; i < 10; ++i) buffer.push(Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(1));
  CHECK_THROWS_AS(update_pb_style(bundle, buffer, {}), ConfigError);
}

TEST_CASE("update_pb_style: w1 = 0 reduces to autoregressive state matching") {
  const auto& fx = fixtures::teacher_ctm();
  model::ModelBundle bundle = fx.bundle;
  bundle.current_pb = fixtures::group_centroid(bundle.pb_table, "viscous");

  envbench::Environment env(fixtures::pm_spec("viscous", 1.0, 2.2, 7, 0.01));
  auto policy = envbench::point_mass_reach_policy(1.0, 1.1, 0.3, 1.0);
  auto ep = envbench::collect_teacher(env, policy, 40, 5);
  auto buffer = buffer_from_episode(ep, 100, 5);

  AdaptConfig cfg;
  cfg.style_w1 = 0.0;
  cfg.n_online_epoch = 1;
  cfg.msgd.lr = 0.0;  // observe the objective without moving
  auto res = update_pb_style(bundle, buffer, cfg);
  REQUIRE(res.objective_trace.size() == 1);

  // Independent autoregressive replay of the state error norm.
  auto state = netcore::RecurrentState::zero(bundle.shape.hidden);
  Eigen::VectorXd s_in = ep.s[0], u_in = ep.u[0];
  double sq = 0.0;
  for (int t = 0; t + 1 < buffer.count(); ++t) {
    auto pred = model::predict(bundle, s_in, u_in, bundle.current_pb, state);
    state = pred.state;
    const double e_pos = (pred.prediction.sensors.at("pos")(0) - ep.s[t + 1](0)) /
                         bundle.norm_stats.at("pos").std(0);
    const double e_vel = (pred.prediction.sensors.at("vel")(0) - ep.s[t + 1](1)) /
                         bundle.norm_stats.at("vel").std(0);
    sq += e_pos * e_pos + e_vel * e_vel;
    Eigen::VectorXd s_next(2), u_next(1);
    s_next << pred.prediction.sensors.at("pos")(0), pred.prediction.sensors.at("vel")(0);
    u_next << pred.prediction.controls.at("force")(0);
    s_in = s_next;
    u_in = u_next;
  }
  CHECK(res.objective_trace[0] == doctest::Approx(std::sqrt(sq)).epsilon(1e-9));
}

TEST_CASE("update_pb_style: negative w1 raises the predicted control velocity") {
  const auto& fx = fixtures::teacher_ctm();
  model::ModelBundle bundle = fx.bundle;
  bundle.current_pb = fixtures::group_centroid(bundle.pb_table, "viscous");

  envbench::Environment env(fixtures::pm_spec("viscous", 1.0, 2.2, 19, 0.01));
  auto policy = envbench::point_mass_reach_policy(1.0, 1.1, 0.3, 1.0);
  auto ep = envbench::collect_teacher(env, policy, 40, 11);
  auto buffer = buffer_from_episode(ep, 100, 5);

  auto mean_du = [&](const model::ModelBundle& b) {
    auto state = netcore::RecurrentState::zero(b.shape.hidden);
    Eigen::VectorXd s_in = ep.s[0], u_in = ep.u[0];
    double acc = 0.0, prev = 0.0;
    bool has_prev = false;
    int n = 0;
    for (int t = 0; t + 1 < buffer.count(); ++t) {
      auto pred = model::predict(b, s_in, u_in, b.current_pb, state);
      state = pred.state;
      const double u_next = pred.prediction.controls.at("force")(0);
      if (has_prev) {
        acc += std::abs(u_next - prev);
        ++n;
      }
      prev = u_next;
      has_prev = true;
      Eigen::VectorXd s_next(2);
      s_next << pred.prediction.sensors.at("pos")(0), pred.prediction.sensors.at("vel")(0);
      s_in = s_next;
      u_in = Eigen::VectorXd::Constant(1, u_next);
    }
    return acc / n;
  };

  const double before = mean_du(bundle);
  AdaptConfig cfg;
  cfg.objective = AdaptObjective::kStyle;
  cfg.style_w1 = -15.0;
  cfg.n_online_epoch = 60;
  cfg.msgd.lr = 1e-5;
  cfg.msgd.momentum = 0.9;
  auto res = update_pb_style(bundle, buffer, cfg);
  for (const double v : res.objective_trace) CHECK(std::isfinite(v));
  const double after = mean_du(bundle);
  CHECK(after > before);
}
