#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dpmpb/trainer.hpp"
#include "fixtures.hpp"

using namespace dpmpb;
using namespace dpmpb::trainer;

namespace {

model::SignalRegistry scalar_registry() {
  std::vector<model::SignalSpec> specs;
  specs.push_back({"x", model::SignalKind::kSensor, 1, {}});
  specs.push_back({"u", model::SignalKind::kControl, 1, {}});
  return model::SignalRegistry(specs);
}

// Scalar linear system s' = a s + 0.1 u driven by piecewise-constant noise.
Dataset linear_dataset(const std::vector<double>& gains, int episodes_per_class, int steps,
                       std::uint64_t seed) {
  Dataset dataset;
  for (std::size_t c = 0; c < gains.size(); ++c) {
    for (int e = 0; e < episodes_per_class; ++e) {
      Rng rng(seed + c * 131 + e);
      Episode ep;
      ep.class_name = "a" + std::to_string(c) + "#" + std::to_string(e);
      double s = rng.uniform(-1.0, 1.0);
      double u = 0.0;
      for (int t = 0; t < steps; ++t) {
        if (t % 3 == 0) u = rng.uniform(-1.0, 1.0);
        ep.s.push_back(Eigen::VectorXd::Constant(1, s));
        ep.u.push_back(Eigen::VectorXd::Constant(1, u));
        s = gains[c] * s + 0.1 * u;
      }
      dataset.episodes.push_back(std::move(ep));
    }
  }
  return dataset;
}

double spearman_rho(std::vector<double> a, std::vector<double> b) {
  REQUIRE(a.size() == b.size());
  auto ranks = [](std::vector<double>& v) {
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int i, int j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t k = 0; k < idx.size(); ++k) r[idx[k]] = static_cast<double>(k);
    return r;
  };
  auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(ra.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double num = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(va * vb);
}

}  // namespace

TEST_CASE("fit learns a single fixed point to below 1e-4") {
  Dataset dataset;
  Episode ep;
  ep.class_name = "const#0";
  for (int t = 0; t < 120; ++t) {
    ep.s.push_back(Eigen::VectorXd::Constant(1, 0.3));
    ep.u.push_back(Eigen::VectorXd::Constant(1, -0.2));
  }
  dataset.episodes.push_back(ep);

  TrainConfig cfg;
  cfg.n_train_step = 10;
  cfg.n_train_batch = 8;
  cfg.n_train_epoch = 120;
  cfg.seed = 3;
  auto result = fit(dataset, scalar_registry(), {8, 1}, cfg, {"u"});
  CHECK(result.loss_history.back() < 1e-4);
}

TEST_CASE("fit separates two linear classes in PB space") {
  auto dataset = linear_dataset({0.5, 0.9}, 4, 200, 11);
  TrainConfig cfg;
  cfg.n_train_step = 20;
  cfg.n_train_batch = 16;
  cfg.n_train_epoch = 150;
  cfg.seed = 7;
  auto result = fit(dataset, scalar_registry(), {16, 2}, cfg, {"u"});

  CHECK(result.per_signal_losses.at("x") < 0.05);
  const auto c0 = fixtures::group_centroid(result.bundle.pb_table, "a0");
  const auto c1 = fixtures::group_centroid(result.bundle.pb_table, "a1");
  const double spread = fixtures::mean_within_group_spread(result.bundle.pb_table);
  CHECK((c0 - c1).norm() > 3.0 * spread);
}

TEST_CASE("nll training ranks predicted variance with the true noise scale") {
  // Heteroscedastic random walk: noise grows with |s|.
  Dataset dataset;
  for (int e = 0; e < 6; ++e) {
    Rng rng(400 + e);
    Episode ep;
    ep.class_name = "het#" + std::to_string(e);
    double s = rng.uniform(-1.0, 1.0);
    double u = 0.0;
    for (int t = 0; t < 300; ++t) {
      if (t % 2 == 0) u = rng.uniform(-1.0, 1.0);
      ep.s.push_back(Eigen::VectorXd::Constant(1, s));
      ep.u.push_back(Eigen::VectorXd::Constant(1, u));
      const double sigma = 0.02 + 0.25 * std::abs(s);
      s = 0.9 * s + 0.2 * u + rng.normal(0.0, sigma);
      s = std::clamp(s, -2.0, 2.0);
    }
    dataset.episodes.push_back(std::move(ep));
  }

  TrainConfig cfg;
  cfg.n_train_step = 16;
  cfg.n_train_batch = 16;
  cfg.n_train_epoch = 200;
  cfg.loss_kind = netcore::LossKind::kNll;
  cfg.seed = 5;
  auto result = fit(dataset, scalar_registry(), {16, 2}, cfg, {"u"});
  const auto& bundle = result.bundle;

  // Probe teacher-forced variance predictions along a fresh trajectory.
  Rng rng(999);
  std::vector<double> predicted_var, true_var;
  const Eigen::VectorXd pb = fixtures::group_centroid(bundle.pb_table, "het");
  auto state = netcore::RecurrentState::zero(bundle.shape.hidden);
  double s = 0.5;
  double u = 0.0;
  for (int t = 0; t < 300; ++t) {
    if (t % 2 == 0) u = rng.uniform(-1.0, 1.0);
    auto res = model::predict(bundle, Eigen::VectorXd::Constant(1, s),
                              Eigen::VectorXd::Constant(1, u), pb, state);
    state = res.state;
    const double sigma = 0.02 + 0.25 * std::abs(s);
    if (t > 5) {  // allow the recurrent state to warm up
      predicted_var.push_back(res.prediction.sensor_variances.at("x")(0));
      true_var.push_back(sigma * sigma);
    }
    s = 0.9 * s + 0.2 * u + rng.normal(0.0, sigma);
    s = std::clamp(s, -2.0, 2.0);
  }
  CHECK(spearman_rho(predicted_var, true_var) > 0.8);
}

TEST_CASE("auto_fit drops an unpredictable control and reports L_u near 1") {
  const auto& fixture = fixtures::two_class_stm();
  CHECK(fixture.bundle.structure == model::Structure::kStm);
  REQUIRE(fixture.bundle.dropped_outputs.size() == 1);
  CHECK(fixture.bundle.dropped_outputs[0] == "force");
  CHECK(fixture.phase1_losses.at("force") == doctest::Approx(1.0).epsilon(0.2));
  CHECK(fixture.phase1_losses.at("pos") < 0.3);
}

TEST_CASE("auto_fit keeps a teacher-driven control signal as CTM") {
  const auto& fixture = fixtures::teacher_ctm();
  CHECK(fixture.bundle.structure == model::Structure::kCtm);
  CHECK(fixture.bundle.dropped_outputs.empty());
  CHECK(fixture.phase1_losses.at("force") < 0.3);
}

TEST_CASE("auto_fit with an infinite threshold equals single-phase fit") {
  auto dataset = linear_dataset({0.7}, 2, 60, 21);
  TrainConfig cfg;
  cfg.n_train_step = 10;
  cfg.n_train_batch = 8;
  cfg.n_train_epoch = 30;
  cfg.seed = 13;
  cfg.l_thre = 1e18;
  auto via_auto = auto_fit(dataset, scalar_registry(), {8, 2}, cfg);
  auto via_fit = fit(dataset, scalar_registry(), {8, 2}, cfg, {});
  CHECK(via_auto.choice.dropped_outputs.empty());
  CHECK(via_auto.bundle.params.flatten() == via_fit.bundle.params.flatten());
  CHECK(via_auto.bundle.pb_table.at("a0#0") == via_fit.bundle.pb_table.at("a0#0"));
}

TEST_CASE("one batch updates W and only the sampled classes' PB") {
  auto dataset = linear_dataset({0.5, 0.9}, 1, 40, 31);
  TrainConfig cfg;
  cfg.n_train_step = 10;
  cfg.n_train_batch = 1;
  cfg.n_train_epoch = 1;
  cfg.holdout_fraction = 0.0;
  cfg.seed = 17;
  TrainerSession session(dataset, scalar_registry(), {8, 2}, cfg, {"u"});
  const Eigen::VectorXd w_before = session.params().flatten();
  session.run_batch();
  CHECK(session.params().flatten() != w_before);

  int changed = 0, unchanged = 0;
  for (const auto& [name, pb] : session.pb_table()) {
    if (pb.norm() > 0.0) {
      ++changed;
    } else {
      ++unchanged;
    }
  }
  CHECK(changed == 1);   // batch of one window touches exactly one class
  CHECK(unchanged == 1);
}

TEST_CASE("fit is seed-deterministic") {
  auto dataset = linear_dataset({0.6}, 2, 60, 41);
  TrainConfig cfg;
  cfg.n_train_step = 10;
  cfg.n_train_batch = 4;
  cfg.n_train_epoch = 12;
  cfg.seed = 23;
  auto a = fit(dataset, scalar_registry(), {8, 1}, cfg, {"u"});
  auto b = fit(dataset, scalar_registry(), {8, 1}, cfg, {"u"});
  REQUIRE(a.loss_history.size() == b.loss_history.size());
  for (std::size_t i = 0; i < a.loss_history.size(); ++i)
    CHECK(a.loss_history[i] == b.loss_history[i]);
  CHECK(a.bundle.params.flatten() == b.bundle.params.flatten());
}

TEST_CASE("norm stats come from the data and stay fixed") {
  auto dataset = linear_dataset({0.6}, 2, 60, 51);
  TrainConfig cfg;
  cfg.n_train_step = 10;
  cfg.n_train_batch = 4;
  cfg.n_train_epoch = 10;
  cfg.seed = 29;
  auto result = fit(dataset, scalar_registry(), {8, 1}, cfg, {"u"});

  std::vector<Eigen::VectorXd> xs;
  for (const auto& ep : dataset.episodes)
    for (const auto& s : ep.s) xs.push_back(s);
  auto expect = model::NormStats::fit(xs);
  CHECK(result.bundle.norm_stats.at("x").mean == expect.mean);
  CHECK(result.bundle.norm_stats.at("x").std == expect.std);
}

TEST_CASE("smoothed training loss is non-increasing on the two-class benchmark") {
  const auto& history = fixtures::two_class_stm().loss_history;
  REQUIRE(history.size() >= 40);
  std::vector<double> smooth;
  for (std::size_t i = 0; i + 10 <= history.size(); ++i) {
    double acc = 0.0;
    for (std::size_t k = i; k < i + 10; ++k) acc += history[k];
    smooth.push_back(acc / 10.0);
  }
  int non_increasing = 0;
  for (std::size_t i = 1; i < smooth.size(); ++i)
    if (smooth[i] <= smooth[i - 1] + 1e-12) ++non_increasing;
  CHECK(static_cast<double>(non_increasing) / (smooth.size() - 1) >= 0.9);
}

TEST_CASE("compute_signal_losses: the mean predictor scores about 1 on z-scored data") {
  Dataset dataset;
  Rng rng(61);
  for (int e = 0; e < 3; ++e) {
    Episode ep;
    ep.class_name = "noise#" + std::to_string(e);
    for (int t = 0; t < 400; ++t) {
      ep.s.push_back(Eigen::VectorXd::Constant(1, rng.normal()));
      ep.u.push_back(Eigen::VectorXd::Constant(1, rng.uniform(-1.0, 1.0)));
    }
    dataset.episodes.push_back(std::move(ep));
  }

  model::ModelBundle bundle;
  bundle.signals = scalar_registry();
  bundle.dropped_outputs = {"u"};
  bundle.shape = {4, 1, 4, false};
  bundle.params = netcore::NetworkParams::zeros(bundle.shape);
  std::vector<Eigen::VectorXd> xs, us;
  for (const auto& ep : dataset.episodes) {
    for (const auto& s : ep.s) xs.push_back(s);
    for (const auto& u : ep.u) us.push_back(u);
  }
  bundle.norm_stats["x"] = model::NormStats::fit(xs);
  bundle.norm_stats["u"] = model::NormStats::fit(us);
  bundle.pb_table["noise#0"] = Eigen::VectorXd::Zero(2);
  bundle.current_pb = Eigen::VectorXd::Zero(2);
  bundle.structure = model::Structure::kStm;
  bundle.validate();

  auto losses = compute_signal_losses(bundle, dataset);
  CHECK(losses.at("x") == doctest::Approx(1.0).epsilon(0.1));
  CHECK(losses.count("u") == 0);  // dropped outputs carry no loss
}

TEST_CASE("per-signal loss equals the mean of its per-dim losses") {
  // Two-dim sensor with very different scales per dim; zero-parameter model
  // predicts the mean, so each dim contributes its normalized variance (1).
  std::vector<model::SignalSpec> specs;
  specs.push_back({"xy", model::SignalKind::kSensor, 2, {}});
  specs.push_back({"u", model::SignalKind::kControl, 1, {}});
  model::SignalRegistry registry(specs);

  Dataset dataset;
  Rng rng(71);
  Episode ep;
  ep.class_name = "g#0";
  for (int t = 0; t < 500; ++t) {
    Eigen::VectorXd s(2);
    s << rng.normal() * 5.0, rng.normal() * 0.01;
    ep.s.push_back(s);
    ep.u.push_back(Eigen::VectorXd::Constant(1, 0.0));
  }
  dataset.episodes.push_back(ep);

  model::ModelBundle bundle;
  bundle.signals = registry;
  bundle.dropped_outputs = {"u"};
  bundle.shape = {5, 2, 4, false};
  bundle.params = netcore::NetworkParams::zeros(bundle.shape);
  std::vector<Eigen::VectorXd> xs, us;
  for (const auto& s : ep.s) xs.push_back(s);
  for (const auto& u : ep.u) us.push_back(u);
  bundle.norm_stats["xy"] = model::NormStats::fit(xs);
  bundle.norm_stats["u"] = model::NormStats::fit(us);
  bundle.pb_table["g#0"] = Eigen::VectorXd::Zero(2);
  bundle.current_pb = Eigen::VectorXd::Zero(2);
  bundle.structure = model::Structure::kStm;
  bundle.validate();

  auto losses = compute_signal_losses(bundle, dataset);

  // Independent per-dim computation.
  const auto& stats = bundle.norm_stats.at("xy");
  double sum = 0.0;
  long n = 0;
  for (int t = 0; t + 1 < ep.length(); ++t) {
    const Eigen::VectorXd norm = stats.normalize(ep.s[t + 1]);
    sum += norm.squaredNorm();
    n += 2;
  }
  CHECK(losses.at("xy") == doctest::Approx(sum / n).epsilon(1e-12));
}

TEST_CASE("short episodes are used with a reduced window and a warning") {
  Dataset dataset = linear_dataset({0.5}, 1, 50, 81);
  Episode small;
  small.class_name = "tiny#0";
  for (int t = 0; t < 4; ++t) {
    small.s.push_back(Eigen::VectorXd::Constant(1, 0.1 * t));
    small.u.push_back(Eigen::VectorXd::Constant(1, 0.0));
  }
  dataset.episodes.push_back(small);

  TrainConfig cfg;
  cfg.n_train_step = 10;
  cfg.n_train_batch = 4;
  cfg.n_train_epoch = 2;
  cfg.seed = 3;
  auto result = fit(dataset, scalar_registry(), {8, 2}, cfg, {"u"});
  bool warned = false;
  for (const auto& w : result.warnings)
    if (w.find("shorter than window") != std::string::npos) warned = true;
  CHECK(warned);
}

TEST_CASE("dataset jsonl round-trips") {
  auto dataset = linear_dataset({0.5, 0.9}, 1, 20, 91);
  const std::string path = "dataset_roundtrip_test.jsonl";
  save_dataset_jsonl(dataset, path, scalar_registry());
  auto loaded = load_dataset_jsonl(path, scalar_registry());
  std::remove(path.c_str());
  REQUIRE(loaded.episodes.size() == dataset.episodes.size());
  for (std::size_t e = 0; e < loaded.episodes.size(); ++e) {
    CHECK(loaded.episodes[e].class_name == dataset.episodes[e].class_name);
    for (int t = 0; t < loaded.episodes[e].length(); ++t) {
      CHECK(loaded.episodes[e].s[t] == dataset.episodes[e].s[t]);
      CHECK(loaded.episodes[e].u[t] == dataset.episodes[e].u[t]);
    }
  }
}

TEST_CASE("dataset validation rejects malformed episodes") {
  Dataset empty;
  CHECK_THROWS_AS(empty.validate(scalar_registry()), DataError);

  Dataset one_step;
  Episode ep;
  ep.class_name = "x#0";
  ep.s.push_back(Eigen::VectorXd::Zero(1));
  ep.u.push_back(Eigen::VectorXd::Zero(1));
  one_step.episodes.push_back(ep);
  CHECK_THROWS_AS(one_step.validate(scalar_registry()), DataError);
}
