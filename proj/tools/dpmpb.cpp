// Command-line workflow around the DPMPB library: collect data in synthetic
// environments, train, adapt the parametric bias online, control, detect
// anomalies, and project PB tables for plotting.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>

#include "dpmpb/adapter.hpp"
#include "dpmpb/anomaly.hpp"
#include "dpmpb/common.hpp"
#include "dpmpb/config.hpp"
#include "dpmpb/controller.hpp"
#include "dpmpb/envbench.hpp"
#include "dpmpb/model.hpp"
#include "dpmpb/pca.hpp"
#include "dpmpb/trainer.hpp"

namespace {

using dpmpb::format_double;
using json = nlohmann::json;
namespace adapter = dpmpb::adapter;
namespace anomaly = dpmpb::anomaly;
namespace config = dpmpb::config;
namespace controller = dpmpb::controller;
namespace envbench = dpmpb::envbench;
namespace model = dpmpb::model;
namespace pca = dpmpb::pca;
namespace trainer = dpmpb::trainer;

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = base ^ (a * 0x9e3779b97f4a7c15ULL) ^ (b + 0x632be59bd9b4e019ULL);
  return dpmpb::splitmix64(s);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw dpmpb::DataError("cannot open '" + path + "' for writing");
  return out;
}

// Writes either to a file or stdout when path is "-".
class OutStream {
 public:
  explicit OutStream(const std::string& path) {
    if (path != "-") file_ = open_out(path);
  }
  std::ostream& get() { return file_ ? static_cast<std::ostream&>(*file_) : std::cout; }

 private:
  std::optional<std::ofstream> file_;
};

struct StepRecord {
  Eigen::VectorXd s;
  Eigen::VectorXd u;
};

std::vector<StepRecord> read_step_stream(std::istream& in, const model::SignalRegistry& reg) {
  std::vector<StepRecord> steps;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw dpmpb::DataError("stream line " + std::to_string(line_no) + ": " + e.what());
    }
    StepRecord rec;
    rec.s.resize(reg.sensor_dim());
    rec.u.resize(reg.control_dim());
    for (const auto& spec : reg.specs()) {
      const auto& block = spec.kind == model::SignalKind::kSensor ? j.at("s") : j.at("u");
      const auto& arr = block.at(spec.name);
      auto& dst = spec.kind == model::SignalKind::kSensor ? rec.s : rec.u;
      for (int i = 0; i < spec.dim; ++i)
        dst(reg.block_offset(spec.name) + i) = arr[i].get<double>();
    }
    steps.push_back(std::move(rec));
  }
  return steps;
}

void set_pb_from_class(model::ModelBundle& bundle, const std::string& cls) {
  auto it = bundle.pb_table.find(cls);
  if (it != bundle.pb_table.end()) {
    bundle.current_pb = it->second;
    return;
  }
  // Accept a bare group name: average the members "name#k".
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(bundle.pb_dim());
  int n = 0;
  for (const auto& [name, pb] : bundle.pb_table) {
    if (name.rfind(cls + "#", 0) == 0) {
      sum += pb;
      ++n;
    }
  }
  if (n == 0) throw dpmpb::DataError("pb class '" + cls + "' not in the model's PB table");
  bundle.current_pb = sum / static_cast<double>(n);
}

std::string csv_vector(const Eigen::VectorXd& v) {
  std::string out;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    out += ',';
    out += format_double(v(i));
  }
  return out;
}

void csv_header_blocks(std::ostream& os, const model::SignalRegistry& reg) {
  for (const auto& spec : reg.specs()) {
    if (spec.kind != model::SignalKind::kControl) continue;
    for (int i = 0; i < spec.dim; ++i) os << ",u_" << spec.name << "_" << i;
  }
  for (const auto& spec : reg.specs()) {
    if (spec.kind != model::SignalKind::kSensor) continue;
    for (int i = 0; i < spec.dim; ++i) os << ",s_" << spec.name << "_" << i;
  }
}

// ---------------------------------------------------------------------------

int cmd_collect(const std::string& config_path, const std::string& mode, int episodes,
                int steps, const std::string& out_path, std::uint64_t seed, bool pb_per_class) {
  auto cfg = config::load_run_config(config_path);
  const auto registry = cfg.registry();
  const auto& env_cfg = cfg.require_env();
  if (episodes < 1) throw dpmpb::DataError("collect: episodes must be >= 1 (empty dataset)");
  if (steps < 2) throw dpmpb::DataError("collect: steps must be >= 2");

  trainer::Dataset dataset;
  for (std::size_t c = 0; c < env_cfg.classes.size(); ++c) {
    const auto& cls = env_cfg.classes[c];
    for (int e = 0; e < episodes; ++e) {
      envbench::Environment env(env_cfg.spec_for(cls));
      const std::uint64_t ep_seed = mix_seed(seed, c, static_cast<std::uint64_t>(e));
      trainer::Episode ep;
      if (mode == "random") {
        ep = envbench::collect_random(env, steps, env_cfg.u_bounds, env_cfg.hold_steps, ep_seed);
      } else if (mode == "teacher") {
        ep = envbench::collect_teacher(env, env_cfg.teacher_policy(), steps, ep_seed);
      } else {
        throw dpmpb::ConfigError("collect: mode must be random or teacher");
      }
      if (!pb_per_class) ep.class_name = cls.name + "#" + std::to_string(e);
      dataset.episodes.push_back(std::move(ep));
    }
    std::cout << cls.name << ": " << episodes << " episodes x " << steps << " steps\n";
  }
  trainer::save_dataset_jsonl(dataset, out_path, registry);
  std::cout << "wrote " << dataset.episodes.size() << " episodes ("
            << dataset.total_transitions() << " transitions) to " << out_path << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& dataset_path,
              const std::string& out_model, const std::string& report_path) {
  auto cfg = config::load_run_config(config_path);
  const auto registry = cfg.registry();
  auto dataset = trainer::load_dataset_jsonl(dataset_path, registry);

  auto result = trainer::auto_fit(dataset, registry, cfg.model_spec(), cfg.train);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";

  const std::string model_path = out_model.empty() ? cfg.model_path : out_model;
  if (model_path.empty())
    throw dpmpb::ConfigError("train: no model path (config model_path or --out)");
  model::save_bundle(result.bundle, model_path);

  std::cout << "structure: " << model::to_string(result.bundle.structure) << "\n";
  std::cout << "dropped:";
  for (const auto& d : result.bundle.dropped_outputs) std::cout << " " << d;
  std::cout << "\n";
  for (const auto& [name, loss] : result.phase1_losses)
    std::cout << "L_" << name << " = " << format_double(loss) << "\n";
  if (!result.loss_history.empty())
    std::cout << "final training loss: " << format_double(result.loss_history.back()) << "\n";
  std::cout << "model written to " << model_path << "\n";

  if (!report_path.empty()) {
    auto report = open_out(report_path);
    report << "key,value\n";
    report << "structure," << model::to_string(result.bundle.structure) << "\n";
    for (const auto& [name, loss] : result.phase1_losses)
      report << "phase1_L_" << name << "," << format_double(loss) << "\n";
    for (const auto& [name, loss] : result.bundle.training_losses.at("phase2"))
      report << "phase2_L_" << name << "," << format_double(loss) << "\n";
    for (std::size_t i = 0; i < result.loss_history.size(); ++i)
      report << "epoch_" << i << "," << format_double(result.loss_history[i]) << "\n";
  }
  return 0;
}

int cmd_adapt(const std::string& config_path, const std::string& model_path,
              const std::string& stream_path, const std::string& env_class, int steps,
              std::uint64_t seed, const std::string& out_path, const std::string& save_model) {
  auto cfg = config::load_run_config(config_path);
  const auto registry = cfg.registry();
  auto bundle = model::load_bundle(model_path);

  std::vector<StepRecord> records;
  if (!stream_path.empty()) {
    if (stream_path == "-") {
      records = read_step_stream(std::cin, registry);
    } else {
      std::ifstream in(stream_path);
      if (!in) throw dpmpb::DataError("adapt: cannot open stream '" + stream_path + "'");
      records = read_step_stream(in, registry);
    }
  } else {
    const auto& env_cfg = cfg.require_env();
    const auto* cls = &env_cfg.classes.front();
    for (const auto& c : env_cfg.classes)
      if (c.name == env_class) cls = &c;
    envbench::Environment env(env_cfg.spec_for(*cls));
    auto ep = envbench::collect_random(env, steps, env_cfg.u_bounds, env_cfg.hold_steps, seed);
    for (int t = 0; t < ep.length(); ++t) records.push_back({ep.s[t], ep.u[t]});
  }

  adapter::AdaptBuffer buffer(cfg.adapt.capacity, cfg.adapt.warmup);
  adapter::PbUpdater updater(cfg.adapt.cfg, bundle.pb_dim());
  OutStream out(out_path);

  for (std::size_t i = 0; i < records.size(); ++i) {
    buffer.push(records[i].s, records[i].u);
    adapter::AdaptResult res;
    if (cfg.adapt.cfg.objective == adapter::AdaptObjective::kStyle) {
      if (buffer.warmed_up()) res = updater.update_style(bundle, buffer);
    } else {
      res = updater.update(bundle, buffer);
    }
    json dist;
    for (const auto& [name, pb] : bundle.pb_table)
      dist[name] = (bundle.current_pb - pb).norm();
    json line{{"step", i},
              {"status", res.status == adapter::AdaptStatus::kUpdated ? "updated" : "warming_up"},
              {"pb", std::vector<double>(bundle.current_pb.data(),
                                         bundle.current_pb.data() + bundle.current_pb.size())},
              {"dist", std::move(dist)}};
    out.get() << line.dump() << "\n";
  }
  if (!save_model.empty()) model::save_bundle(bundle, save_model);
  return 0;
}

int cmd_control(const std::string& config_path, const std::string& model_path,
                const std::string& loss_path, const std::string& env_class, int ticks,
                std::uint64_t seed, const std::string& pb_class, const std::string& out_path) {
  auto cfg = config::load_run_config(config_path);
  const auto registry = cfg.registry();
  auto bundle = model::load_bundle(model_path);
  if (!pb_class.empty()) set_pb_from_class(bundle, pb_class);

  const auto& env_cfg = cfg.require_env();
  const auto* cls = &env_cfg.classes.front();
  for (const auto& c : env_cfg.classes)
    if (c.name == env_class) cls = &c;
  auto spec = env_cfg.spec_for(*cls);
  spec.seed = mix_seed(seed, 0x7e, 0x11);
  envbench::Environment env(spec);

  OutStream out(out_path);
  out.get() << "tick,gamma,loss";
  csv_header_blocks(out.get(), registry);
  out.get() << "\n";

  auto state = dpmpb::netcore::RecurrentState::zero(bundle.shape.hidden);
  Eigen::VectorXd s = env.observe();

  if (bundle.structure == model::Structure::kStm) {
    controller::LossSpec loss_spec = controller::load_loss_spec(loss_path);
    // Horizon seeded at the per-signal training means.
    std::vector<Eigen::VectorXd> u_prev(cfg.control.n_control_step,
                                        Eigen::VectorXd::Zero(registry.control_dim()));
    for (auto& u : u_prev)
      for (const auto& sp : registry.specs())
        if (sp.kind == model::SignalKind::kControl)
          u.segment(registry.block_offset(sp.name), sp.dim) =
              bundle.norm_stats.at(sp.name).mean;
    for (int t = 0; t < ticks; ++t) {
      auto res = controller::stm_optimize(bundle, s, state, u_prev, loss_spec, cfg.control, t);
      const Eigen::VectorXd u = res.u_opt_seq.front();
      out.get() << t << "," << format_double(res.chosen_gamma.back()) << ","
                << format_double(res.loss_trace.back()) << csv_vector(u) << csv_vector(s)
                << "\n";
      state = dpmpb::netcore::forward_step(
                  bundle.params, bundle.assemble_input(s, u, bundle.current_pb), state)
                  .state;
      s = env.step(u);
      u_prev = res.u_opt_seq;
    }
  } else {
    Eigen::VectorXd u(registry.control_dim());
    for (const auto& sp : registry.specs())
      if (sp.kind == model::SignalKind::kControl)
        u.segment(registry.block_offset(sp.name), sp.dim) = bundle.norm_stats.at(sp.name).mean;
    for (int t = 0; t < ticks; ++t) {
      out.get() << t << ",0,0" << csv_vector(u) << csv_vector(s) << "\n";
      auto next = controller::ctm_step(bundle, s, u, state);
      state = std::move(next.state);
      s = env.step(u);
      u = std::move(next.u);
    }
  }
  return 0;
}

int cmd_detect(const std::string& config_path, const std::string& model_path,
               const std::string& calibrate_path, const std::string& stream_path,
               const std::string& env_class, const std::string& switch_class, int switch_at,
               int steps, std::uint64_t seed, const std::string& pb_class,
               const std::string& out_path, const std::string& save_model) {
  auto cfg = config::load_run_config(config_path);
  const auto registry = cfg.registry();
  auto bundle = model::load_bundle(model_path);
  if (!pb_class.empty()) set_pb_from_class(bundle, pb_class);

  if (!calibrate_path.empty()) {
    auto normal = trainer::load_dataset_jsonl(calibrate_path, registry);
    anomaly::CalibrateOptions options;
    options.signal = cfg.anomaly.signal;
    options.threshold = cfg.anomaly.threshold;
    bundle.anomaly = anomaly::calibrate(bundle, normal, options);
    if (!save_model.empty()) model::save_bundle(bundle, save_model);
  }
  if (!bundle.anomaly)
    throw dpmpb::ModelUnusableError("detect: model has no anomaly statistics; use --calibrate");

  std::vector<StepRecord> records;
  if (!stream_path.empty()) {
    if (stream_path == "-") {
      records = read_step_stream(std::cin, registry);
    } else {
      std::ifstream in(stream_path);
      if (!in) throw dpmpb::DataError("detect: cannot open stream '" + stream_path + "'");
      records = read_step_stream(in, registry);
    }
  } else {
    const auto& env_cfg = cfg.require_env();
    auto find_class = [&](const std::string& name) -> const config::EnvClass& {
      for (const auto& c : env_cfg.classes)
        if (c.name == name) return c;
      return env_cfg.classes.front();
    };
    const auto& cls = find_class(env_class);
    const int first_leg = switch_class.empty() ? steps : std::min(switch_at, steps);
    envbench::Environment env(env_cfg.spec_for(cls));
    auto ep = envbench::collect_random(env, std::max(first_leg, 2), env_cfg.u_bounds,
                                       env_cfg.hold_steps, seed);
    for (int t = 0; t < ep.length(); ++t) records.push_back({ep.s[t], ep.u[t]});
    if (!switch_class.empty() && steps > first_leg) {
      envbench::Environment env2(env_cfg.spec_for(find_class(switch_class)));
      auto ep2 = envbench::collect_random(env2, steps - first_leg, env_cfg.u_bounds,
                                          env_cfg.hold_steps, seed + 1);
      for (int t = 0; t < ep2.length(); ++t) records.push_back({ep2.s[t], ep2.u[t]});
    }
  }

  OutStream out(out_path);
  out.get() << "step,d,flag\n";
  anomaly::ErrorStream stream(bundle, *bundle.anomaly, cfg.anomaly.smoothing);
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto det = stream.step(records[i].s, records[i].u);
    if (det)
      out.get() << i << "," << format_double(det->d) << "," << (det->anomalous ? 1 : 0) << "\n";
  }
  return 0;
}

int cmd_pca(const std::string& model_path, const std::string& out_path) {
  auto bundle = model::load_bundle(model_path);
  if (bundle.pb_table.empty()) throw dpmpb::DataError("pca: model has an empty PB table");
  std::vector<std::pair<std::string, Eigen::VectorXd>> rows(bundle.pb_table.begin(),
                                                            bundle.pb_table.end());
  auto projection = pca::project_2d(rows);
  OutStream out(out_path);
  out.get() << "class,pc1,pc2\n";
  for (std::size_t i = 0; i < projection.names.size(); ++i)
    out.get() << projection.names[i] << ","
              << format_double(projection.points(static_cast<Eigen::Index>(i), 0)) << ","
              << format_double(projection.points(static_cast<Eigen::Index>(i), 1)) << "\n";
  const Eigen::Vector2d current = pca::apply(projection, bundle.current_pb);
  out.get() << "current," << format_double(current(0)) << "," << format_double(current(1))
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep predictive model with parametric bias"};
  app.require_subcommand(1);

  std::string config_path, model_path, dataset_path, out_path = "-", report_path;
  std::string mode = "random", env_class, pb_class, loss_path, stream_path, save_model;
  std::string switch_class;
  int episodes = 4, steps = 400, ticks = 50, switch_at = 50;
  std::uint64_t seed = 0;
  bool pb_per_class = false;

  auto* collect = app.add_subcommand("collect", "Roll out an environment into a dataset");
  collect->add_option("--config", config_path)->required();
  collect->add_option("--mode", mode, "random|teacher");
  collect->add_option("--episodes", episodes);
  collect->add_option("--steps", steps);
  collect->add_option("--out", out_path)->required();
  collect->add_option("--seed", seed);
  collect->add_flag("--pb-per-class", pb_per_class,
                    "share one PB per class instead of one per episode");

  auto* train = app.add_subcommand("train", "Train a model with automatic structure selection");
  train->add_option("--config", config_path)->required();
  train->add_option("--dataset", dataset_path)->required();
  train->add_option("--out", model_path);
  train->add_option("--report", report_path);

  auto* adapt = app.add_subcommand("adapt", "Update the parametric bias online");
  adapt->add_option("--config", config_path)->required();
  adapt->add_option("--model", model_path)->required();
  adapt->add_option("--stream", stream_path, "JSON Lines steps ('-' = stdin)");
  adapt->add_option("--class", env_class, "environment class when rolling out");
  adapt->add_option("--steps", steps);
  adapt->add_option("--seed", seed);
  adapt->add_option("--out", out_path);
  adapt->add_option("--save", save_model, "write the adapted model here");

  auto* control = app.add_subcommand("control", "Closed-loop control in an environment");
  control->add_option("--config", config_path)->required();
  control->add_option("--model", model_path)->required();
  control->add_option("--loss", loss_path, "loss spec JSON (STM)");
  control->add_option("--class", env_class);
  control->add_option("--ticks", ticks);
  control->add_option("--seed", seed);
  control->add_option("--pb", pb_class, "force the PB of a trained class");
  control->add_option("--out", out_path);

  auto* detect = app.add_subcommand("detect", "Score prediction errors against calibration");
  detect->add_option("--config", config_path)->required();
  detect->add_option("--model", model_path)->required();
  detect->add_option("--calibrate", dataset_path, "normal dataset JSONL");
  detect->add_option("--stream", stream_path);
  detect->add_option("--class", env_class);
  detect->add_option("--switch-class", switch_class);
  detect->add_option("--switch-at", switch_at);
  detect->add_option("--steps", steps);
  detect->add_option("--seed", seed);
  detect->add_option("--pb", pb_class);
  detect->add_option("--out", out_path);
  detect->add_option("--save", save_model);

  auto* pca_cmd = app.add_subcommand("pca", "Project the PB table to two dimensions");
  pca_cmd->add_option("--model", model_path)->required();
  pca_cmd->add_option("--out", out_path);

  CLI11_PARSE(app, argc, argv);

  try {
    if (collect->parsed())
      return cmd_collect(config_path, mode, episodes, steps, out_path, seed, pb_per_class);
    if (train->parsed()) return cmd_train(config_path, dataset_path, model_path, report_path);
    if (adapt->parsed())
      return cmd_adapt(config_path, model_path, stream_path, env_class, steps, seed, out_path,
                       save_model);
    if (control->parsed())
      return cmd_control(config_path, model_path, loss_path, env_class, ticks, seed, pb_class,
                         out_path);
    if (detect->parsed())
      return cmd_detect(config_path, model_path, dataset_path, stream_path, env_class,
                        switch_class, switch_at, steps, seed, pb_class, out_path, save_model);
    if (pca_cmd->parsed()) return cmd_pca(model_path, out_path);
  } catch (const dpmpb::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const dpmpb::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const dpmpb::ModelUnusableError& e) {
    std::cerr << "model unusable: " << e.what() << "\n";
    return 4;
  } catch (const dpmpb::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 5;
  }
  return 1;
}
