#include "dpmpb/config.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

namespace dpmpb::config {

using nlohmann::json;

namespace {

// Rejects unknown keys so typos surface with their path before any work runs.
void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& path) {
  if (!obj.is_object()) throw ConfigError("config: " + path + " must be an object");
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key))
      throw ConfigError("config: unknown field '" + (path.empty() ? key : path + "." + key) + "'");
}

double get_num(const json& obj, const char* key, double fallback, const std::string& path) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number())
    throw ConfigError("config: " + path + "." + key + " must be a number");
  return obj[key].get<double>();
}

int get_int(const json& obj, const char* key, int fallback, const std::string& path) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number_integer())
    throw ConfigError("config: " + path + "." + key + " must be an integer");
  return obj[key].get<int>();
}

envbench::EnvParams parse_env_params(const json& j, const std::string& path) {
  check_keys(j, {"mass", "damping", "gain", "tau_trans", "tau_rot", "p_stick", "misalign_gain",
                 "realign_gain", "stiffness1", "stiffness2", "joint_damping"},
             path);
  envbench::EnvParams p;
  p.mass = get_num(j, "mass", p.mass, path);
  p.damping = get_num(j, "damping", p.damping, path);
  p.gain = get_num(j, "gain", p.gain, path);
  p.tau_trans = get_num(j, "tau_trans", p.tau_trans, path);
  p.tau_rot = get_num(j, "tau_rot", p.tau_rot, path);
  p.p_stick = get_num(j, "p_stick", p.p_stick, path);
  p.misalign_gain = get_num(j, "misalign_gain", p.misalign_gain, path);
  p.realign_gain = get_num(j, "realign_gain", p.realign_gain, path);
  p.stiffness1 = get_num(j, "stiffness1", p.stiffness1, path);
  p.stiffness2 = get_num(j, "stiffness2", p.stiffness2, path);
  p.joint_damping = get_num(j, "joint_damping", p.joint_damping, path);
  return p;
}

}  // namespace

envbench::EnvSpec EnvSettings::spec_for(const EnvClass& cls) const {
  envbench::EnvSpec spec;
  spec.family = family;
  spec.class_name = cls.name;
  spec.params = cls.params;
  spec.noise = noise;
  spec.dt = dt;
  spec.seed = seed;
  spec.position_bound = position_bound;
  return spec;
}

envbench::TeacherPolicy EnvSettings::teacher_policy() const {
  if (!teacher) throw ConfigError("config: env.teacher required for teacher collection");
  const auto& t = *teacher;
  if (t.type == "point_mass_reach") {
    if (t.target.size() != 1)
      throw ConfigError("config: env.teacher.target must hold 1 value for point_mass_reach");
    return envbench::point_mass_reach_policy(t.target[0], t.kp, t.kd, t.limit);
  }
  if (t.type == "two_link_reach") {
    if (t.target.size() != 2)
      throw ConfigError("config: env.teacher.target must hold 2 values for two_link_reach");
    return envbench::two_link_reach_policy(Eigen::Vector2d(t.target[0], t.target[1]), t.kp,
                                           t.limit);
  }
  throw ConfigError("config: unknown teacher type '" + t.type + "'");
}

const EnvSettings& RunConfig::require_env() const {
  if (!env) throw ConfigError("config: env block required for this command");
  return *env;
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  check_keys(j, {"signals", "pb_dim", "hidden_dim", "model_path", "train", "adapt", "control",
                 "anomaly", "env"},
             "");

  RunConfig cfg;
  if (!j.contains("signals") || !j["signals"].is_array() || j["signals"].empty())
    throw ConfigError("config: signals must be a non-empty array");
  for (std::size_t i = 0; i < j["signals"].size(); ++i) {
    const auto& s = j["signals"][i];
    const std::string path = "signals[" + std::to_string(i) + "]";
    check_keys(s, {"name", "kind", "dim", "bounds"}, path);
    model::SignalSpec spec;
    if (!s.contains("name")) throw ConfigError("config: " + path + ".name required");
    spec.name = s["name"].get<std::string>();
    const std::string kind = s.contains("kind") ? s["kind"].get<std::string>() : "sensor";
    if (kind == "sensor") {
      spec.kind = model::SignalKind::kSensor;
    } else if (kind == "control") {
      spec.kind = model::SignalKind::kControl;
    } else {
      throw ConfigError("config: " + path + ".kind must be sensor or control");
    }
    spec.dim = get_int(s, "dim", 1, path);
    if (s.contains("bounds") && !s["bounds"].is_null())
      for (const auto& b : s["bounds"])
        spec.bounds.emplace_back(b[0].get<double>(), b[1].get<double>());
    cfg.signals.push_back(std::move(spec));
  }
  model::SignalRegistry registry(cfg.signals);  // validates early

  cfg.pb_dim = get_int(j, "pb_dim", 2, "");
  cfg.hidden = get_int(j, "hidden_dim", 64, "");
  if (j.contains("model_path")) cfg.model_path = j["model_path"].get<std::string>();

  if (j.contains("train")) {
    const auto& t = j["train"];
    check_keys(t, {"steps", "batch", "epochs", "l_thre", "loss", "seed", "holdout_fraction",
                   "adam"},
               "train");
    cfg.train.n_train_step = get_int(t, "steps", cfg.train.n_train_step, "train");
    cfg.train.n_train_batch = get_int(t, "batch", cfg.train.n_train_batch, "train");
    cfg.train.n_train_epoch = get_int(t, "epochs", cfg.train.n_train_epoch, "train");
    cfg.train.l_thre = get_num(t, "l_thre", cfg.train.l_thre, "train");
    if (t.contains("loss")) {
      const auto loss = t["loss"].get<std::string>();
      if (loss == "mse") {
        cfg.train.loss_kind = netcore::LossKind::kMse;
      } else if (loss == "nll") {
        cfg.train.loss_kind = netcore::LossKind::kNll;
      } else {
        throw ConfigError("config: train.loss must be mse or nll");
      }
    }
    cfg.train.seed = static_cast<std::uint64_t>(get_num(t, "seed", 0.0, "train"));
    cfg.train.holdout_fraction =
        get_num(t, "holdout_fraction", cfg.train.holdout_fraction, "train");
    if (t.contains("adam")) {
      const auto& a = t["adam"];
      check_keys(a, {"lr", "beta1", "beta2", "eps"}, "train.adam");
      cfg.train.adam.lr = get_num(a, "lr", cfg.train.adam.lr, "train.adam");
      cfg.train.adam.beta1 = get_num(a, "beta1", cfg.train.adam.beta1, "train.adam");
      cfg.train.adam.beta2 = get_num(a, "beta2", cfg.train.adam.beta2, "train.adam");
      cfg.train.adam.eps = get_num(a, "eps", cfg.train.adam.eps, "train.adam");
    }
    cfg.train.validate();
  }

  if (j.contains("adapt")) {
    const auto& a = j["adapt"];
    check_keys(a, {"batch", "epochs", "window", "warmup", "capacity", "msgd", "objective",
                   "style_w1"},
               "adapt");
    cfg.adapt.cfg.n_online_batch = get_int(a, "batch", cfg.adapt.cfg.n_online_batch, "adapt");
    cfg.adapt.cfg.n_online_epoch = get_int(a, "epochs", cfg.adapt.cfg.n_online_epoch, "adapt");
    cfg.adapt.cfg.window_len = get_int(a, "window", cfg.adapt.cfg.window_len, "adapt");
    cfg.adapt.warmup = get_int(a, "warmup", cfg.adapt.warmup, "adapt");
    cfg.adapt.capacity = get_int(a, "capacity", cfg.adapt.capacity, "adapt");
    if (a.contains("msgd")) {
      const auto& m = a["msgd"];
      check_keys(m, {"lr", "momentum"}, "adapt.msgd");
      cfg.adapt.cfg.msgd.lr = get_num(m, "lr", cfg.adapt.cfg.msgd.lr, "adapt.msgd");
      cfg.adapt.cfg.msgd.momentum =
          get_num(m, "momentum", cfg.adapt.cfg.msgd.momentum, "adapt.msgd");
    }
    if (a.contains("objective")) {
      const auto obj = a["objective"].get<std::string>();
      if (obj == "prediction_error") {
        cfg.adapt.cfg.objective = adapter::AdaptObjective::kPredictionError;
      } else if (obj == "style") {
        cfg.adapt.cfg.objective = adapter::AdaptObjective::kStyle;
      } else {
        throw ConfigError("config: adapt.objective must be prediction_error or style");
      }
    }
    cfg.adapt.cfg.style_w1 = get_num(a, "style_w1", cfg.adapt.cfg.style_w1, "adapt");
    cfg.adapt.cfg.validate();
  }

  if (j.contains("control")) {
    const auto& c = j["control"];
    check_keys(c, {"horizon", "gamma_grid", "epochs", "gamma_max", "periodic"}, "control");
    cfg.control.n_control_step = get_int(c, "horizon", cfg.control.n_control_step, "control");
    cfg.control.n_control_batch =
        get_int(c, "gamma_grid", cfg.control.n_control_batch, "control");
    cfg.control.n_control_epoch = get_int(c, "epochs", cfg.control.n_control_epoch, "control");
    cfg.control.gamma_max = get_num(c, "gamma_max", cfg.control.gamma_max, "control");
    if (c.contains("periodic") && !c["periodic"].is_null())
      cfg.control.n_control_periodic = get_int(c, "periodic", 1, "control");
    cfg.control.validate();
  }

  if (j.contains("anomaly")) {
    const auto& a = j["anomaly"];
    check_keys(a, {"smoothing", "threshold", "signal"}, "anomaly");
    cfg.anomaly.smoothing = get_int(a, "smoothing", cfg.anomaly.smoothing, "anomaly");
    if (a.contains("threshold") && !a["threshold"].is_null())
      cfg.anomaly.threshold = a["threshold"].get<double>();
    if (a.contains("signal") && !a["signal"].is_null())
      cfg.anomaly.signal = a["signal"].get<std::string>();
  }

  if (j.contains("env")) {
    const auto& e = j["env"];
    check_keys(e, {"family", "dt", "noise", "seed", "position_bound", "u_bounds", "hold_steps",
                   "classes", "teacher", "params"},
               "env");
    EnvSettings env;
    if (!e.contains("family")) throw ConfigError("config: env.family required");
    env.family = envbench::family_from(e["family"].get<std::string>());
    env.dt = get_num(e, "dt", env.dt, "env");
    env.noise = get_num(e, "noise", env.noise, "env");
    env.seed = static_cast<std::uint64_t>(get_num(e, "seed", 0.0, "env"));
    env.position_bound = get_num(e, "position_bound", env.position_bound, "env");
    env.hold_steps = get_int(e, "hold_steps", env.hold_steps, "env");
    if (e.contains("u_bounds"))
      for (const auto& b : e["u_bounds"])
        env.u_bounds.emplace_back(b[0].get<double>(), b[1].get<double>());
    if (e.contains("classes")) {
      for (std::size_t i = 0; i < e["classes"].size(); ++i) {
        const auto& c = e["classes"][i];
        const std::string path = "env.classes[" + std::to_string(i) + "]";
        check_keys(c, {"name", "params"}, path);
        EnvClass cls;
        if (!c.contains("name")) throw ConfigError("config: " + path + ".name required");
        cls.name = c["name"].get<std::string>();
        cls.params = c.contains("params") ? parse_env_params(c["params"], path + ".params")
                                          : envbench::EnvParams{};
        env.classes.push_back(std::move(cls));
      }
    }
    if (env.classes.empty()) {
      EnvClass cls;
      cls.name = "default";
      cls.params =
          e.contains("params") ? parse_env_params(e["params"], "env.params") : envbench::EnvParams{};
      env.classes.push_back(std::move(cls));
    }
    if (e.contains("teacher")) {
      const auto& t = e["teacher"];
      check_keys(t, {"type", "target", "kp", "kd", "limit"}, "env.teacher");
      TeacherSettings teacher;
      if (!t.contains("type")) throw ConfigError("config: env.teacher.type required");
      teacher.type = t["type"].get<std::string>();
      if (t.contains("target")) {
        teacher.target.clear();
        if (t["target"].is_number()) {
          teacher.target.push_back(t["target"].get<double>());
        } else {
          for (const auto& x : t["target"]) teacher.target.push_back(x.get<double>());
        }
      }
      teacher.kp = get_num(t, "kp", teacher.kp, "env.teacher");
      teacher.kd = get_num(t, "kd", teacher.kd, "env.teacher");
      teacher.limit = get_num(t, "limit", teacher.limit, "env.teacher");
      env.teacher = std::move(teacher);
    }
    // Environments must line up with the declared signal blocks.
    envbench::EnvSpec probe = env.spec_for(env.classes.front());
    if (probe.sensor_dim() != registry.sensor_dim() ||
        probe.control_dim() != registry.control_dim())
      throw ConfigError("config: env family dimensions do not match the signal registry");
    if (env.u_bounds.empty())
      for (int i = 0; i < probe.control_dim(); ++i) env.u_bounds.emplace_back(-1.0, 1.0);
    if (static_cast<int>(env.u_bounds.size()) != probe.control_dim())
      throw ConfigError("config: env.u_bounds size must match the control dimension");
    cfg.env = std::move(env);
  }

  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return run_config_from_json(buf.str());
}

}  // namespace dpmpb::config
