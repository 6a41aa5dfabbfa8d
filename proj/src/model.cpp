#include "dpmpb/model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

namespace dpmpb::model {

using nlohmann::json;

SignalRegistry::SignalRegistry(std::vector<SignalSpec> specs) : specs_(std::move(specs)) {
  std::set<std::string> seen;
  bool any_sensor = false, any_control = false;
  int sensor_off = 0, control_off = 0;
  for (const auto& spec : specs_) {
    if (spec.name.empty()) throw ConfigError("signals: empty signal name");
    if (!seen.insert(spec.name).second)
      throw ConfigError("signals: duplicate signal name '" + spec.name + "'");
    if (spec.dim < 1) throw ConfigError("signals: '" + spec.name + "' needs dim >= 1");
    if (!spec.bounds.empty() && static_cast<int>(spec.bounds.size()) != spec.dim)
      throw ConfigError("signals: '" + spec.name + "' bounds length must equal dim");
    if (spec.kind == SignalKind::kSensor) {
      any_sensor = true;
      index_[spec.name] = sensor_off;
      sensor_off += spec.dim;
    } else {
      any_control = true;
      index_[spec.name] = control_off;
      control_off += spec.dim;
    }
  }
  sensor_dim_ = sensor_off;
  control_dim_ = control_off;
  if (!any_sensor) throw ConfigError("signals: at least one sensor signal required");
  if (!any_control) throw ConfigError("signals: at least one control signal required");
}

const SignalSpec& SignalRegistry::at(const std::string& name) const {
  for (const auto& spec : specs_)
    if (spec.name == name) return spec;
  throw ConfigError("signals: unknown signal '" + name + "'");
}

bool SignalRegistry::has(const std::string& name) const {
  return index_.count(name) != 0;
}

std::vector<std::string> SignalRegistry::sensor_names() const {
  std::vector<std::string> names;
  for (const auto& spec : specs_)
    if (spec.kind == SignalKind::kSensor) names.push_back(spec.name);
  return names;
}

std::vector<std::string> SignalRegistry::control_names() const {
  std::vector<std::string> names;
  for (const auto& spec : specs_)
    if (spec.kind == SignalKind::kControl) names.push_back(spec.name);
  return names;
}

int SignalRegistry::block_offset(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("signals: unknown signal '" + name + "'");
  return it->second;
}

Eigen::VectorXd NormStats::normalize(const Eigen::VectorXd& x) const {
  if (x.size() != mean.size()) throw ConfigError("normalize: dimension mismatch");
  return (x - mean).cwiseQuotient(std);
}

Eigen::VectorXd NormStats::denormalize(const Eigen::VectorXd& x_hat) const {
  if (x_hat.size() != mean.size()) throw ConfigError("denormalize: dimension mismatch");
  return x_hat.cwiseProduct(std) + mean;
}

NormStats NormStats::fit(const std::vector<Eigen::VectorXd>& samples) {
  if (samples.empty()) throw DataError("norm stats: no samples");
  const Eigen::Index dim = samples.front().size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
  for (const auto& s : samples) mean += s;
  mean /= static_cast<double>(samples.size());
  Eigen::VectorXd var = Eigen::VectorXd::Zero(dim);
  for (const auto& s : samples) var += (s - mean).cwiseProduct(s - mean);
  var /= static_cast<double>(samples.size());
  NormStats stats;
  stats.mean = mean;
  stats.std = var.cwiseSqrt().cwiseMax(1e-6);
  return stats;
}

std::string to_string(Structure s) { return s == Structure::kStm ? "STM" : "CTM"; }

OutputLayout OutputLayout::build(const SignalRegistry& signals,
                                 const std::vector<std::string>& dropped) {
  auto is_dropped = [&](const std::string& name) {
    return std::find(dropped.begin(), dropped.end(), name) != dropped.end();
  };
  OutputLayout layout;
  for (const auto& spec : signals.specs()) {
    if (is_dropped(spec.name)) continue;
    if (spec.kind == SignalKind::kSensor) {
      layout.kept_sensors.push_back(spec.name);
    } else {
      layout.kept_controls.push_back(spec.name);
    }
    layout.dim += spec.dim;
  }
  return layout;
}

OutputLayout ModelBundle::output_layout() const {
  return OutputLayout::build(signals, dropped_outputs);
}

Eigen::VectorXd ModelBundle::normalize_block(SignalKind kind, const Eigen::VectorXd& x) const {
  const int dim = kind == SignalKind::kSensor ? signals.sensor_dim() : signals.control_dim();
  if (x.size() != dim) throw ConfigError("predict: signal block dimension mismatch");
  Eigen::VectorXd out(dim);
  for (const auto& spec : signals.specs()) {
    if (spec.kind != kind) continue;
    const int off = signals.block_offset(spec.name);
    out.segment(off, spec.dim) = norm_stats.at(spec.name).normalize(x.segment(off, spec.dim));
  }
  return out;
}

Eigen::VectorXd ModelBundle::assemble_input(const Eigen::VectorXd& s_phys,
                                            const Eigen::VectorXd& u_phys,
                                            const Eigen::VectorXd& pb) const {
  if (pb.size() != current_pb.size()) throw ConfigError("predict: pb dimension mismatch");
  Eigen::VectorXd input(shape.input_dim);
  input.segment(0, signals.sensor_dim()) = normalize_block(SignalKind::kSensor, s_phys);
  input.segment(signals.sensor_dim(), signals.control_dim()) =
      normalize_block(SignalKind::kControl, u_phys);
  input.segment(signals.sensor_dim() + signals.control_dim(), pb.size()) = pb;
  return input;
}

Eigen::VectorXd ModelBundle::denormalize_block_sensors(const Eigen::VectorXd& x_norm,
                                                       const OutputLayout& layout) const {
  Eigen::VectorXd out(x_norm.size());
  int at = 0;
  for (const auto& name : layout.kept_sensors) {
    const auto& spec = signals.at(name);
    out.segment(at, spec.dim) =
        norm_stats.at(name).denormalize(x_norm.segment(at, spec.dim));
    at += spec.dim;
  }
  return out;
}

void ModelBundle::validate() const {
  shape.validate();
  const int expect_in = signals.sensor_dim() + signals.control_dim() + pb_dim();
  if (shape.input_dim != expect_in)
    throw ConfigError("model bundle: input_dim inconsistent with signals and pb");
  const auto layout = output_layout();
  const int expect_out = shape.variance_mode ? 2 * layout.dim : layout.dim;
  if (shape.output_dim != expect_out)
    throw ConfigError("model bundle: output_dim inconsistent with kept outputs");
  if (layout.kept_sensors.empty())
    throw ModelUnusableError("model bundle: all sensor outputs dropped");
  const bool ctm = !layout.kept_controls.empty();
  if (ctm != (structure == Structure::kCtm))
    throw ConfigError("model bundle: structure tag inconsistent with dropped outputs");
  if (shape.variance_mode && structure == Structure::kCtm)
    throw ConfigError("model bundle: variance mode is supported for STM only");
  for (const auto& spec : signals.specs())
    if (!norm_stats.count(spec.name))
      throw ConfigError("model bundle: missing norm stats for '" + spec.name + "'");
  for (const auto& [name, pb] : pb_table)
    if (pb.size() != current_pb.size())
      throw ConfigError("model bundle: pb entry '" + name + "' has wrong length");
}

PredictResult predict(const ModelBundle& bundle, const Eigen::VectorXd& s_phys,
                      const Eigen::VectorXd& u_phys, const Eigen::VectorXd& pb,
                      const netcore::RecurrentState& state) {
  const Eigen::VectorXd input = bundle.assemble_input(s_phys, u_phys, pb);
  auto step = netcore::forward_step(bundle.params, input, state);
  const auto layout = bundle.output_layout();

  PredictResult result;
  result.state = std::move(step.state);
  int at = 0;
  for (const auto& name : layout.kept_sensors) {
    const auto& spec = bundle.signals.at(name);
    const auto& stats = bundle.norm_stats.at(name);
    result.prediction.sensors[name] =
        stats.denormalize(step.output.segment(at, spec.dim));
    if (bundle.shape.variance_mode) {
      Eigen::VectorXd raw = step.output.segment(layout.dim + at, spec.dim);
      result.prediction.sensor_variances[name] =
          netcore::variance_from_raw(raw).cwiseProduct(stats.std.cwiseProduct(stats.std));
    }
    at += spec.dim;
  }
  for (const auto& name : layout.kept_controls) {
    const auto& spec = bundle.signals.at(name);
    result.prediction.controls[name] =
        bundle.norm_stats.at(name).denormalize(step.output.segment(at, spec.dim));
    at += spec.dim;
  }
  return result;
}

StructureChoice select_structure(const SignalRegistry& signals,
                                 const std::map<std::string, double>& per_signal_losses,
                                 double l_thre) {
  StructureChoice choice;
  bool control_kept = false;
  bool sensor_kept = false;
  for (const auto& spec : signals.specs()) {
    auto it = per_signal_losses.find(spec.name);
    if (it == per_signal_losses.end())
      throw DataError("select_structure: missing loss for signal '" + spec.name + "'");
    if (it->second >= l_thre) {
      choice.dropped_outputs.push_back(spec.name);
    } else if (spec.kind == SignalKind::kControl) {
      control_kept = true;
    } else {
      sensor_kept = true;
    }
  }
  if (!sensor_kept) {
    std::ostringstream msg;
    msg << "select_structure: all sensor signals dropped at threshold " << l_thre << ";";
    for (const auto& [name, loss] : per_signal_losses) msg << " " << name << "=" << loss;
    throw ModelUnusableError(msg.str());
  }
  choice.structure = control_kept ? Structure::kCtm : Structure::kStm;
  return choice;
}

namespace {

json vec_to_json(const Eigen::VectorXd& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

Eigen::VectorXd vec_from_json(const json& arr, const std::string& field) {
  if (!arr.is_array()) throw DataError("model bundle: " + field + " must be an array");
  Eigen::VectorXd v(arr.size());
  Eigen::Index i = 0;
  for (const auto& x : arr) {
    if (!x.is_number()) throw DataError("model bundle: " + field + " holds a non-number");
    v(i++) = x.get<double>();
  }
  return v;
}

json mat_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd mat_from_json(const json& rows, const std::string& field) {
  if (!rows.is_array() || rows.empty())
    throw DataError("model bundle: " + field + " must be a non-empty array of rows");
  const Eigen::Index n_rows = rows.size();
  const Eigen::Index n_cols = rows[0].size();
  Eigen::MatrixXd m(n_rows, n_cols);
  for (Eigen::Index r = 0; r < n_rows; ++r) {
    const auto& row = rows[r];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != n_cols)
      throw DataError("model bundle: " + field + " has ragged rows");
    for (Eigen::Index c = 0; c < n_cols; ++c) m(r, c) = row[c].get<double>();
  }
  return m;
}

const json& require(const json& j, const char* key, const std::string& context) {
  auto it = j.find(key);
  if (it == j.end()) throw DataError(context + ": " + key + " absent");
  return *it;
}

json fc_to_json(const netcore::FcLayer& layer) {
  return json{{"w", mat_to_json(layer.w)}, {"b", vec_to_json(layer.b)}};
}

json params_to_json(const netcore::NetworkParams& p) {
  json j;
  j["fc_in"] = json::array();
  for (const auto& layer : p.fc_in) j["fc_in"].push_back(fc_to_json(layer));
  j["lstm"] = json::array();
  for (const auto& layer : p.lstm)
    j["lstm"].push_back(json{{"wx", mat_to_json(layer.wx)},
                             {"wh", mat_to_json(layer.wh)},
                             {"b", vec_to_json(layer.b)}});
  j["fc_out"] = json::array();
  for (const auto& layer : p.fc_out) j["fc_out"].push_back(fc_to_json(layer));
  return j;
}

netcore::NetworkParams params_from_json(const json& j, const netcore::NetworkShape& shape) {
  auto p = netcore::NetworkParams::zeros(shape);
  const auto& fc_in = require(j, "fc_in", "model bundle params");
  const auto& lstm = require(j, "lstm", "model bundle params");
  const auto& fc_out = require(j, "fc_out", "model bundle params");
  if (fc_in.size() != 4 || lstm.size() != 2 || fc_out.size() != 4)
    throw DataError("model bundle: params layer counts do not match the fixed stack");
  for (int i = 0; i < 4; ++i) {
    p.fc_in[i].w = mat_from_json(require(fc_in[i], "w", "params.fc_in"), "params.fc_in.w");
    p.fc_in[i].b = vec_from_json(require(fc_in[i], "b", "params.fc_in"), "params.fc_in.b");
  }
  for (int i = 0; i < 2; ++i) {
    p.lstm[i].wx = mat_from_json(require(lstm[i], "wx", "params.lstm"), "params.lstm.wx");
    p.lstm[i].wh = mat_from_json(require(lstm[i], "wh", "params.lstm"), "params.lstm.wh");
    p.lstm[i].b = vec_from_json(require(lstm[i], "b", "params.lstm"), "params.lstm.b");
  }
  for (int i = 0; i < 4; ++i) {
    p.fc_out[i].w = mat_from_json(require(fc_out[i], "w", "params.fc_out"), "params.fc_out.w");
    p.fc_out[i].b = vec_from_json(require(fc_out[i], "b", "params.fc_out"), "params.fc_out.b");
  }
  return p;
}

json anomaly_to_json(const anomaly::AnomalyStats& stats) {
  json j;
  j["mu"] = vec_to_json(stats.mu);
  j["sigma"] = mat_to_json(stats.sigma);
  j["epsilon"] = stats.epsilon;
  j["d_mean"] = stats.d_mean;
  j["d_std"] = stats.d_std;
  j["threshold"] = stats.threshold;
  if (stats.signal) j["signal"] = *stats.signal;
  return j;
}

anomaly::AnomalyStats anomaly_from_json(const json& j) {
  anomaly::AnomalyStats stats;
  stats.mu = vec_from_json(require(j, "mu", "anomaly"), "anomaly.mu");
  stats.sigma = mat_from_json(require(j, "sigma", "anomaly"), "anomaly.sigma");
  stats.epsilon = require(j, "epsilon", "anomaly").get<double>();
  stats.d_mean = require(j, "d_mean", "anomaly").get<double>();
  stats.d_std = require(j, "d_std", "anomaly").get<double>();
  stats.threshold = require(j, "threshold", "anomaly").get<double>();
  if (j.contains("signal") && !j["signal"].is_null())
    stats.signal = j["signal"].get<std::string>();
  stats.sigma_inv = stats.sigma.inverse();
  return stats;
}

}  // namespace

std::string bundle_to_json(const ModelBundle& bundle) {
  json j;
  j["schema_version"] = bundle.schema_version;
  json sigs = json::array();
  for (const auto& spec : bundle.signals.specs()) {
    json s;
    s["name"] = spec.name;
    s["kind"] = spec.kind == SignalKind::kSensor ? "sensor" : "control";
    s["dim"] = spec.dim;
    if (spec.bounds.empty()) {
      s["bounds"] = nullptr;
    } else {
      json b = json::array();
      for (const auto& [lo, hi] : spec.bounds) b.push_back(json::array({lo, hi}));
      s["bounds"] = std::move(b);
    }
    sigs.push_back(std::move(s));
  }
  j["signals"] = std::move(sigs);
  j["shape"] = json{{"input_dim", bundle.shape.input_dim},
                    {"output_dim", bundle.shape.output_dim},
                    {"hidden", bundle.shape.hidden},
                    {"variance_mode", bundle.shape.variance_mode}};
  j["params"] = params_to_json(bundle.params);
  json stats;
  for (const auto& [name, s] : bundle.norm_stats)
    stats[name] = json{{"mean", vec_to_json(s.mean)}, {"std", vec_to_json(s.std)}};
  j["norm_stats"] = std::move(stats);
  json pbs;
  for (const auto& [name, pb] : bundle.pb_table) pbs[name] = vec_to_json(pb);
  j["pb_table"] = std::move(pbs);
  j["current_pb"] = vec_to_json(bundle.current_pb);
  j["structure"] = to_string(bundle.structure);
  j["dropped_outputs"] = bundle.dropped_outputs;
  j["anomaly"] = bundle.anomaly ? anomaly_to_json(*bundle.anomaly) : json(nullptr);
  j["training_losses"] = bundle.training_losses;
  return j.dump(1);
}

ModelBundle bundle_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("model bundle: malformed JSON: ") + e.what());
  }
  const std::string ctx = "model bundle";
  ModelBundle bundle;
  bundle.schema_version = require(j, "schema_version", ctx).get<int>();
  if (bundle.schema_version != 1)
    throw DataError("model bundle: unsupported schema_version " +
                    std::to_string(bundle.schema_version));

  std::vector<SignalSpec> specs;
  for (const auto& s : require(j, "signals", ctx)) {
    SignalSpec spec;
    spec.name = require(s, "name", "signals").get<std::string>();
    const auto kind = require(s, "kind", "signals").get<std::string>();
    if (kind == "sensor") {
      spec.kind = SignalKind::kSensor;
    } else if (kind == "control") {
      spec.kind = SignalKind::kControl;
    } else {
      throw DataError("model bundle: signal kind must be sensor or control");
    }
    spec.dim = require(s, "dim", "signals").get<int>();
    if (s.contains("bounds") && !s["bounds"].is_null())
      for (const auto& b : s["bounds"])
        spec.bounds.emplace_back(b[0].get<double>(), b[1].get<double>());
    specs.push_back(std::move(spec));
  }
  bundle.signals = SignalRegistry(std::move(specs));

  const auto& shape = require(j, "shape", ctx);
  bundle.shape.input_dim = require(shape, "input_dim", "shape").get<int>();
  bundle.shape.output_dim = require(shape, "output_dim", "shape").get<int>();
  bundle.shape.hidden = require(shape, "hidden", "shape").get<int>();
  bundle.shape.variance_mode = require(shape, "variance_mode", "shape").get<bool>();

  bundle.params = params_from_json(require(j, "params", ctx), bundle.shape);

  for (const auto& [name, s] : require(j, "norm_stats", ctx).items()) {
    NormStats stats;
    stats.mean = vec_from_json(require(s, "mean", "norm_stats"), "norm_stats.mean");
    stats.std = vec_from_json(require(s, "std", "norm_stats"), "norm_stats.std");
    bundle.norm_stats[name] = std::move(stats);
  }
  for (const auto& [name, pb] : require(j, "pb_table", ctx).items())
    bundle.pb_table[name] = vec_from_json(pb, "pb_table." + name);
  bundle.current_pb = vec_from_json(require(j, "current_pb", ctx), "current_pb");

  const auto structure = require(j, "structure", ctx).get<std::string>();
  if (structure == "STM") {
    bundle.structure = Structure::kStm;
  } else if (structure == "CTM") {
    bundle.structure = Structure::kCtm;
  } else {
    throw DataError("model bundle: structure must be STM or CTM");
  }
  for (const auto& d : require(j, "dropped_outputs", ctx))
    bundle.dropped_outputs.push_back(d.get<std::string>());

  const auto& anom = require(j, "anomaly", ctx);
  if (!anom.is_null()) bundle.anomaly = anomaly_from_json(anom);

  const auto& losses = require(j, "training_losses", ctx);
  for (const auto& [phase, m] : losses.items())
    for (const auto& [name, v] : m.items())
      bundle.training_losses[phase][name] = v.get<double>();

  bundle.validate();
  return bundle;
}

void save_bundle(const ModelBundle& bundle, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("save_bundle: cannot open '" + path + "' for writing");
  out << bundle_to_json(bundle);
  out << "\n";
  if (!out) throw DataError("save_bundle: write to '" + path + "' failed");
}

ModelBundle load_bundle(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_bundle: cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return bundle_from_json(buf.str());
}

}  // namespace dpmpb::model
